#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/Dense>

#include "pkpd/pd.hpp"
#include "pkpd/random.hpp"

using namespace pkpd;

namespace {

// Reference for the one-step map: integrate dx/dt = k1e u - ke0 x with u held
// constant, by classical fourth-order steps far below the grid spacing.
double rk4_effect_site(double k1e, double ke0, double u, double x0, double dt,
                       double h = 1e-5) {
  const auto rhs = [&](double x) { return k1e * u - ke0 * x; };
  double x = x0;
  double t = 0.0;
  while (t < dt - 1e-12) {
    const double step = std::min(h, dt - t);
    const double k1 = rhs(x);
    const double k2 = rhs(x + 0.5 * step * k1);
    const double k3 = rhs(x + 0.5 * step * k2);
    const double k4 = rhs(x + step * k3);
    x += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += step;
  }
  return x;
}

PdParams tiny_params(int d, int L, Rng& rng) {
  PdParams p;
  p.beta1 = Eigen::VectorXd::Zero(d);
  p.beta2 = Eigen::VectorXd::Zero(d);
  p.beta3 = Eigen::VectorXd::Zero(d);
  p.alpha = Eigen::VectorXd::Zero(d);
  p.theta = Eigen::MatrixXd::Zero(d, L);
  for (int j = 0; j < d; ++j) {
    p.beta1[j] = runif(rng, 0.2, 1.5);
    p.beta2[j] = runif(rng, 0.3, 0.95);
    p.beta3[j] = runif(rng, -1.0, 1.0);
    p.alpha[j] = runif(rng, -2.0, 2.0);
    for (int r = 0; r < L; ++r) p.theta(j, r) = runif(rng, 0.0, 2.0);
  }
  return p;
}

BasisConfig tiny_basis(int L) {
  BasisConfig b;
  b.L = L;
  b.a = Eigen::VectorXd::Constant(L, -1.0);
  b.b = Eigen::VectorXd::LinSpaced(L, 0.0, L - 1.0);
  for (int r = 0; r < L; ++r) b.a[r] = -0.6 - 0.2 * r;
  return b;
}

Task random_task(const PdParams& p, const BasisConfig& basis, int T, Rng& rng,
                 double tau = 4.0) {
  Task task;
  task.id = "t";
  task.dt = 1.0;
  task.u = Eigen::VectorXd::Zero(T);
  for (int t = 0; t < T; ++t) task.u[t] = runif(rng, 0.0, 3.0);
  const PdStates st = simulate(p, basis, task.u);
  task.y = add_noise(st.mean, Eigen::VectorXd::Constant(1, tau), rng);
  task.observed = ObservedMask::Constant(T, p.channels(), true);
  return task;
}

}  // namespace

TEST_CASE("one discrete step matches the continuous effect-site solution") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const double k1e = runif(rng, 0.05, 2.0);
    const double ke0 = runif(rng, 0.05, 2.0);
    const double dt = runif(rng, 0.1, 2.0);
    const double u = runif(rng, 0.0, 5.0);
    const double x0 = runif(rng, 0.0, 3.0);
    const auto [b1, b2] = discretize_effect_site(k1e, ke0, dt);
    const double stepped = b1 * u + b2 * x0;
    const double ref = rk4_effect_site(k1e, ke0, u, x0, dt);
    REQUIRE(std::abs(stepped - ref) < 1e-8 * (std::abs(ref) + 1.0));
  }
}

TEST_CASE("discretization closed-form spot values") {
  // ke0*dt = ln 2 halves the state; with k1e = ke0 the input gain is also 1/2.
  const double ln2 = std::log(2.0);
  const auto [b1, b2] = discretize_effect_site(ln2, ln2, 1.0);
  CHECK(b2 == Catch::Approx(0.5).epsilon(1e-15));
  CHECK(b1 == Catch::Approx(0.5).epsilon(1e-15));

  // Slow elimination: beta1 -> k1e*dt, beta2 -> 1.
  const auto [c1, c2] = discretize_effect_site(0.7, 1e-9, 2.0);
  CHECK(c1 == Catch::Approx(1.4).epsilon(1e-8));
  CHECK(c2 == Catch::Approx(1.0).epsilon(1e-8));

  CHECK_THROWS_AS(discretize_effect_site(0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(discretize_effect_site(1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(discretize_effect_site(1.0, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("state recursion unrolls by hand") {
  PdParams p;
  p.beta1 = Eigen::VectorXd::Constant(1, 0.5);
  p.beta2 = Eigen::VectorXd::Constant(1, 0.5);
  p.beta3 = Eigen::VectorXd::Zero(1);
  p.alpha = Eigen::VectorXd::Zero(1);
  p.theta = Eigen::MatrixXd::Zero(1, 1);
  BasisConfig b;
  b.L = 1;
  b.a = Eigen::VectorXd::Constant(1, -1.0);
  b.b = Eigen::VectorXd::Zero(1);

  const Eigen::VectorXd u = Eigen::VectorXd::Ones(4);
  const PdStates st = simulate(p, b, u);
  // x: 0.5, 0.75, 0.875, 0.9375 toward the fixed point beta1/(1-beta2) = 1.
  CHECK(st.x(0, 0) == Catch::Approx(0.5));
  CHECK(st.x(1, 0) == Catch::Approx(0.75));
  CHECK(st.x(2, 0) == Catch::Approx(0.875));
  CHECK(st.x(3, 0) == Catch::Approx(0.9375));
}

TEST_CASE("zero input decays the initial state geometrically") {
  PdParams p;
  p.beta1 = Eigen::VectorXd::Constant(1, 1.0);
  p.beta2 = Eigen::VectorXd::Constant(1, 0.8);
  p.beta3 = Eigen::VectorXd::Zero(1);
  p.alpha = Eigen::VectorXd::Zero(1);
  p.theta = Eigen::MatrixXd::Zero(1, 1);
  BasisConfig b;
  b.L = 1;
  b.a = Eigen::VectorXd::Constant(1, -1.0);
  b.b = Eigen::VectorXd::Zero(1);

  SimulateOptions opts;
  opts.x0 = Eigen::VectorXd::Constant(1, 2.0);
  const PdStates st = simulate(p, b, Eigen::VectorXd::Zero(5), opts);
  for (int t = 0; t < 5; ++t)
    REQUIRE(st.x(t, 0) == Catch::Approx(2.0 * std::pow(0.8, t + 1)).epsilon(1e-12));
}

TEST_CASE("bounded input yields a bounded state") {
  Rng rng(29);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(2, 2, rng);
  Eigen::VectorXd u(200);
  for (int t = 0; t < 200; ++t) u[t] = runif(rng, 0.0, 4.0);
  const PdStates st = simulate(p, b, u);
  for (int j = 0; j < 2; ++j) {
    const double bound = p.beta1[j] * 4.0 / (1.0 - p.beta2[j]);
    REQUIRE(st.x.col(j).maxCoeff() <= bound + 1e-9);
    REQUIRE(st.x.col(j).minCoeff() >= 0.0);
  }
}

TEST_CASE("emission at the sigmoid midpoint") {
  PdParams p;
  p.beta1 = Eigen::VectorXd::Constant(1, 1.0);
  p.beta2 = Eigen::VectorXd::Constant(1, 0.5);
  p.beta3 = Eigen::VectorXd::Constant(1, 2.0);
  p.alpha = Eigen::VectorXd::Constant(1, 10.0);
  p.theta = Eigen::MatrixXd::Constant(1, 1, 6.0);
  BasisConfig b;
  b.L = 1;
  b.a = Eigen::VectorXd::Constant(1, -1.3);
  b.b = Eigen::VectorXd::Constant(1, 3.0);

  // One step of u=1 from rest gives x=1; x + beta3 - b = 0 hits sigmoid(0).
  const PdStates st = simulate(p, b, Eigen::VectorXd::Ones(1));
  CHECK(st.x(0, 0) == 1.0);
  CHECK(st.mean(0, 0) == Catch::Approx(10.0 + 6.0 * 0.5).epsilon(1e-15));
}

TEST_CASE("emission is monotone in the state for nonnegative weights") {
  Rng rng(31);
  const BasisConfig b = tiny_basis(4);
  const PdParams p = tiny_params(1, 4, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 100; ++i) {
    const double x = -5.0 + 15.0 * i / 100.0;
    double m = p.alpha[0];
    for (int r = 0; r < 4; ++r)
      m += p.theta(0, r) * sigmoid(b.a[r] * (x + p.beta3[0] - b.b[r]));
    REQUIRE(m <= prev + 1e-12);
    prev = m;
  }
}

TEST_CASE("input lag shifts the drive by one step") {
  Rng rng(37);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(1, 2, rng);
  Eigen::VectorXd u(6);
  for (int t = 0; t < 6; ++t) u[t] = runif(rng, 0.0, 2.0);

  SimulateOptions lagged;
  lagged.input_lag = true;
  const PdStates a = simulate(p, b, u, lagged);

  Eigen::VectorXd shifted(6);
  shifted[0] = 0.0;
  shifted.tail(5) = u.head(5);
  const PdStates ref = simulate(p, b, shifted);
  REQUIRE((a.x - ref.x).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.mean - ref.mean).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("parameter validation rejects out-of-range values") {
  Rng rng(39);
  const BasisConfig b = tiny_basis(2);
  PdParams p = tiny_params(2, 2, rng);
  CHECK_NOTHROW(p.validate(b));
  PdParams bad = p;
  bad.beta1[0] = 0.0;
  CHECK_THROWS_AS(bad.validate(b), std::invalid_argument);
  bad = p;
  bad.beta2[1] = 1.0;
  CHECK_THROWS_AS(bad.validate(b), std::invalid_argument);
  bad = p;
  bad.theta(0, 1) = -0.1;
  CHECK_THROWS_AS(bad.validate(b), std::invalid_argument);
  bad = p;
  bad.theta.conservativeResize(2, 3);
  CHECK_THROWS_AS(bad.validate(b), std::invalid_argument);
}

TEST_CASE("noise has the requested per-channel precision") {
  Rng rng(101);
  const Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(30000, 2);
  Eigen::VectorXd tau(2);
  tau << 4.0, 25.0;
  const Eigen::MatrixXd y = add_noise(mean, tau, rng);
  for (int j = 0; j < 2; ++j) {
    const double var = y.col(j).squaredNorm() / y.rows();
    REQUIRE(var == Catch::Approx(1.0 / tau[j]).epsilon(0.03));
  }
  CHECK_THROWS_AS(add_noise(mean, Eigen::VectorXd::Zero(2), rng), std::invalid_argument);
}

TEST_CASE("log-likelihood equals the naive cellwise sum") {
  Rng rng(43);
  const BasisConfig b = tiny_basis(3);
  const PdParams p = tiny_params(2, 3, rng);
  Task task = random_task(p, b, 40, rng);
  task.observed(3, 0) = false;
  task.observed(17, 1) = false;
  Eigen::VectorXd tau(2);
  tau << 2.0, 7.0;

  const PdStates st = simulate(p, b, task.u);
  double ref = 0.0;
  for (int t = 0; t < 40; ++t)
    for (int j = 0; j < 2; ++j) {
      if (!task.observed(t, j)) continue;
      const double r = task.y(t, j) - st.mean(t, j);
      ref += 0.5 * std::log(tau[j] / (2.0 * M_PI)) - 0.5 * tau[j] * r * r;
    }
  CHECK(log_likelihood(p, b, task, tau) == Catch::Approx(ref).margin(1e-12));
}

TEST_CASE("perfect fit leaves only the normalising constant") {
  Rng rng(47);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(1, 2, rng);
  Task task;
  task.dt = 1.0;
  task.u = Eigen::VectorXd::Ones(25);
  task.y = simulate(p, b, task.u).mean;
  task.observed = ObservedMask::Constant(25, 1, true);
  // tau = 1: each observed cell contributes -log(2 pi)/2 and nothing else.
  CHECK(log_likelihood(p, b, task, 1.0) ==
        Catch::Approx(-12.5 * std::log(2.0 * M_PI)).epsilon(1e-13));
}

TEST_CASE("fully masked tasks contribute nothing") {
  Rng rng(53);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(2, 2, rng);
  Task task = random_task(p, b, 12, rng);
  task.observed.setConstant(false);
  CHECK(log_likelihood(p, b, task, 3.0) == 0.0);

  PdGrad g;
  CHECK(grad_log_likelihood(p, b, task, Eigen::VectorXd::Constant(1, 3.0), g) == 0.0);
  CHECK(g.beta1.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.theta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.tau.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backpropagated gradients match central differences") {
  Rng rng(59);
  const int d = 2, L = 3;
  const BasisConfig b = tiny_basis(L);
  const PdParams p = tiny_params(d, L, rng);
  Task task = random_task(p, b, 30, rng);
  task.observed(5, 0) = false;
  task.observed(22, 1) = false;
  Eigen::VectorXd tau(2);
  tau << 3.0, 1.5;

  PdGrad g;
  grad_log_likelihood(p, b, task, tau, g);

  const double h = 1e-6;
  const auto fd = [&](auto&& mutate_plus, auto&& mutate_minus) {
    PdParams pp = p, pm = p;
    Eigen::VectorXd tp = tau, tm = tau;
    mutate_plus(pp, tp);
    mutate_minus(pm, tm);
    return (log_likelihood(pp, b, task, tp) - log_likelihood(pm, b, task, tm)) / (2.0 * h);
  };

  for (int j = 0; j < d; ++j) {
    double ref = fd([&](PdParams& q, Eigen::VectorXd&) { q.beta1[j] += h; },
                    [&](PdParams& q, Eigen::VectorXd&) { q.beta1[j] -= h; });
    REQUIRE(g.beta1[j] == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    ref = fd([&](PdParams& q, Eigen::VectorXd&) { q.beta2[j] += h; },
             [&](PdParams& q, Eigen::VectorXd&) { q.beta2[j] -= h; });
    REQUIRE(g.beta2[j] == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    ref = fd([&](PdParams& q, Eigen::VectorXd&) { q.beta3[j] += h; },
             [&](PdParams& q, Eigen::VectorXd&) { q.beta3[j] -= h; });
    REQUIRE(g.beta3[j] == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    ref = fd([&](PdParams& q, Eigen::VectorXd&) { q.alpha[j] += h; },
             [&](PdParams& q, Eigen::VectorXd&) { q.alpha[j] -= h; });
    REQUIRE(g.alpha[j] == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    ref = fd([&](PdParams&, Eigen::VectorXd& t) { t[j] += h; },
             [&](PdParams&, Eigen::VectorXd& t) { t[j] -= h; });
    REQUIRE(g.tau[j] == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    for (int r = 0; r < L; ++r) {
      ref = fd([&](PdParams& q, Eigen::VectorXd&) { q.theta(j, r) += h; },
               [&](PdParams& q, Eigen::VectorXd&) { q.theta(j, r) -= h; });
      REQUIRE(g.theta(j, r) == Catch::Approx(ref).epsilon(1e-5).margin(1e-7));
    }
  }
}

TEST_CASE("baseline gradient is the precision-weighted residual sum") {
  Rng rng(61);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(1, 2, rng);
  const Task task = random_task(p, b, 20, rng);
  const double tau = 2.5;

  PdGrad g;
  grad_log_likelihood(p, b, task, Eigen::VectorXd::Constant(1, tau), g);
  const PdStates st = simulate(p, b, task.u);
  const double expect = tau * (task.y.col(0) - st.mean.col(0)).sum();
  CHECK(g.alpha[0] == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gradients add over a disjoint mask split") {
  Rng rng(67);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(2, 2, rng);
  const Task full = random_task(p, b, 18, rng);
  Task first = full, second = full;
  for (int t = 0; t < 18; ++t)
    for (int j = 0; j < 2; ++j) {
      const bool in_first = (t + j) % 2 == 0;
      first.observed(t, j) = in_first;
      second.observed(t, j) = !in_first;
    }
  const Eigen::VectorXd tau = Eigen::VectorXd::Constant(1, 2.0);
  PdGrad ga, gb, gc;
  const double la = grad_log_likelihood(p, b, full, tau, ga);
  const double lb = grad_log_likelihood(p, b, first, tau, gb);
  const double lc = grad_log_likelihood(p, b, second, tau, gc);
  CHECK(la == Catch::Approx(lb + lc).margin(1e-10));
  CHECK((ga.beta1 - gb.beta1 - gc.beta1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((ga.beta2 - gb.beta2 - gc.beta2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((ga.theta - gb.theta - gc.theta).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((ga.alpha - gb.alpha - gc.alpha).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sse accumulates across tasks and channels") {
  Rng rng(71);
  const BasisConfig b = tiny_basis(2);
  const PdParams p = tiny_params(2, 2, rng);
  Task t1 = random_task(p, b, 10, rng);
  Task t2 = random_task(p, b, 14, rng);
  t1.observed(2, 1) = false;

  Eigen::VectorXd sse;
  Eigen::VectorXi count;
  sse_observed(p, b, t1, sse, count);
  sse_observed(p, b, t2, sse, count);
  CHECK(count[0] == 24);
  CHECK(count[1] == 23);

  double ref = 0.0;
  for (const Task* task : {&t1, &t2}) {
    const PdStates st = simulate(p, b, task->u);
    for (int t = 0; t < task->length(); ++t)
      if (task->observed(t, 0)) ref += std::pow(task->y(t, 0) - st.mean(t, 0), 2);
  }
  CHECK(sse[0] == Catch::Approx(ref).epsilon(1e-12));
}

TEST_CASE("task validation catches shape and data errors") {
  Task t;
  t.dt = 1.0;
  t.u = Eigen::VectorXd::Zero(3);
  t.y = Eigen::MatrixXd::Zero(3, 2);
  t.observed = ObservedMask::Constant(3, 2, true);
  CHECK_NOTHROW(t.validate());

  Task bad = t;
  bad.y.conservativeResize(4, 2);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = t;
  bad.y(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.observed(1, 1) = false;  // masked NaN is fine
  CHECK_NOTHROW(bad.validate());
  bad = t;
  bad.covariates = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.covariate_names = {"age", "weight"};
  CHECK_NOTHROW(bad.validate());
}
