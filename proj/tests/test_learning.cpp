#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/learning.hpp"
#include "pkpd/random.hpp"

using namespace pkpd;

namespace {

BasisConfig small_basis(int L) {
  BasisConfig b;
  b.L = L;
  b.a = Eigen::VectorXd::Zero(L);
  b.b = Eigen::VectorXd::Zero(L);
  for (int r = 0; r < L; ++r) {
    b.a[r] = -0.7 - 0.3 * r;
    b.b[r] = 1.0 * r;
  }
  return b;
}

Eigen::VectorXd step_input(int T, Rng& rng) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(T);
  const int start = static_cast<int>(runif_int(rng, 3, 6));
  const double high = runif(rng, 1.5, 3.0);
  const double low = runif(rng, 0.3, 1.0);
  for (int t = start; t < T; ++t) u[t] = (t < 2 * T / 3) ? high : low;
  return u;
}

// Cohort drawn from a planted rank-k model; noise_tau <= 0 means noiseless.
std::vector<Task> planted_cohort(const MtlModel& truth, const Eigen::MatrixXd& Z,
                                 int T, double noise_tau, Rng& rng) {
  std::vector<Task> tasks;
  for (Eigen::Index i = 0; i < Z.cols(); ++i) {
    Task t;
    t.id = "task-" + std::to_string(i);
    t.dt = 1.0;
    t.u = step_input(T, rng);
    const PdParams p = decode(truth, Z.col(i));
    const PdStates st = simulate(p, truth.basis, t.u);
    t.y = noise_tau > 0
              ? add_noise(st.mean, Eigen::VectorXd::Constant(1, noise_tau), rng)
              : st.mean;
    t.observed = ObservedMask::Constant(T, truth.d, true);
    tasks.push_back(t);
  }
  return tasks;
}

double mean_training_rmse(const MtlFit& fit, const std::vector<Task>& tasks) {
  double total = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Eigen::VectorXd alpha = fit.Alpha.size() > 0
                                      ? fit.Alpha.col(static_cast<Eigen::Index>(i)).eval()
                                      : Eigen::VectorXd();
    const PdParams p = decode(fit.model, fit.Z.col(static_cast<Eigen::Index>(i)), alpha);
    total += detail::observed_rmse(p, fit.model.basis, tasks[i], SimulateOptions{});
  }
  return total / static_cast<double>(tasks.size());
}

}  // namespace

TEST_CASE("latent rescaling preserves the product and normalises row power") {
  Rng rng(131);
  Eigen::MatrixXd Psi = rnorm_matrix(rng, 12, 3, 0.0, 1.0);
  Eigen::MatrixXd Z = rnorm_matrix(rng, 3, 7, 0.0, 2.5);
  const Eigen::MatrixXd product = Psi * Z;

  rescale_latents(Psi, Z);
  REQUIRE((Psi * Z - product).cwiseAbs().maxCoeff() < 1e-12);
  for (int a = 0; a < 3; ++a) {
    const double rms = std::sqrt(Z.row(a).squaredNorm() / Z.cols());
    REQUIRE(rms == Catch::Approx(1.0).margin(1e-9));
  }

  // A dead latent row is left alone rather than amplified.
  Eigen::MatrixXd Z0 = Eigen::MatrixXd::Zero(2, 4);
  Eigen::MatrixXd P0 = rnorm_matrix(rng, 6, 2, 0.0, 1.0);
  const Eigen::MatrixXd P0_before = P0;
  rescale_latents(P0, Z0);
  CHECK((P0 - P0_before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("baseline initialisation averages the pre-input window") {
  Task t;
  t.id = "a";
  t.dt = 1.0;
  t.u = Eigen::VectorXd::Zero(6);
  t.u[3] = 1.0;  // first input at step 3
  t.y = Eigen::MatrixXd::Zero(6, 2);
  t.y.col(0) << 10.0, 12.0, 14.0, 99.0, 99.0, 99.0;
  t.y.col(1) << 4.0, 4.0, 4.0, 50.0, 50.0, 50.0;
  t.observed = ObservedMask::Constant(6, 2, true);
  t.observed(1, 0) = false;

  Task no_window = t;
  no_window.u.setConstant(1.0);  // input from the very first step

  const Eigen::MatrixXd alpha = detail::init_alpha({t, no_window});
  CHECK(alpha(0, 0) == Catch::Approx(12.0));  // mean of {10, 14}
  CHECK(alpha(1, 0) == Catch::Approx(4.0));
  // Fallback is the cohort-wide channel mean over observed cells; both copies
  // share the masked cell at (1, 0).
  const double grand0 = 2.0 * (10.0 + 14.0 + 99.0 * 3) / 10.0;
  CHECK(alpha(0, 1) == Catch::Approx(grand0));
}

TEST_CASE("closed-form precision matches count over sse") {
  Rng rng(137);
  MtlModel m;
  m.k = 2;
  m.d = 2;
  m.L = 2;
  m.alpha_mode = AlphaMode::in_subspace;
  m.basis = small_basis(2);
  m.Psi = rnorm_matrix(rng, m.p(), 2, 0.0, 0.3);
  m.tau = Eigen::VectorXd::Constant(1, 1.0);

  Eigen::MatrixXd Z = rnorm_matrix(rng, 2, 4, 0.0, 1.0);
  std::vector<Task> tasks = planted_cohort(m, Z, 20, 9.0, rng);
  tasks[2].observed(5, 1) = false;
  std::vector<int> idx = {0, 1, 2, 3};

  Eigen::VectorXd sse;
  Eigen::VectorXi count;
  detail::training_sse(m, tasks, idx, Z, Eigen::MatrixXd(), SimulateOptions{}, sse, count);
  CHECK(count.sum() == 4 * 20 * 2 - 1);

  const Eigen::VectorXd tau_pc =
      detail::closed_form_tau(m, tasks, idx, Z, Eigen::MatrixXd(), SimulateOptions{}, true);
  REQUIRE(tau_pc.size() == 2);
  for (int j = 0; j < 2; ++j)
    CHECK(tau_pc[j] == Catch::Approx(count[j] / sse[j]).epsilon(1e-12));

  const Eigen::VectorXd tau_sh =
      detail::closed_form_tau(m, tasks, idx, Z, Eigen::MatrixXd(), SimulateOptions{}, false);
  REQUIRE(tau_sh.size() == 1);
  CHECK(tau_sh[0] == Catch::Approx(count.sum() / sse.sum()).epsilon(1e-12));
}

TEST_CASE("objective accumulation is invariant to task order") {
  Rng rng(139);
  MtlModel gen;
  gen.k = 2;
  gen.d = 2;
  gen.L = 2;
  gen.alpha_mode = AlphaMode::in_subspace;
  gen.basis = small_basis(2);
  gen.Psi = rnorm_matrix(rng, gen.p(), 2, 0.0, 0.3);
  gen.tau = Eigen::VectorXd::Constant(1, 4.0);

  MtlModel m = gen;
  m.alpha_mode = AlphaMode::free_per_task;
  m.Psi = rnorm_matrix(rng, m.p(), 2, 0.0, 0.3);
  m.tau = Eigen::VectorXd::Constant(2, 3.0);

  Eigen::MatrixXd Z = rnorm_matrix(rng, 2, 5, 0.0, 1.0);
  Eigen::MatrixXd Alpha = rnorm_matrix(rng, 2, 5, 0.0, 1.0);
  std::vector<Task> tasks = planted_cohort(gen, Z, 15, 4.0, rng);

  const double base = joint_log_density(m, tasks, Z, Alpha);
  const std::vector<int> perm = {4, 2, 0, 3, 1};
  std::vector<Task> shuffled;
  Eigen::MatrixXd Zp(2, 5), Ap(2, 5);
  for (int i = 0; i < 5; ++i) {
    shuffled.push_back(tasks[perm[i]]);
    Zp.col(i) = Z.col(perm[i]);
    Ap.col(i) = Alpha.col(perm[i]);
  }
  CHECK(joint_log_density(m, shuffled, Zp, Ap) ==
        Catch::Approx(base).epsilon(1e-8).margin(1e-8));

  JointGrad ga, gb;
  grad_joint(m, tasks, Z, Alpha, ga);
  grad_joint(m, shuffled, Zp, Ap, gb);
  for (int i = 0; i < 5; ++i)
    REQUIRE((ga.dZ.col(perm[i]) - gb.dZ.col(i)).cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE((ga.dPsi - gb.dPsi).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("joint training recovers a noiseless planted cohort") {
  Rng rng(149);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = Eigen::MatrixXd(truth.p(), 1);
  truth.Psi << 0.4, 0.8, -0.6, 1.2, 0.9, 2.0;
  truth.tau = Eigen::VectorXd::Constant(1, 1.0);

  Eigen::MatrixXd Z(1, 6);
  Z << -1.4, -0.8, -0.2, 0.4, 1.0, 1.6;
  const std::vector<Task> tasks = planted_cohort(truth, Z, 60, 0.0, rng);

  TrainConfig cfg;
  cfg.k = 1;
  cfg.alpha_mode = AlphaMode::in_subspace;
  cfg.early_stop = false;
  cfg.holdout_tasks = 0;
  cfg.max_epochs = 4000;
  cfg.seed = 3;
  const MtlFit fit = fit_mtl(tasks, truth.basis, cfg);

  REQUIRE(fit.report.trace.size() > 1);
  CHECK(fit.report.trace.back() > fit.report.trace.front());
  CHECK(mean_training_rmse(fit, tasks) < 1e-2);
  // Noiseless data drives the closed-form precision way up.
  CHECK(fit.model.tau.minCoeff() > 1e2);
}

TEST_CASE("early stopping holds tasks out of the gradient set") {
  Rng rng(151);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = rnorm_matrix(rng, truth.p(), 1, 0.0, 0.6);
  truth.tau = Eigen::VectorXd::Constant(1, 1.0);
  const Eigen::MatrixXd Z = rnorm_matrix(rng, 1, 6, 0.0, 1.0);
  const std::vector<Task> tasks = planted_cohort(truth, Z, 25, 16.0, rng);

  TrainConfig cfg;
  cfg.k = 1;
  cfg.alpha_mode = AlphaMode::in_subspace;
  cfg.max_epochs = 300;
  cfg.holdout_tasks = 2;
  cfg.seed = 9;
  const MtlFit fit = fit_mtl(tasks, truth.basis, cfg);

  CHECK(fit.report.holdout_task_ids.size() == 2);
  CHECK(fit.report.trained_task_ids.size() == 4);
  for (const std::string& h : fit.report.holdout_task_ids)
    CHECK(std::find(fit.report.trained_task_ids.begin(), fit.report.trained_task_ids.end(),
                    h) == fit.report.trained_task_ids.end());
  CHECK(fit.Z.cols() == 6);
  CHECK(std::isfinite(fit.report.holdout_rmse));
  CHECK(fit.task_ids.size() == 6);
}

TEST_CASE("deadline stops training early and is reported") {
  Rng rng(157);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = rnorm_matrix(rng, truth.p(), 1, 0.0, 0.6);
  truth.tau = Eigen::VectorXd::Constant(1, 1.0);
  const Eigen::MatrixXd Z = rnorm_matrix(rng, 1, 4, 0.0, 1.0);
  const std::vector<Task> tasks = planted_cohort(truth, Z, 30, 4.0, rng);

  TrainConfig cfg;
  cfg.k = 1;
  cfg.alpha_mode = AlphaMode::in_subspace;
  cfg.max_epochs = 1000000;
  cfg.early_stop = false;
  cfg.holdout_tasks = 0;
  cfg.deadline_seconds = 0.05;
  const MtlFit fit = fit_mtl(tasks, truth.basis, cfg);
  CHECK(fit.report.deadline_hit);
  CHECK(fit.report.epochs < 1000000);
}

TEST_CASE("training requires tasks") {
  const BasisConfig basis = small_basis(2);
  TrainConfig cfg;
  CHECK_THROWS_AS(fit_mtl({}, basis, cfg), std::invalid_argument);
  CHECK_THROWS_AS(fit_cohort({}, basis, cfg), std::invalid_argument);
  CHECK_THROWS_AS(fit_task_descriptor({}, basis, cfg), std::invalid_argument);
}

TEST_CASE("cohort fit shares one response across a homogeneous group") {
  Rng rng(163);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = Eigen::MatrixXd(truth.p(), 1);
  truth.Psi << 0.4, 0.8, -0.6, 1.2, 0.9, 1.5;
  truth.tau = Eigen::VectorXd::Constant(1, 25.0);

  const Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(1, 6);  // identical subjects
  const std::vector<Task> tasks = planted_cohort(truth, Z, 40, 25.0, rng);

  TrainConfig cfg;
  cfg.max_epochs = 2000;
  cfg.per_channel_tau = false;
  cfg.seed = 2;
  const MtlFit fit = fit_cohort(tasks, truth.basis, cfg);

  CHECK(fit.model.k == 1);
  CHECK((fit.Z.array() == 1.0).all());
  // Recovered precision should be near the generating one on a good fit.
  CHECK(fit.model.tau[0] > 25.0 * 0.5);
  CHECK(fit.model.tau[0] < 25.0 * 2.0);
  CHECK(mean_training_rmse(fit, tasks) < 2.0 / std::sqrt(25.0));
}

TEST_CASE("latent structure beats a shared response on a two-population cohort") {
  Rng rng(167);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = Eigen::MatrixXd(truth.p(), 1);
  truth.Psi << 0.3, 0.5, -0.8, 1.5, 1.1, 2.5;
  truth.tau = Eigen::VectorXd::Constant(1, 100.0);

  Eigen::MatrixXd Z(1, 8);
  Z << -1.2, -1.2, -1.2, -1.2, 1.2, 1.2, 1.2, 1.2;
  const std::vector<Task> tasks = planted_cohort(truth, Z, 50, 100.0, rng);

  TrainConfig cfg;
  cfg.k = 1;
  cfg.alpha_mode = AlphaMode::in_subspace;
  cfg.early_stop = false;
  cfg.holdout_tasks = 0;
  cfg.max_epochs = 2500;
  cfg.seed = 4;
  const MtlFit mtl = fit_mtl(tasks, truth.basis, cfg);
  const MtlFit cohort = fit_cohort(tasks, truth.basis, cfg);

  CHECK(mean_training_rmse(mtl, tasks) < 0.7 * mean_training_rmse(cohort, tasks));
}

TEST_CASE("single-task model wraps the identity subspace") {
  const BasisConfig basis = small_basis(2);
  const MtlModel stl = make_stl_model(basis, 2, Eigen::VectorXd::Constant(1, 4.0), 50.0);
  CHECK(stl.k == 2 * (4 + 2));
  CHECK(stl.alpha_mode == AlphaMode::in_subspace);
  CHECK(stl.Psi.isApprox(50.0 * Eigen::MatrixXd::Identity(stl.k, stl.k)));

  // z reaches any parameter set: v = 50 z, so z = v / 50 decodes back.
  Rng rng(173);
  const TransformSpec spec = stl.spec();
  const Eigen::VectorXd v = rnorm_vector(rng, spec.dim(), 0.0, 1.0);
  const PdParams want = spec.unpack(spec.forward(v), {});
  const PdParams got = decode(stl, v / 50.0);
  CHECK((got.beta1 - want.beta1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((got.theta - want.theta).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("map refinement improves a single task under a fixed model") {
  Rng rng(179);
  MtlModel m;
  m.k = 2;
  m.d = 1;
  m.L = 2;
  m.alpha_mode = AlphaMode::free_per_task;
  m.basis = small_basis(2);
  m.Psi = rnorm_matrix(rng, m.p(), 2, 0.0, 0.5);
  m.tau = Eigen::VectorXd::Constant(1, 9.0);

  const Eigen::VectorXd z_true = rnorm_vector(rng, 2, 0.0, 1.0);
  const Eigen::VectorXd alpha_true = rnorm_vector(rng, 1, 0.0, 1.0);
  Task task;
  task.id = "one";
  task.dt = 1.0;
  task.u = step_input(40, rng);
  const PdStates st = simulate(decode(m, z_true, alpha_true), m.basis, task.u);
  task.y = add_noise(st.mean, m.tau, rng);
  task.observed = ObservedMask::Constant(40, 1, true);

  const Eigen::VectorXd z0 = Eigen::VectorXd::Zero(2);
  const Eigen::VectorXd a0 = Eigen::VectorXd::Zero(1);
  const TaskMap fit = fit_task_map(m, task, z0, a0);

  const auto posterior = [&](const Eigen::VectorXd& z, const Eigen::VectorXd& a) {
    return log_likelihood(decode(m, z, a), m.basis, task, m.tau) +
           detail::gaussian_logpdf_iso(z, 1.0) +
           detail::gaussian_logpdf_iso(a, m.alpha_prior_sd);
  };
  CHECK(fit.log_post == Catch::Approx(posterior(fit.z, fit.alpha)).margin(1e-8));
  CHECK(fit.log_post > posterior(z0, a0));
  CHECK(fit.log_post >= posterior(z_true, alpha_true) - 1e-6);
}

TEST_CASE("descriptor training pins the latents to standardized codes") {
  Rng rng(181);
  MtlModel truth;
  truth.k = 1;
  truth.d = 1;
  truth.L = 2;
  truth.alpha_mode = AlphaMode::in_subspace;
  truth.basis = small_basis(2);
  truth.Psi = rnorm_matrix(rng, truth.p(), 1, 0.0, 0.5);
  truth.tau = Eigen::VectorXd::Constant(1, 9.0);
  const Eigen::MatrixXd Zt = rnorm_matrix(rng, 1, 5, 0.0, 1.0);
  std::vector<Task> tasks = planted_cohort(truth, Zt, 20, 9.0, rng);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    tasks[i].covariate_names = {"age", "weight"};
    tasks[i].covariates =
        Eigen::Vector2d(40.0 + 5.0 * static_cast<double>(i), 70.0 - 3.0 * static_cast<double>(i));
  }

  TrainConfig cfg;
  cfg.max_epochs = 200;
  cfg.alpha_mode = AlphaMode::in_subspace;  // must be overridden internally
  cfg.seed = 7;
  const MtlFit fit = fit_task_descriptor(tasks, truth.basis, cfg);

  CHECK(fit.model.k == 2);
  CHECK(fit.model.alpha_mode == AlphaMode::free_per_task);
  REQUIRE(!fit.model.cov_std.empty());
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd code = task_descriptor_codes(fit.model.cov_std, tasks[i]);
    REQUIRE((fit.Z.col(i) - code).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(fit.Alpha.cols() == 5);

  std::vector<Task> bare = tasks;
  for (Task& t : bare) {
    t.covariates = Eigen::VectorXd();
    t.covariate_names.clear();
  }
  CHECK_THROWS_AS(fit_task_descriptor(bare, truth.basis, cfg), std::invalid_argument);

  std::vector<Task> ragged = tasks;
  ragged[3].covariates = Eigen::VectorXd::Zero(3);
  ragged[3].covariate_names = {"a", "b", "c"};
  CHECK_THROWS_WITH(fit_task_descriptor(ragged, truth.basis, cfg),
                    Catch::Matchers::ContainsSubstring(ragged[3].id));
}
