#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/basis.hpp"
#include "pkpd/random.hpp"

namespace pkpd {

using ObservedMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Discrete-time effect-site coefficients for one grid step of length dt:
//   x[i] = beta1 * u + beta2 * x[i-1]
// matching dx/dt = k1e * u - ke0 * x held at constant input over the step.
inline std::pair<double, double> discretize_effect_site(double k1e, double ke0,
                                                        double dt = 1.0) {
  if (!(k1e > 0) || !(ke0 > 0) || !(dt > 0))
    throw std::invalid_argument("discretize_effect_site: rates and dt must be > 0");
  const double kd = ke0 * dt;
  const double beta2 = std::exp(-kd);
  // -expm1(-kd)/kd -> 1 as kd -> 0; series for tiny kd avoids 0/0.
  const double scale = kd > 1e-12 ? -std::expm1(-kd) / kd : 1.0 - kd / 2.0;
  return {k1e * dt * scale, beta2};
}

// Per-channel response parameters over a shared basis. Rows of theta are
// channels; the emission for channel j at effect-site state x is
//   sum_r theta(j,r) * sigmoid(a_r * (x + beta3_j - b_r)) + alpha_j.
struct PdParams {
  Eigen::VectorXd beta1;   // input gains, > 0
  Eigen::VectorXd beta2;   // decay factors, in (0,1)
  Eigen::VectorXd beta3;   // response shifts
  Eigen::VectorXd alpha;   // baselines
  Eigen::MatrixXd theta;   // d x L, all >= 0

  int channels() const { return static_cast<int>(beta1.size()); }

  void validate(const BasisConfig& basis) const {
    const Eigen::Index d = beta1.size();
    if (d < 1 || beta2.size() != d || beta3.size() != d || alpha.size() != d ||
        theta.rows() != d || theta.cols() != basis.L)
      throw std::invalid_argument("PdParams: inconsistent sizes");
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!(beta1[j] > 0)) throw std::invalid_argument("PdParams: beta1 must be > 0");
      if (!(beta2[j] > 0 && beta2[j] < 1))
        throw std::invalid_argument("PdParams: beta2 must be in (0,1)");
      if (!std::isfinite(beta3[j]) || !std::isfinite(alpha[j]))
        throw std::invalid_argument("PdParams: non-finite parameter");
    }
    if ((theta.array() < 0).any())
      throw std::invalid_argument("PdParams: theta must be >= 0");
  }
};

// One subject's record: infusion inputs and (partially observed) responses on
// a shared grid with spacing dt.
struct Task {
  std::string id;
  double dt = 0.25;
  Eigen::VectorXd u;       // length T
  Eigen::MatrixXd y;       // T x d
  ObservedMask observed;   // T x d, true where y is usable
  Eigen::VectorXd covariates;              // optional descriptors, may be empty
  std::vector<std::string> covariate_names;

  int length() const { return static_cast<int>(u.size()); }
  int channels() const { return static_cast<int>(y.cols()); }

  void validate() const {
    if (!(dt > 0)) throw std::invalid_argument("Task: dt must be > 0");
    if (y.rows() != u.size() || observed.rows() != y.rows() ||
        observed.cols() != y.cols())
      throw std::invalid_argument("Task: inconsistent sizes");
    if (covariates.size() > 0 &&
        covariate_names.size() != static_cast<std::size_t>(covariates.size()))
      throw std::invalid_argument("Task: covariate names do not match values");
    for (Eigen::Index t = 0; t < y.rows(); ++t)
      for (Eigen::Index j = 0; j < y.cols(); ++j)
        if (observed(t, j) && !std::isfinite(y(t, j)))
          throw std::invalid_argument("Task: observed entry is not finite");
  }
};

struct SimulateOptions {
  bool input_lag = false;  // drive x[i] with u[i-1] instead of u[i]
  Eigen::VectorXd x0;      // initial effect-site state, zeros if empty
};

struct PdStates {
  Eigen::MatrixXd x;     // T x d effect-site states
  Eigen::MatrixXd mean;  // T x d noiseless responses
};

namespace detail {

inline double input_at(const Eigen::VectorXd& u, Eigen::Index i, bool lag) {
  if (!lag) return u[i];
  return i > 0 ? u[i - 1] : 0.0;
}

inline double x_prev(const Eigen::MatrixXd& x, const SimulateOptions& opts,
                     Eigen::Index t, Eigen::Index j) {
  if (t > 0) return x(t - 1, j);
  return opts.x0.size() > 0 ? opts.x0[j] : 0.0;
}

}  // namespace detail

inline PdStates simulate(const PdParams& params, const BasisConfig& basis,
                         const Eigen::VectorXd& u, const SimulateOptions& opts = {}) {
  params.validate(basis);
  const int d = params.channels();
  if (opts.x0.size() > 0 && opts.x0.size() != d)
    throw std::invalid_argument("simulate: x0 size mismatch");
  const Eigen::Index T = u.size();
  PdStates out;
  out.x.resize(T, d);
  out.mean.resize(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int j = 0; j < d; ++j) {
      const double prev = detail::x_prev(out.x, opts, t, j);
      const double xt =
          params.beta1[j] * detail::input_at(u, t, opts.input_lag) +
          params.beta2[j] * prev;
      out.x(t, j) = xt;
      double m = params.alpha[j];
      for (int r = 0; r < basis.L; ++r)
        m += params.theta(j, r) *
             sigmoid(basis.a[r] * (xt + params.beta3[j] - basis.b[r]));
      out.mean(t, j) = m;
    }
  }
  return out;
}

// Adds N(0, 1/tau_j) noise per channel; tau of size 1 broadcasts.
inline Eigen::MatrixXd add_noise(const Eigen::MatrixXd& mean, const Eigen::VectorXd& tau,
                                 Rng& rng) {
  if (tau.size() != 1 && tau.size() != mean.cols())
    throw std::invalid_argument("add_noise: tau size mismatch");
  Eigen::MatrixXd y = mean;
  for (Eigen::Index j = 0; j < mean.cols(); ++j) {
    const double tj = tau.size() == 1 ? tau[0] : tau[j];
    if (!(tj > 0)) throw std::invalid_argument("add_noise: tau must be > 0");
    const double sd = 1.0 / std::sqrt(tj);
    for (Eigen::Index t = 0; t < mean.rows(); ++t) y(t, j) += rnorm(rng, 0.0, sd);
  }
  return y;
}

namespace detail {

inline double tau_for(const Eigen::VectorXd& tau, Eigen::Index j) {
  return tau.size() == 1 ? tau[0] : tau[j];
}

inline void check_tau(const Eigen::VectorXd& tau, Eigen::Index d) {
  if (tau.size() != 1 && tau.size() != d)
    throw std::invalid_argument("tau must be scalar or one value per channel");
  for (Eigen::Index j = 0; j < tau.size(); ++j)
    if (!(tau[j] > 0)) throw std::invalid_argument("tau must be > 0");
}

}  // namespace detail

// Gaussian log-likelihood over the observed cells only.
inline double log_likelihood(const PdParams& params, const BasisConfig& basis,
                             const Task& task, const Eigen::VectorXd& tau,
                             const SimulateOptions& opts = {}) {
  detail::check_tau(tau, task.channels());
  const PdStates st = simulate(params, basis, task.u, opts);
  constexpr double log2pi = 1.8378770664093454836;
  double ll = 0.0;
  for (Eigen::Index t = 0; t < task.y.rows(); ++t)
    for (Eigen::Index j = 0; j < task.y.cols(); ++j) {
      if (!task.observed(t, j)) continue;
      const double tj = detail::tau_for(tau, j);
      const double r = task.y(t, j) - st.mean(t, j);
      ll += 0.5 * (std::log(tj) - log2pi) - 0.5 * tj * r * r;
    }
  return ll;
}

inline double log_likelihood(const PdParams& params, const BasisConfig& basis,
                             const Task& task, double tau,
                             const SimulateOptions& opts = {}) {
  Eigen::VectorXd tv(1);
  tv[0] = tau;
  return log_likelihood(params, basis, task, tv, opts);
}

struct PdGrad {
  Eigen::VectorXd beta1, beta2, beta3, alpha;  // d
  Eigen::MatrixXd theta;                       // d x L
  Eigen::VectorXd tau;                         // d; sum over channels if shared
};

// Log-likelihood with its exact gradient by backpropagation through the state
// recursion. The state adjoint satisfies
//   xbar[t] = e[t] + beta2 * xbar[t+1]
// where e[t] is the emission pullback at step t.
inline double grad_log_likelihood(const PdParams& params, const BasisConfig& basis,
                                  const Task& task, const Eigen::VectorXd& tau,
                                  PdGrad& grad, const SimulateOptions& opts = {}) {
  detail::check_tau(tau, task.channels());
  const PdStates st = simulate(params, basis, task.u, opts);
  const int d = params.channels();
  const int L = basis.L;
  const Eigen::Index T = task.y.rows();

  grad.beta1 = Eigen::VectorXd::Zero(d);
  grad.beta2 = Eigen::VectorXd::Zero(d);
  grad.beta3 = Eigen::VectorXd::Zero(d);
  grad.alpha = Eigen::VectorXd::Zero(d);
  grad.theta = Eigen::MatrixXd::Zero(d, L);
  grad.tau = Eigen::VectorXd::Zero(d);

  constexpr double log2pi = 1.8378770664093454836;
  double ll = 0.0;

  for (int j = 0; j < d; ++j) {
    const double tj = detail::tau_for(tau, j);
    // Emission pullback per step, then one backward sweep for the state chain.
    Eigen::VectorXd e = Eigen::VectorXd::Zero(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      if (!task.observed(t, j)) continue;
      const double r = task.y(t, j) - st.mean(t, j);
      ll += 0.5 * (std::log(tj) - log2pi) - 0.5 * tj * r * r;
      const double tr = tj * r;  // dll/dmean
      grad.alpha[j] += tr;
      grad.tau[j] += 0.5 / tj - 0.5 * r * r;
      double et = 0.0;
      for (int rr = 0; rr < L; ++rr) {
        const double s =
            sigmoid(basis.a[rr] * (st.x(t, j) + params.beta3[j] - basis.b[rr]));
        grad.theta(j, rr) += tr * s;
        et += tr * params.theta(j, rr) * s * (1.0 - s) * basis.a[rr];
      }
      e[t] = et;
      grad.beta3[j] += et;
    }
    double xbar = 0.0;
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      xbar = e[t] + params.beta2[j] * xbar;
      grad.beta1[j] += xbar * detail::input_at(task.u, t, opts.input_lag);
      grad.beta2[j] += xbar * detail::x_prev(st.x, opts, t, j);
    }
  }
  return ll;
}

// Residual sum of squares and observation count per channel at the current
// parameters; the closed-form precision update is count / sse. Accumulates
// into sse/count when they are already sized, so totals can be built over a
// collection of tasks.
inline void sse_observed(const PdParams& params, const BasisConfig& basis,
                         const Task& task, Eigen::VectorXd& sse,
                         Eigen::VectorXi& count, const SimulateOptions& opts = {}) {
  const PdStates st = simulate(params, basis, task.u, opts);
  const int d = params.channels();
  if (sse.size() != d) sse = Eigen::VectorXd::Zero(d);
  if (count.size() != d) count = Eigen::VectorXi::Zero(d);
  for (Eigen::Index t = 0; t < task.y.rows(); ++t)
    for (int j = 0; j < d; ++j) {
      if (!task.observed(t, j)) continue;
      const double r = task.y(t, j) - st.mean(t, j);
      sse[j] += r * r;
      count[j] += 1;
    }
}

}  // namespace pkpd
