#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/optim.hpp"
#include "pkpd/random.hpp"

namespace pkpd {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// softplus'(x) = sigmoid(x)
inline double softplus_deriv(double x) { return sigmoid(x); }

inline double inv_softplus(double y) {
  if (!(y > 0)) throw std::invalid_argument("inv_softplus: argument must be > 0");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

inline double logit(double p) {
  if (!(p > 0 && p < 1)) throw std::invalid_argument("logit: argument must be in (0,1)");
  return std::log(p / (1.0 - p));
}

// Monotone emission basis: L logistic sigmoids with negative slopes a and
// increasing offsets b; nonnegative weights keep the response non-increasing.
struct BasisConfig {
  int L = 0;
  Eigen::VectorXd a;  // slopes, all < 0
  Eigen::VectorXd b;  // offsets, strictly increasing

  void validate() const {
    if (L < 1 || a.size() != L || b.size() != L)
      throw std::invalid_argument("BasisConfig: inconsistent sizes");
    for (int r = 0; r < L; ++r)
      if (!(a[r] < 0)) throw std::invalid_argument("BasisConfig: slopes must be < 0");
    for (int r = 1; r < L; ++r)
      if (!(b[r] > b[r - 1]))
        throw std::invalid_argument("BasisConfig: offsets must be strictly increasing");
  }
};

inline double basis_response(const BasisConfig& basis, const Eigen::VectorXd& theta,
                             double x) {
  double y = 0.0;
  for (int r = 0; r < basis.L; ++r) y += theta[r] * sigmoid(basis.a[r] * (x - basis.b[r]));
  return y;
}

// Four-parameter generalised logistic: t1 + (t2 - t1) / (1 + exp(-t3 x))^(1/t4).
// Negative t3 gives the descending shape the PD emission needs.
struct GeneralizedSigmoid {
  double t1 = 0.0, t2 = 1.0, t3 = -1.0, t4 = 1.0;

  double operator()(double x) const {
    return t1 + (t2 - t1) * std::pow(1.0 + std::exp(-t3 * x), -1.0 / t4);
  }
};

// Lawson-Hanson active-set NNLS: minimise ||A x - y||^2 subject to x >= 0.
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& y,
                            int max_iters = 200) {
  const Eigen::Index n = a.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(n, false);
  Eigen::VectorXd w = a.transpose() * (y - a * x);

  for (int outer = 0; outer < max_iters; ++outer) {
    // Most-violated inactive coordinate.
    Eigen::Index best = -1;
    double best_w = 1e-10;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[j] && w[j] > best_w) {
        best_w = w[j];
        best = j;
      }
    if (best < 0) break;
    passive[best] = true;

    for (int inner = 0; inner < max_iters; ++inner) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index j = 0; j < n; ++j)
        if (passive[j]) idx.push_back(j);
      Eigen::MatrixXd ap(a.rows(), idx.size());
      for (std::size_t c = 0; c < idx.size(); ++c) ap.col(c) = a.col(idx[c]);
      Eigen::VectorXd zp =
          ap.colPivHouseholderQr().solve(y);
      if ((zp.array() > 0).all()) {
        x.setZero();
        for (std::size_t c = 0; c < idx.size(); ++c) x[idx[c]] = zp[c];
        break;
      }
      // Step back to the feasible boundary and drop the blocking coordinates.
      double alpha = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < idx.size(); ++c)
        if (zp[c] <= 0) {
          const double xi = x[idx[c]];
          alpha = std::min(alpha, xi / (xi - zp[c]));
        }
      for (std::size_t c = 0; c < idx.size(); ++c)
        x[idx[c]] += alpha * (zp[c] - x[idx[c]]);
      for (std::size_t c = 0; c < idx.size(); ++c)
        if (x[idx[c]] <= 1e-12) {
          x[idx[c]] = 0.0;
          passive[idx[c]] = false;
        }
    }
    w = a.transpose() * (y - a * x);
  }
  return x;
}

struct BasisFitOptions {
  int grid_points = 801;        // fitting grid
  int eval_points = 4001;       // reporting grid for the max-abs error
  int restarts = 4;
  std::uint64_t seed = 0;
  int lbfgs_iters = 400;
};

struct BasisFit {
  BasisConfig basis;
  Eigen::VectorXd theta;   // fitted weights for the target, all >= 0
  double max_abs_error = 0.0;
  bool converged = false;
};

// Fits {a_r, b_r, theta_r} to a scalar target on [lo, hi]. Slopes and offsets
// are optimised by L-BFGS with the weights profiled out by NNLS at every
// evaluation; the reported error is the max-abs deviation on a dense grid.
inline BasisFit fit_basis(const std::function<double(double)>& target, int L, double lo,
                          double hi, const BasisFitOptions& opts = {}) {
  if (L < 1) throw std::invalid_argument("fit_basis: L must be >= 1");
  if (!(hi > lo)) throw std::invalid_argument("fit_basis: empty domain");

  const int n = opts.grid_points;
  Eigen::VectorXd xs(n), ys(n);
  for (int i = 0; i < n; ++i) {
    xs[i] = lo + (hi - lo) * i / (n - 1.0);
    ys[i] = target(xs[i]);
    if (!std::isfinite(ys[i]))
      throw std::invalid_argument("fit_basis: target not finite on domain");
  }

  // q = [s_1..s_L, b_1..b_L] with a_r = -exp(s_r).
  auto unpack_q = [&](const Eigen::VectorXd& q, Eigen::VectorXd& a, Eigen::VectorXd& b) {
    a = -q.head(L).array().exp();
    b = q.tail(L);
  };

  Eigen::VectorXd theta_work;
  auto objective = [&](const Eigen::VectorXd& q, Eigen::VectorXd& grad) -> double {
    Eigen::VectorXd a, b;
    unpack_q(q, a, b);
    Eigen::MatrixXd design(n, L);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < L; ++r) design(i, r) = sigmoid(a[r] * (xs[i] - b[r]));
    theta_work = nnls(design, ys);
    Eigen::VectorXd res = design * theta_work - ys;
    // Envelope gradient: theta held at its inner optimum.
    grad.setZero();
    for (int r = 0; r < L; ++r) {
      if (theta_work[r] == 0.0) continue;
      double ga = 0.0, gb = 0.0;
      for (int i = 0; i < n; ++i) {
        const double s = design(i, r);
        const double d = 2.0 * res[i] * theta_work[r] * s * (1.0 - s);
        ga += d * (xs[i] - b[r]);
        gb += d * (-a[r]);
      }
      grad[r] = ga * a[r];  // chain through a_r = -exp(s_r), da/ds = a_r
      grad[L + r] = gb;
    }
    return res.squaredNorm();
  };

  Rng rng(derive_seed(opts.seed, 0x6261736973ULL));
  const double span = hi - lo;
  double best_obj = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_q;
  Eigen::VectorXd best_theta;
  bool best_converged = false;

  for (int attempt = 0; attempt <= opts.restarts; ++attempt) {
    Eigen::VectorXd q(2 * L);
    const double slope0 = 2.0 * L / span;
    for (int r = 0; r < L; ++r) {
      double s = std::log(slope0);
      double b = lo + span * (r + 0.5) / L;
      if (attempt > 0) {
        s += rnorm(rng, 0.0, 0.5);
        b += rnorm(rng, 0.0, span / (2.0 * L));
      }
      q[r] = s;
      q[L + r] = b;
    }
    LbfgsOptions lopts;
    lopts.max_iters = opts.lbfgs_iters;
    lopts.grad_tol = 1e-12;
    LbfgsResult res = lbfgs_minimize(objective, q, lopts);
    Eigen::VectorXd g_tmp(2 * L);
    const double obj = objective(res.x, g_tmp);
    if (obj < best_obj) {
      best_obj = obj;
      best_q = res.x;
      best_theta = theta_work;
      best_converged = res.converged;
    }
    if (best_obj < 1e-18) break;
  }

  BasisFit fit;
  Eigen::VectorXd a, b;
  unpack_q(best_q, a, b);

  // Canonical ordering: sort components by offset.
  std::vector<int> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return b[i] < b[j]; });
  fit.basis.L = L;
  fit.basis.a.resize(L);
  fit.basis.b.resize(L);
  fit.theta.resize(L);
  for (int r = 0; r < L; ++r) {
    fit.basis.a[r] = a[order[r]];
    fit.basis.b[r] = b[order[r]];
    fit.theta[r] = best_theta[order[r]];
  }
  for (int r = 1; r < L; ++r)  // break exact offset ties
    if (fit.basis.b[r] <= fit.basis.b[r - 1])
      fit.basis.b[r] = fit.basis.b[r - 1] + 1e-9 * std::max(1.0, span);
  fit.basis.validate();

  double err = 0.0;
  for (int i = 0; i < opts.eval_points; ++i) {
    const double x = lo + (hi - lo) * i / (opts.eval_points - 1.0);
    err = std::max(err, std::abs(basis_response(fit.basis, fit.theta, x) - target(x)));
  }
  fit.max_abs_error = err;
  fit.converged = best_converged;
  return fit;
}

// The frozen default basis shared by generator and models: L components
// fitted once to the canonical descending logistic on [-10, 10].
inline const BasisConfig& default_basis(int L = 8) {
  static const BasisFit fit8 = fit_basis(GeneralizedSigmoid{0.0, 1.0, -1.0, 1.0}, 8,
                                         -10.0, 10.0);
  if (L == 8) return fit8.basis;
  thread_local BasisFit fit_other;
  if (fit_other.basis.L != L)
    fit_other = fit_basis(GeneralizedSigmoid{0.0, 1.0, -1.0, 1.0}, L, -10.0, 10.0);
  return fit_other.basis;
}

}  // namespace pkpd
