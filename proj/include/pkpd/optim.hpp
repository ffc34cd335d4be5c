#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace pkpd {

// Objective callback: writes the gradient and returns the function value.
using GradFn =
    std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

// Adam in ascent form. One instance per parameter block; the caller owns the
// parameter storage and passes the ascent gradient each step.
class AdamAscent {
 public:
  explicit AdamAscent(Eigen::Index n, double lr = 1e-2, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        m_(Eigen::VectorXd::Zero(n)),
        v_(Eigen::VectorXd::Zero(n)) {}

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

  void step(Eigen::Ref<Eigen::VectorXd> x, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_.array().matrix() +
         (1.0 - beta2_) * grad.array().square().matrix();
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    x.array() +=
        lr_ * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + eps_);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

// Halves a learning rate when the tracked objective stops improving.
class PlateauDecay {
 public:
  PlateauDecay(double factor = 0.5, int patience = 50, double min_delta = 1e-7)
      : factor_(factor), patience_(patience), min_delta_(min_delta) {}

  // Returns the multiplier to apply (1.0 = no change).
  double observe(double objective) {
    if (objective > best_ + min_delta_ * (1.0 + std::abs(best_))) {
      best_ = objective;
      stale_ = 0;
      return 1.0;
    }
    if (++stale_ >= patience_) {
      stale_ = 0;
      return factor_;
    }
    return 1.0;
  }

 private:
  double factor_;
  int patience_;
  double min_delta_;
  double best_ = -std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

struct LbfgsOptions {
  int max_iters = 500;
  double grad_tol = 1e-8;       // stop when ||grad||_2 < grad_tol
  int memory = 8;
  double c1 = 1e-4;             // Armijo sufficient-decrease constant
  int max_line_search = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double fx = 0.0;
  double grad_norm = 0.0;
  int iters = 0;
  bool converged = false;
};

// Limited-memory BFGS minimiser with backtracking line search. Curvature
// pairs with s'y <= 0 are skipped to keep the implicit Hessian positive.
inline LbfgsResult lbfgs_minimize(const GradFn& fn, const Eigen::VectorXd& x0,
                                  const LbfgsOptions& opts = {}) {
  const Eigen::Index n = x0.size();
  LbfgsResult out;
  out.x = x0;
  Eigen::VectorXd g(n);
  double fx = fn(out.x, g);
  if (!std::isfinite(fx)) throw std::runtime_error("lbfgs: objective not finite at start");

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    out.grad_norm = g.norm();
    if (out.grad_norm < opts.grad_tol) {
      out.converged = true;
      break;
    }

    // Two-loop recursion for the search direction.
    Eigen::VectorXd q = g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha(m);
    for (int i = m - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (m > 0) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (int i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Eigen::VectorXd dir = -q;
    double dg = dir.dot(g);
    if (dg >= 0) {  // not a descent direction; fall back to steepest descent
      dir = -g;
      dg = -g.squaredNorm();
    }

    double step = 1.0;
    Eigen::VectorXd x_new(n), g_new(n);
    double fx_new = fx;
    bool accepted = false;
    for (int ls = 0; ls < opts.max_line_search; ++ls) {
      x_new = out.x + step * dir;
      fx_new = fn(x_new, g_new);
      if (std::isfinite(fx_new) && fx_new <= fx + opts.c1 * step * dg) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // line search failed; current point is the answer

    Eigen::VectorXd s = x_new - out.x;
    Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    out.x = std::move(x_new);
    g = g_new;
    fx = fx_new;
    out.iters = iter + 1;
  }
  out.fx = fx;
  out.grad_norm = g.norm();
  if (out.grad_norm < opts.grad_tol) out.converged = true;
  return out;
}

}  // namespace pkpd
