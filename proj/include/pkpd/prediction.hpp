#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/inference.hpp"

namespace pkpd {

// Type-7 empirical quantile (linear interpolation) of an unsorted sample.
inline double empirical_quantile(Eigen::VectorXd values, double q) {
  if (values.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  if (!(q >= 0 && q <= 1)) throw std::invalid_argument("empirical_quantile: bad q");
  std::sort(values.data(), values.data() + values.size());
  const double h = (values.size() - 1) * q;
  const Eigen::Index lo = static_cast<Eigen::Index>(std::floor(h));
  const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, values.size() - 1);
  return values[lo] + (h - lo) * (values[hi] - values[lo]);
}

inline double rmse(const std::vector<double>& errors) {
  double s = 0.0;
  int n = 0;
  for (double e : errors)
    if (std::isfinite(e)) {
      s += e * e;
      ++n;
    }
  return n > 0 ? std::sqrt(s / n) : std::numeric_limits<double>::quiet_NaN();
}

// Noiseless response curve for every retained draw, at most max_draws of them
// (0 = all), evenly strided through the sample.
inline std::vector<Eigen::MatrixXd> posterior_curves(const InferenceTarget& target,
                                                     const PosteriorSamples& samples,
                                                     const Eigen::VectorXd& u,
                                                     int max_draws = 0) {
  const Eigen::Index S = samples.draws.rows();
  if (S == 0) throw std::invalid_argument("posterior_curves: no draws");
  Eigen::Index stride = 1;
  if (max_draws > 0 && S > max_draws) stride = (S + max_draws - 1) / max_draws;
  std::vector<Eigen::MatrixXd> curves;
  for (Eigen::Index s = 0; s < S; s += stride) {
    const PdParams params = target.decode_point(samples.draws.row(s).transpose());
    curves.push_back(simulate(params, target.model.basis, u, target.opts).mean);
  }
  return curves;
}

struct PredictConfig {
  std::vector<int> horizons = {20, 40};  // grid steps past the last prefix point
  double interval = 0.9;                 // central credible mass
  bool observation_noise = false;        // include measurement noise in intervals
  int max_draws = 0;                     // 0 = use every kept draw
};

struct PredictResult {
  std::vector<int> horizons;
  std::vector<int> horizon_indices;      // absolute grid indices
  Eigen::MatrixXd mean, median, lo, hi;  // H x d
  Eigen::MatrixXd y_true;                // H x d, NaN where unobserved
  std::vector<Eigen::MatrixXd> horizon_draws;  // per horizon: draws x d
  double interval = 0.9;
  bool observation_noise = false;
};

namespace detail {

// Central interval of the equal-weight Gaussian mixture over draw means,
// inverted on a dense grid of the mixture CDF.
inline std::pair<double, double> mixture_interval(const Eigen::VectorXd& means,
                                                  double tau, double mass,
                                                  int grid_points = 4001) {
  const double sd = 1.0 / std::sqrt(tau);
  const double lo_x = means.minCoeff() - 8.0 * sd;
  const double hi_x = means.maxCoeff() + 8.0 * sd;
  const double q_lo = 0.5 * (1.0 - mass);
  const double q_hi = 1.0 - q_lo;
  double lo = lo_x, hi = hi_x;
  bool lo_set = false;
  const double inv_sqrt2 = 0.7071067811865475244;
  for (int g = 0; g < grid_points; ++g) {
    const double x = lo_x + (hi_x - lo_x) * g / (grid_points - 1.0);
    double cdf = 0.0;
    for (Eigen::Index s = 0; s < means.size(); ++s)
      cdf += 0.5 * std::erfc((means[s] - x) / sd * inv_sqrt2);
    cdf /= means.size();
    if (!lo_set && cdf >= q_lo) {
      lo = x;
      lo_set = true;
    }
    if (cdf >= q_hi) {
      hi = x;
      break;
    }
  }
  return {lo, hi};
}

}  // namespace detail

// Posterior predictive summaries h grid steps past the end of the prefix,
// from precomputed per-draw curves. Interval bounds are draw quantiles of the
// noiseless response, or mixture quantiles when observation noise is on.
inline PredictResult summarize_horizons(const std::vector<Eigen::MatrixXd>& curves,
                                        const Task& full_task, int prefix_len,
                                        const Eigen::VectorXd& tau,
                                        const PredictConfig& cfg = {}) {
  if (curves.empty()) throw std::invalid_argument("summarize_horizons: no curves");
  if (prefix_len < 1 || prefix_len > full_task.length())
    throw std::invalid_argument("summarize_horizons: prefix out of range");
  const int d = full_task.channels();
  detail::check_tau(tau, d);
  const int H = static_cast<int>(cfg.horizons.size());
  const Eigen::Index S = static_cast<Eigen::Index>(curves.size());

  PredictResult out;
  out.horizons = cfg.horizons;
  out.interval = cfg.interval;
  out.observation_noise = cfg.observation_noise;
  out.mean.resize(H, d);
  out.median.resize(H, d);
  out.lo.resize(H, d);
  out.hi.resize(H, d);
  out.y_true.setConstant(H, d, std::numeric_limits<double>::quiet_NaN());

  const double q_lo = 0.5 * (1.0 - cfg.interval);
  const double q_hi = 1.0 - q_lo;
  for (int h = 0; h < H; ++h) {
    const int idx = prefix_len - 1 + cfg.horizons[h];
    if (idx < 0 || idx >= full_task.length())
      throw std::invalid_argument("summarize_horizons: horizon beyond the grid");
    out.horizon_indices.push_back(idx);
    Eigen::MatrixXd dm(S, d);
    for (Eigen::Index s = 0; s < S; ++s) dm.row(s) = curves[s].row(idx);
    out.horizon_draws.push_back(dm);
    for (int j = 0; j < d; ++j) {
      out.mean(h, j) = dm.col(j).mean();
      out.median(h, j) = empirical_quantile(dm.col(j), 0.5);
      if (cfg.observation_noise) {
        const auto [lo, hi] =
            detail::mixture_interval(dm.col(j), detail::tau_for(tau, j), cfg.interval);
        out.lo(h, j) = lo;
        out.hi(h, j) = hi;
      } else {
        out.lo(h, j) = empirical_quantile(dm.col(j), q_lo);
        out.hi(h, j) = empirical_quantile(dm.col(j), q_hi);
      }
      if (full_task.observed(idx, j)) out.y_true(h, j) = full_task.y(idx, j);
    }
  }
  return out;
}

inline PredictResult predict(const InferenceTarget& target,
                             const PosteriorSamples& samples, const Task& full_task,
                             int prefix_len, const PredictConfig& cfg = {}) {
  const auto curves =
      posterior_curves(target, samples, full_task.u, cfg.max_draws);
  return summarize_horizons(curves, full_task, prefix_len, target.model.tau, cfg);
}

struct RetroFit {
  Eigen::VectorXd rmse_per_channel;  // NaN where a channel has no points
  double rmse = std::numeric_limits<double>::quiet_NaN();
  int n_points = 0;
};

// Posterior-mean fit error over the observed cells the sampler actually saw
// described at full resolution: indices [initial_discard, prefix_len).
inline RetroFit retrospective_fit(const std::vector<Eigen::MatrixXd>& curves,
                                  const Task& full_task, int prefix_len,
                                  int initial_discard = 0) {
  if (curves.empty()) throw std::invalid_argument("retrospective_fit: no curves");
  const int d = full_task.channels();
  Eigen::MatrixXd mean_curve = curves[0];
  for (std::size_t s = 1; s < curves.size(); ++s) mean_curve += curves[s];
  mean_curve /= static_cast<double>(curves.size());

  RetroFit out;
  Eigen::VectorXd sse = Eigen::VectorXd::Zero(d);
  Eigen::VectorXi count = Eigen::VectorXi::Zero(d);
  for (int i = initial_discard; i < prefix_len; ++i)
    for (int j = 0; j < d; ++j) {
      if (!full_task.observed(i, j)) continue;
      const double r = full_task.y(i, j) - mean_curve(i, j);
      sse[j] += r * r;
      count[j] += 1;
    }
  out.rmse_per_channel.setConstant(d, std::numeric_limits<double>::quiet_NaN());
  for (int j = 0; j < d; ++j)
    if (count[j] > 0) out.rmse_per_channel[j] = std::sqrt(sse[j] / count[j]);
  out.n_points = count.sum();
  if (out.n_points > 0) out.rmse = std::sqrt(sse.sum() / out.n_points);
  return out;
}

struct NllResult {
  double nll = std::numeric_limits<double>::quiet_NaN();      // total over points
  double tau = std::numeric_limits<double>::quiet_NaN();      // minimizing precision
  double nll_ref = std::numeric_limits<double>::quiet_NaN();  // at the reference precision
  int n_points = 0;
};

namespace detail {

// Total negative log density of y under the equal-weight mixture of
// N(mean_s, 1/tau) per point; draw_means is points x draws.
inline double mixture_nll(const Eigen::MatrixXd& draw_means, const Eigen::VectorXd& y,
                          double tau) {
  const Eigen::Index n = y.size();
  const Eigen::Index S = draw_means.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double max_e = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd e(S);
    for (Eigen::Index s = 0; s < S; ++s) {
      const double r = y[i] - draw_means(i, s);
      e[s] = -0.5 * tau * r * r;
      max_e = std::max(max_e, e[s]);
    }
    double sum = 0.0;
    for (Eigen::Index s = 0; s < S; ++s) sum += std::exp(e[s] - max_e);
    const double log_mix = max_e + std::log(sum / S) + 0.5 * std::log(tau) -
                           0.5 * kLog2Pi;
    total -= log_mix;
  }
  return total;
}

}  // namespace detail

// Tightest single-precision bound on the predictive NLL of a window: the
// mixture NLL minimized over tau by a coarse scan plus golden-section
// refinement. The supplied precision is always among the candidates, so the
// result never exceeds the bound it yields.
inline NllResult nll_upper_bound(const Eigen::MatrixXd& draw_means,
                                 const Eigen::VectorXd& y, double reference_tau) {
  if (draw_means.rows() != y.size())
    throw std::invalid_argument("nll_upper_bound: size mismatch");
  NllResult out;
  out.n_points = static_cast<int>(y.size());
  if (y.size() == 0) return out;
  if (!(reference_tau > 0))
    throw std::invalid_argument("nll_upper_bound: reference tau must be > 0");

  // Residual-matched precision anchors the scan range.
  double sse = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double r = y[i] - draw_means.row(i).mean();
    sse += r * r;
  }
  const double tau_res = sse > 0 ? y.size() / sse : reference_tau;

  std::vector<double> candidates{reference_tau};
  const double lo = std::log(std::min(tau_res, reference_tau)) - std::log(1000.0);
  const double hi = std::log(std::max(tau_res, reference_tau)) + std::log(1000.0);
  const int n_scan = 41;
  for (int i = 0; i < n_scan; ++i)
    candidates.push_back(std::exp(lo + (hi - lo) * i / (n_scan - 1.0)));

  out.nll_ref = detail::mixture_nll(draw_means, y, reference_tau);

  double best_tau = candidates.front();
  double best_nll = std::numeric_limits<double>::infinity();
  for (double tau : candidates) {
    const double v = detail::mixture_nll(draw_means, y, tau);
    if (v < best_nll) {
      best_nll = v;
      best_tau = tau;
    }
  }

  // Golden-section on log tau around the scan winner.
  const double step = (hi - lo) / (n_scan - 1.0);
  double a = std::log(best_tau) - step;
  double b = std::log(best_tau) + step;
  const double gr = 0.6180339887498949;
  double x1 = b - gr * (b - a);
  double x2 = a + gr * (b - a);
  double f1 = detail::mixture_nll(draw_means, y, std::exp(x1));
  double f2 = detail::mixture_nll(draw_means, y, std::exp(x2));
  for (int it = 0; it < 60 && b - a > 1e-10; ++it) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = detail::mixture_nll(draw_means, y, std::exp(x1));
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = detail::mixture_nll(draw_means, y, std::exp(x2));
    }
  }
  const double tau_gs = std::exp(0.5 * (a + b));
  const double f_gs = detail::mixture_nll(draw_means, y, tau_gs);
  if (f_gs < best_nll) {
    best_nll = f_gs;
    best_tau = tau_gs;
  }
  out.nll = best_nll;
  out.tau = best_tau;
  return out;
}

// Window NLL bound for one channel: evaluation points are the observed cells
// strictly after the prefix, up to max_horizon steps past its last point.
inline NllResult window_nll_bound(const std::vector<Eigen::MatrixXd>& curves,
                                  const Task& full_task, int prefix_len,
                                  int max_horizon, int channel,
                                  double reference_tau) {
  if (curves.empty()) throw std::invalid_argument("window_nll_bound: no curves");
  if (channel < 0 || channel >= full_task.channels())
    throw std::invalid_argument("window_nll_bound: bad channel");
  const int last = std::min<int>(full_task.length() - 1, prefix_len - 1 + max_horizon);
  std::vector<int> idx;
  for (int i = prefix_len; i <= last; ++i)
    if (full_task.observed(i, channel)) idx.push_back(i);
  Eigen::MatrixXd dm(idx.size(), curves.size());
  Eigen::VectorXd y(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    y[r] = full_task.y(idx[r], channel);
    for (std::size_t s = 0; s < curves.size(); ++s)
      dm(r, s) = curves[s](idx[r], channel);
  }
  return nll_upper_bound(dm, y, reference_tau);
}

}  // namespace pkpd
