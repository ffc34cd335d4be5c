#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/learning.hpp"
#include "pkpd/mtl.hpp"
#include "pkpd/optim.hpp"
#include "pkpd/random.hpp"

namespace pkpd {

// Online observation schedule: keep every downsample-th grid point, drop the
// first initial_discard points entirely, and hide everything at or beyond the
// current prefix. Values and inputs are untouched; only the mask changes.
struct PreprocessFlags {
  int downsample = 4;
  int initial_discard = 16;
};

inline Task preprocess_prefix(const Task& full, int prefix_len,
                              const PreprocessFlags& flags = {}) {
  if (flags.downsample < 1 || flags.initial_discard < 0)
    throw std::invalid_argument("preprocess_prefix: bad flags");
  if (prefix_len < 0 || prefix_len > full.length())
    throw std::invalid_argument("preprocess_prefix: prefix out of range");
  Task out = full;
  for (Eigen::Index i = 0; i < out.observed.rows(); ++i) {
    const bool keep = i >= flags.initial_discard && i < prefix_len &&
                      i % flags.downsample == 0;
    if (!keep) out.observed.row(i).setConstant(false);
  }
  return out;
}

enum class TargetVariant { mtl_z, cohort_alpha, taskd_alpha };

// Differentiable log posterior over a flat point for one task under a frozen
// model. The point layout depends on the variant:
//   mtl_z, baselines free:   [z (k), alpha (d)]
//   mtl_z, baselines in map: [z (k)]
//   cohort_alpha:            [alpha (d)]  with the latent pinned at 1
//   taskd_alpha:             [alpha (d)]  with the latent pinned at z_fixed
struct InferenceTarget {
  TargetVariant variant = TargetVariant::mtl_z;
  MtlModel model;
  Task task;
  SimulateOptions opts;
  Eigen::VectorXd z_prior_mean;  // empty = zero mean
  Eigen::VectorXd z_fixed;       // pinned latent for the alpha-only variants

  static InferenceTarget for_task(const MtlModel& model, const Task& task,
                                  const SimulateOptions& opts = {},
                                  const Eigen::VectorXd& z_prior_mean = {}) {
    model.validate();
    task.validate();
    if (task.channels() != model.d)
      throw std::invalid_argument("InferenceTarget: channel mismatch");
    if (z_prior_mean.size() != 0 && z_prior_mean.size() != model.k)
      throw std::invalid_argument("InferenceTarget: prior mean size mismatch");
    InferenceTarget t;
    t.variant = TargetVariant::mtl_z;
    t.model = model;
    t.task = task;
    t.opts = opts;
    t.z_prior_mean = z_prior_mean;
    return t;
  }

  static InferenceTarget for_cohort(const MtlModel& cohort_model, const Task& task,
                                    const SimulateOptions& opts = {}) {
    cohort_model.validate();
    task.validate();
    if (cohort_model.k != 1)
      throw std::invalid_argument("InferenceTarget: cohort model must be rank one");
    if (cohort_model.alpha_mode != AlphaMode::free_per_task)
      throw std::invalid_argument("InferenceTarget: cohort baselines must be free");
    InferenceTarget t;
    t.variant = TargetVariant::cohort_alpha;
    t.model = cohort_model;
    t.task = task;
    t.opts = opts;
    t.z_fixed = Eigen::VectorXd::Ones(1);
    return t;
  }

  // Task-descriptor inference: the latent is pinned at the code predicted from
  // covariates and only the baselines are inferred online.
  static InferenceTarget for_descriptor(const MtlModel& model, const Task& task,
                                        const Eigen::VectorXd& z,
                                        const SimulateOptions& opts = {}) {
    model.validate();
    task.validate();
    if (task.channels() != model.d)
      throw std::invalid_argument("InferenceTarget: channel mismatch");
    if (z.size() != model.k)
      throw std::invalid_argument("InferenceTarget: pinned latent size mismatch");
    if (model.alpha_mode != AlphaMode::free_per_task)
      throw std::invalid_argument("InferenceTarget: descriptor baselines must be free");
    InferenceTarget t;
    t.variant = TargetVariant::taskd_alpha;
    t.model = model;
    t.task = task;
    t.opts = opts;
    t.z_fixed = z;
    return t;
  }

  bool alpha_in_point() const {
    return variant == TargetVariant::mtl_z &&
           model.alpha_mode == AlphaMode::free_per_task;
  }

  int dim() const {
    switch (variant) {
      case TargetVariant::mtl_z:
        return model.k + (alpha_in_point() ? model.d : 0);
      default:
        return model.d;
    }
  }

  double log_posterior_and_grad(const Eigen::VectorXd& w, Eigen::VectorXd& grad) const {
    if (w.size() != dim())
      throw std::invalid_argument("InferenceTarget: point size mismatch");
    grad.resize(w.size());
    const std::vector<Task> one{task};
    JointGrad jg;
    double lp = 0.0;
    if (variant != TargetVariant::mtl_z) {
      const Eigen::MatrixXd Z = z_fixed;
      const Eigen::MatrixXd A = w;
      lp = grad_joint(model, one, Z, A, jg, opts);
      grad = jg.dAlpha.col(0);
      return lp;
    }
    const int k = model.k;
    Eigen::MatrixXd Z = w.head(k);
    Eigen::MatrixXd A =
        alpha_in_point() ? Eigen::MatrixXd(w.tail(model.d)) : Eigen::MatrixXd();
    lp = grad_joint(model, one, Z, A, jg, opts);
    grad.head(k) = jg.dZ.col(0);
    if (alpha_in_point()) grad.tail(model.d) = jg.dAlpha.col(0);
    if (z_prior_mean.size() > 0) {
      // Shift the standard-normal latent prior to the supplied mean.
      lp += w.head(k).dot(z_prior_mean) - 0.5 * z_prior_mean.squaredNorm();
      grad.head(k) += z_prior_mean;
    }
    return lp;
  }

  double log_posterior(const Eigen::VectorXd& w) const {
    Eigen::VectorXd g;
    return log_posterior_and_grad(w, g);
  }

  PdParams decode_point(const Eigen::VectorXd& w) const {
    if (w.size() != dim())
      throw std::invalid_argument("InferenceTarget: point size mismatch");
    if (variant != TargetVariant::mtl_z) return decode(model, z_fixed, w);
    if (alpha_in_point()) return decode(model, w.head(model.k), w.tail(model.d));
    return decode(model, w);
  }

  Eigen::VectorXd init_point() const {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(dim());
    if (variant == TargetVariant::mtl_z && z_prior_mean.size() > 0)
      w.head(model.k) = z_prior_mean;
    if (variant != TargetVariant::mtl_z || alpha_in_point()) {
      const Eigen::MatrixXd a0 = detail::init_alpha({task});
      w.tail(model.d) = a0.col(0);
    }
    return w;
  }
};

struct MapResult {
  Eigen::VectorXd w;
  double log_post = 0.0;
  bool converged = false;
};

// Posterior mode by quasi-Newton ascent, optionally with jittered restarts.
inline MapResult map_estimate(const InferenceTarget& target, int restarts = 0,
                              std::uint64_t seed = 0, int max_iters = 500) {
  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& grad) -> double {
    const double lp = target.log_posterior_and_grad(w, grad);
    grad = -grad;
    return -lp;
  };
  LbfgsOptions lo;
  lo.max_iters = max_iters;
  lo.grad_tol = 1e-6;

  Rng rng(derive_seed(seed, 0x6d6170ULL));
  MapResult best;
  best.log_post = -std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt <= restarts; ++attempt) {
    Eigen::VectorXd w0 = target.init_point();
    if (attempt > 0) w0 += rnorm_vector(rng, w0.size(), 0.0, 0.5);
    LbfgsResult res;
    try {
      res = lbfgs_minimize(objective, w0, lo);
    } catch (const std::runtime_error&) {
      continue;  // non-finite start from an unlucky jitter
    }
    if (-res.fx > best.log_post) {
      best.w = res.x;
      best.log_post = -res.fx;
      best.converged = res.converged;
    }
  }
  if (!std::isfinite(best.log_post))
    throw std::runtime_error("map_estimate: no finite mode found");
  return best;
}

struct HmcConfig {
  int chains = 2;
  int warmup = 500;
  int iterations = 3000;  // post-warmup iterations per chain, before thinning
  int thin = 2;
  int leapfrog_steps = 32;
  double step_jitter = 0.2;  // uniform relative jitter on the step count
  double target_accept = 0.8;
  double init_step_size = 0.1;
  double divergence_threshold = 1000.0;  // |Delta H| that marks a divergence
  bool adapt_mass = true;
  std::uint64_t seed = 0;
  double deadline_seconds = 0.0;  // 0 = unlimited
  double da_gamma = 0.05;         // dual-averaging shrinkage
  double da_t0 = 10.0;
  double da_kappa = 0.75;
};

struct PosteriorSamples {
  Eigen::MatrixXd draws;  // kept draws, chain-major rows, one column per coord
  int chains = 0;
  int per_chain = 0;
  Eigen::VectorXd step_sizes;   // adapted step size per chain
  Eigen::VectorXd inv_mass;     // shared diagonal inverse mass
  double accept_rate = 0.0;     // post-warmup mean acceptance probability
  int divergences = 0;          // post-warmup divergent transitions
  Eigen::VectorXd ess;          // per coordinate, all chains pooled
  Eigen::VectorXd rhat;         // split potential scale reduction
  bool truncated = false;       // deadline cut sampling short
  double wall_seconds = 0.0;
  Eigen::VectorXd map_point;
};

// Pooled-chain effective sample size via the initial monotone positive
// sequence estimator on chain-averaged autocorrelations. Rows of draws are
// chain-major: chain c occupies rows [c*n, (c+1)*n).
inline Eigen::VectorXd effective_sample_size(const Eigen::MatrixXd& draws, int chains) {
  if (chains < 1 || draws.rows() % chains != 0)
    throw std::invalid_argument("effective_sample_size: bad chain layout");
  const Eigen::Index n = draws.rows() / chains;
  const Eigen::Index dim = draws.cols();
  Eigen::VectorXd ess(dim);
  if (n < 4) {
    ess.setConstant(static_cast<double>(draws.rows()));
    return ess;
  }
  for (Eigen::Index m = 0; m < dim; ++m) {
    // Per-chain autocovariances (biased, 1/n normalization).
    Eigen::MatrixXd acov(n, chains);
    Eigen::VectorXd chain_mean(chains), chain_var(chains);
    for (int c = 0; c < chains; ++c) {
      const auto x = draws.col(m).segment(c * n, n);
      const double mean = x.mean();
      chain_mean[c] = mean;
      Eigen::VectorXd xc = x.array() - mean;
      for (Eigen::Index t = 0; t < n; ++t) {
        double s = 0.0;
        for (Eigen::Index i = 0; i + t < n; ++i) s += xc[i] * xc[i + t];
        acov(t, c) = s / n;
      }
      chain_var[c] = acov(0, c) * n / (n - 1.0);
    }
    const double W = chain_var.mean();
    double var_plus = W * (n - 1.0) / n;
    if (chains > 1) {
      const double grand = chain_mean.mean();
      double B = 0.0;
      for (int c = 0; c < chains; ++c)
        B += (chain_mean[c] - grand) * (chain_mean[c] - grand);
      B *= n / (chains - 1.0);
      var_plus += B / n;
    }
    if (!(var_plus > 0)) {
      ess[m] = static_cast<double>(draws.rows());
      continue;
    }
    // Combined autocorrelations, then Geyer pairing.
    double tau = 1.0;
    double prev_pair = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 1; t + 1 < n; t += 2) {
      const double rho_a = 1.0 - (W - acov.row(t).mean()) / var_plus;
      const double rho_b = 1.0 - (W - acov.row(t + 1).mean()) / var_plus;
      double pair = rho_a + rho_b;
      if (pair < 0) break;
      pair = std::min(pair, prev_pair);  // enforce monotone decrease
      prev_pair = pair;
      tau += 2.0 * pair;
    }
    ess[m] = std::min(static_cast<double>(draws.rows()),
                      chains * n / std::max(tau, 1e-12));
  }
  return ess;
}

// Split potential scale reduction: each chain is halved, then the classic
// between/within ratio is taken over the resulting sequences.
inline Eigen::VectorXd split_rhat(const Eigen::MatrixXd& draws, int chains) {
  if (chains < 1 || draws.rows() % chains != 0)
    throw std::invalid_argument("split_rhat: bad chain layout");
  const Eigen::Index n_full = draws.rows() / chains;
  const Eigen::Index n = n_full / 2;
  const Eigen::Index dim = draws.cols();
  Eigen::VectorXd rhat(dim);
  if (n < 2) {
    rhat.setConstant(std::numeric_limits<double>::quiet_NaN());
    return rhat;
  }
  const int seqs = 2 * chains;
  for (Eigen::Index m = 0; m < dim; ++m) {
    Eigen::VectorXd mean(seqs), var(seqs);
    for (int c = 0; c < chains; ++c)
      for (int half = 0; half < 2; ++half) {
        const auto x = draws.col(m).segment(c * n_full + half * n, n);
        const int s = 2 * c + half;
        mean[s] = x.mean();
        var[s] = (x.array() - mean[s]).square().sum() / (n - 1.0);
      }
    const double W = var.mean();
    const double grand = mean.mean();
    double B = 0.0;
    for (int s = 0; s < seqs; ++s) B += (mean[s] - grand) * (mean[s] - grand);
    B *= n / (seqs - 1.0);
    const double var_plus = W * (n - 1.0) / n + B / n;
    rhat[m] = W > 0 ? std::sqrt(var_plus / W) : 1.0;
  }
  return rhat;
}

namespace detail {

// One leapfrog trajectory; returns the final potential energy -log p(w) and
// leaves w, p, and the gradient of -log p at the endpoint in place.
inline double leapfrog(const InferenceTarget& target, Eigen::VectorXd& w,
                       Eigen::VectorXd& p, Eigen::VectorXd& grad_u, double eps,
                       int steps, const Eigen::VectorXd& inv_mass) {
  double u = 0.0;
  for (int s = 0; s < steps; ++s) {
    p -= 0.5 * eps * grad_u;
    w += eps * inv_mass.cwiseProduct(p);
    Eigen::VectorXd g;
    u = -target.log_posterior_and_grad(w, g);
    grad_u = -g;
    p -= 0.5 * eps * grad_u;
    if (!std::isfinite(u)) return std::numeric_limits<double>::infinity();
  }
  return u;
}

inline double kinetic(const Eigen::VectorXd& p, const Eigen::VectorXd& inv_mass) {
  return 0.5 * p.dot(inv_mass.cwiseProduct(p));
}

}  // namespace detail

// Adaptive Hamiltonian Monte Carlo: dual-averaging step size toward the
// target acceptance rate, a diagonal mass refresh mid-warmup from the chain's
// own variance, jittered trajectory lengths, and |Delta H| divergence checks.
inline PosteriorSamples hmc_sample(const InferenceTarget& target, const HmcConfig& cfg) {
  if (cfg.chains < 1 || cfg.warmup < 20 || cfg.iterations < cfg.thin || cfg.thin < 1 ||
      cfg.leapfrog_steps < 1)
    throw std::invalid_argument("hmc_sample: bad configuration");
  const int dim = target.dim();
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  const MapResult mode = map_estimate(target);
  const int kept_target = cfg.iterations / cfg.thin;

  PosteriorSamples out;
  out.chains = cfg.chains;
  out.inv_mass = Eigen::VectorXd::Ones(dim);
  out.step_sizes = Eigen::VectorXd::Zero(cfg.chains);
  out.map_point = mode.w;

  std::vector<Eigen::MatrixXd> chain_draws;
  double accept_sum = 0.0;
  long accept_n = 0;

  for (int c = 0; c < cfg.chains && !out.truncated; ++c) {
    Rng rng(derive_seed(cfg.seed, 0x686d63ULL + c));
    Eigen::VectorXd w = mode.w + rnorm_vector(rng, dim, 0.0, 0.1);
    Eigen::VectorXd grad_u(dim);
    double u_curr;
    {
      Eigen::VectorXd g;
      u_curr = -target.log_posterior_and_grad(w, g);
      if (!std::isfinite(u_curr)) {
        w = mode.w;
        u_curr = -target.log_posterior_and_grad(w, g);
      }
      grad_u = -g;
    }

    Eigen::VectorXd inv_mass = Eigen::VectorXd::Ones(dim);
    double eps = cfg.init_step_size;
    double mu = std::log(10.0 * eps);
    double log_eps_bar = std::log(eps);
    double h_bar = 0.0;
    int da_iter = 0;
    auto da_reset = [&] {
      mu = std::log(10.0 * eps);
      log_eps_bar = std::log(eps);
      h_bar = 0.0;
      da_iter = 0;
    };
    auto da_update = [&](double accept_prob) {
      ++da_iter;
      const double frac = 1.0 / (da_iter + cfg.da_t0);
      h_bar = (1.0 - frac) * h_bar + frac * (cfg.target_accept - accept_prob);
      const double log_eps = mu - std::sqrt(da_iter) / cfg.da_gamma * h_bar;
      const double eta = std::pow(da_iter, -cfg.da_kappa);
      log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar;
      eps = std::exp(log_eps);
    };

    const int mass_lo = cfg.adapt_mass ? cfg.warmup / 4 : cfg.warmup;
    const int mass_hi = cfg.adapt_mass ? cfg.warmup / 2 : cfg.warmup;
    Eigen::MatrixXd mass_window(dim, std::max(0, mass_hi - mass_lo));

    Eigen::MatrixXd kept(kept_target, dim);
    int n_kept = 0;

    const int total = cfg.warmup + cfg.iterations;
    for (int it = 0; it < total; ++it) {
      const bool warm = it < cfg.warmup;
      Eigen::VectorXd p(dim);
      for (int m = 0; m < dim; ++m)
        p[m] = rnorm(rng, 0.0, 1.0) / std::sqrt(inv_mass[m]);
      const double h_old = u_curr + detail::kinetic(p, inv_mass);

      int steps = cfg.leapfrog_steps;
      if (cfg.step_jitter > 0) {
        const double f = runif(rng, 1.0 - cfg.step_jitter, 1.0 + cfg.step_jitter);
        steps = std::max(1, static_cast<int>(std::lround(steps * f)));
      }

      Eigen::VectorXd w_new = w;
      Eigen::VectorXd p_new = p;
      Eigen::VectorXd grad_new = grad_u;
      const double u_new =
          detail::leapfrog(target, w_new, p_new, grad_new, eps, steps, inv_mass);
      const double h_new = u_new + detail::kinetic(p_new, inv_mass);
      const double delta = h_old - h_new;  // > 0 means energy decreased

      double accept_prob = 0.0;
      bool divergent = false;
      if (std::isfinite(h_new) &&
          std::abs(delta) <= cfg.divergence_threshold) {
        accept_prob = std::min(1.0, std::exp(delta));
      } else {
        divergent = true;
      }
      if (!warm && divergent) ++out.divergences;

      if (accept_prob > 0 && runif(rng, 0.0, 1.0) < accept_prob) {
        w = w_new;
        grad_u = grad_new;
        u_curr = u_new;
      }

      if (warm) {
        da_update(accept_prob);
        if (cfg.adapt_mass && it >= mass_lo && it < mass_hi)
          mass_window.col(it - mass_lo) = w;
        if (cfg.adapt_mass && it + 1 == mass_hi && mass_window.cols() >= 10) {
          const Eigen::Index nw = mass_window.cols();
          for (int m = 0; m < dim; ++m) {
            const double mean = mass_window.row(m).mean();
            const double var =
                (mass_window.row(m).array() - mean).square().sum() / (nw - 1.0);
            // Shrink toward unit mass the way short windows are usually
            // regularized, then floor to keep the metric invertible.
            inv_mass[m] =
                std::max(1e-8, (nw / (nw + 5.0)) * var + 1e-3 * (5.0 / (nw + 5.0)));
          }
          da_reset();
        }
        if (it + 1 == cfg.warmup) eps = std::exp(log_eps_bar);
      } else {
        accept_sum += accept_prob;
        ++accept_n;
        const int post = it - cfg.warmup;
        if ((post + 1) % cfg.thin == 0 && n_kept < kept_target)
          kept.row(n_kept++) = w;
      }

      if (cfg.deadline_seconds > 0 && elapsed() > cfg.deadline_seconds) {
        out.truncated = true;
        break;
      }
    }
    out.step_sizes[c] = eps;
    out.inv_mass = inv_mass;  // last chain's metric, all chains adapt alike
    chain_draws.push_back(kept.topRows(n_kept));
  }

  // Common per-chain length so diagnostics stay balanced if a deadline hit.
  int per_chain = chain_draws.empty() ? 0 : std::numeric_limits<int>::max();
  for (const auto& m : chain_draws)
    per_chain = std::min(per_chain, static_cast<int>(m.rows()));
  std::vector<Eigen::MatrixXd> usable;
  for (const auto& m : chain_draws)
    if (m.rows() > 0) usable.push_back(m);
  if (per_chain == 0 || usable.size() < chain_draws.size()) {
    // Some chain produced nothing; fall back to whatever exists, unbalanced
    // chains collapsed into one.
    Eigen::Index rows = 0;
    for (const auto& m : usable) rows += m.rows();
    out.draws.resize(rows, dim);
    Eigen::Index at = 0;
    for (const auto& m : usable) {
      out.draws.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    out.chains = out.draws.rows() > 0 ? 1 : 0;
    out.per_chain = static_cast<int>(out.draws.rows());
  } else {
    out.chains = static_cast<int>(chain_draws.size());
    out.per_chain = per_chain;
    out.draws.resize(static_cast<Eigen::Index>(per_chain) * chain_draws.size(), dim);
    for (std::size_t c = 0; c < chain_draws.size(); ++c)
      out.draws.middleRows(per_chain * c, per_chain) =
          chain_draws[c].topRows(per_chain);
  }

  out.accept_rate = accept_n > 0 ? accept_sum / accept_n : 0.0;
  if (out.chains > 0 && out.per_chain >= 4) {
    out.ess = effective_sample_size(out.draws, out.chains);
    out.rhat = split_rhat(out.draws, out.chains);
  } else {
    out.ess = Eigen::VectorXd::Zero(dim);
    out.rhat = Eigen::VectorXd::Constant(dim, std::numeric_limits<double>::quiet_NaN());
  }
  out.wall_seconds = elapsed();
  return out;
}

// MAP-initialized posterior sampling with the module defaults.
inline PosteriorSamples sample_posterior(const InferenceTarget& target,
                                         const HmcConfig& cfg = {}) {
  return hmc_sample(target, cfg);
}

}  // namespace pkpd
