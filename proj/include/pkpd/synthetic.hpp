#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/basis.hpp"
#include "pkpd/mtl.hpp"
#include "pkpd/pd.hpp"
#include "pkpd/pk.hpp"
#include "pkpd/random.hpp"

namespace pkpd {

enum class Regime { high_low_high, low_high_low };

struct InfusionLevels {
  double high = 10.0;
  double low = 2.0;
  double changepoint_1 = 13.0;        // minutes
  double changepoint_2 = 27.0;        // minutes
  double changepoint_jitter = 1.0;    // uniform, minutes
  double level_jitter_sd = 0.1823215567939546;  // log(1.2), lognormal factor
};

// Three-phase step schedule with jittered switch times and levels. The draw
// order is fixed, so the two regimes produce mirrored schedules from the same
// generator state. Switch times past the duration are dropped.
inline InfusionSchedule make_infusion(Regime regime, double duration,
                                      const InfusionLevels& levels, Rng& rng) {
  const double c1 = levels.changepoint_1 +
                    runif(rng, -levels.changepoint_jitter, levels.changepoint_jitter);
  const double c2 = levels.changepoint_2 +
                    runif(rng, -levels.changepoint_jitter, levels.changepoint_jitter);
  double f[3];
  for (double& v : f) v = std::exp(rnorm(rng, 0.0, levels.level_jitter_sd));
  const bool hlh = regime == Regime::high_low_high;
  const double w0 = (hlh ? levels.high : levels.low) * f[0];
  const double w1 = (hlh ? levels.low : levels.high) * f[1];
  const double w2 = (hlh ? levels.high : levels.low) * f[2];

  InfusionSchedule sched;
  sched.duration = duration;
  sched.breakpoints = {0.0};
  sched.rates = {w0};
  if (c1 < duration) {
    sched.breakpoints.push_back(c1);
    sched.rates.push_back(w1);
  }
  if (c2 < duration && c2 > c1) {
    sched.breakpoints.push_back(c2);
    sched.rates.push_back(w2);
  }
  sched.validate();
  return sched;
}

struct PkRanges {
  double k10_lo = 0.08, k10_hi = 0.16;
  double k12_lo = 0.08, k12_hi = 0.15;
  double k21_lo = 0.04, k21_hi = 0.07;
  double k13_lo = 0.03, k13_hi = 0.05;
  double k31_lo = 0.002, k31_hi = 0.005;
  double v1_lo = 10.0, v1_hi = 20.0;
};

inline PkRates draw_pk(const PkRanges& r, Rng& rng) {
  PkRates p;
  p.k10 = runif(rng, r.k10_lo, r.k10_hi);
  p.k12 = runif(rng, r.k12_lo, r.k12_hi);
  p.k21 = runif(rng, r.k21_lo, r.k21_hi);
  p.k13 = runif(rng, r.k13_lo, r.k13_hi);
  p.k31 = runif(rng, r.k31_lo, r.k31_hi);
  p.v1 = runif(rng, r.v1_lo, r.v1_hi);
  return p;
}

struct CovariateSpec {
  int informative = 0;   // linear readouts of the true latent coordinates
  int noise = 0;         // pure standard-normal distractors
  double obs_sd = 0.3;   // observation noise on the informative readouts
};

struct CohortSpec {
  int n_tasks = 40;
  int k = 2;
  int d = 3;
  int L = 8;
  AlphaMode alpha_mode = AlphaMode::free_per_task;
  double dt = 0.25;                 // minutes
  int t_min = 108, t_max = 200;     // grid lengths, drawn uniformly
  int n_first_regime = -1;          // leading tasks get high-low-high; -1 = 18:22 ratio
  Eigen::VectorXd noise_sd;         // per channel; default {2.5, 3.0, 2.0}
  Eigen::VectorXd alpha_mean;       // per channel; default {90, 130, 70}
  double alpha_sd = 10.0;
  Eigen::VectorXd theta_total;      // mean response range; default {45, 55, 60}
  Eigen::VectorXd ke0;              // effect-site rates /min; default {0.5, 0.4, 0.8}
  double beta3_center = -2.0;
  double center_scale = 1.0;        // 0 pins the truth to f(Psi z) exactly
  bool center_in_span = false;      // make the center a direction of Psi itself
  double psi_scale = 1.0;           // multiplier on the deviation directions
  double missing_rate = 0.05;       // marginal intermittent-dropout fraction
  double missing_block_mean = 4.0;  // mean dropout run length, grid steps
  Eigen::VectorXd absent_channel_prob;  // whole-channel dropout; default {0,0,0.275}
  std::optional<BasisConfig> basis;  // default: the shared descending-sigmoid fit
  PkRanges pk;
  InfusionLevels levels;
  CovariateSpec covariates;
  std::uint64_t seed = 0;

  void fill_defaults() {
    if (n_first_regime < 0) n_first_regime = (n_tasks * 18 + 20) / 40;
    auto cycle = [&](Eigen::VectorXd& v, std::initializer_list<double> pattern) {
      if (v.size() != 0) return;
      v.resize(d);
      int i = 0;
      for (Eigen::Index j = 0; j < v.size(); ++j, ++i)
        v[j] = pattern.begin()[i % pattern.size()];
    };
    cycle(noise_sd, {2.5, 3.0, 2.0});
    cycle(alpha_mean, {90.0, 130.0, 70.0});
    cycle(theta_total, {45.0, 55.0, 60.0});
    cycle(ke0, {0.5, 0.4, 0.8});
    cycle(absent_channel_prob, {0.0, 0.0, 0.275});
  }

  void validate() const {
    if (n_tasks < 1 || k < 1 || d < 1 || L < 1 || !(dt > 0))
      throw std::invalid_argument("CohortSpec: bad dimensions");
    if (t_min < 2 || t_max < t_min) throw std::invalid_argument("CohortSpec: bad grid");
    if (n_first_regime < 0 || n_first_regime > n_tasks)
      throw std::invalid_argument("CohortSpec: bad regime split");
    if (noise_sd.size() != d || alpha_mean.size() != d || theta_total.size() != d ||
        ke0.size() != d || absent_channel_prob.size() != d)
      throw std::invalid_argument("CohortSpec: per-channel sizes must match d");
    if (!(missing_rate >= 0 && missing_rate < 1) || !(missing_block_mean >= 1))
      throw std::invalid_argument("CohortSpec: bad missingness");
  }
};

struct GroundTruth {
  Eigen::VectorXd v0;      // unconstrained center, layout d*(3+L)
  Eigen::MatrixXd Psi;     // deviation directions, p x k
  Eigen::MatrixXd Z;       // k x N true coordinates
  Eigen::MatrixXd Alpha;   // d x N true baselines
  Eigen::VectorXd tau;     // per-channel observation precision
  BasisConfig basis;
  std::vector<PkRates> pk;
  std::vector<InfusionSchedule> schedules;
  std::vector<Regime> regime;
  std::vector<PdParams> params;  // realized per-task parameters
};

struct SyntheticCohort {
  std::vector<Task> tasks;
  GroundTruth truth;
};

namespace detail {

inline void apply_block_missingness(ObservedMask& mask, Eigen::Index channel,
                                    double rate, double mean_len, Rng& rng) {
  if (rate <= 0) return;
  const double p_cont = 1.0 - 1.0 / mean_len;
  const double p_start = rate / (mean_len * (1.0 - rate));
  bool in_block = false;
  for (Eigen::Index t = 0; t < mask.rows(); ++t) {
    if (in_block)
      in_block = runif(rng, 0.0, 1.0) < p_cont;
    else
      in_block = runif(rng, 0.0, 1.0) < p_start;
    if (in_block) mask(t, channel) = false;
  }
}

}  // namespace detail

// Draws a cohort from a low-rank ground truth: per-task pharmacokinetics feed
// a shared-subspace response model, with per-task baselines, channel noise,
// intermittent dropout, and optionally whole channels missing.
inline SyntheticCohort generate_cohort(CohortSpec spec) {
  spec.fill_defaults();
  spec.validate();
  const int d = spec.d, L = spec.L, k = spec.k, N = spec.n_tasks;
  const bool alpha_in = spec.alpha_mode == AlphaMode::in_subspace;
  const int blk = 3 + L + (alpha_in ? 1 : 0);
  const int p = d * blk;

  SyntheticCohort out;
  GroundTruth& truth = out.truth;
  truth.basis = spec.basis ? *spec.basis : default_basis(L);
  if (truth.basis.L != L)
    throw std::invalid_argument("generate_cohort: basis size must match L");
  truth.tau = spec.noise_sd.array().square().inverse();

  // Population center: unit steady-state concentration gain, channel-typical
  // effect-site decay, shared response shift, equal weight per component.
  truth.v0.resize(p);
  for (int j = 0; j < d; ++j) {
    const int base = j * blk;
    const auto [b1, b2] = discretize_effect_site(spec.ke0[j], spec.ke0[j], spec.dt);
    truth.v0[base] = inv_softplus(b1);
    truth.v0[base + 1] = logit(b2);
    truth.v0[base + 2] = spec.beta3_center;
    for (int r = 0; r < L; ++r)
      truth.v0[base + 3 + r] = inv_softplus(spec.theta_total[j] / L);
    if (alpha_in) truth.v0[base + 3 + L] = spec.alpha_mean[j];
  }
  truth.v0 *= spec.center_scale;

  // Deviation directions, scaled per coordinate kind. With center_in_span the
  // first direction is the center itself, so the whole truth family lies in a
  // rank-k linear subspace and a k-column fit can represent it exactly.
  Rng cohort_rng(derive_seed(spec.seed, 0x636f686f7274ULL));
  truth.Psi.resize(p, k);
  const int a0 = spec.center_in_span ? 1 : 0;
  if (spec.center_in_span) {
    const double norm = truth.v0.norm();
    if (!(norm > 0))
      throw std::invalid_argument("generate_cohort: center_in_span needs a nonzero center");
    truth.Psi.col(0) = truth.v0 / norm;
  }
  for (int j = 0; j < d; ++j) {
    const int base = j * blk;
    auto scale_of = [&](int offset) {
      if (offset == 0) return 0.3;                  // beta1
      if (offset == 1) return 0.3;                  // beta2
      if (offset == 2) return 0.5;                  // beta3
      if (offset == 3 + L) return spec.alpha_sd;    // baseline, in-subspace mode
      return 0.3;                                   // theta
    };
    for (int o = 0; o < blk; ++o)
      for (int a = a0; a < k; ++a)
        truth.Psi(base + o, a) =
            rnorm(cohort_rng, 0.0, spec.psi_scale * scale_of(o) / std::sqrt(k));
  }

  Eigen::MatrixXd cov_map;
  if (spec.covariates.informative > 0)
    cov_map = rnorm_matrix(cohort_rng, spec.covariates.informative, k, 0.0, 1.0);

  const TransformSpec tf = TransformSpec::standard(d, L, alpha_in);
  truth.Z.resize(k, N);
  truth.Alpha.resize(d, N);

  for (int i = 0; i < N; ++i) {
    Rng rng(derive_seed(spec.seed, 1000 + i));
    Task task;
    task.id = "task" + std::string(i < 9 ? "0" : "") + std::to_string(i + 1);
    task.dt = spec.dt;

    const int T = runif_int(rng, spec.t_min, spec.t_max);
    const Regime regime =
        i < spec.n_first_regime ? Regime::high_low_high : Regime::low_high_low;
    const double duration = (T - 1) * spec.dt;
    const InfusionSchedule sched = make_infusion(regime, duration, spec.levels, rng);
    const PkRates pk = draw_pk(spec.pk, rng);
    const ConcentrationSeries conc = solve_pk(pk, sched, spec.dt);
    task.u = conc.values;
    if (task.u.size() != T)
      throw std::logic_error("generate_cohort: grid length mismatch");

    // Latent draw with a guard against degenerate realizations.
    Eigen::VectorXd z, alpha;
    PdParams params;
    PdStates st;
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      z = rnorm_vector(rng, k, 0.0, 1.0);
      if (alpha_in) {
        alpha.resize(0);
      } else {
        alpha.resize(d);
        for (int j = 0; j < d; ++j)
          alpha[j] = rnorm(rng, spec.alpha_mean[j], spec.alpha_sd);
      }
      params = tf.unpack(tf.forward(truth.v0 + truth.Psi * z), alpha);
      st = simulate(params, truth.basis, task.u);
      ok = st.mean.allFinite() && st.mean.cwiseAbs().maxCoeff() < 1e5;
    }
    if (!ok) throw std::runtime_error("generate_cohort: no usable latent draw");

    task.y = add_noise(st.mean, truth.tau, rng);
    task.observed = ObservedMask::Constant(T, d, true);
    for (int j = 0; j < d; ++j) {
      if (runif(rng, 0.0, 1.0) < spec.absent_channel_prob[j]) {
        task.observed.col(j).setConstant(false);
        continue;
      }
      detail::apply_block_missingness(task.observed, j, spec.missing_rate,
                                      spec.missing_block_mean, rng);
    }

    const int q = spec.covariates.informative + spec.covariates.noise;
    if (q > 0) {
      task.covariates.resize(q);
      for (int m = 0; m < spec.covariates.informative; ++m) {
        task.covariates[m] =
            cov_map.row(m).dot(z) + rnorm(rng, 0.0, spec.covariates.obs_sd);
        task.covariate_names.push_back("x" + std::to_string(m + 1));
      }
      for (int m = 0; m < spec.covariates.noise; ++m) {
        task.covariates[spec.covariates.informative + m] = rnorm(rng, 0.0, 1.0);
        task.covariate_names.push_back("noise" + std::to_string(m + 1));
      }
    }

    task.validate();
    out.tasks.push_back(std::move(task));
    truth.Z.col(i) = z;
    truth.Alpha.col(i) = params.alpha;
    truth.pk.push_back(pk);
    truth.schedules.push_back(sched);
    truth.regime.push_back(regime);
    truth.params.push_back(params);
  }
  return out;
}

}  // namespace pkpd
