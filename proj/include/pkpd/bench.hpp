#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/inference.hpp"
#include "pkpd/learning.hpp"
#include "pkpd/prediction.hpp"

namespace pkpd {

enum class Alternative { two_sided, less, greater };

struct WilcoxonResult {
  double statistic = 0.0;  // rank sum of the positive differences
  double p_value = 1.0;
  int n_effective = 0;     // pairs left after dropping zeros and non-finite
  bool exact = false;
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

}  // namespace detail

// Paired signed-rank test on precomputed differences. Zero and non-finite
// differences are dropped. Small samples get the exact null distribution by
// dynamic programming over doubled average ranks (ties included); larger ones
// the tie-corrected normal approximation with continuity correction.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& diffs,
                                           Alternative alt = Alternative::two_sided,
                                           int exact_limit = 25) {
  std::vector<double> d;
  for (double v : diffs)
    if (std::isfinite(v) && v != 0.0) d.push_back(v);
  WilcoxonResult out;
  out.n_effective = static_cast<int>(d.size());
  if (d.empty()) return out;  // no evidence either way
  const int n = out.n_effective;

  // Average ranks of |d|, doubled so ties stay integral.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<long> rank2(n);
  std::vector<int> tie_sizes;
  for (int i = 0; i < n;) {
    int j = i;
    while (j < n && std::abs(d[order[j]]) == std::abs(d[order[i]])) ++j;
    // Positions i..j-1 share the average of ranks i+1..j, doubled: (i+1)+j.
    for (int s = i; s < j; ++s) rank2[order[s]] = i + 1 + j;
    tie_sizes.push_back(j - i);
    i = j;
  }

  long w2 = 0;  // doubled statistic
  for (int i = 0; i < n; ++i)
    if (d[i] > 0) w2 += rank2[i];
  out.statistic = 0.5 * w2;

  if (n <= exact_limit) {
    out.exact = true;
    const long total = static_cast<long>(n) * (n + 1);  // sum of doubled ranks
    std::vector<double> count(total + 1, 0.0);
    count[0] = 1.0;
    for (int i = 0; i < n; ++i)
      for (long s = total; s >= rank2[i]; --s) count[s] += count[s - rank2[i]];
    const double denom = std::pow(2.0, n);
    double p_le = 0.0, p_ge = 0.0;
    for (long s = 0; s <= total; ++s) {
      if (s <= w2) p_le += count[s];
      if (s >= w2) p_ge += count[s];
    }
    p_le /= denom;
    p_ge /= denom;
    switch (alt) {
      case Alternative::less: out.p_value = std::min(1.0, p_le); break;
      case Alternative::greater: out.p_value = std::min(1.0, p_ge); break;
      default: out.p_value = std::min(1.0, 2.0 * std::min(p_le, p_ge));
    }
    return out;
  }

  const double w = 0.5 * w2;
  const double mean = n * (n + 1) / 4.0;
  double var = n * (n + 1) * (2.0 * n + 1) / 24.0;
  for (int t : tie_sizes) var -= (static_cast<double>(t) * t * t - t) / 48.0;
  const double sd = std::sqrt(std::max(var, 1e-300));
  switch (alt) {
    case Alternative::less:
      out.p_value = detail::normal_cdf((w - mean + 0.5) / sd);
      break;
    case Alternative::greater:
      out.p_value = 1.0 - detail::normal_cdf((w - mean - 0.5) / sd);
      break;
    default: {
      const double z = (std::abs(w - mean) - 0.5) / sd;
      out.p_value = std::min(1.0, 2.0 * (1.0 - detail::normal_cdf(std::max(z, 0.0))));
    }
  }
  return out;
}

inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x,
                                           const std::vector<double>& y,
                                           Alternative alt = Alternative::two_sided,
                                           int exact_limit = 25) {
  if (x.size() != y.size())
    throw std::invalid_argument("wilcoxon_signed_rank: length mismatch");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  return wilcoxon_signed_rank(d, alt, exact_limit);
}

enum class BenchModel { mtl, stl, cohort, task_descriptor };

inline const char* bench_model_name(BenchModel m) {
  switch (m) {
    case BenchModel::mtl: return "mtl";
    case BenchModel::stl: return "stl";
    case BenchModel::cohort: return "cohort";
    default: return "task-d";
  }
}

struct BenchConfig {
  std::vector<BenchModel> models = {BenchModel::mtl, BenchModel::stl,
                                    BenchModel::cohort};
  std::vector<int> prefixes;          // fixed prefix lengths; empty = per-task auto
  std::vector<int> horizons = {20, 40};
  TrainConfig train;
  HmcConfig hmc;
  PreprocessFlags preprocess;
  double interval = 0.9;
  bool observation_noise_intervals = false;
  double stl_budget_factor = 10.0;    // wall-clock multiple of the matching run
  double stl_prior_sd = 100.0;
  bool oracle = true;
  bool retrospective = true;
  bool nll = true;
  std::uint64_t seed = 0;
  int max_folds = 0;                  // 0 = every task once
  int max_draws = 0;                  // prediction draws cap, 0 = all
};

struct BenchRow {
  std::string task_id;
  std::string model;
  int prefix = 0, horizon = 0, channel = 0;
  double pred = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  double y = std::numeric_limits<double>::quiet_NaN();
  double abs_error = std::numeric_limits<double>::quiet_NaN();
  bool observed = false;
  bool covered = false;
};

struct BenchNllRow {
  std::string task_id;
  std::string model;
  int prefix = 0, channel = 0, n_points = 0;
  double nll = std::numeric_limits<double>::quiet_NaN();
  double nll_ref = std::numeric_limits<double>::quiet_NaN();
  double tau = std::numeric_limits<double>::quiet_NaN();
};

struct BenchRetroRow {
  std::string task_id;
  std::string model;
  int prefix = 0, n_points = 0;
  double rmse = std::numeric_limits<double>::quiet_NaN();
};

struct BenchComparison {
  std::string model_a, model_b;
  int horizon = 0;
  int n_pairs = 0;
  double mean_diff = std::numeric_limits<double>::quiet_NaN();  // score_a - score_b
  double p_two_sided = 1.0;
  double p_a_less_b = 1.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<BenchNllRow> nll_rows;
  std::vector<BenchRetroRow> retro_rows;
  std::vector<BenchComparison> comparisons;
  std::vector<std::string> errors;
  std::vector<std::string> stl_truncated;  // folds where the budget bit
  std::map<std::string, double> wall_seconds;
  std::map<std::string, double> min_ess;   // worst coordinate over all runs
  int n_folds = 0;
};

struct BenchAggregate {
  double mean_abs_error = std::numeric_limits<double>::quiet_NaN();
  double median_abs_error = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  int n = 0;
};

inline BenchAggregate aggregate_rows(const BenchReport& report, const std::string& model,
                                     int horizon) {
  std::vector<double> errs;
  int covered = 0;
  for (const BenchRow& r : report.rows) {
    if (r.model != model || r.horizon != horizon || !r.observed) continue;
    if (!std::isfinite(r.abs_error)) continue;
    errs.push_back(r.abs_error);
    if (r.covered) ++covered;
  }
  BenchAggregate out;
  out.n = static_cast<int>(errs.size());
  if (out.n == 0) return out;
  double s = 0.0;
  for (double e : errs) s += e;
  out.mean_abs_error = s / out.n;
  std::sort(errs.begin(), errs.end());
  out.median_abs_error = out.n % 2 == 1
                             ? errs[out.n / 2]
                             : 0.5 * (errs[out.n / 2 - 1] + errs[out.n / 2]);
  out.coverage = static_cast<double>(covered) / out.n;
  return out;
}

// Per-task mean absolute error for one model at one horizon, the pairing unit
// for the signed-rank comparisons.
inline std::map<std::string, double> per_task_scores(const BenchReport& report,
                                                     const std::string& model,
                                                     int horizon) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const BenchRow& r : report.rows) {
    if (r.model != model || r.horizon != horizon || !r.observed) continue;
    if (!std::isfinite(r.abs_error)) continue;
    auto& slot = acc[r.task_id];
    slot.first += r.abs_error;
    slot.second += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [id, s] : acc) out[id] = s.first / s.second;
  return out;
}

inline void compute_comparisons(BenchReport& report,
                                const std::vector<std::string>& models,
                                const std::vector<int>& horizons) {
  report.comparisons.clear();
  for (std::size_t a = 0; a < models.size(); ++a)
    for (std::size_t b = a + 1; b < models.size(); ++b)
      for (int h : horizons) {
        const auto sa = per_task_scores(report, models[a], h);
        const auto sb = per_task_scores(report, models[b], h);
        std::vector<double> da, db;
        for (const auto& [id, va] : sa) {
          const auto it = sb.find(id);
          if (it == sb.end()) continue;
          da.push_back(va);
          db.push_back(it->second);
        }
        BenchComparison cmp;
        cmp.model_a = models[a];
        cmp.model_b = models[b];
        cmp.horizon = h;
        cmp.n_pairs = static_cast<int>(da.size());
        if (!da.empty()) {
          double s = 0.0;
          for (std::size_t i = 0; i < da.size(); ++i) s += da[i] - db[i];
          cmp.mean_diff = s / da.size();
          cmp.p_two_sided = wilcoxon_signed_rank(da, db, Alternative::two_sided).p_value;
          cmp.p_a_less_b = wilcoxon_signed_rank(da, db, Alternative::less).p_value;
        }
        report.comparisons.push_back(cmp);
      }
}

namespace detail {

inline std::vector<int> auto_prefixes(const Task& task, const BenchConfig& cfg) {
  const int T = task.length();
  const int max_h = cfg.horizons.empty()
                        ? 0
                        : *std::max_element(cfg.horizons.begin(), cfg.horizons.end());
  std::vector<int> out;
  const int floor_t = cfg.preprocess.initial_discard + 4 * cfg.preprocess.downsample;
  for (int t : {T / 2, 2 * T / 3}) {
    t = std::min(t, T - max_h);
    t = std::max(t, floor_t);
    if (t >= floor_t && t + max_h <= T && (out.empty() || t != out.back()))
      out.push_back(t);
  }
  return out;
}

inline void add_prediction_rows(BenchReport& report, const std::string& model,
                                const Task& full, int prefix,
                                const PredictResult& pred) {
  for (std::size_t h = 0; h < pred.horizons.size(); ++h)
    for (int j = 0; j < full.channels(); ++j) {
      BenchRow row;
      row.task_id = full.id;
      row.model = model;
      row.prefix = prefix;
      row.horizon = pred.horizons[h];
      row.channel = j;
      row.pred = pred.mean(h, j);
      row.lo = pred.lo(h, j);
      row.hi = pred.hi(h, j);
      row.y = pred.y_true(h, j);
      row.observed = std::isfinite(row.y);
      if (row.observed) {
        row.abs_error = std::abs(row.pred - row.y);
        row.covered = row.y >= row.lo && row.y <= row.hi;
      }
      report.rows.push_back(row);
    }
}

}  // namespace detail

// Hindsight floor: an unpooled fit of the complete trajectory under an
// essentially flat prior, evaluated at the same cells the forecasters are
// scored on. No forecaster sees the future, so this is the error level left
// over when estimation, not extrapolation, is the only difficulty.
inline void run_oracle(BenchReport& report, const Task& full_task,
                       const std::vector<int>& prefixes, const BasisConfig& basis,
                       const BenchConfig& cfg) {
  const Eigen::VectorXd tau = Eigen::VectorXd::Ones(full_task.channels());
  const MtlModel model = make_stl_model(basis, full_task.channels(), tau, 1e4);
  const InferenceTarget target =
      InferenceTarget::for_task(model, full_task, cfg.train.sim);
  const MapResult mode = map_estimate(target, 3, derive_seed(cfg.seed, 0x6f7261ULL));
  const PdParams params = target.decode_point(mode.w);
  const PdStates st = simulate(params, model.basis, full_task.u, cfg.train.sim);

  for (int prefix : prefixes)
    for (int h : cfg.horizons) {
      const int idx = prefix - 1 + h;
      if (idx < 0 || idx >= full_task.length()) continue;
      for (int j = 0; j < full_task.channels(); ++j) {
        BenchRow row;
        row.task_id = full_task.id;
        row.model = "oracle";
        row.prefix = prefix;
        row.horizon = h;
        row.channel = j;
        row.pred = st.mean(idx, j);
        row.lo = row.hi = row.pred;
        if (full_task.observed(idx, j)) {
          row.y = full_task.y(idx, j);
          row.observed = true;
          row.abs_error = std::abs(row.pred - row.y);
        }
        report.rows.push_back(row);
      }
    }
}

// Leave-one-out benchmark: refit the pooling models without the held-out
// task, run posterior inference on its masked prefix, score forecasts at the
// configured horizons, and compare models by paired signed-rank tests.
inline BenchReport run_loo(const std::vector<Task>& tasks, const BasisConfig& basis,
                           const BenchConfig& cfg) {
  if (tasks.size() < 3) throw std::invalid_argument("run_loo: need at least 3 tasks");
  BenchReport report;
  const int n_folds = cfg.max_folds > 0
                          ? std::min<int>(cfg.max_folds, tasks.size())
                          : static_cast<int>(tasks.size());
  report.n_folds = n_folds;

  const bool need_mtl =
      std::count(cfg.models.begin(), cfg.models.end(), BenchModel::mtl) > 0;
  const bool need_cohort =
      std::count(cfg.models.begin(), cfg.models.end(), BenchModel::cohort) > 0 ||
      std::count(cfg.models.begin(), cfg.models.end(), BenchModel::stl) > 0;
  const bool need_descriptor =
      std::count(cfg.models.begin(), cfg.models.end(), BenchModel::task_descriptor) > 0;

  for (int fold = 0; fold < n_folds; ++fold) {
    const Task& held_out = tasks[fold];
    std::vector<Task> train;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (static_cast<int>(i) != fold) train.push_back(tasks[i]);

    MtlFit mtl_fit, cohort_fit, td_fit;
    try {
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(cfg.seed, 10000 + fold);
      if (need_mtl) {
        const auto t0 = std::chrono::steady_clock::now();
        mtl_fit = fit_mtl(train, basis, tc);
        report.wall_seconds["mtl-train"] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        for (const std::string& id : mtl_fit.report.trained_task_ids)
          if (id == held_out.id)
            throw std::logic_error("run_loo: held-out task leaked into training");
        for (const std::string& id : mtl_fit.report.holdout_task_ids)
          if (id == held_out.id)
            throw std::logic_error("run_loo: held-out task leaked into early stopping");
      }
      if (need_cohort) {
        const auto t0 = std::chrono::steady_clock::now();
        cohort_fit = fit_cohort(train, basis, tc);
        report.wall_seconds["cohort-train"] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        for (const std::string& id : cohort_fit.report.trained_task_ids)
          if (id == held_out.id)
            throw std::logic_error("run_loo: held-out task leaked into training");
      }
      if (need_descriptor) {
        const auto t0 = std::chrono::steady_clock::now();
        td_fit = fit_task_descriptor(train, basis, tc);
        report.wall_seconds["task-d-train"] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        for (const std::string& id : td_fit.report.trained_task_ids)
          if (id == held_out.id)
            throw std::logic_error("run_loo: held-out task leaked into training");
      }
    } catch (const std::logic_error&) {
      throw;  // leakage is a bug, never a recoverable cell failure
    } catch (const std::exception& e) {
      report.errors.push_back("fold " + held_out.id + " train: " + e.what());
      continue;
    }

    std::vector<int> prefixes = cfg.prefixes;
    if (prefixes.empty()) prefixes = detail::auto_prefixes(held_out, cfg);

    for (int prefix : prefixes) {
      const Task pre = preprocess_prefix(held_out, prefix, cfg.preprocess);
      double mtl_wall = 0.0;

      for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
        const BenchModel m = cfg.models[mi];
        const std::string label = bench_model_name(m);
        try {
          InferenceTarget target;
          HmcConfig hc = cfg.hmc;
          hc.seed = derive_seed(cfg.seed, 20000 + fold * 1000003ULL + prefix * 101 + mi);
          switch (m) {
            case BenchModel::mtl:
              target = InferenceTarget::for_task(mtl_fit.model, pre, cfg.train.sim);
              break;
            case BenchModel::task_descriptor: {
              const Eigen::VectorXd z =
                  task_descriptor_codes(td_fit.model.cov_std, pre);
              target = InferenceTarget::for_descriptor(td_fit.model, pre, z,
                                                       cfg.train.sim);
              break;
            }
            case BenchModel::cohort:
              target = InferenceTarget::for_cohort(cohort_fit.model, pre, cfg.train.sim);
              break;
            case BenchModel::stl: {
              const MtlModel stl_model = make_stl_model(
                  basis, held_out.channels(), cohort_fit.model.tau, cfg.stl_prior_sd);
              target = InferenceTarget::for_task(stl_model, pre, cfg.train.sim);
              if (cfg.stl_budget_factor > 0 && mtl_wall > 0)
                hc.deadline_seconds = cfg.stl_budget_factor * mtl_wall;
              break;
            }
          }

          const PosteriorSamples samples = hmc_sample(target, hc);
          report.wall_seconds[label] += samples.wall_seconds;
          if (m == BenchModel::mtl) mtl_wall = samples.wall_seconds;
          if (m == BenchModel::stl && samples.truncated)
            report.stl_truncated.push_back(held_out.id + "@" +
                                           std::to_string(prefix));
          if (samples.ess.size() > 0) {
            const double worst = samples.ess.minCoeff();
            auto it = report.min_ess.find(label);
            if (it == report.min_ess.end() || worst < it->second)
              report.min_ess[label] = worst;
          }

          const auto curves =
              posterior_curves(target, samples, held_out.u, cfg.max_draws);
          PredictConfig pc;
          pc.horizons = cfg.horizons;
          pc.interval = cfg.interval;
          pc.observation_noise = cfg.observation_noise_intervals;
          const PredictResult pred =
              summarize_horizons(curves, held_out, prefix, target.model.tau, pc);
          detail::add_prediction_rows(report, label, held_out, prefix, pred);

          if (cfg.retrospective) {
            const RetroFit retro = retrospective_fit(
                curves, held_out, prefix, cfg.preprocess.initial_discard);
            BenchRetroRow rr;
            rr.task_id = held_out.id;
            rr.model = label;
            rr.prefix = prefix;
            rr.rmse = retro.rmse;
            rr.n_points = retro.n_points;
            report.retro_rows.push_back(rr);
          }
          if (cfg.nll) {
            const int max_h =
                *std::max_element(cfg.horizons.begin(), cfg.horizons.end());
            for (int j = 0; j < held_out.channels(); ++j) {
              const NllResult nll = window_nll_bound(
                  curves, held_out, prefix, max_h, j,
                  detail::tau_for(target.model.tau, j));
              if (nll.n_points == 0) continue;
              BenchNllRow nr;
              nr.task_id = held_out.id;
              nr.model = label;
              nr.prefix = prefix;
              nr.channel = j;
              nr.n_points = nll.n_points;
              nr.nll = nll.nll;
              nr.nll_ref = nll.nll_ref;
              nr.tau = nll.tau;
              report.nll_rows.push_back(nr);
            }
          }
        } catch (const std::logic_error&) {
          throw;
        } catch (const std::exception& e) {
          report.errors.push_back("fold " + held_out.id + " prefix " +
                                  std::to_string(prefix) + " " + label + ": " +
                                  e.what());
        }
      }

      if (cfg.oracle) {
        try {
          run_oracle(report, held_out, {prefix}, basis, cfg);
        } catch (const std::exception& e) {
          report.errors.push_back("fold " + held_out.id + " oracle: " + e.what());
        }
      }
    }
  }

  std::vector<std::string> labels;
  for (BenchModel m : cfg.models) labels.push_back(bench_model_name(m));
  compute_comparisons(report, labels, cfg.horizons);
  return report;
}

}  // namespace pkpd
