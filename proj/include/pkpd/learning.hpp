#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pkpd/mtl.hpp"
#include "pkpd/optim.hpp"
#include "pkpd/random.hpp"

namespace pkpd {

struct TrainConfig {
  int k = 2;
  AlphaMode alpha_mode = AlphaMode::free_per_task;
  bool per_channel_tau = true;
  int max_epochs = 4000;
  double lr_psi = 1e-2;
  double lr_z = 1e-2;
  double lr_alpha = 0.1;
  double lr_decay = 0.5;        // step factor applied when training stalls
  int plateau_patience = 300;   // epochs without improvement before decaying
  double plateau_rtol = 1e-6;   // relative SSE drop that counts as progress
  double lr_floor = 1e-5;       // stop decaying below this psi step
  int tau_update_every = 10;
  int rescale_every = 10;
  bool early_stop = true;
  int holdout_tasks = 2;
  int eval_every = 10;       // holdout evaluation cadence, in epochs
  int patience = 20;         // stale evaluations before stopping
  double psi_init_sd = 0.1;
  double alpha_prior_sd = 100.0;
  std::uint64_t seed = 0;
  SimulateOptions sim;
  double deadline_seconds = 0.0;  // 0 = unlimited
};

struct FitReport {
  int epochs = 0;
  double objective = 0.0;          // final joint log density over trained tasks
  std::vector<double> trace;       // objective per epoch
  std::vector<std::string> trained_task_ids;
  std::vector<std::string> holdout_task_ids;
  bool early_stopped = false;
  bool deadline_hit = false;
  double wall_seconds = 0.0;
  double holdout_rmse = std::numeric_limits<double>::quiet_NaN();
};

// Fitted model plus latent coordinates for every input task, in input order.
// Early-stopping holdout tasks get posterior-mode coordinates under the final
// model; they never contribute to the shared-parameter gradients.
struct MtlFit {
  MtlModel model;
  Eigen::MatrixXd Z;      // k x N
  Eigen::MatrixXd Alpha;  // d x N (zero-size when alpha is in the subspace)
  std::vector<std::string> task_ids;
  FitReport report;
};

// Unit-RMS latent coordinates with the scale folded into Psi; Psi * z is
// preserved coordinate by coordinate.
inline void rescale_latents(Eigen::MatrixXd& Psi, Eigen::MatrixXd& Z,
                            double eps = 1e-12) {
  if (Z.cols() == 0) return;
  for (Eigen::Index a = 0; a < Z.rows(); ++a) {
    const double rms = std::sqrt(Z.row(a).squaredNorm() / Z.cols());
    if (rms < eps) continue;
    Z.row(a) /= rms;
    Psi.col(a) *= rms;
  }
}

// Posterior mode of one task's latent coordinates under a frozen model.
struct TaskMap {
  Eigen::VectorXd z;
  Eigen::VectorXd alpha;  // empty when alpha is in the subspace
  double log_post = 0.0;
  bool converged = false;
};

inline TaskMap fit_task_map(const MtlModel& model, const Task& task,
                            const Eigen::VectorXd& z0, const Eigen::VectorXd& alpha0,
                            const SimulateOptions& opts = {}, int max_iters = 200) {
  const bool ain = model.alpha_mode == AlphaMode::in_subspace;
  const int k = model.k;
  const int d = model.d;
  if (z0.size() != k) throw std::invalid_argument("fit_task_map: z0 size mismatch");
  if (!ain && alpha0.size() != d)
    throw std::invalid_argument("fit_task_map: alpha0 size mismatch");

  const std::vector<Task> one{task};
  JointGrad jg;
  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& grad) -> double {
    Eigen::MatrixXd Z = w.head(k);
    Eigen::MatrixXd A = ain ? Eigen::MatrixXd() : Eigen::MatrixXd(w.tail(d));
    const double lp = grad_joint(model, one, Z, A, jg, opts);
    grad.head(k) = -jg.dZ.col(0);
    if (!ain) grad.tail(d) = -jg.dAlpha.col(0);
    return -lp;
  };

  Eigen::VectorXd w0(ain ? k : k + d);
  w0.head(k) = z0;
  if (!ain) w0.tail(d) = alpha0;
  LbfgsOptions lo;
  lo.max_iters = max_iters;
  lo.grad_tol = 1e-6;
  const LbfgsResult res = lbfgs_minimize(objective, w0, lo);

  TaskMap out;
  out.z = res.x.head(k);
  if (!ain) out.alpha = res.x.tail(d);
  out.log_post = -res.fx;
  out.converged = res.converged;
  return out;
}

namespace detail {

// Per-task baseline estimate: mean observed response before the first input,
// falling back to the cohort-wide channel mean.
inline Eigen::MatrixXd init_alpha(const std::vector<Task>& tasks) {
  const int d = tasks.front().channels();
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  Eigen::VectorXd grand = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd grand_n = Eigen::VectorXd::Zero(d);
  for (const Task& t : tasks)
    for (Eigen::Index i = 0; i < t.y.rows(); ++i)
      for (int j = 0; j < d; ++j)
        if (t.observed(i, j)) {
          grand[j] += t.y(i, j);
          grand_n[j] += 1;
        }
  for (int j = 0; j < d; ++j) grand[j] = grand_n[j] > 0 ? grand[j] / grand_n[j] : 0.0;

  Eigen::MatrixXd alpha(d, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const Task& t = tasks[i];
    Eigen::Index first_u = t.u.size();
    for (Eigen::Index s = 0; s < t.u.size(); ++s)
      if (t.u[s] != 0.0) {
        first_u = s;
        break;
      }
    for (int j = 0; j < d; ++j) {
      double sum = 0.0;
      int n = 0;
      for (Eigen::Index s = 0; s < first_u; ++s)
        if (t.observed(s, j)) {
          sum += t.y(s, j);
          ++n;
        }
      alpha(j, i) = n > 0 ? sum / n : grand[j];
    }
  }
  return alpha;
}

inline void training_sse(const MtlModel& model, const std::vector<Task>& tasks,
                         const std::vector<int>& idx, const Eigen::MatrixXd& Z,
                         const Eigen::MatrixXd& Alpha, const SimulateOptions& opts,
                         Eigen::VectorXd& sse, Eigen::VectorXi& count) {
  sse = Eigen::VectorXd::Zero(model.d);
  count = Eigen::VectorXi::Zero(model.d);
  const bool ain = model.alpha_mode == AlphaMode::in_subspace;
  for (int i : idx) {
    const Eigen::VectorXd alpha_i = ain ? Eigen::VectorXd() : Alpha.col(i).eval();
    const PdParams params = decode(model, Z.col(i), alpha_i);
    sse_observed(params, model.basis, tasks[i], sse, count, opts);
  }
}

inline Eigen::VectorXd closed_form_tau(const MtlModel& model,
                                       const std::vector<Task>& tasks,
                                       const std::vector<int>& idx,
                                       const Eigen::MatrixXd& Z,
                                       const Eigen::MatrixXd& Alpha,
                                       const SimulateOptions& opts, bool per_channel) {
  const int d = model.d;
  Eigen::VectorXd sse;
  Eigen::VectorXi count;
  training_sse(model, tasks, idx, Z, Alpha, opts, sse, count);
  if (per_channel) {
    Eigen::VectorXd tau(d);
    for (int j = 0; j < d; ++j)
      tau[j] = (count[j] > 0 && sse[j] > 0) ? count[j] / sse[j] : 1.0;
    return tau;
  }
  Eigen::VectorXd tau(1);
  const double s = sse.sum();
  const int n = count.sum();
  tau[0] = (n > 0 && s > 0) ? n / s : 1.0;
  return tau;
}

inline double observed_rmse(const PdParams& params, const BasisConfig& basis,
                            const Task& task, const SimulateOptions& opts) {
  Eigen::VectorXd sse = Eigen::VectorXd::Zero(params.channels());
  Eigen::VectorXi count = Eigen::VectorXi::Zero(params.channels());
  sse_observed(params, basis, task, sse, count, opts);
  const int n = count.sum();
  return n > 0 ? std::sqrt(sse.sum() / n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

// Full-batch joint ascent on (Psi, Z, Alpha) with periodic closed-form
// precision updates and latent rescaling. A few tasks can be held out from
// the shared-parameter gradients to drive early stopping on their
// posterior-mode fit error.
inline MtlFit fit_mtl(const std::vector<Task>& tasks, const BasisConfig& basis,
                      const TrainConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("fit_mtl: no tasks");
  const int d = tasks.front().channels();
  const int L = basis.L;
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  for (const Task& t : tasks) {
    t.validate();
    if (t.channels() != d) throw std::invalid_argument("fit_mtl: ragged channel counts");
  }
  if (cfg.k < 1) throw std::invalid_argument("fit_mtl: k must be >= 1");

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  const bool ain = cfg.alpha_mode == AlphaMode::in_subspace;
  Rng rng(derive_seed(cfg.seed, 0x6d746cULL));

  MtlModel model;
  model.k = cfg.k;
  model.d = d;
  model.L = L;
  model.alpha_mode = cfg.alpha_mode;
  model.basis = basis;
  model.alpha_prior_sd = cfg.alpha_prior_sd;
  model.Psi = rnorm_matrix(rng, d * (3 + L + (ain ? 1 : 0)), cfg.k, 0.0, cfg.psi_init_sd);

  Eigen::MatrixXd alpha0 = detail::init_alpha(tasks);
  if (ain) {
    // Baselines reach the response only through Psi * z, so seed the first
    // latent direction with the cohort-wide channel means; a small move of
    // z_1 toward 1 then puts every task near the right baseline.
    const TransformSpec spec = model.spec();
    const Eigen::VectorXd mean_alpha = alpha0.rowwise().mean();
    for (int j = 0; j < d; ++j) model.Psi(j * spec.block() + 3 + L, 0) = mean_alpha[j];
  }

  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(cfg.k, N);
  Eigen::MatrixXd Alpha = ain ? Eigen::MatrixXd() : alpha0;

  // Initial precision from residuals around the baseline estimate.
  {
    Eigen::VectorXd sse = Eigen::VectorXd::Zero(d);
    Eigen::VectorXi count = Eigen::VectorXi::Zero(d);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index t = 0; t < tasks[i].y.rows(); ++t)
        for (int j = 0; j < d; ++j)
          if (tasks[i].observed(t, j)) {
            const double r = tasks[i].y(t, j) - alpha0(j, i);
            sse[j] += r * r;
            count[j] += 1;
          }
    model.tau = cfg.per_channel_tau ? Eigen::VectorXd::Ones(d) : Eigen::VectorXd::Ones(1);
    for (Eigen::Index j = 0; j < model.tau.size(); ++j) {
      const double s = cfg.per_channel_tau ? sse[j] : sse.sum();
      const double n = cfg.per_channel_tau ? count[j] : count.sum();
      if (n > 0 && s > 0) model.tau[j] = n / s;
    }
  }
  model.validate();

  // Holdout selection for early stopping.
  std::vector<int> all_idx(N);
  std::iota(all_idx.begin(), all_idx.end(), 0);
  int n_holdout = cfg.early_stop ? cfg.holdout_tasks : 0;
  n_holdout = std::min<int>(n_holdout, std::max<int>(0, static_cast<int>(N) - 2));
  std::vector<int> holdout_idx, train_idx;
  {
    std::vector<int> shuffled = all_idx;
    Rng hrng(derive_seed(cfg.seed, 0x686f6c64ULL));
    std::shuffle(shuffled.begin(), shuffled.end(), hrng);
    holdout_idx.assign(shuffled.begin(), shuffled.begin() + n_holdout);
    std::sort(holdout_idx.begin(), holdout_idx.end());
    for (int i : all_idx)
      if (!std::binary_search(holdout_idx.begin(), holdout_idx.end(), i))
        train_idx.push_back(i);
  }
  std::vector<Task> train_tasks;
  for (int i : train_idx) train_tasks.push_back(tasks[i]);

  Eigen::MatrixXd Zt = Eigen::MatrixXd::Zero(cfg.k, train_idx.size());
  Eigen::MatrixXd At;
  if (!ain) {
    At.resize(d, train_idx.size());
    for (std::size_t c = 0; c < train_idx.size(); ++c) At.col(c) = alpha0.col(train_idx[c]);
  }

  AdamAscent adam_psi(model.Psi.size(), cfg.lr_psi);
  AdamAscent adam_z(Zt.size(), cfg.lr_z);
  AdamAscent adam_alpha(At.size(), cfg.lr_alpha);

  FitReport report;
  for (int i : train_idx) report.trained_task_ids.push_back(tasks[i].id);
  for (int i : holdout_idx) report.holdout_task_ids.push_back(tasks[i].id);

  // Warm-started holdout coordinates, refit each evaluation.
  std::vector<Eigen::VectorXd> hz(holdout_idx.size(), Eigen::VectorXd::Zero(cfg.k));
  std::vector<Eigen::VectorXd> ha;
  for (std::size_t h = 0; h < holdout_idx.size(); ++h)
    ha.push_back(ain ? Eigen::VectorXd() : alpha0.col(holdout_idx[h]).eval());

  double best_metric = std::numeric_limits<double>::infinity();
  int stale = 0;
  struct Snapshot {
    Eigen::MatrixXd Psi, Zt, At;
    Eigen::VectorXd tau;
    int epoch = 0;
  } best;
  best.Psi = model.Psi;
  best.Zt = Zt;
  best.At = At;
  best.tau = model.tau;

  JointGrad jg;
  double best_obj = std::numeric_limits<double>::infinity();  // training SSE
  double lr_factor = 1.0;
  int obj_stale = 0;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const double obj = grad_joint(model, train_tasks, Zt, At, jg, cfg.sim);
    if (!std::isfinite(obj)) {
      std::ostringstream msg;
      msg << "fit_mtl: objective diverged at epoch " << epoch << "; trace tail:";
      const std::size_t n_tail = std::min<std::size_t>(5, report.trace.size());
      for (std::size_t s = report.trace.size() - n_tail; s < report.trace.size(); ++s)
        msg << " " << report.trace[s];
      throw std::runtime_error(msg.str());
    }
    report.trace.push_back(obj);

    {
      Eigen::Map<Eigen::VectorXd> x(model.Psi.data(), model.Psi.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dPsi.data(), jg.dPsi.size());
      adam_psi.step(x, g);
    }
    {
      Eigen::Map<Eigen::VectorXd> x(Zt.data(), Zt.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dZ.data(), jg.dZ.size());
      adam_z.step(x, g);
    }
    if (!ain) {
      Eigen::Map<Eigen::VectorXd> x(At.data(), At.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dAlpha.data(), jg.dAlpha.size());
      adam_alpha.step(x, g);
    }

    if ((epoch + 1) % cfg.tau_update_every == 0) {
      std::vector<int> local(train_idx.size());
      std::iota(local.begin(), local.end(), 0);
      Eigen::VectorXd sse;
      Eigen::VectorXi count;
      detail::training_sse(model, train_tasks, local, Zt, At, cfg.sim, sse, count);
      if (cfg.per_channel_tau) {
        model.tau.resize(d);
        for (int j = 0; j < d; ++j)
          model.tau[j] = (count[j] > 0 && sse[j] > 0) ? count[j] / sse[j] : 1.0;
      } else {
        model.tau.resize(1);
        model.tau[0] =
            (count.sum() > 0 && sse.sum() > 0) ? count.sum() / sse.sum() : 1.0;
      }
      // Plateau detection runs on the precision-free data term, which is
      // comparable across tau re-estimates where the log density is not.
      if (sse.sum() < best_obj * (1.0 - cfg.plateau_rtol)) {
        best_obj = sse.sum();
        obj_stale = 0;
      } else if (++obj_stale * cfg.tau_update_every >= cfg.plateau_patience &&
                 cfg.lr_psi * lr_factor * cfg.lr_decay >= cfg.lr_floor) {
        lr_factor *= cfg.lr_decay;
        adam_psi.set_learning_rate(cfg.lr_psi * lr_factor);
        adam_z.set_learning_rate(cfg.lr_z * lr_factor);
        adam_alpha.set_learning_rate(cfg.lr_alpha * lr_factor);
        obj_stale = 0;
      }
    }
    // Rescaling changes gradient scales per coordinate only; Adam's update is
    // invariant to static per-coordinate gradient rescaling, so the moment
    // state stays consistent.
    if ((epoch + 1) % cfg.rescale_every == 0) rescale_latents(model.Psi, Zt);

    if (n_holdout > 0 && (epoch + 1) % cfg.eval_every == 0) {
      double sse = 0.0;
      int n = 0;
      for (std::size_t h = 0; h < holdout_idx.size(); ++h) {
        const Task& ht = tasks[holdout_idx[h]];
        TaskMap tm = fit_task_map(model, ht, hz[h], ha[h], cfg.sim, 60);
        hz[h] = tm.z;
        ha[h] = tm.alpha;
        const PdParams params = decode(model, tm.z, tm.alpha);
        Eigen::VectorXd s = Eigen::VectorXd::Zero(d);
        Eigen::VectorXi c = Eigen::VectorXi::Zero(d);
        sse_observed(params, model.basis, ht, s, c, cfg.sim);
        sse += s.sum();
        n += c.sum();
      }
      const double metric = n > 0 ? std::sqrt(sse / n) : 0.0;
      if (metric < best_metric * (1.0 - 1e-4)) {
        best_metric = metric;
        stale = 0;
        best.Psi = model.Psi;
        best.Zt = Zt;
        best.At = At;
        best.tau = model.tau;
        best.epoch = epoch + 1;
      } else if (++stale >= cfg.patience) {
        report.early_stopped = true;
        break;
      }
    }
    if (cfg.deadline_seconds > 0 && elapsed() > cfg.deadline_seconds) {
      report.deadline_hit = true;
      break;
    }
  }
  report.epochs = std::min(epoch + 1, cfg.max_epochs);

  if (report.early_stopped) {
    model.Psi = best.Psi;
    Zt = best.Zt;
    At = best.At;
    model.tau = best.tau;
    report.holdout_rmse = best_metric;
  } else if (n_holdout > 0 && std::isfinite(best_metric)) {
    report.holdout_rmse = best_metric;
  }

  rescale_latents(model.Psi, Zt);
  {
    std::vector<int> local(train_idx.size());
    std::iota(local.begin(), local.end(), 0);
    model.tau = detail::closed_form_tau(model, train_tasks, local, Zt, At, cfg.sim,
                                       cfg.per_channel_tau);
  }
  report.objective = joint_log_density(model, train_tasks, Zt, At, cfg.sim);

  MtlFit fit;
  fit.model = model;
  fit.Z.resize(cfg.k, N);
  if (!ain) fit.Alpha.resize(d, N);
  for (std::size_t c = 0; c < train_idx.size(); ++c) {
    fit.Z.col(train_idx[c]) = Zt.col(c);
    if (!ain) fit.Alpha.col(train_idx[c]) = At.col(c);
  }
  for (std::size_t h = 0; h < holdout_idx.size(); ++h) {
    TaskMap tm = fit_task_map(model, tasks[holdout_idx[h]], hz[h], ha[h], cfg.sim);
    fit.Z.col(holdout_idx[h]) = tm.z;
    if (!ain) fit.Alpha.col(holdout_idx[h]) = tm.alpha;
  }
  for (const Task& t : tasks) fit.task_ids.push_back(t.id);
  report.wall_seconds = elapsed();
  fit.report = report;
  return fit;
}

// Pooled baseline: one shared parameter vector for every task, per-task
// baselines, represented as a rank-one model whose latent coordinate is
// pinned at 1.
inline MtlFit fit_cohort(const std::vector<Task>& tasks, const BasisConfig& basis,
                         const TrainConfig& cfg_in) {
  if (tasks.empty()) throw std::invalid_argument("fit_cohort: no tasks");
  const int d = tasks.front().channels();
  const int L = basis.L;
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  for (const Task& t : tasks) t.validate();

  TrainConfig cfg = cfg_in;
  cfg.k = 1;
  cfg.alpha_mode = AlphaMode::free_per_task;

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  MtlModel model;
  model.k = 1;
  model.d = d;
  model.L = L;
  model.alpha_mode = AlphaMode::free_per_task;
  model.basis = basis;
  model.alpha_prior_sd = cfg.alpha_prior_sd;
  model.Psi.resize(d * (3 + L), 1);
  for (int j = 0; j < d; ++j) {
    const int base = j * (3 + L);
    model.Psi(base, 0) = inv_softplus(0.1);   // beta1
    model.Psi(base + 1, 0) = logit(0.8);      // beta2
    model.Psi(base + 2, 0) = 0.0;             // beta3
    for (int r = 0; r < L; ++r) model.Psi(base + 3 + r, 0) = inv_softplus(1.0);
  }

  Eigen::MatrixXd Alpha = detail::init_alpha(tasks);
  {
    Eigen::VectorXd sse = Eigen::VectorXd::Zero(d);
    Eigen::VectorXi count = Eigen::VectorXi::Zero(d);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index t = 0; t < tasks[i].y.rows(); ++t)
        for (int j = 0; j < d; ++j)
          if (tasks[i].observed(t, j)) {
            const double r = tasks[i].y(t, j) - Alpha(j, i);
            sse[j] += r * r;
            count[j] += 1;
          }
    model.tau = cfg.per_channel_tau ? Eigen::VectorXd::Ones(d) : Eigen::VectorXd::Ones(1);
    for (Eigen::Index j = 0; j < model.tau.size(); ++j) {
      const double s = cfg.per_channel_tau ? sse[j] : sse.sum();
      const double n = cfg.per_channel_tau ? count[j] : count.sum();
      if (n > 0 && s > 0) model.tau[j] = n / s;
    }
  }
  model.validate();

  const Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(1, N);
  std::vector<int> all_idx(N);
  std::iota(all_idx.begin(), all_idx.end(), 0);

  AdamAscent adam_psi(model.Psi.size(), cfg.lr_psi);
  AdamAscent adam_alpha(Alpha.size(), cfg.lr_alpha);

  FitReport report;
  for (const Task& t : tasks) report.trained_task_ids.push_back(t.id);

  JointGrad jg;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const double obj = grad_joint(model, tasks, Z, Alpha, jg, cfg.sim);
    if (!std::isfinite(obj)) {
      std::ostringstream msg;
      msg << "fit_cohort: objective diverged at epoch " << epoch;
      throw std::runtime_error(msg.str());
    }
    report.trace.push_back(obj);
    {
      Eigen::Map<Eigen::VectorXd> x(model.Psi.data(), model.Psi.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dPsi.data(), jg.dPsi.size());
      adam_psi.step(x, g);
    }
    {
      Eigen::Map<Eigen::VectorXd> x(Alpha.data(), Alpha.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dAlpha.data(), jg.dAlpha.size());
      adam_alpha.step(x, g);
    }
    if ((epoch + 1) % cfg.tau_update_every == 0)
      model.tau = detail::closed_form_tau(model, tasks, all_idx, Z, Alpha, cfg.sim,
                                         cfg.per_channel_tau);
    if (cfg.deadline_seconds > 0 && elapsed() > cfg.deadline_seconds) {
      report.deadline_hit = true;
      break;
    }
  }
  report.epochs = std::min(epoch + 1, cfg.max_epochs);
  model.tau = detail::closed_form_tau(model, tasks, all_idx, Z, Alpha, cfg.sim,
                                     cfg.per_channel_tau);
  report.objective = joint_log_density(model, tasks, Z, Alpha, cfg.sim);

  MtlFit fit;
  fit.model = model;
  fit.Z = Z;
  fit.Alpha = Alpha;
  for (const Task& t : tasks) fit.task_ids.push_back(t.id);
  report.wall_seconds = elapsed();
  fit.report = report;
  return fit;
}

// Independent per-task model: the full unconstrained parameter vector with a
// wide normal prior, expressed as a diagonal subspace so the latent machinery
// applies unchanged. The observation precision is supplied, not fitted.
inline MtlModel make_stl_model(const BasisConfig& basis, int d,
                               const Eigen::VectorXd& tau, double prior_sd = 100.0) {
  MtlModel model;
  model.d = d;
  model.L = basis.L;
  model.alpha_mode = AlphaMode::in_subspace;
  model.basis = basis;
  model.tau = tau;
  model.k = d * (4 + basis.L);
  model.Psi = prior_sd * Eigen::MatrixXd::Identity(model.k, model.k);
  model.validate();
  return model;
}

// Descriptor-pinned variant: latent coordinates are frozen at the
// standardized task descriptors, so k comes from the descriptor dimension and
// only the loading matrix, per-task baselines, and the precision are trained.
// A new task gets its code from the stored standardization; no latent
// inference step is needed, only the baselines.
inline MtlFit fit_task_descriptor(const std::vector<Task>& tasks,
                                  const BasisConfig& basis,
                                  const TrainConfig& cfg_in) {
  if (tasks.empty()) throw std::invalid_argument("fit_task_descriptor: no tasks");
  if (tasks.front().covariates.size() == 0)
    throw std::invalid_argument("fit_task_descriptor: tasks have no descriptors");
  const int d = tasks.front().channels();
  const int L = basis.L;
  const Eigen::Index N = static_cast<Eigen::Index>(tasks.size());
  for (const Task& t : tasks) {
    t.validate();
    if (t.channels() != d)
      throw std::invalid_argument("fit_task_descriptor: ragged channel counts");
    if (t.covariates.size() != tasks.front().covariates.size())
      throw std::invalid_argument("fit_task_descriptor: task " + t.id +
                                  " has a different descriptor length");
  }

  TrainConfig cfg = cfg_in;
  cfg.alpha_mode = AlphaMode::free_per_task;

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  MtlModel model;
  model.cov_std = standardize_covariates(tasks);
  model.k = static_cast<int>(model.cov_std.center.size());
  model.d = d;
  model.L = L;
  model.alpha_mode = AlphaMode::free_per_task;
  model.basis = basis;
  model.alpha_prior_sd = cfg.alpha_prior_sd;
  Rng rng(derive_seed(cfg.seed, 0x746473ULL));
  model.Psi = rnorm_matrix(rng, d * (3 + L), model.k, 0.0, cfg.psi_init_sd);

  Eigen::MatrixXd Z(model.k, N);
  for (Eigen::Index i = 0; i < N; ++i)
    Z.col(i) = task_descriptor_codes(model.cov_std, tasks[i]);

  Eigen::MatrixXd Alpha = detail::init_alpha(tasks);
  {
    Eigen::VectorXd sse = Eigen::VectorXd::Zero(d);
    Eigen::VectorXi count = Eigen::VectorXi::Zero(d);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index t = 0; t < tasks[i].y.rows(); ++t)
        for (int j = 0; j < d; ++j)
          if (tasks[i].observed(t, j)) {
            const double r = tasks[i].y(t, j) - Alpha(j, i);
            sse[j] += r * r;
            count[j] += 1;
          }
    model.tau = cfg.per_channel_tau ? Eigen::VectorXd::Ones(d) : Eigen::VectorXd::Ones(1);
    for (Eigen::Index j = 0; j < model.tau.size(); ++j) {
      const double s = cfg.per_channel_tau ? sse[j] : sse.sum();
      const double n = cfg.per_channel_tau ? count[j] : count.sum();
      if (n > 0 && s > 0) model.tau[j] = n / s;
    }
  }
  model.validate();

  std::vector<int> all_idx(N);
  std::iota(all_idx.begin(), all_idx.end(), 0);

  AdamAscent adam_psi(model.Psi.size(), cfg.lr_psi);
  AdamAscent adam_alpha(Alpha.size(), cfg.lr_alpha);

  FitReport report;
  for (const Task& t : tasks) report.trained_task_ids.push_back(t.id);

  JointGrad jg;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const double obj = grad_joint(model, tasks, Z, Alpha, jg, cfg.sim);
    if (!std::isfinite(obj)) {
      std::ostringstream msg;
      msg << "fit_task_descriptor: objective diverged at epoch " << epoch;
      throw std::runtime_error(msg.str());
    }
    report.trace.push_back(obj);
    {
      Eigen::Map<Eigen::VectorXd> x(model.Psi.data(), model.Psi.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dPsi.data(), jg.dPsi.size());
      adam_psi.step(x, g);
    }
    {
      Eigen::Map<Eigen::VectorXd> x(Alpha.data(), Alpha.size());
      Eigen::Map<const Eigen::VectorXd> g(jg.dAlpha.data(), jg.dAlpha.size());
      adam_alpha.step(x, g);
    }
    if ((epoch + 1) % cfg.tau_update_every == 0)
      model.tau = detail::closed_form_tau(model, tasks, all_idx, Z, Alpha, cfg.sim,
                                         cfg.per_channel_tau);
    if (cfg.deadline_seconds > 0 && elapsed() > cfg.deadline_seconds) {
      report.deadline_hit = true;
      break;
    }
  }
  report.epochs = std::min(epoch + 1, cfg.max_epochs);
  model.tau = detail::closed_form_tau(model, tasks, all_idx, Z, Alpha, cfg.sim,
                                     cfg.per_channel_tau);
  report.objective = joint_log_density(model, tasks, Z, Alpha, cfg.sim);

  MtlFit fit;
  fit.model = model;
  fit.Z = Z;
  fit.Alpha = Alpha;
  for (const Task& t : tasks) fit.task_ids.push_back(t.id);
  report.wall_seconds = elapsed();
  fit.report = report;
  return fit;
}

}  // namespace pkpd
