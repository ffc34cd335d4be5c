#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pkpd/io.hpp"
#include "pkpd/synthetic.hpp"

namespace fs = std::filesystem;
using pkpd::json;

namespace {

// Config or flag problems exit 2; anything thrown past main exits 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int g_verbosity = 0;

void log_line(const std::string& msg, int level = 0) {
  if (g_verbosity >= level) std::cerr << "[pkpd] " << msg << "\n";
}

std::string data_dir_default() {
  const char* env = std::getenv("PKPD_DATA_DIR");
  return env && *env ? env : ".";
}

// Effective config = defaults <- config file <- flags. The defaults object
// doubles as the key allowlist for the file.
json load_config(const std::string& path, const json& defaults) {
  json cfg = defaults;
  if (path.empty()) return cfg;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file: " + path);
  json file;
  try {
    file = json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!file.is_object()) throw UsageError("config " + path + ": not a JSON object");
  for (const auto& [key, val] : file.items()) {
    if (!defaults.contains(key))
      throw UsageError("config " + path + ": unknown key '" + key + "'");
    cfg[key] = val;
  }
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw std::runtime_error("cannot create output dir: " + dir);
}

std::vector<double> to_double_vec(const json& arr) {
  return arr.get<std::vector<double>>();
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

pkpd::AlphaMode parse_alpha_mode(const std::string& s) {
  if (s == "in_subspace") return pkpd::AlphaMode::in_subspace;
  if (s == "free_per_task") return pkpd::AlphaMode::free_per_task;
  throw UsageError("alpha_mode must be in_subspace or free_per_task, got '" + s + "'");
}

// Tasks on disk are <id>.csv plus <id>.json; anything without both is not a
// task. Sorted by filename so every run sees the same order.
std::vector<pkpd::Task> load_tasks(const std::string& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data dir not found: " + dir);
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    fs::path sidecar = entry.path();
    sidecar.replace_extension(".json");
    if (fs::exists(sidecar)) stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  std::vector<pkpd::Task> tasks;
  for (const std::string& stem : stems) {
    const fs::path base = fs::path(dir) / stem;
    tasks.push_back(pkpd::read_task(base.string() + ".csv", base.string() + ".json"));
    log_line("loaded task " + tasks.back().id + " (" +
                 std::to_string(tasks.back().length()) + " steps)",
             1);
  }
  if (tasks.empty()) throw UsageError("no <id>.csv + <id>.json task pairs in " + dir);
  return tasks;
}

pkpd::BasisConfig load_basis(const std::string& path, int L) {
  if (path.empty()) return pkpd::default_basis(L);
  const json j = json::parse(pkpd::detail::open_in(path));
  // Accept a bare BasisConfig or a fit-basis output document.
  const pkpd::BasisConfig basis =
      (j.contains("basis") ? j.at("basis") : j).get<pkpd::BasisConfig>();
  if (basis.L != L)
    throw UsageError("basis file has L=" + std::to_string(basis.L) +
                     " but config says L=" + std::to_string(L));
  return basis;
}

json truth_to_json(const pkpd::GroundTruth& truth,
                   const std::vector<std::string>& task_ids) {
  json per_task = json::array();
  for (std::size_t i = 0; i < task_ids.size(); ++i) {
    json t{{"id", task_ids[i]},
           {"pk", truth.pk[i]},
           {"schedule", truth.schedules[i]},
           {"regime", truth.regime[i] == pkpd::Regime::high_low_high ? "high_low_high"
                                                                     : "low_high_low"}};
    per_task.push_back(std::move(t));
  }
  return json{{"v0", pkpd::json_from_vector(truth.v0)},
              {"Psi", pkpd::json_from_matrix(truth.Psi)},
              {"Z", pkpd::json_from_matrix(truth.Z)},
              {"Alpha", pkpd::json_from_matrix(truth.Alpha)},
              {"tau", pkpd::json_from_vector(truth.tau)},
              {"basis", truth.basis},
              {"tasks", per_task}};
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(const json& cfg) {
  pkpd::CohortSpec spec;
  spec.n_tasks = cfg.at("n").get<int>();
  spec.k = cfg.at("k").get<int>();
  spec.d = cfg.at("d").get<int>();
  spec.L = cfg.at("L").get<int>();
  spec.alpha_mode = parse_alpha_mode(cfg.at("alpha_mode").get<std::string>());
  spec.dt = cfg.at("dt").get<double>();
  spec.t_min = cfg.at("t_min").get<int>();
  spec.t_max = cfg.at("t_max").get<int>();
  spec.n_first_regime = cfg.at("n_first_regime").get<int>();
  if (!cfg.at("noise_sd").is_null()) spec.noise_sd = to_eigen(to_double_vec(cfg.at("noise_sd")));
  if (!cfg.at("alpha_mean").is_null())
    spec.alpha_mean = to_eigen(to_double_vec(cfg.at("alpha_mean")));
  if (!cfg.at("theta_total").is_null())
    spec.theta_total = to_eigen(to_double_vec(cfg.at("theta_total")));
  if (!cfg.at("ke0").is_null()) spec.ke0 = to_eigen(to_double_vec(cfg.at("ke0")));
  if (!cfg.at("absent_channel_prob").is_null())
    spec.absent_channel_prob = to_eigen(to_double_vec(cfg.at("absent_channel_prob")));
  spec.alpha_sd = cfg.at("alpha_sd").get<double>();
  spec.beta3_center = cfg.at("beta3_center").get<double>();
  spec.center_scale = cfg.at("center_scale").get<double>();
  spec.center_in_span = cfg.at("center_in_span").get<bool>();
  spec.psi_scale = cfg.at("psi_scale").get<double>();
  spec.missing_rate = cfg.at("missing_rate").get<double>();
  spec.missing_block_mean = cfg.at("missing_block_mean").get<double>();
  spec.covariates.informative = cfg.at("informative_covariates").get<int>();
  spec.covariates.noise = cfg.at("noise_covariates").get<int>();
  spec.covariates.obs_sd = cfg.at("covariate_obs_sd").get<double>();
  spec.seed = cfg.at("seed").get<std::uint64_t>();
  const std::string basis_file = cfg.at("basis").get<std::string>();
  if (!basis_file.empty()) spec.basis = load_basis(basis_file, spec.L);

  try {
    spec.fill_defaults();
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  const pkpd::SyntheticCohort cohort = pkpd::generate_cohort(spec);

  std::vector<std::string> outputs;
  std::vector<std::string> ids;
  for (const pkpd::Task& task : cohort.tasks) {
    const fs::path base = fs::path(out) / task.id;
    pkpd::write_task_csv(task, base.string() + ".csv");
    pkpd::write_task_sidecar(task, base.string() + ".json");
    outputs.push_back(task.id + ".csv");
    outputs.push_back(task.id + ".json");
    ids.push_back(task.id);
  }
  pkpd::detail::open_out((fs::path(out) / "truth.json").string())
      << truth_to_json(cohort.truth, ids).dump(2) << "\n";
  outputs.push_back("truth.json");
  pkpd::write_manifest("simulate", cfg, outputs,
                       (fs::path(out) / "manifest.json").string());
  std::cout << "simulate: " << cohort.tasks.size() << " tasks -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit

pkpd::TrainConfig train_config_from(const json& cfg) {
  pkpd::TrainConfig tc;
  tc.k = cfg.at("k").get<int>();
  tc.alpha_mode = parse_alpha_mode(cfg.at("alpha_mode").get<std::string>());
  tc.per_channel_tau = cfg.at("per_channel_tau").get<bool>();
  tc.max_epochs = cfg.at("epochs").get<int>();
  tc.lr_psi = cfg.at("lr_psi").get<double>();
  tc.lr_z = cfg.at("lr_z").get<double>();
  tc.lr_alpha = cfg.at("lr_alpha").get<double>();
  tc.early_stop = cfg.at("early_stop").get<bool>();
  tc.holdout_tasks = cfg.at("holdout_tasks").get<int>();
  tc.alpha_prior_sd = cfg.at("alpha_prior_sd").get<double>();
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  tc.deadline_seconds = cfg.at("deadline_seconds").get<double>();
  tc.sim.input_lag = cfg.at("input_lag").get<bool>();
  if (tc.k < 1 || tc.max_epochs < 1) throw UsageError("k and epochs must be >= 1");
  return tc;
}

int cmd_fit(const json& cfg) {
  const std::string model_type = cfg.at("model").get<std::string>();
  if (model_type != "mtl" && model_type != "cohort" && model_type != "task-d")
    throw UsageError("model must be mtl, cohort, or task-d, got '" + model_type + "'");
  const pkpd::TrainConfig tc = train_config_from(cfg);
  const int L = cfg.at("L").get<int>();
  const pkpd::BasisConfig basis = load_basis(cfg.at("basis").get<std::string>(), L);
  const std::vector<pkpd::Task> tasks = load_tasks(cfg.at("data").get<std::string>());

  pkpd::MtlFit fit;
  if (model_type == "mtl")
    fit = pkpd::fit_mtl(tasks, basis, tc);
  else if (model_type == "cohort")
    fit = pkpd::fit_cohort(tasks, basis, tc);
  else
    fit = pkpd::fit_task_descriptor(tasks, basis, tc);

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  pkpd::write_mtl_fit(fit, (fs::path(out) / "model.json").string());
  pkpd::write_latents_csv(fit, (fs::path(out) / "latents.csv").string());
  pkpd::write_manifest("fit", cfg, {"model.json", "latents.csv"},
                       (fs::path(out) / "manifest.json").string());
  if (fit.report.deadline_hit) log_line("training stopped at the deadline");
  std::cout << "fit(" << model_type << "): " << tasks.size() << " tasks, "
            << fit.report.epochs << " epochs, objective "
            << pkpd::detail::fmt_double(fit.report.objective) << " -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer / predict share target construction

struct LoadedTarget {
  pkpd::InferenceTarget target;
  pkpd::Task full;  // unmasked series, for prediction grids
};

LoadedTarget build_target(const json& cfg) {
  const std::string task_path = cfg.at("task").get<std::string>();
  if (task_path.empty()) throw UsageError("--task is required");
  fs::path csv(task_path), sidecar(task_path);
  sidecar.replace_extension(".json");
  const pkpd::Task full = pkpd::read_task(csv.string(), sidecar.string());

  const std::string model_path = cfg.at("model").get<std::string>();
  if (model_path.empty()) throw UsageError("--model is required");
  const pkpd::MtlFit fit = pkpd::read_mtl_fit(model_path);

  pkpd::Task used = full;
  const int prefix = cfg.at("prefix").get<int>();
  if (prefix > 0) {
    pkpd::PreprocessFlags flags;
    flags.downsample = cfg.at("downsample").get<int>();
    flags.initial_discard = cfg.at("initial_discard").get<int>();
    used = pkpd::preprocess_prefix(full, prefix, flags);
  }

  pkpd::SimulateOptions sim;
  sim.input_lag = cfg.at("input_lag").get<bool>();

  const std::string kind = cfg.at("target").get<std::string>();
  LoadedTarget out{.target = {}, .full = full};
  if (kind == "task")
    out.target = pkpd::InferenceTarget::for_task(fit.model, used, sim);
  else if (kind == "cohort")
    out.target = pkpd::InferenceTarget::for_cohort(fit.model, used, sim);
  else if (kind == "descriptor")
    out.target = pkpd::InferenceTarget::for_descriptor(
        fit.model, used, pkpd::task_descriptor_codes(fit.model.cov_std, used), sim);
  else
    throw UsageError("target must be task, cohort, or descriptor, got '" + kind + "'");
  return out;
}

std::vector<std::string> coord_names(const pkpd::InferenceTarget& target) {
  std::vector<std::string> names;
  if (target.variant == pkpd::TargetVariant::mtl_z)
    for (int a = 0; a < target.model.k; ++a) names.push_back("z" + std::to_string(a + 1));
  if (target.variant != pkpd::TargetVariant::mtl_z || target.alpha_in_point())
    for (int j = 0; j < target.model.d; ++j)
      names.push_back("alpha" + std::to_string(j + 1));
  return names;
}

int cmd_infer(const json& cfg) {
  const LoadedTarget lt = build_target(cfg);

  pkpd::HmcConfig hc;
  hc.chains = cfg.at("chains").get<int>();
  hc.warmup = cfg.at("warmup").get<int>();
  hc.iterations = cfg.at("iterations").get<int>();
  hc.thin = cfg.at("thin").get<int>();
  hc.leapfrog_steps = cfg.at("leapfrog_steps").get<int>();
  hc.target_accept = cfg.at("target_accept").get<double>();
  hc.seed = cfg.at("seed").get<std::uint64_t>();
  hc.deadline_seconds = cfg.at("deadline_seconds").get<double>();
  if (hc.chains < 1 || hc.warmup < 1 || hc.iterations < 1 || hc.thin < 1)
    throw UsageError("chains, warmup, iterations, and thin must be >= 1");

  const pkpd::PosteriorSamples samples = pkpd::hmc_sample(lt.target, hc);

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  const std::vector<std::string> names = coord_names(lt.target);
  pkpd::write_samples_csv(samples, names, (fs::path(out) / "samples.csv").string());
  pkpd::write_diagnostics_json(samples, names,
                               (fs::path(out) / "diagnostics.json").string());
  pkpd::write_manifest("infer", cfg, {"samples.csv", "diagnostics.json"},
                       (fs::path(out) / "manifest.json").string());

  if (samples.divergences > 0)
    log_line("warning: " + std::to_string(samples.divergences) +
             " divergent transitions");
  if (samples.rhat.size() > 0 && samples.rhat.maxCoeff() > 1.05)
    log_line("warning: max rhat " + std::to_string(samples.rhat.maxCoeff()));
  std::cout << "infer: " << samples.chains << " chains x " << samples.per_chain
            << " draws, accept " << samples.accept_rate << ", min ESS "
            << (samples.ess.size() ? samples.ess.minCoeff() : 0.0) << " -> " << out
            << "\n";
  return 0;
}

int cmd_predict(const json& cfg) {
  const LoadedTarget lt = build_target(cfg);
  const int prefix = cfg.at("prefix").get<int>();
  if (prefix < 1) throw UsageError("predict needs --prefix >= 1");

  const std::string samples_path = cfg.at("samples").get<std::string>();
  if (samples_path.empty()) throw UsageError("--samples is required");
  const pkpd::PosteriorSamples samples = pkpd::read_samples_csv(samples_path);

  pkpd::PredictConfig pc;
  pc.horizons = cfg.at("horizons").get<std::vector<int>>();
  pc.interval = cfg.at("interval").get<double>();
  pc.observation_noise = cfg.at("observation_noise").get<bool>();
  pc.max_draws = cfg.at("max_draws").get<int>();

  const pkpd::PredictResult pred =
      pkpd::predict(lt.target, samples, lt.full, prefix, pc);

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  pkpd::write_predictions_csv(pred, lt.full.dt,
                              (fs::path(out) / "predictions.csv").string());
  pkpd::write_manifest("predict", cfg, {"predictions.csv"},
                       (fs::path(out) / "manifest.json").string());
  std::cout << "predict: prefix " << prefix << ", horizons";
  for (int h : pred.horizons) std::cout << " " << h;
  std::cout << " -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct ModelToken {
  pkpd::BenchModel model;
  std::string label;
  int k = 0;  // mtl rank override, 0 = config k
};

std::vector<ModelToken> parse_model_tokens(const json& value, int default_k) {
  std::vector<std::string> raw;
  if (value.is_string()) {
    std::stringstream ss(value.get<std::string>());
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) raw.push_back(tok);
  } else if (value.is_array()) {
    raw = value.get<std::vector<std::string>>();
  }
  if (raw.empty()) throw UsageError("models must name at least one model");

  std::vector<ModelToken> out;
  for (const std::string& tok : raw) {
    ModelToken mt;
    mt.label = tok;
    if (tok == "mtl") {
      mt.model = pkpd::BenchModel::mtl;
      mt.k = default_k;
    } else if (tok.rfind("mtl-", 0) == 0) {
      mt.model = pkpd::BenchModel::mtl;
      try {
        mt.k = std::stoi(tok.substr(4));
      } catch (...) {
        mt.k = 0;
      }
      if (mt.k < 1) throw UsageError("bad mtl rank in model token '" + tok + "'");
    } else if (tok == "stl") {
      mt.model = pkpd::BenchModel::stl;
    } else if (tok == "cohort") {
      mt.model = pkpd::BenchModel::cohort;
    } else if (tok == "task-d") {
      mt.model = pkpd::BenchModel::task_descriptor;
    } else {
      throw UsageError("unknown model token '" + tok +
                       "' (expected mtl, mtl-<k>, stl, cohort, task-d)");
    }
    for (const ModelToken& seen : out)
      if (seen.label == mt.label) throw UsageError("duplicate model token '" + tok + "'");
    out.push_back(mt);
  }
  return out;
}

void rename_model(pkpd::BenchReport& report, const std::string& from,
                  const std::string& to) {
  if (from == to) return;
  for (auto& r : report.rows)
    if (r.model == from) r.model = to;
  for (auto& r : report.nll_rows)
    if (r.model == from) r.model = to;
  for (auto& r : report.retro_rows)
    if (r.model == from) r.model = to;
  for (const std::string& suffix : {std::string(), std::string("-train")}) {
    const auto it = report.wall_seconds.find(from + suffix);
    if (it != report.wall_seconds.end()) {
      report.wall_seconds[to + suffix] += it->second;
      report.wall_seconds.erase(it);
    }
  }
  const auto it = report.min_ess.find(from);
  if (it != report.min_ess.end()) {
    const double v = it->second;
    report.min_ess.erase(it);
    const auto dst = report.min_ess.find(to);
    if (dst == report.min_ess.end() || v < dst->second) report.min_ess[to] = v;
  }
}

pkpd::BenchConfig bench_config_from(const json& cfg) {
  pkpd::BenchConfig bc;
  bc.prefixes = cfg.at("prefixes").get<std::vector<int>>();
  bc.horizons = cfg.at("horizons").get<std::vector<int>>();
  bc.train = train_config_from(cfg);
  bc.hmc.chains = cfg.at("chains").get<int>();
  bc.hmc.warmup = cfg.at("warmup").get<int>();
  bc.hmc.iterations = cfg.at("iterations").get<int>();
  bc.hmc.thin = cfg.at("thin").get<int>();
  bc.hmc.leapfrog_steps = cfg.at("leapfrog_steps").get<int>();
  bc.hmc.target_accept = cfg.at("target_accept").get<double>();
  bc.hmc.deadline_seconds = cfg.at("hmc_deadline_seconds").get<double>();
  bc.interval = cfg.at("interval").get<double>();
  bc.observation_noise_intervals = cfg.at("observation_noise").get<bool>();
  bc.stl_budget_factor = cfg.at("stl_budget_factor").get<double>();
  bc.stl_prior_sd = cfg.at("stl_prior_sd").get<double>();
  bc.oracle = cfg.at("oracle").get<bool>();
  bc.retrospective = cfg.at("retrospective").get<bool>();
  bc.nll = cfg.at("nll").get<bool>();
  bc.seed = cfg.at("seed").get<std::uint64_t>();
  bc.max_folds = cfg.at("max_folds").get<int>();
  bc.max_draws = cfg.at("max_draws").get<int>();
  if (bc.horizons.empty()) throw UsageError("horizons must not be empty");
  return bc;
}

int cmd_bench(const json& cfg) {
  const pkpd::BenchConfig base = bench_config_from(cfg);
  const std::vector<ModelToken> tokens =
      parse_model_tokens(cfg.at("models"), base.train.k);
  const int L = cfg.at("L").get<int>();
  const pkpd::BasisConfig basis = load_basis(cfg.at("basis").get<std::string>(), L);
  const std::vector<pkpd::Task> tasks = load_tasks(cfg.at("data").get<std::string>());

  // One pass carries everything except extra mtl ranks, which rerun the
  // harness with their own k and get merged under their own label.
  std::vector<ModelToken> primary;
  std::vector<ModelToken> extra;
  bool have_mtl = false;
  for (const ModelToken& mt : tokens) {
    if (mt.model == pkpd::BenchModel::mtl) {
      (have_mtl ? extra : primary).push_back(mt);
      have_mtl = true;
    } else {
      primary.push_back(mt);
    }
  }

  pkpd::BenchConfig bc = base;
  bc.models.clear();
  for (const ModelToken& mt : primary) {
    bc.models.push_back(mt.model);
    if (mt.model == pkpd::BenchModel::mtl) bc.train.k = mt.k;
  }
  log_line("bench: primary pass with " + std::to_string(bc.models.size()) + " models");
  pkpd::BenchReport report = pkpd::run_loo(tasks, basis, bc);
  for (const ModelToken& mt : primary)
    rename_model(report, pkpd::bench_model_name(mt.model), mt.label);

  for (const ModelToken& mt : extra) {
    pkpd::BenchConfig ec = base;
    ec.models = {pkpd::BenchModel::mtl};
    ec.train.k = mt.k;
    ec.oracle = false;  // the primary pass already scored the floor
    log_line("bench: extra pass for " + mt.label);
    pkpd::BenchReport part = pkpd::run_loo(tasks, basis, ec);
    rename_model(part, "mtl", mt.label);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
    report.nll_rows.insert(report.nll_rows.end(), part.nll_rows.begin(),
                           part.nll_rows.end());
    report.retro_rows.insert(report.retro_rows.end(), part.retro_rows.begin(),
                             part.retro_rows.end());
    report.errors.insert(report.errors.end(), part.errors.begin(), part.errors.end());
    for (const auto& [key, v] : part.wall_seconds) report.wall_seconds[key] += v;
    for (const auto& [key, v] : part.min_ess) {
      const auto it = report.min_ess.find(key);
      if (it == report.min_ess.end() || v < it->second) report.min_ess[key] = v;
    }
  }

  std::vector<std::string> labels;
  for (const ModelToken& mt : tokens) labels.push_back(mt.label);
  pkpd::compute_comparisons(report, labels, base.horizons);

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  pkpd::write_bench_rows_csv(report, (fs::path(out) / "bench_rows.csv").string());
  std::vector<std::string> agg_labels = labels;
  if (base.oracle) agg_labels.push_back("oracle");
  pkpd::write_bench_report_json(report, agg_labels, base.horizons,
                                (fs::path(out) / "bench_report.json").string());
  pkpd::write_manifest("bench", cfg, {"bench_rows.csv", "bench_report.json"},
                       (fs::path(out) / "manifest.json").string());

  for (const std::string& err : report.errors) log_line("bench error: " + err);
  std::cout << "bench: " << report.n_folds << " folds\n";
  for (const std::string& m : agg_labels)
    for (int h : base.horizons) {
      const pkpd::BenchAggregate a = pkpd::aggregate_rows(report, m, h);
      if (a.n == 0) continue;
      std::cout << "  " << m << " @" << h << ": mean " << a.mean_abs_error
                << ", median " << a.median_abs_error << ", coverage " << a.coverage
                << " (n=" << a.n << ")\n";
    }
  for (const pkpd::BenchComparison& c : report.comparisons)
    if (c.n_pairs > 0)
      std::cout << "  " << c.model_a << " vs " << c.model_b << " @" << c.horizon
                << ": mean diff " << c.mean_diff << ", p " << c.p_two_sided
                << " (one-sided " << c.p_a_less_b << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit-basis

int cmd_fit_basis(const json& cfg) {
  const int L = cfg.at("L").get<int>();
  const double lo = cfg.at("lo").get<double>(), hi = cfg.at("hi").get<double>();
  if (L < 1) throw UsageError("L must be >= 1");
  if (!(hi > lo)) throw UsageError("domain must satisfy lo < hi");
  pkpd::GeneralizedSigmoid target;
  target.t1 = cfg.at("t1").get<double>();
  target.t2 = cfg.at("t2").get<double>();
  target.t3 = cfg.at("t3").get<double>();
  target.t4 = cfg.at("t4").get<double>();
  pkpd::BasisFitOptions opts;
  opts.restarts = cfg.at("restarts").get<int>();
  opts.seed = cfg.at("seed").get<std::uint64_t>();

  const pkpd::BasisFit fit = pkpd::fit_basis(target, L, lo, hi, opts);

  const std::string out = cfg.at("out").get<std::string>();
  ensure_dir(out);
  const json j{{"basis", fit.basis},
               {"theta", pkpd::json_from_vector(fit.theta)},
               {"max_abs_error", fit.max_abs_error},
               {"converged", fit.converged}};
  pkpd::detail::open_out((fs::path(out) / "basis.json").string()) << j.dump(2) << "\n";
  pkpd::write_manifest("fit-basis", cfg, {"basis.json"},
                       (fs::path(out) / "manifest.json").string());
  std::cout << "fit-basis: L=" << L << ", max abs error "
            << pkpd::detail::fmt_double(fit.max_abs_error) << " -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task PK/PD response modelling"};
  app.require_subcommand(1);
  int jobs = 1;
  app.add_flag("-v,--verbose", g_verbosity, "More detail on stderr (repeatable)");
  app.add_option("--jobs", jobs, "Worker parallelism (orchestration is sequential)")
      ->check(CLI::PositiveNumber);

  int exit_code = 0;
  static std::string config_path;  // statics reach the callbacks unlike by-value captures

  // simulate ---------------------------------------------------------------
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic cohort");
  {
    static json defaults{{"n", 40},
                         {"k", 2},
                         {"d", 3},
                         {"L", 8},
                         {"alpha_mode", "free_per_task"},
                         {"dt", 0.25},
                         {"t_min", 108},
                         {"t_max", 200},
                         {"n_first_regime", -1},
                         {"noise_sd", nullptr},
                         {"alpha_mean", nullptr},
                         {"theta_total", nullptr},
                         {"ke0", nullptr},
                         {"absent_channel_prob", nullptr},
                         {"alpha_sd", 10.0},
                         {"beta3_center", -2.0},
                         {"center_scale", 1.0},
                         {"center_in_span", false},
                         {"psi_scale", 1.0},
                         {"missing_rate", 0.05},
                         {"missing_block_mean", 4.0},
                         {"informative_covariates", 0},
                         {"noise_covariates", 0},
                         {"covariate_obs_sd", 0.3},
                         {"basis", ""},
                         {"seed", 0},
                         {"out", "."}};
    static int n, k, d, L, t_min, t_max;
    static double missing_rate;
    static std::uint64_t seed;
    static std::string out, alpha_mode;
    auto* o_cfg = sim->add_option("--config", config_path, "JSON config file");
    auto* o_n = sim->add_option("--n", n, "Number of tasks");
    auto* o_k = sim->add_option("--k", k, "Latent rank");
    auto* o_d = sim->add_option("--d", d, "Observation channels");
    auto* o_l = sim->add_option("--L", L, "Basis size");
    auto* o_tmin = sim->add_option("--t-min", t_min, "Shortest grid");
    auto* o_tmax = sim->add_option("--t-max", t_max, "Longest grid");
    auto* o_miss = sim->add_option("--missing-rate", missing_rate, "Dropout fraction");
    auto* o_seed = sim->add_option("--seed", seed, "RNG seed");
    auto* o_mode = sim->add_option("--alpha-mode", alpha_mode, "Baseline handling");
    auto* o_out = sim->add_option("--out", out, "Output directory");
    sim->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_n->count()) cfg["n"] = n;
      if (o_k->count()) cfg["k"] = k;
      if (o_d->count()) cfg["d"] = d;
      if (o_l->count()) cfg["L"] = L;
      if (o_tmin->count()) cfg["t_min"] = t_min;
      if (o_tmax->count()) cfg["t_max"] = t_max;
      if (o_miss->count()) cfg["missing_rate"] = missing_rate;
      if (o_seed->count()) cfg["seed"] = seed;
      if (o_mode->count()) cfg["alpha_mode"] = alpha_mode;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_simulate(cfg);
    });
  }

  // fit --------------------------------------------------------------------
  auto* fit = app.add_subcommand("fit", "Fit a pooling model to a task directory");
  {
    static json defaults{{"data", data_dir_default()},
                         {"model", "mtl"},
                         {"k", 2},
                         {"L", 8},
                         {"alpha_mode", "free_per_task"},
                         {"per_channel_tau", true},
                         {"epochs", 4000},
                         {"lr_psi", 1e-2},
                         {"lr_z", 1e-2},
                         {"lr_alpha", 0.1},
                         {"early_stop", true},
                         {"holdout_tasks", 2},
                         {"alpha_prior_sd", 100.0},
                         {"input_lag", false},
                         {"deadline_seconds", 0.0},
                         {"basis", ""},
                         {"seed", 0},
                         {"out", "."}};
    static int k, L, epochs;
    static std::uint64_t seed;
    static std::string data, model, out, alpha_mode, basis;
    static double deadline;
    auto* o_cfg = fit->add_option("--config", config_path, "JSON config file");
    auto* o_data = fit->add_option("--data", data, "Task directory");
    auto* o_model = fit->add_option("--model", model, "mtl, cohort, or task-d");
    auto* o_k = fit->add_option("--k", k, "Latent rank");
    auto* o_l = fit->add_option("--L", L, "Basis size");
    auto* o_ep = fit->add_option("--epochs", epochs, "Optimiser epochs");
    auto* o_seed = fit->add_option("--seed", seed, "RNG seed");
    auto* o_mode = fit->add_option("--alpha-mode", alpha_mode, "Baseline handling");
    auto* o_basis = fit->add_option("--basis", basis, "Basis JSON file");
    auto* o_dl = fit->add_option("--deadline-seconds", deadline, "Wall-clock budget");
    auto* o_out = fit->add_option("--out", out, "Output directory");
    fit->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_data->count()) cfg["data"] = data;
      if (o_model->count()) cfg["model"] = model;
      if (o_k->count()) cfg["k"] = k;
      if (o_l->count()) cfg["L"] = L;
      if (o_ep->count()) cfg["epochs"] = epochs;
      if (o_seed->count()) cfg["seed"] = seed;
      if (o_mode->count()) cfg["alpha_mode"] = alpha_mode;
      if (o_basis->count()) cfg["basis"] = basis;
      if (o_dl->count()) cfg["deadline_seconds"] = deadline;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_fit(cfg);
    });
  }

  // infer ------------------------------------------------------------------
  auto* infer = app.add_subcommand("infer", "Posterior sampling for one task");
  {
    static json defaults{{"task", ""},
                         {"model", ""},
                         {"target", "task"},
                         {"prefix", 0},
                         {"downsample", 4},
                         {"initial_discard", 16},
                         {"input_lag", false},
                         {"chains", 2},
                         {"warmup", 500},
                         {"iterations", 3000},
                         {"thin", 2},
                         {"leapfrog_steps", 32},
                         {"target_accept", 0.8},
                         {"deadline_seconds", 0.0},
                         {"seed", 0},
                         {"out", "."}};
    static int prefix, chains, warmup, iterations;
    static std::uint64_t seed;
    static std::string task, model, target, out;
    auto* o_cfg = infer->add_option("--config", config_path, "JSON config file");
    auto* o_task = infer->add_option("--task", task, "Task CSV path");
    auto* o_model = infer->add_option("--model", model, "Fitted model JSON");
    auto* o_tgt = infer->add_option("--target", target, "task, cohort, or descriptor");
    auto* o_pre = infer->add_option("--prefix", prefix, "Observed prefix length");
    auto* o_ch = infer->add_option("--chains", chains, "HMC chains");
    auto* o_wu = infer->add_option("--warmup", warmup, "Warmup iterations");
    auto* o_it = infer->add_option("--iterations", iterations, "Sampling iterations");
    auto* o_seed = infer->add_option("--seed", seed, "RNG seed");
    auto* o_out = infer->add_option("--out", out, "Output directory");
    infer->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_task->count()) cfg["task"] = task;
      if (o_model->count()) cfg["model"] = model;
      if (o_tgt->count()) cfg["target"] = target;
      if (o_pre->count()) cfg["prefix"] = prefix;
      if (o_ch->count()) cfg["chains"] = chains;
      if (o_wu->count()) cfg["warmup"] = warmup;
      if (o_it->count()) cfg["iterations"] = iterations;
      if (o_seed->count()) cfg["seed"] = seed;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_infer(cfg);
    });
  }

  // predict ----------------------------------------------------------------
  auto* predict = app.add_subcommand("predict", "Forecast from posterior samples");
  {
    static json defaults{{"task", ""},
                         {"model", ""},
                         {"samples", ""},
                         {"target", "task"},
                         {"prefix", 0},
                         {"downsample", 4},
                         {"initial_discard", 16},
                         {"input_lag", false},
                         {"horizons", json::array({20, 40})},
                         {"interval", 0.9},
                         {"observation_noise", false},
                         {"max_draws", 0},
                         {"out", "."}};
    static int prefix;
    static std::vector<int> horizons;
    static std::string task, model, samples, target, out;
    static double interval;
    auto* o_cfg = predict->add_option("--config", config_path, "JSON config file");
    auto* o_task = predict->add_option("--task", task, "Task CSV path");
    auto* o_model = predict->add_option("--model", model, "Fitted model JSON");
    auto* o_s = predict->add_option("--samples", samples, "Posterior samples CSV");
    auto* o_tgt = predict->add_option("--target", target, "task, cohort, or descriptor");
    auto* o_pre = predict->add_option("--prefix", prefix, "Observed prefix length");
    auto* o_h = predict->add_option("--horizons", horizons, "Steps past the prefix");
    auto* o_int = predict->add_option("--interval", interval, "Credible mass");
    auto* o_out = predict->add_option("--out", out, "Output directory");
    predict->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_task->count()) cfg["task"] = task;
      if (o_model->count()) cfg["model"] = model;
      if (o_s->count()) cfg["samples"] = samples;
      if (o_tgt->count()) cfg["target"] = target;
      if (o_pre->count()) cfg["prefix"] = prefix;
      if (o_h->count()) cfg["horizons"] = horizons;
      if (o_int->count()) cfg["interval"] = interval;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_predict(cfg);
    });
  }

  // bench ------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Leave-one-out model comparison");
  {
    static json defaults{{"data", data_dir_default()},
                         {"models", "mtl,stl,cohort"},
                         {"prefixes", json::array()},
                         {"horizons", json::array({20, 40})},
                         {"k", 2},
                         {"L", 8},
                         {"alpha_mode", "free_per_task"},
                         {"per_channel_tau", true},
                         {"epochs", 4000},
                         {"lr_psi", 1e-2},
                         {"lr_z", 1e-2},
                         {"lr_alpha", 0.1},
                         {"early_stop", true},
                         {"holdout_tasks", 2},
                         {"alpha_prior_sd", 100.0},
                         {"input_lag", false},
                         {"deadline_seconds", 0.0},
                         {"chains", 2},
                         {"warmup", 500},
                         {"iterations", 3000},
                         {"thin", 2},
                         {"leapfrog_steps", 32},
                         {"target_accept", 0.8},
                         {"hmc_deadline_seconds", 0.0},
                         {"interval", 0.9},
                         {"observation_noise", false},
                         {"stl_budget_factor", 10.0},
                         {"stl_prior_sd", 100.0},
                         {"oracle", true},
                         {"retrospective", true},
                         {"nll", true},
                         {"max_folds", 0},
                         {"max_draws", 0},
                         {"basis", ""},
                         {"seed", 0},
                         {"out", "."}};
    static int epochs, max_folds;
    static std::vector<int> horizons, prefixes;
    static std::uint64_t seed;
    static std::string data, models, out;
    auto* o_cfg = bench->add_option("--config", config_path, "JSON config file");
    auto* o_data = bench->add_option("--data", data, "Task directory");
    auto* o_models = bench->add_option("--models", models,
                                       "Comma list: mtl, mtl-<k>, stl, cohort, task-d");
    auto* o_pre = bench->add_option("--prefixes", prefixes, "Fixed prefix lengths");
    auto* o_h = bench->add_option("--horizons", horizons, "Forecast horizons");
    auto* o_ep = bench->add_option("--epochs", epochs, "Optimiser epochs");
    auto* o_folds = bench->add_option("--max-folds", max_folds, "Cap on folds");
    auto* o_seed = bench->add_option("--seed", seed, "RNG seed");
    auto* o_out = bench->add_option("--out", out, "Output directory");
    bench->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_data->count()) cfg["data"] = data;
      if (o_models->count()) cfg["models"] = models;
      if (o_pre->count()) cfg["prefixes"] = prefixes;
      if (o_h->count()) cfg["horizons"] = horizons;
      if (o_ep->count()) cfg["epochs"] = epochs;
      if (o_folds->count()) cfg["max_folds"] = max_folds;
      if (o_seed->count()) cfg["seed"] = seed;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_bench(cfg);
    });
  }

  // fit-basis --------------------------------------------------------------
  auto* fb = app.add_subcommand("fit-basis", "Approximate a response curve");
  {
    static json defaults{{"L", 8},      {"lo", -10.0},   {"hi", 10.0}, {"t1", 0.0},
                         {"t2", 1.0},   {"t3", -1.0},    {"t4", 1.0},  {"restarts", 4},
                         {"seed", 0},   {"out", "."}};
    static int L;
    static double lo, hi, t4;
    static std::string out;
    auto* o_cfg = fb->add_option("--config", config_path, "JSON config file");
    auto* o_l = fb->add_option("--L", L, "Basis size");
    auto* o_lo = fb->add_option("--lo", lo, "Domain lower edge");
    auto* o_hi = fb->add_option("--hi", hi, "Domain upper edge");
    auto* o_t4 = fb->add_option("--t4", t4, "Asymmetry of the target curve");
    auto* o_out = fb->add_option("--out", out, "Output directory");
    fb->callback([=, &exit_code]() {
      json cfg = load_config(config_path, defaults);
      if (o_l->count()) cfg["L"] = L;
      if (o_lo->count()) cfg["lo"] = lo;
      if (o_hi->count()) cfg["hi"] = hi;
      if (o_t4->count()) cfg["t4"] = t4;
      if (o_out->count()) cfg["out"] = out;
      (void)o_cfg;
      exit_code = cmd_fit_basis(cfg);
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "[pkpd] " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "[pkpd] " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "[pkpd] error: " << e.what() << "\n";
    return 1;
  }
  if (jobs > 1) log_line("jobs > 1 requested; this build runs sequentially", 1);
  return exit_code;
}
