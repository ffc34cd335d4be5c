#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pkpd/bench.hpp"
#include "pkpd/inference.hpp"
#include "pkpd/learning.hpp"
#include "pkpd/mtl.hpp"
#include "pkpd/pd.hpp"
#include "pkpd/pk.hpp"
#include "pkpd/prediction.hpp"

namespace pkpd {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw std::runtime_error("not a number: '" + s + "'");
  return v;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return f;
}

}  // namespace detail

inline json json_from_vector(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Eigen::VectorXd vector_from_json(const json& arr) {
  Eigen::VectorXd v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

inline json json_from_matrix(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != static_cast<std::size_t>(m.cols()))
      throw std::runtime_error("matrix_from_json: ragged rows");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(r, c) = rows[r][c].get<double>();
  }
  return m;
}

inline void to_json(json& j, const BasisConfig& b) {
  j = json{{"L", b.L}, {"a", json_from_vector(b.a)}, {"b", json_from_vector(b.b)}};
}

inline void from_json(const json& j, BasisConfig& b) {
  b.L = j.at("L").get<int>();
  b.a = vector_from_json(j.at("a"));
  b.b = vector_from_json(j.at("b"));
  b.validate();
}

inline void to_json(json& j, const PkRates& p) {
  j = json{{"k10", p.k10}, {"k12", p.k12}, {"k21", p.k21},
           {"k13", p.k13}, {"k31", p.k31}, {"v1", p.v1}};
}

inline void from_json(const json& j, PkRates& p) {
  p.k10 = j.at("k10").get<double>();
  p.k12 = j.at("k12").get<double>();
  p.k21 = j.at("k21").get<double>();
  p.k13 = j.at("k13").get<double>();
  p.k31 = j.at("k31").get<double>();
  p.v1 = j.at("v1").get<double>();
  p.validate();
}

inline void to_json(json& j, const InfusionSchedule& s) {
  j = json{{"breakpoints", s.breakpoints},
           {"rates", s.rates},
           {"duration", s.duration}};
}

inline void from_json(const json& j, InfusionSchedule& s) {
  s.breakpoints = j.at("breakpoints").get<std::vector<double>>();
  s.rates = j.at("rates").get<std::vector<double>>();
  s.duration = j.at("duration").get<double>();
  s.validate();
}

inline void to_json(json& j, const CovariateStandardization& c) {
  j = json{{"names", c.names},
           {"center", json_from_vector(c.center)},
           {"scale", json_from_vector(c.scale)}};
}

inline void from_json(const json& j, CovariateStandardization& c) {
  c.names = j.at("names").get<std::vector<std::string>>();
  c.center = vector_from_json(j.at("center"));
  c.scale = vector_from_json(j.at("scale"));
}

inline void to_json(json& j, const MtlModel& m) {
  j = json{{"k", m.k},
           {"d", m.d},
           {"L", m.L},
           {"p", m.p()},
           {"alpha_mode",
            m.alpha_mode == AlphaMode::in_subspace ? "in_subspace" : "free_per_task"},
           {"Psi", json_from_matrix(m.Psi)},
           {"basis", m.basis},
           {"alpha_prior_sd", m.alpha_prior_sd}};
  if (m.tau.size() == 1)
    j["tau"] = m.tau[0];
  else
    j["tau"] = json_from_vector(m.tau);
  if (!m.cov_std.empty()) j["covariate_standardization"] = m.cov_std;
}

inline void from_json(const json& j, MtlModel& m) {
  m.k = j.at("k").get<int>();
  m.d = j.at("d").get<int>();
  m.L = j.at("L").get<int>();
  const std::string mode = j.at("alpha_mode").get<std::string>();
  if (mode == "in_subspace")
    m.alpha_mode = AlphaMode::in_subspace;
  else if (mode == "free_per_task")
    m.alpha_mode = AlphaMode::free_per_task;
  else
    throw std::runtime_error("MtlModel: unknown alpha_mode " + mode);
  m.Psi = matrix_from_json(j.at("Psi"));
  m.basis = j.at("basis").get<BasisConfig>();
  m.alpha_prior_sd = j.value("alpha_prior_sd", 100.0);
  if (j.at("tau").is_number()) {
    m.tau.resize(1);
    m.tau[0] = j.at("tau").get<double>();
  } else {
    m.tau = vector_from_json(j.at("tau"));
  }
  if (j.contains("covariate_standardization"))
    m.cov_std = j.at("covariate_standardization").get<CovariateStandardization>();
  if (j.at("p").get<int>() != m.p())
    throw std::runtime_error("MtlModel: stored p disagrees with layout");
  m.validate();
}

inline void to_json(json& j, const FitReport& r) {
  j = json{{"epochs", r.epochs},
           {"objective", r.objective},
           {"trace", r.trace},
           {"trained_task_ids", r.trained_task_ids},
           {"holdout_task_ids", r.holdout_task_ids},
           {"early_stopped", r.early_stopped},
           {"deadline_hit", r.deadline_hit},
           {"wall_seconds", r.wall_seconds}};
  if (std::isfinite(r.holdout_rmse)) j["holdout_rmse"] = r.holdout_rmse;
}

inline void from_json(const json& j, FitReport& r) {
  r.epochs = j.at("epochs").get<int>();
  r.objective = j.at("objective").get<double>();
  r.trace = j.at("trace").get<std::vector<double>>();
  r.trained_task_ids = j.at("trained_task_ids").get<std::vector<std::string>>();
  r.holdout_task_ids = j.at("holdout_task_ids").get<std::vector<std::string>>();
  r.early_stopped = j.at("early_stopped").get<bool>();
  r.deadline_hit = j.at("deadline_hit").get<bool>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.holdout_rmse = j.value("holdout_rmse", std::numeric_limits<double>::quiet_NaN());
}

// Task on disk: a CSV of the grid plus a JSON sidecar for scalars. Column
// order is t, u, y per channel, then the observation flags per channel.
inline void write_task_csv(const Task& task, const std::string& path) {
  auto f = detail::open_out(path);
  const int d = task.channels();
  f << "t,u";
  for (int j = 0; j < d; ++j) f << ",y" << (j + 1);
  for (int j = 0; j < d; ++j) f << ",obs" << (j + 1);
  f << "\n";
  for (int i = 0; i < task.length(); ++i) {
    f << detail::fmt_double(i * task.dt) << "," << detail::fmt_double(task.u[i]);
    for (int j = 0; j < d; ++j) f << "," << detail::fmt_double(task.y(i, j));
    for (int j = 0; j < d; ++j) f << "," << (task.observed(i, j) ? 1 : 0);
    f << "\n";
  }
}

inline void write_task_sidecar(const Task& task, const std::string& path) {
  json j{{"id", task.id}, {"dt", task.dt}};
  if (task.covariates.size() > 0) {
    j["covariates"] = json_from_vector(task.covariates);
    j["covariate_names"] = task.covariate_names;
  }
  detail::open_out(path) << j.dump(2) << "\n";
}

inline Task read_task(const std::string& csv_path, const std::string& sidecar_path) {
  Task task;
  {
    const json j = json::parse(detail::open_in(sidecar_path));
    task.id = j.at("id").get<std::string>();
    task.dt = j.at("dt").get<double>();
    if (j.contains("covariates")) {
      task.covariates = vector_from_json(j.at("covariates"));
      task.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
    }
  }
  auto f = detail::open_in(csv_path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty task csv: " + csv_path);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 4 || header[0] != "t" || header[1] != "u")
    throw std::runtime_error("bad task csv header: " + csv_path);
  const int d = static_cast<int>((header.size() - 2) / 2);
  if (header.size() != static_cast<std::size_t>(2 + 2 * d))
    throw std::runtime_error("bad task csv header: " + csv_path);

  std::vector<double> u;
  std::vector<std::vector<double>> y(d);
  std::vector<std::vector<bool>> obs(d);
  int lineno = 1;  // header
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const std::string where = csv_path + " line " + std::to_string(lineno);
    if (fields.size() != header.size())
      throw std::runtime_error("ragged task csv row: " + where);
    try {
      u.push_back(detail::parse_double(fields[1]));
      for (int j = 0; j < d; ++j) {
        y[j].push_back(detail::parse_double(fields[2 + j]));
        obs[j].push_back(detail::parse_double(fields[2 + d + j]) != 0.0);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("bad task csv value: " + where + ": " + e.what());
    }
  }
  const int T = static_cast<int>(u.size());
  task.u = Eigen::Map<Eigen::VectorXd>(u.data(), T);
  task.y.resize(T, d);
  task.observed.resize(T, d);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < d; ++j) {
      task.y(i, j) = y[j][i];
      task.observed(i, j) = obs[j][i];
    }
  task.validate();
  return task;
}

inline void write_concentrations_csv(const ConcentrationSeries& series,
                                     const std::string& path) {
  auto f = detail::open_out(path);
  f << "t,c1\n";
  for (Eigen::Index i = 0; i < series.values.size(); ++i)
    f << detail::fmt_double(i * series.dt) << ","
      << detail::fmt_double(series.values[i]) << "\n";
}

// Whole fit in one JSON document: model, per-task coordinates, and the
// training report.
inline void write_mtl_fit(const MtlFit& fit, const std::string& path) {
  json j{{"model", fit.model},
         {"Z", json_from_matrix(fit.Z)},
         {"task_ids", fit.task_ids},
         {"report", fit.report}};
  if (fit.Alpha.size() > 0) j["Alpha"] = json_from_matrix(fit.Alpha);
  detail::open_out(path) << j.dump(2) << "\n";
}

inline MtlFit read_mtl_fit(const std::string& path) {
  const json j = json::parse(detail::open_in(path));
  MtlFit fit;
  fit.model = j.at("model").get<MtlModel>();
  fit.Z = matrix_from_json(j.at("Z"));
  fit.task_ids = j.at("task_ids").get<std::vector<std::string>>();
  fit.report = j.at("report").get<FitReport>();
  if (j.contains("Alpha")) fit.Alpha = matrix_from_json(j.at("Alpha"));
  return fit;
}

inline void write_latents_csv(const MtlFit& fit, const std::string& path) {
  auto f = detail::open_out(path);
  f << "id";
  for (int a = 0; a < fit.model.k; ++a) f << ",z" << (a + 1);
  for (int j = 0; fit.Alpha.size() > 0 && j < fit.model.d; ++j)
    f << ",alpha" << (j + 1);
  f << "\n";
  for (std::size_t i = 0; i < fit.task_ids.size(); ++i) {
    f << fit.task_ids[i];
    for (int a = 0; a < fit.model.k; ++a)
      f << "," << detail::fmt_double(fit.Z(a, static_cast<Eigen::Index>(i)));
    for (int j = 0; fit.Alpha.size() > 0 && j < fit.model.d; ++j)
      f << "," << detail::fmt_double(fit.Alpha(j, static_cast<Eigen::Index>(i)));
    f << "\n";
  }
}

inline void write_samples_csv(const PosteriorSamples& samples,
                              const std::vector<std::string>& coord_names,
                              const std::string& path) {
  if (coord_names.size() != static_cast<std::size_t>(samples.draws.cols()))
    throw std::invalid_argument("write_samples_csv: name count mismatch");
  auto f = detail::open_out(path);
  f << "chain,draw";
  for (const auto& n : coord_names) f << "," << n;
  f << "\n";
  for (Eigen::Index r = 0; r < samples.draws.rows(); ++r) {
    const int chain = samples.per_chain > 0 ? static_cast<int>(r / samples.per_chain) : 0;
    const int draw = samples.per_chain > 0 ? static_cast<int>(r % samples.per_chain) : 0;
    f << chain << "," << draw;
    for (Eigen::Index c = 0; c < samples.draws.cols(); ++c)
      f << "," << detail::fmt_double(samples.draws(r, c));
    f << "\n";
  }
}

inline PosteriorSamples read_samples_csv(const std::string& path,
                                         std::vector<std::string>* coord_names = nullptr) {
  auto f = detail::open_in(path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty samples csv: " + path);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "chain" || header[1] != "draw")
    throw std::runtime_error("bad samples csv header: " + path);
  const int k = static_cast<int>(header.size() - 2);
  if (coord_names) coord_names->assign(header.begin() + 2, header.end());

  std::vector<double> values;
  int max_chain = 0;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    const std::string where = path + " line " + std::to_string(lineno);
    if (fields.size() != header.size())
      throw std::runtime_error("ragged samples csv row: " + where);
    try {
      max_chain = std::max(max_chain, static_cast<int>(detail::parse_double(fields[0])));
      for (int c = 0; c < k; ++c)
        values.push_back(detail::parse_double(fields[2 + c]));
    } catch (const std::exception& e) {
      throw std::runtime_error("bad samples csv value: " + where + ": " + e.what());
    }
  }
  const int n = static_cast<int>(values.size()) / k;
  if (n == 0) throw std::runtime_error("no draws in samples csv: " + path);
  PosteriorSamples samples;
  samples.chains = max_chain + 1;
  if (n % samples.chains != 0)
    throw std::runtime_error("uneven chains in samples csv: " + path);
  samples.per_chain = n / samples.chains;
  samples.draws.resize(n, k);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < k; ++c) samples.draws(r, c) = values[r * k + c];
  return samples;
}

inline void write_diagnostics_json(const PosteriorSamples& samples,
                                   const std::vector<std::string>& coord_names,
                                   const std::string& path) {
  json j{{"chains", samples.chains},
         {"per_chain", samples.per_chain},
         {"accept_rate", samples.accept_rate},
         {"divergences", samples.divergences},
         {"truncated", samples.truncated},
         {"wall_seconds", samples.wall_seconds},
         {"step_sizes", json_from_vector(samples.step_sizes)},
         {"coord_names", coord_names},
         {"ess", json_from_vector(samples.ess)},
         {"rhat", json_from_vector(samples.rhat)}};
  detail::open_out(path) << j.dump(2) << "\n";
}

inline void write_predictions_csv(const PredictResult& pred, double dt,
                                  const std::string& path) {
  auto f = detail::open_out(path);
  f << "horizon,grid_index,t,channel,mean,median,lo,hi,y\n";
  for (std::size_t h = 0; h < pred.horizons.size(); ++h)
    for (Eigen::Index j = 0; j < pred.mean.cols(); ++j) {
      const int idx = pred.horizon_indices[h];
      f << pred.horizons[h] << "," << idx << "," << detail::fmt_double(idx * dt) << ","
        << (j + 1) << "," << detail::fmt_double(pred.mean(h, j)) << ","
        << detail::fmt_double(pred.median(h, j)) << ","
        << detail::fmt_double(pred.lo(h, j)) << "," << detail::fmt_double(pred.hi(h, j))
        << "," << detail::fmt_double(pred.y_true(h, j)) << "\n";
    }
}

inline void write_bench_rows_csv(const BenchReport& report, const std::string& path) {
  auto f = detail::open_out(path);
  f << "task,model,prefix,horizon,channel,pred,lo,hi,y,abs_error,observed,covered\n";
  for (const BenchRow& r : report.rows)
    f << r.task_id << "," << r.model << "," << r.prefix << "," << r.horizon << ","
      << (r.channel + 1) << "," << detail::fmt_double(r.pred) << ","
      << detail::fmt_double(r.lo) << "," << detail::fmt_double(r.hi) << ","
      << detail::fmt_double(r.y) << "," << detail::fmt_double(r.abs_error) << ","
      << (r.observed ? 1 : 0) << "," << (r.covered ? 1 : 0) << "\n";
}

inline void write_bench_report_json(const BenchReport& report,
                                    const std::vector<std::string>& model_labels,
                                    const std::vector<int>& horizons,
                                    const std::string& path) {
  json aggregates = json::array();
  for (const std::string& m : model_labels)
    for (int h : horizons) {
      const BenchAggregate a = aggregate_rows(report, m, h);
      aggregates.push_back(json{{"model", m},
                                {"horizon", h},
                                {"n", a.n},
                                {"mean_abs_error", a.mean_abs_error},
                                {"median_abs_error", a.median_abs_error},
                                {"coverage", a.coverage}});
    }
  json comparisons = json::array();
  for (const BenchComparison& c : report.comparisons)
    comparisons.push_back(json{{"model_a", c.model_a},
                               {"model_b", c.model_b},
                               {"horizon", c.horizon},
                               {"n_pairs", c.n_pairs},
                               {"mean_diff", c.mean_diff},
                               {"p_two_sided", c.p_two_sided},
                               {"p_a_less_b", c.p_a_less_b}});
  json nll = json::array();
  for (const BenchNllRow& r : report.nll_rows)
    nll.push_back(json{{"task", r.task_id},
                       {"model", r.model},
                       {"prefix", r.prefix},
                       {"channel", r.channel + 1},
                       {"n_points", r.n_points},
                       {"nll", r.nll},
                       {"nll_ref", r.nll_ref},
                       {"tau", r.tau}});
  json retro = json::array();
  for (const BenchRetroRow& r : report.retro_rows)
    retro.push_back(json{{"task", r.task_id},
                         {"model", r.model},
                         {"prefix", r.prefix},
                         {"n_points", r.n_points},
                         {"rmse", r.rmse}});
  json j{{"n_folds", report.n_folds},
         {"aggregates", aggregates},
         {"comparisons", comparisons},
         {"nll", nll},
         {"retrospective", retro},
         {"errors", report.errors},
         {"stl_truncated", report.stl_truncated},
         {"wall_seconds", report.wall_seconds},
         {"min_ess", report.min_ess}};
  detail::open_out(path) << j.dump(2) << "\n";
}

// 64-bit FNV-1a over the canonical dump of a configuration document.
inline std::string config_hash(const json& config) {
  const std::string s = config.dump();
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Run manifest: command, effective configuration and its hash, and the files
// produced. Deliberately no timestamps, so identical runs are byte-identical.
inline void write_manifest(const std::string& command, const json& config,
                           const std::vector<std::string>& outputs,
                           const std::string& path) {
  json j{{"command", command},
         {"version", kVersion},
         {"config", config},
         {"config_hash", config_hash(config)},
         {"outputs", outputs}};
  detail::open_out(path) << j.dump(2) << "\n";
}

}  // namespace pkpd
