#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "pkpd/bench.hpp"
#include "pkpd/synthetic.hpp"

using namespace pkpd;

TEST_CASE("signed-rank test on degenerate inputs") {
  WilcoxonResult r = wilcoxon_signed_rank(std::vector<double>{0.0, 0.0, 0.0});
  CHECK(r.n_effective == 0);
  CHECK(r.p_value == 1.0);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  r = wilcoxon_signed_rank({nan, inf, 0.0, 1.0, 2.0, 3.0, -4.0, 5.0, 6.0},
                           Alternative::greater);
  CHECK(r.n_effective == 6);
  CHECK(r.exact);
}

TEST_CASE("exact tail probabilities match hand enumeration") {
  // Six distinct all-positive differences: W = 21, only 1 of 2^6 sign
  // assignments reaches it.
  const std::vector<double> pos = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  CHECK(wilcoxon_signed_rank(pos, Alternative::greater).p_value ==
        Catch::Approx(1.0 / 64.0).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(pos, Alternative::two_sided).p_value ==
        Catch::Approx(2.0 / 64.0).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(pos, Alternative::less).p_value == 1.0);
  CHECK(wilcoxon_signed_rank(pos).statistic == 21.0);

  // One negative at rank 4: W = 17; subsets of {1..6} with sum >= 17 are the
  // complements of the seven subsets summing <= 4.
  const std::vector<double> mixed = {1.0, 2.0, 3.0, -4.0, 5.0, 6.0};
  CHECK(wilcoxon_signed_rank(mixed, Alternative::greater).p_value ==
        Catch::Approx(7.0 / 64.0).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(mixed, Alternative::two_sided).p_value ==
        Catch::Approx(14.0 / 64.0).epsilon(1e-12));

  // Ties: |d| all equal, W2 = 5 per positive, so the statistic counts signs.
  const std::vector<double> tied = {1.0, 1.0, 1.0, -1.0};
  CHECK(wilcoxon_signed_rank(tied, Alternative::greater).p_value ==
        Catch::Approx(5.0 / 16.0).epsilon(1e-12));
  CHECK(wilcoxon_signed_rank(tied, Alternative::two_sided).p_value ==
        Catch::Approx(10.0 / 16.0).epsilon(1e-12));
}

TEST_CASE("signed-rank symmetry under negation") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> d(12), neg(12);
    for (int i = 0; i < 12; ++i) {
      d[i] = rnorm(rng, 0.3, 1.0);
      neg[i] = -d[i];
    }
    const double a = wilcoxon_signed_rank(d, Alternative::greater).p_value;
    const double b = wilcoxon_signed_rank(neg, Alternative::less).p_value;
    CHECK(a == Catch::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("normal approximation tracks the exact tail") {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> d(24);
    for (double& v : d) v = rnorm(rng, 0.2, 1.0);
    const double exact =
        wilcoxon_signed_rank(d, Alternative::greater, 25).p_value;
    const double approx =
        wilcoxon_signed_rank(d, Alternative::greater, 0).p_value;
    CHECK(approx == Catch::Approx(exact).margin(0.02));
  }
  // A decisive sample stays decisive under the approximation.
  std::vector<double> big(30);
  for (int i = 0; i < 30; ++i) big[i] = i + 1.0;
  CHECK(wilcoxon_signed_rank(big, Alternative::greater, 0).p_value < 1e-4);
}

TEST_CASE("type I error stays near the nominal level") {
  Rng rng(23);
  const int sims = 10000, n = 20;
  int rejections = 0;
  for (int s = 0; s < sims; ++s) {
    std::vector<double> d(n);
    for (double& v : d) v = rnorm(rng, 0.0, 1.0);
    if (wilcoxon_signed_rank(d, Alternative::two_sided).p_value <= 0.05)
      ++rejections;
  }
  const double rate = static_cast<double>(rejections) / sims;
  CHECK(rate > 0.035);
  CHECK(rate < 0.065);
}

TEST_CASE("pair interface subtracts elementwise and validates lengths") {
  const std::vector<double> x = {3.0, 5.0, 9.0}, y = {1.0, 2.0, 3.0};
  const WilcoxonResult r = wilcoxon_signed_rank(x, y, Alternative::greater);
  CHECK(r.statistic == 6.0);
  CHECK_THROWS_AS(wilcoxon_signed_rank(x, std::vector<double>{1.0}),
                  std::invalid_argument);
}

namespace {

BenchRow row(const std::string& id, const std::string& model, int horizon,
             double err, bool observed = true, bool covered = false) {
  BenchRow r;
  r.task_id = id;
  r.model = model;
  r.horizon = horizon;
  r.observed = observed;
  r.abs_error = err;
  r.covered = covered;
  return r;
}

}  // namespace

TEST_CASE("aggregation recomputes mean, median, and coverage") {
  BenchReport report;
  report.rows = {
      row("a", "mtl", 20, 1.0, true, true),
      row("a", "mtl", 20, 3.0, true, false),
      row("b", "mtl", 20, 5.0, true, true),
      row("b", "mtl", 20, 7.0, true, true),
      row("b", "mtl", 40, 100.0, true, false),                // other horizon
      row("c", "mtl", 20, 9.0, false, false),                 // unobserved
      row("c", "mtl", 20, std::numeric_limits<double>::quiet_NaN()),
      row("a", "stl", 20, 50.0, true, false),                 // other model
  };
  const BenchAggregate agg = aggregate_rows(report, "mtl", 20);
  CHECK(agg.n == 4);
  CHECK(agg.mean_abs_error == Catch::Approx(4.0).epsilon(1e-12));
  CHECK(agg.median_abs_error == Catch::Approx(4.0).epsilon(1e-12));
  CHECK(agg.coverage == Catch::Approx(0.75).epsilon(1e-12));

  const auto scores = per_task_scores(report, "mtl", 20);
  REQUIRE(scores.size() == 2);
  CHECK(scores.at("a") == Catch::Approx(2.0).epsilon(1e-12));
  CHECK(scores.at("b") == Catch::Approx(6.0).epsilon(1e-12));

  const BenchAggregate empty = aggregate_rows(report, "mtl", 99);
  CHECK(empty.n == 0);
  CHECK(std::isnan(empty.mean_abs_error));
}

TEST_CASE("model comparisons pair tasks and reuse the signed-rank test") {
  BenchReport report;
  // Task scores: mtl {a:1, b:2, c:3, d:4}, stl {a:2, b:4, c:6} (no d).
  for (int i = 0; i < 4; ++i)
    report.rows.push_back(
        row(std::string(1, static_cast<char>('a' + i)), "mtl", 20, i + 1.0));
  for (int i = 0; i < 3; ++i)
    report.rows.push_back(
        row(std::string(1, static_cast<char>('a' + i)), "stl", 20, 2.0 * (i + 1)));

  compute_comparisons(report, {"mtl", "stl"}, {20, 40});
  REQUIRE(report.comparisons.size() == 2);
  const BenchComparison& cmp = report.comparisons[0];
  CHECK(cmp.model_a == "mtl");
  CHECK(cmp.model_b == "stl");
  CHECK(cmp.horizon == 20);
  CHECK(cmp.n_pairs == 3);  // d has no stl partner
  CHECK(cmp.mean_diff == Catch::Approx(-2.0).epsilon(1e-12));
  const double direct =
      wilcoxon_signed_rank({-1.0, -2.0, -3.0}, Alternative::less).p_value;
  CHECK(cmp.p_a_less_b == Catch::Approx(direct).epsilon(1e-12));

  const BenchComparison& none = report.comparisons[1];
  CHECK(none.horizon == 40);
  CHECK(none.n_pairs == 0);
  CHECK(none.p_two_sided == 1.0);
}

TEST_CASE("automatic prefixes sit mid-series and respect the horizon") {
  BenchConfig cfg;
  cfg.horizons = {20, 40};
  Task t;
  t.id = "t";
  t.u = Eigen::VectorXd::Zero(120);
  t.y = Eigen::MatrixXd::Zero(120, 1);
  t.observed = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(120, 1, true);
  CHECK(detail::auto_prefixes(t, cfg) == std::vector<int>({60, 80}));

  // Short series: both candidates collide at T - max horizon.
  t.u = Eigen::VectorXd::Zero(90);
  t.y = Eigen::MatrixXd::Zero(90, 1);
  t.observed = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(90, 1, true);
  CHECK(detail::auto_prefixes(t, cfg) == std::vector<int>({45, 50}));

  // Too short to fit the discard floor plus the horizon: nothing usable.
  t.u = Eigen::VectorXd::Zero(60);
  t.y = Eigen::MatrixXd::Zero(60, 1);
  t.observed = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(60, 1, true);
  CHECK(detail::auto_prefixes(t, cfg).empty());
}

TEST_CASE("leave-one-out harness produces a complete scored report") {
  CohortSpec spec;
  spec.n_tasks = 4;
  spec.d = 2;
  spec.k = 1;
  spec.L = 4;
  spec.t_min = spec.t_max = 80;
  spec.missing_rate = 0.0;
  spec.absent_channel_prob = Eigen::VectorXd::Zero(2);
  spec.seed = 101;
  const SyntheticCohort cohort = generate_cohort(spec);

  BenchConfig cfg;
  cfg.models = {BenchModel::mtl, BenchModel::cohort};
  cfg.prefixes = {40};
  cfg.horizons = {5, 10};
  cfg.train.k = 1;
  cfg.train.max_epochs = 200;
  cfg.train.early_stop = false;
  cfg.train.holdout_tasks = 0;
  cfg.hmc.chains = 2;
  cfg.hmc.warmup = 100;
  cfg.hmc.iterations = 200;
  cfg.hmc.thin = 2;
  cfg.seed = 7;

  const BenchReport report = run_loo(cohort.tasks, cohort.truth.basis, cfg);

  CHECK(report.errors.empty());
  CHECK(report.n_folds == 4);
  // 4 folds x 2 models x 2 horizons x 2 channels, plus the oracle rows.
  int mtl_rows = 0, oracle_rows = 0;
  for (const BenchRow& r : report.rows) {
    if (r.model == "mtl") ++mtl_rows;
    if (r.model == "oracle") ++oracle_rows;
    REQUIRE(r.prefix == 40);
    if (r.observed) {
      REQUIRE(std::isfinite(r.abs_error));
      REQUIRE(r.lo <= r.hi);
    }
  }
  CHECK(mtl_rows == 4 * 2 * 2);
  CHECK(oracle_rows == 4 * 2 * 2);

  CHECK(report.retro_rows.size() == 4 * 2);    // folds x models
  CHECK(report.nll_rows.size() == 4 * 2 * 2);  // folds x models x channels
  for (const BenchNllRow& nr : report.nll_rows) {
    REQUIRE(nr.n_points > 0);
    REQUIRE(nr.nll <= nr.nll_ref + 1e-9);
  }

  REQUIRE(report.comparisons.size() == 2);  // one model pair, two horizons
  for (const BenchComparison& cmp : report.comparisons) {
    CHECK(cmp.n_pairs == 4);
    CHECK(cmp.p_two_sided > 0.0);
    CHECK(cmp.p_two_sided <= 1.0);
  }

  CHECK(report.wall_seconds.at("mtl-train") > 0.0);
  CHECK(report.wall_seconds.at("cohort-train") > 0.0);
  CHECK(report.wall_seconds.at("mtl") > 0.0);
  CHECK(report.min_ess.at("mtl") > 0.0);
  CHECK(report.stl_truncated.empty());
}

TEST_CASE("benchmark runs are reproducible") {
  CohortSpec spec;
  spec.n_tasks = 3;
  spec.d = 2;
  spec.k = 1;
  spec.L = 4;
  spec.t_min = spec.t_max = 80;
  spec.seed = 103;
  const SyntheticCohort cohort = generate_cohort(spec);

  BenchConfig cfg;
  cfg.models = {BenchModel::cohort};
  cfg.prefixes = {40};
  cfg.horizons = {5};
  cfg.train.max_epochs = 100;
  cfg.train.early_stop = false;
  cfg.train.holdout_tasks = 0;
  cfg.hmc.chains = 1;
  cfg.hmc.warmup = 80;
  cfg.hmc.iterations = 160;
  cfg.seed = 9;
  cfg.max_folds = 2;

  const BenchReport a = run_loo(cohort.tasks, cohort.truth.basis, cfg);
  const BenchReport b = run_loo(cohort.tasks, cohort.truth.basis, cfg);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    if (std::isfinite(a.rows[i].pred))
      CHECK(a.rows[i].pred == b.rows[i].pred);
    if (a.rows[i].observed) {
      CHECK(a.rows[i].lo == b.rows[i].lo);
      CHECK(a.rows[i].hi == b.rows[i].hi);
    }
  }
  REQUIRE(a.comparisons.size() == b.comparisons.size());
  for (std::size_t i = 0; i < a.comparisons.size(); ++i)
    CHECK(a.comparisons[i].p_two_sided == b.comparisons[i].p_two_sided);

  CHECK_THROWS_AS(run_loo({cohort.tasks[0], cohort.tasks[1]}, cohort.truth.basis, cfg),
                  std::invalid_argument);
}
