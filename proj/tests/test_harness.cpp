#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "dco/errors.hpp"
#include "dco/harness.hpp"

using namespace dco;
using namespace dco::harness;

namespace {

TaskSource regression_source(std::size_t n = 400) {
  return TaskSource::synthetic(SyntheticTask({TaskKind::regression, 4, 1.0, 0, 1.0, 3}), n,
                               DataMode::fresh, 7);
}

ExperimentConfig small_config(std::vector<Method> methods, std::size_t seeds = 4) {
  ExperimentConfig cfg;
  const auto all = default_regression_candidates();
  cfg.candidates.assign(all.begin(), all.begin() + 4);
  cfg.methods = std::move(methods);
  cfg.n_seeds = seeds;
  cfg.master_seed = 42;
  cfg.split.by_count = true;
  cfg.split.sizes = {100, 100, 100, 100};
  cfg.bq.mc_draws = 300;
  cfg.workers = 1;
  return cfg;
}

bool contains_any(const std::vector<std::size_t>& haystack, const std::vector<std::size_t>& needles) {
  const std::set<std::size_t> s(needles.begin(), needles.end());
  return std::any_of(haystack.begin(), haystack.end(), [&](auto i) { return s.contains(i); });
}

}  // namespace

TEST(LargestRemainder, ExactAndRoundedShares) {
  const double w[] = {0.3, 0.3, 0.2, 0.2};
  EXPECT_EQ(largest_remainder(10, w), (std::vector<std::size_t>{3, 3, 2, 2}));
  const double even[] = {1, 1, 1};
  EXPECT_EQ(largest_remainder(7, even), (std::vector<std::size_t>{3, 2, 2}));
  const double skew[] = {0.45, 0.45, 0.1};
  const auto parts = largest_remainder(11, skew);
  EXPECT_EQ(parts[0] + parts[1] + parts[2], 11u);
}

TEST(MakeSplits, DeterministicDisjointAndSized) {
  const auto a = make_splits(1000, SplitFractions{0.4, 0.2, 0.2, 0.2}, 5);
  const auto b = make_splits(1000, SplitFractions{0.4, 0.2, 0.2, 0.2}, 5);
  const auto c = make_splits(1000, SplitFractions{0.4, 0.2, 0.2, 0.2}, 6);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
  EXPECT_TRUE(a.pairwise_disjoint());
  EXPECT_EQ(a.train.size(), 400u);
  EXPECT_EQ(a.tune.size(), 200u);
  EXPECT_EQ(a.cal.size(), 200u);
  EXPECT_EQ(a.test.size(), 200u);
  const auto pool = a.pool();
  EXPECT_EQ(pool.size(), 400u);
  EXPECT_TRUE(std::equal(a.tune.begin(), a.tune.end(), pool.begin()));
}

TEST(MakeSplits, StratifiedKeepsClassProportions) {
  std::vector<int> labels(900);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 600 ? 0 : (i < 800 ? 1 : 2);
  const auto plan = make_splits(900, SplitSizes{300, 150, 150, 300}, 9, labels);
  EXPECT_TRUE(plan.pairwise_disjoint());
  auto count = [&](const std::vector<std::size_t>& part, int cls) {
    return std::count_if(part.begin(), part.end(), [&](auto i) { return labels[i] == cls; });
  };
  EXPECT_EQ(plan.train.size(), 300u);
  EXPECT_EQ(plan.tune.size(), 150u);
  for (const auto* part : {&plan.train, &plan.tune, &plan.cal, &plan.test}) {
    const double n = static_cast<double>(part->size());
    EXPECT_NEAR(count(*part, 0), n * 2.0 / 3.0, 1.0);
    EXPECT_NEAR(count(*part, 1), n * 2.0 / 9.0, 1.0);
    EXPECT_NEAR(count(*part, 2), n * 1.0 / 9.0, 1.0);
  }
}

TEST(MakeSplits, RejectsEmptyRequestedPart) {
  EXPECT_THROW(make_splits(10, SplitFractions{0.9, 0.01, 0.05, 0.04}, 1), std::invalid_argument);
  EXPECT_THROW(SplitRatio::parse("100/0"), ConfigError);
  EXPECT_THROW(SplitRatio::parse("0/100"), ConfigError);
  EXPECT_THROW(SplitRatio::parse("fifty"), ConfigError);
  const auto r = SplitRatio::parse("20/80");
  EXPECT_DOUBLE_EQ(r.tune / (r.tune + r.cal), 0.2);
  EXPECT_EQ(r.label, "20/80");
}

TEST(SplitSpec, RatioRedividesTheNonTrainingBudget) {
  SplitSpec spec;
  spec.sizes = {400, 200, 200, 200};
  const auto s = spec.with_ratio(SplitRatio::parse("20/80"), 1000);
  EXPECT_EQ(s.sizes.tune, 80u);
  EXPECT_EQ(s.sizes.cal, 320u);
  EXPECT_EQ(s.sizes.train, 400u);
  EXPECT_EQ(s.sizes.test, 200u);
}

TEST(Methods, NamesRoundTripAndCertification) {
  for (Method m : {Method::dco, Method::direct, Method::bq_fixed, Method::bq_matched_phi,
                   Method::bq_recalibrate_dco, Method::split_cp}) {
    EXPECT_EQ(method_from_string(to_string(m)), m);
    EXPECT_EQ(certified(m), m != Method::direct);
  }
  EXPECT_THROW(method_from_string("nope"), ConfigError);
}

TEST(RunTrial, SingleCandidateDcoEqualsSplitConformal) {
  const auto source = regression_source();
  auto cfg = small_config({Method::dco, Method::split_cp});
  cfg.candidates.erase(cfg.candidates.begin() + 1, cfg.candidates.end());
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto setup = setup_seed(source, cfg.split, trial_seed(cfg.master_seed, s));
    const auto dco = run_trial(*setup.data, cfg, Method::dco, setup.plan);
    const auto cp = run_trial(*setup.data, cfg, Method::split_cp, setup.plan);
    EXPECT_EQ(dco.threshold, cp.threshold);
    EXPECT_EQ(dco.coverage, cp.coverage);
    EXPECT_EQ(dco.avg_size, cp.avg_size);
  }
}

TEST(RunTrial, BqMethodsUseTheMatchedPool) {
  const auto source = regression_source();
  const auto cfg = small_config({});
  const auto setup = setup_seed(source, cfg.split, trial_seed(cfg.master_seed, 0));
  ModelCache cache(*setup.data, setup.plan.train, cfg.tune.fit);
  EXPECT_EQ(run_trial(*setup.data, cfg, Method::dco, setup.plan, &cache).calibration_size, 100u);
  EXPECT_EQ(run_trial(*setup.data, cfg, Method::split_cp, setup.plan, &cache).calibration_size, 100u);
  for (Method m : {Method::bq_fixed, Method::bq_matched_phi, Method::bq_recalibrate_dco}) {
    EXPECT_EQ(run_trial(*setup.data, cfg, m, setup.plan, &cache).calibration_size, 200u)
        << to_string(m);
  }
}

TEST(RunTrial, TuningStageNeverReadsCalibrationOrTest) {
  const auto source = regression_source();
  const auto cfg = small_config({});
  const auto setup = setup_seed(source, cfg.split, trial_seed(cfg.master_seed, 1));
  for (Method m : {Method::dco, Method::direct}) {
    IndexReadLog reads;
    run_trial(*setup.data, cfg, m, setup.plan, nullptr, &reads);
    ASSERT_FALSE(reads.reads().empty());
    EXPECT_FALSE(contains_any(reads.reads(), setup.plan.cal)) << to_string(m);
    EXPECT_FALSE(contains_any(reads.reads(), setup.plan.test)) << to_string(m);
    EXPECT_TRUE(contains_any(reads.reads(), setup.plan.tune));
  }
}

TEST(RunTrial, TraceFieldsMatchTheMethod) {
  const auto source = regression_source();
  const auto cfg = small_config({});
  const auto setup = setup_seed(source, cfg.split, trial_seed(cfg.master_seed, 2));
  ModelCache cache(*setup.data, setup.plan.train, cfg.tune.fit);
  const auto dco = run_trial(*setup.data, cfg, Method::dco, setup.plan, &cache);
  EXPECT_TRUE(std::isfinite(dco.lambda_tune));
  EXPECT_EQ(dco.q_cal, dco.threshold);
  EXPECT_TRUE(std::isnan(dco.lambda_bq));
  const auto bq = run_trial(*setup.data, cfg, Method::bq_fixed, setup.plan, &cache);
  EXPECT_TRUE(std::isfinite(bq.lambda_bq));
  EXPECT_GE(bq.p_bq, 0.95);
  EXPECT_TRUE(std::isnan(bq.lambda_tune));
  const auto direct = run_trial(*setup.data, cfg, Method::direct, setup.plan, &cache);
  EXPECT_FALSE(direct.certified);
  EXPECT_EQ(direct.lambda_tune, direct.threshold);
}

TEST(EvaluateThreshold, InfiniteThresholdUsesSentinel) {
  const auto source = regression_source();
  auto cfg = small_config({Method::dco, Method::split_cp});
  cfg.alpha = Alpha::rational(1, 200);  // 100 calibration points cannot reach rank 200
  const auto report = run_experiment(source, cfg);
  for (Method m : cfg.methods) {
    const auto& s = report.summary(m);
    EXPECT_EQ(s.infinite_trials, cfg.n_seeds);
    EXPECT_DOUBLE_EQ(s.coverage.mean, 1.0);
    EXPECT_EQ(s.avg_size.n, 0u);
  }
  for (const auto& row : report.per_seed) {
    EXPECT_TRUE(row[0].infinite_threshold);
    EXPECT_DOUBLE_EQ(row[0].coverage, 1.0);
    EXPECT_GT(row[0].avg_size, 0.0);
  }
}

TEST(Experiment, IdenticalMethodsGiveDegenerateWilcoxon) {
  const auto source = regression_source();
  auto cfg = small_config({Method::dco, Method::split_cp}, 5);
  cfg.candidates.erase(cfg.candidates.begin() + 1, cfg.candidates.end());
  const auto report = run_experiment(source, cfg);
  ASSERT_FALSE(report.tests.empty());
  for (const auto& t : report.tests) {
    EXPECT_TRUE(t.result.degenerate) << t.metric;
    EXPECT_DOUBLE_EQ(t.result.p_value, 1.0);
  }
}

TEST(Experiment, ReproducibleAcrossRunsAndWorkerCounts) {
  const auto source = regression_source();
  auto cfg = small_config({Method::dco, Method::split_cp, Method::bq_fixed}, 6);
  const auto a = run_experiment(source, cfg).to_json().dump();
  const auto b = run_experiment(source, cfg).to_json().dump();
  cfg.workers = 3;
  const auto c = run_experiment(source, cfg).to_json().dump();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Experiment, SeedStreamIsStableWhenSeedCountGrows) {
  const auto source = regression_source();
  auto cfg = small_config({Method::dco}, 3);
  const auto short_run = run_experiment(source, cfg);
  cfg.n_seeds = 5;
  const auto long_run = run_experiment(source, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(short_run.seeds[i], long_run.seeds[i]);
    EXPECT_EQ(short_run.per_seed[i][0].threshold, long_run.per_seed[i][0].threshold);
  }
}

TEST(Experiment, ReportCarriesSummariesAndStability) {
  const auto source = regression_source();
  const auto cfg = small_config({Method::dco, Method::split_cp}, 5);
  const auto report = run_experiment(source, cfg);
  std::size_t total = 0;
  for (const auto& [id, count] : report.selection_frequencies) total += count;
  EXPECT_EQ(total, 5u);
  EXPECT_GT(report.stability, 0.0);
  EXPECT_LE(report.stability, 1.0);
  const auto j = report.to_json();
  EXPECT_EQ(j.at("schema_version"), kReportSchemaVersion);
  EXPECT_TRUE(j.contains("wilcoxon"));
  const auto csv = report.per_seed_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 5 * 2);
  EXPECT_EQ(report.size_units, "width");
}

TEST(Experiment, AblationAndSweepLabelReports) {
  const auto source = regression_source();
  const auto cfg = small_config({Method::dco}, 2);
  const std::vector<SplitRatio> ratios{SplitRatio::parse("20/80"), SplitRatio::parse("80/20")};
  const auto ablation = ablate_split_ratios(source, cfg, ratios);
  ASSERT_EQ(ablation.size(), 2u);
  EXPECT_EQ(ablation[0].label, "20/80");
  EXPECT_EQ(ablation[0].per_seed[0][0].calibration_size, 160u);
  EXPECT_EQ(ablation[1].per_seed[0][0].calibration_size, 40u);
  const std::vector<Alpha> alphas{Alpha::rational(1, 5), Alpha::rational(1, 10)};
  const auto sweep = sweep_alpha(source, cfg, alphas);
  ASSERT_EQ(sweep.size(), 2u);
  EXPECT_EQ(sweep[1].label, "alpha=1/10");
}

TEST(WorkerCount, HonoursRequestAndEnvironment) {
  EXPECT_EQ(worker_count(3), 3u);
  ::setenv("DCO_WORKERS", "2", 1);
  EXPECT_EQ(worker_count(0), 2u);
  ::setenv("DCO_WORKERS", "zero", 1);
  EXPECT_THROW(worker_count(0), ConfigError);
  ::unsetenv("DCO_WORKERS");
  EXPECT_GE(worker_count(0), 1u);
}

TEST(TaskSource, FreshAndFixedModes) {
  const SyntheticTask task({TaskKind::regression, 2, 1.0, 0, 1.0, 3});
  const auto fresh = TaskSource::synthetic(task, 50, DataMode::fresh, 1);
  const auto fixed = TaskSource::synthetic(task, 50, DataMode::fixed, 1);
  EXPECT_NE(fresh.dataset_for(1)->responses, fresh.dataset_for(2)->responses);
  EXPECT_EQ(fixed.dataset_for(1)->responses, fixed.dataset_for(2)->responses);
  EXPECT_EQ(fresh.dataset_size(), 50u);
}
