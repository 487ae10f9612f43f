#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dco/conformal.hpp"
#include "dco/riskcontrol.hpp"
#include "dco/scores.hpp"
#include "dco/stats.hpp"
#include "dco/tuning.hpp"

namespace dco::harness {

enum class Method { dco, direct, bq_fixed, bq_matched_phi, bq_recalibrate_dco, split_cp };

std::string_view to_string(Method method);
Method method_from_string(std::string_view text);
/// True for methods whose deployed threshold carries a finite-sample guarantee.
bool certified(Method method);

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
  double train = 0.0;
  double tune = 0.0;
  double cal = 0.0;
  double test = 0.0;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t tune = 0;
  std::size_t cal = 0;
  std::size_t test = 0;

  std::size_t total() const { return train + tune + cal + test; }
};

struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> tune;
  std::vector<std::size_t> cal;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  double tune_frac = 0.0;  // share of the non-training budget (tune + cal)
  double cal_frac = 0.0;

  bool pairwise_disjoint() const;
  /// tune followed by cal: the matched-budget pool for coupled baselines.
  std::vector<std::size_t> pool() const;
};

/// Integer counts proportional to weights summing to `total`, by largest
/// remainder (ties go to the earlier part).
std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights);

/// Deterministic shuffled partition of 0..n-1. Fractions must be
/// non-negative and sum to at most 1; a part with a positive fraction that
/// rounds to zero is an error. Non-empty `strata` (one label per index)
/// splits every class separately.
SplitPlan make_splits(std::size_t n, const SplitFractions& fractions, std::uint64_t seed,
                      std::span<const int> strata = {});

/// Same partition with exact part sizes (stratified proportionally when
/// strata are given).
SplitPlan make_splits(std::size_t n, const SplitSizes& sizes, std::uint64_t seed,
                      std::span<const int> strata = {});

/// "a/b" share of the non-training budget between tune and cal.
struct SplitRatio {
  double tune = 0.5;
  double cal = 0.5;
  std::string label = "50/50";

  static SplitRatio parse(std::string_view text);
};

// ---------------------------------------------------------------------------
// Data

enum class DataMode { fresh, fixed };

/// Where each seed's dataset comes from: a fresh synthetic draw per seed, one
/// fixed synthetic draw, or a loaded precomputed table set.
class TaskSource {
 public:
  static TaskSource synthetic(SyntheticTask task, std::size_t n, DataMode mode,
                              std::uint64_t data_seed = 0);
  static TaskSource fixed(std::shared_ptr<const Dataset> data);

  TaskKind kind() const;
  std::size_t dataset_size() const { return n_; }
  std::shared_ptr<const Dataset> dataset_for(std::uint64_t seed) const;
  const SyntheticTask* synthetic_task() const { return task_ ? &*task_ : nullptr; }

 private:
  std::optional<SyntheticTask> task_;
  std::shared_ptr<const Dataset> fixed_;
  std::size_t n_ = 0;
  DataMode mode_ = DataMode::fixed;
};

// ---------------------------------------------------------------------------
// Trials

struct SplitSpec {
  bool by_count = true;
  SplitSizes sizes;
  SplitFractions fractions;

  /// Spec with the tune + cal budget re-divided by `ratio`.
  SplitSpec with_ratio(const SplitRatio& ratio, std::size_t n) const;
};

struct ExperimentConfig {
  std::vector<Candidate> candidates;
  std::string fixed_candidate;   // empty: first candidate
  Alpha alpha = Alpha::rational(1, 5);
  std::vector<Method> methods{Method::dco};
  std::vector<std::pair<Method, Method>> wilcoxon_pairs;  // empty: auto-declared
  std::size_t n_seeds = 50;
  std::uint64_t master_seed = 0;
  SplitSpec split;
  riskcontrol::BqConfig bq;
  tuning::TuneOptions tune;
  std::size_t workers = 0;       // 0: DCO_WORKERS or hardware concurrency
  nlohmann::json echo;           // raw configuration copied into reports
  nlohmann::json overrides;      // command-line overrides applied on top of it

  const Candidate& fixed() const;
};

struct TrialMetrics {
  Method method = Method::dco;
  double coverage = 0.0;
  double avg_size = 0.0;
  double p95_size = 0.0;
  double threshold = 0.0;
  std::string selected_candidate;
  bool certified = true;
  bool fallback_used = false;      // tuning fallback, or direct/BQ infeasibility
  bool infinite_threshold = false;
  std::size_t test_size = 0;
  std::size_t calibration_size = 0;
  // single-seed threshold trace; NaN where a method has no such stage
  double lambda_tune = std::numeric_limits<double>::quiet_NaN();
  double q_cal = std::numeric_limits<double>::quiet_NaN();
  double lambda_bq = std::numeric_limits<double>::quiet_NaN();
  double p_bq = std::numeric_limits<double>::quiet_NaN();
};

/// Fitted models for one (dataset, train split), shared across methods.
class ModelCache {
 public:
  ModelCache(const Dataset& data, std::vector<std::size_t> train, FitOptions options,
             IndexReadLog* log = nullptr);
  ScoreModelPtr get(const Candidate& candidate);
  std::vector<ScoreModelPtr> all(std::span<const Candidate> candidates);

 private:
  SampleView train_;
  FitOptions options_;
  std::map<std::string, ScoreModelPtr, std::less<>> fitted_;
};

/// Coverage and size of a threshold on the test split. +inf thresholds count
/// as full coverage with the model's max-size sentinel.
TrialMetrics evaluate_threshold(const ScoreModel& model, double threshold, const SampleView& test);

/// Runs one method end to end on one plan. `tuning_reads`, when given,
/// receives every dataset index read by the train/tune stage.
TrialMetrics run_trial(const Dataset& data, const ExperimentConfig& cfg, Method method,
                       const SplitPlan& plan, ModelCache* cache = nullptr,
                       IndexReadLog* tuning_reads = nullptr);

// ---------------------------------------------------------------------------
// Experiments

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};

struct MethodSummary {
  Method method = Method::dco;
  MetricSummary coverage;
  MetricSummary avg_size;
  MetricSummary p95_size;
  MetricSummary threshold;
  std::size_t infinite_trials = 0;   // excluded from size and threshold means
  std::size_t fallback_trials = 0;
  bool certified = true;
  std::map<std::string, std::size_t> selection_frequencies;
  double stability = 0.0;            // modal-candidate fraction
};

struct PairedTest {
  Method a = Method::dco;
  Method b = Method::dco;
  std::string metric;
  std::size_t n_pairs = 0;
  stats::WilcoxonResult result;
};

struct ExperimentReport {
  std::string label;
  Alpha alpha = Alpha::rational(1, 5);
  std::size_t n_seeds = 0;
  std::uint64_t master_seed = 0;
  SplitSizes mean_split;             // sizes of the first plan
  std::string size_units;            // "width" or "labels"
  std::vector<Method> methods;
  std::vector<MethodSummary> summaries;
  std::vector<PairedTest> tests;
  std::map<std::string, std::size_t> selection_frequencies;
  double stability = 0.0;
  std::vector<std::vector<TrialMetrics>> per_seed;  // [seed][method]
  std::vector<std::uint64_t> seeds;
  nlohmann::json config_echo;
  nlohmann::json overrides;

  const MethodSummary& summary(Method method) const;
  nlohmann::json to_json() const;
  std::string per_seed_csv() const;
  std::string summary_table() const;
};

inline constexpr int kReportSchemaVersion = 1;

/// Dataset and split plan for one trial seed: the data comes from
/// derive_seed(seed, 1) and the partition from derive_seed(seed, 2).
/// Classification and precomputed tasks are stratified by label.
struct SeedSetup {
  std::shared_ptr<const Dataset> data;
  SplitPlan plan;
};
SeedSetup setup_seed(const TaskSource& source, const SplitSpec& split, std::uint64_t seed);

std::uint64_t trial_seed(std::uint64_t master, std::size_t index);
std::size_t worker_count(std::size_t requested);

ExperimentReport run_experiment(const TaskSource& source, const ExperimentConfig& cfg);

/// One report per ratio over the same non-training budget.
std::vector<ExperimentReport> ablate_split_ratios(const TaskSource& source,
                                                  const ExperimentConfig& cfg,
                                                  std::span<const SplitRatio> ratios);

/// One report per miscoverage level.
std::vector<ExperimentReport> sweep_alpha(const TaskSource& source, const ExperimentConfig& cfg,
                                          std::span<const Alpha> alphas);

}  // namespace dco::harness
