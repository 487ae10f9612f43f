#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dco/scores.hpp"

namespace dco::tuning {

enum class GridSource { quantile_of_tune, explicit_values, observed_scores };

/// Sorted, strictly increasing, non-empty set of candidate thresholds.
class ThresholdGrid {
 public:
  /// Sorts and de-duplicates; throws if nothing remains or a value is NaN.
  static ThresholdGrid explicit_values(std::vector<double> values);
  /// `count` linear-interpolation quantiles at probabilities (i + 0.5)/count,
  /// plus the maximum score.
  static ThresholdGrid from_quantiles(std::span<const double> scores, std::size_t count = 80);
  /// Every distinct observed score.
  static ThresholdGrid from_scores(std::span<const double> scores);

  const std::vector<double>& values() const { return values_; }
  GridSource source() const { return source_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double max() const { return values_.back(); }

 private:
  ThresholdGrid(std::vector<double> values, GridSource source);
  std::vector<double> values_;
  GridSource source_;
};

/// How each candidate's grid is derived from its tuning scores.
struct GridPolicy {
  GridSource source = GridSource::quantile_of_tune;
  std::size_t count = 80;
  std::vector<double> values;  // explicit_values only

  ThresholdGrid build(std::span<const double> true_scores) const;
  nlohmann::json to_json() const;
  static GridPolicy from_json(const nlohmann::json& j);
};

struct TuneOptions {
  GridPolicy grid;
  /// Feasibility requires empirical risk <= alpha - constraint_slack. Zero is
  /// the plain constraint; epsilon_R gives the tightened one.
  double constraint_slack = 0.0;
  FitOptions fit;
};

struct CandidateRow {
  Candidate candidate;
  std::optional<double> lambda_min;
  double lambda_eval = 0.0;   // lambda_min when feasible, else max(grid)
  double emp_risk = 0.0;
  double emp_size = 0.0;
  double p95_size = 0.0;
  bool feasible = false;
  std::size_t grid_size = 0;

  nlohmann::json to_json() const;
};

struct TuneResult {
  Candidate selected;
  std::size_t selected_index = 0;
  double lambda_tune = 0.0;   // ranking device only, never deployed
  std::vector<CandidateRow> table;
  bool fallback_used = false;
  ScoreModelPtr selected_model;

  nlohmann::json to_json() const;
};

/// Fraction of tuning pairs with S(x, y) > lambda.
double empirical_risk(const ScoreModel& model, const SampleView& tune, double lambda);
/// Mean set size over tuning inputs.
double empirical_size(const ScoreModel& model, const SampleView& tune, double lambda);

/// Index of the smallest grid value whose empirical risk on `sorted_scores`
/// is at most `target`, by binary search. nullopt if max(grid) is infeasible.
std::optional<std::size_t> min_feasible_index(std::span<const double> sorted_scores,
                                              double target, const ThresholdGrid& grid);

std::optional<double> min_feasible_lambda(const ScoreModel& model, const SampleView& tune,
                                          double alpha, const ThresholdGrid& grid);

/// Selection rule over a filled-in table. Feasible rows: smallest emp_size,
/// then p95_size, then lambda, then id. No feasible row: smallest emp_risk,
/// then emp_size, then id. Returns (index, fallback_used).
std::pair<std::size_t, bool> select_row(std::span<const CandidateRow> rows);

/// Scores every already-fitted candidate on the tuning split and selects one.
TuneResult dco_tune_models(std::span<const ScoreModelPtr> models, const SampleView& tune,
                           double alpha, const TuneOptions& options = {});

/// Fits every candidate on train, then selects on tune. Never sees the
/// calibration or test splits.
TuneResult dco_tune(const SampleView& train, const SampleView& tune,
                    std::span<const Candidate> candidates, double alpha,
                    const TuneOptions& options = {});

struct DirectTuneResult {
  Candidate candidate;
  double lambda = 0.0;
  bool feasible = true;     // false: max(grid) returned as fallback
  bool certified = false;   // tuned threshold is deployed without recalibration
  ScoreModelPtr model;
};

DirectTuneResult direct_tune_model(ScoreModelPtr model, const SampleView& tune, double alpha,
                                   const TuneOptions& options = {});
DirectTuneResult direct_tune(const SampleView& train, const SampleView& tune,
                             const Candidate& fixed, double alpha,
                             const TuneOptions& options = {});

/// ceil(max(log(4K/eta) / (2 epsR^2), B^2 log(4K/eta) / (2 epsS^2)))
std::size_t tuning_sample_size(double eps_risk, double eps_size, double eta,
                               std::size_t class_size, double size_bound);

}  // namespace dco::tuning
