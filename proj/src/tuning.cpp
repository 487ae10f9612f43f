#include "dco/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <tuple>

#include "dco/conformal.hpp"
#include "dco/errors.hpp"
#include "dco/stats.hpp"

namespace dco::tuning {

namespace {

constexpr double kRiskTolerance = 1e-12;

std::vector<double> true_scores(const ScoreModel& model, const SampleView& view) {
  std::vector<double> scores(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) scores[i] = model.score(view.x(i), view.y(i));
  return scores;
}

double risk_from_sorted(std::span<const double> sorted, double lambda) {
  const auto covered = std::upper_bound(sorted.begin(), sorted.end(), lambda) - sorted.begin();
  return static_cast<double>(sorted.size() - static_cast<std::size_t>(covered)) /
         static_cast<double>(sorted.size());
}

std::string_view source_name(GridSource source) {
  switch (source) {
    case GridSource::quantile_of_tune: return "quantile";
    case GridSource::explicit_values: return "explicit";
    case GridSource::observed_scores: return "scores";
  }
  return "unknown";
}

}  // namespace

ThresholdGrid::ThresholdGrid(std::vector<double> values, GridSource source)
    : values_(std::move(values)), source_(source) {}

ThresholdGrid ThresholdGrid::explicit_values(std::vector<double> values) {
  for (double v : values) {
    if (std::isnan(v)) throw std::invalid_argument("threshold grid contains NaN");
  }
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  if (values.empty()) throw std::invalid_argument("threshold grid must be non-empty");
  return ThresholdGrid(std::move(values), GridSource::explicit_values);
}

ThresholdGrid ThresholdGrid::from_quantiles(std::span<const double> scores, std::size_t count) {
  if (scores.empty()) throw std::invalid_argument("quantile grid needs tuning scores");
  if (count == 0) throw std::invalid_argument("quantile grid needs at least one point");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> values;
  values.reserve(count + 1);
  for (std::size_t i = 0; i < count; ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(count);
    values.push_back(stats::percentile_sorted(sorted, p));
  }
  values.push_back(sorted.back());
  auto grid = explicit_values(std::move(values));
  grid.source_ = GridSource::quantile_of_tune;
  return grid;
}

ThresholdGrid ThresholdGrid::from_scores(std::span<const double> scores) {
  auto grid = explicit_values(std::vector<double>(scores.begin(), scores.end()));
  grid.source_ = GridSource::observed_scores;
  return grid;
}

ThresholdGrid GridPolicy::build(std::span<const double> scores) const {
  switch (source) {
    case GridSource::quantile_of_tune: return ThresholdGrid::from_quantiles(scores, count);
    case GridSource::explicit_values: return ThresholdGrid::explicit_values(values);
    case GridSource::observed_scores: return ThresholdGrid::from_scores(scores);
  }
  throw std::logic_error("unhandled grid source");
}

nlohmann::json GridPolicy::to_json() const {
  nlohmann::json j{{"policy", std::string(source_name(source))}};
  if (source == GridSource::quantile_of_tune) j["count"] = count;
  if (source == GridSource::explicit_values) j["values"] = values;
  return j;
}

GridPolicy GridPolicy::from_json(const nlohmann::json& j) {
  GridPolicy policy;
  const std::string name = j.value("policy", std::string("quantile"));
  if (name == "quantile") {
    policy.source = GridSource::quantile_of_tune;
    policy.count = j.value("count", std::size_t{80});
    if (policy.count == 0) throw ConfigError("grid.count must be positive");
  } else if (name == "explicit") {
    policy.source = GridSource::explicit_values;
    policy.values = j.at("values").get<std::vector<double>>();
    if (policy.values.empty()) throw ConfigError("grid.values must be non-empty");
  } else if (name == "scores") {
    policy.source = GridSource::observed_scores;
  } else {
    throw ConfigError("unknown grid policy " + name);
  }
  return policy;
}

nlohmann::json CandidateRow::to_json() const {
  nlohmann::json j{{"id", candidate.id()},
                   {"score_variant", candidate.text_or("score_variant", "posterior_nll")},
                   {"params", candidate.to_json().at("params")},
                   {"lambda", lambda_min ? nlohmann::json(*lambda_min) : nlohmann::json(nullptr)},
                   {"lambda_eval", lambda_eval},
                   {"status", feasible ? "feasible" : "infeasible"},
                   {"emp_risk", emp_risk},
                   {"avg_size", emp_size},
                   {"p95_size", p95_size},
                   {"grid_size", grid_size}};
  return j;
}

nlohmann::json TuneResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : table) rows.push_back(row.to_json());
  return {{"selected", selected.id()},
          {"selected_candidate", selected.to_json()},
          {"lambda_tune", lambda_tune},
          {"lambda_tune_status", "discard before deployment"},
          {"fallback_used", fallback_used},
          {"candidates", rows}};
}

double empirical_risk(const ScoreModel& model, const SampleView& tune, double lambda) {
  if (tune.empty()) throw std::invalid_argument("empty tuning set");
  std::size_t missed = 0;
  for (std::size_t i = 0; i < tune.size(); ++i) {
    if (model.score(tune.x(i), tune.y(i)) > lambda) ++missed;
  }
  return static_cast<double>(missed) / static_cast<double>(tune.size());
}

double empirical_size(const ScoreModel& model, const SampleView& tune, double lambda) {
  if (tune.empty()) throw std::invalid_argument("empty tuning set");
  double total = 0.0;
  for (std::size_t i = 0; i < tune.size(); ++i) total += model.set_size_at(tune.x(i), lambda);
  return total / static_cast<double>(tune.size());
}

std::optional<std::size_t> min_feasible_index(std::span<const double> sorted_scores,
                                              double target, const ThresholdGrid& grid) {
  if (sorted_scores.empty()) throw std::invalid_argument("empty tuning scores");
  const auto feasible = [&](std::size_t g) {
    return risk_from_sorted(sorted_scores, grid[g]) <= target + kRiskTolerance;
  };
  // risk is non-increasing along the grid, so feasibility is a suffix
  std::size_t lo = 0;
  std::size_t hi = grid.size();
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (feasible(mid)) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  if (lo == grid.size()) return std::nullopt;
  return lo;
}

std::optional<double> min_feasible_lambda(const ScoreModel& model, const SampleView& tune,
                                          double alpha, const ThresholdGrid& grid) {
  auto scores = true_scores(model, tune);
  std::sort(scores.begin(), scores.end());
  const auto index = min_feasible_index(scores, alpha, grid);
  if (!index) return std::nullopt;
  return grid[*index];
}

std::pair<std::size_t, bool> select_row(std::span<const CandidateRow> rows) {
  if (rows.empty()) throw std::invalid_argument("empty candidate table");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].feasible) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& a = rows[i];
    const auto& b = rows[*best];
    if (std::tie(a.emp_size, a.p95_size, a.lambda_eval, a.candidate.id()) <
        std::tie(b.emp_size, b.p95_size, b.lambda_eval, b.candidate.id())) {
      best = i;
    }
  }
  if (best) return {*best, false};

  std::size_t fallback = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = rows[fallback];
    if (std::tie(a.emp_risk, a.emp_size, a.candidate.id()) <
        std::tie(b.emp_risk, b.emp_size, b.candidate.id())) {
      fallback = i;
    }
  }
  return {fallback, true};
}

namespace {

CandidateRow evaluate_candidate(const ScoreModel& model, const SampleView& tune, double alpha,
                                const TuneOptions& options) {
  if (tune.empty()) throw std::invalid_argument("empty tuning set");
  auto scores = true_scores(model, tune);
  const ThresholdGrid grid = options.grid.build(scores);
  std::sort(scores.begin(), scores.end());

  CandidateRow row{model.candidate()};
  row.grid_size = grid.size();
  const auto index = min_feasible_index(scores, alpha - options.constraint_slack, grid);
  row.feasible = index.has_value();
  row.lambda_eval = index ? grid[*index] : grid.max();
  if (index) row.lambda_min = row.lambda_eval;
  row.emp_risk = risk_from_sorted(scores, row.lambda_eval);

  std::vector<double> sizes(tune.size());
  for (std::size_t i = 0; i < tune.size(); ++i) sizes[i] = model.set_size_at(tune.x(i), row.lambda_eval);
  row.emp_size = stats::mean(sizes);
  row.p95_size = stats::percentile(sizes, 0.95);
  return row;
}

}  // namespace

TuneResult dco_tune_models(std::span<const ScoreModelPtr> models, const SampleView& tune,
                           double alpha, const TuneOptions& options) {
  if (models.empty()) throw std::invalid_argument("empty candidate list");
  TuneResult result{models.front()->candidate()};
  result.table.reserve(models.size());
  for (const auto& model : models) result.table.push_back(evaluate_candidate(*model, tune, alpha, options));
  const auto [index, fallback] = select_row(result.table);
  result.selected_index = index;
  result.selected = result.table[index].candidate;
  result.lambda_tune = result.table[index].lambda_eval;
  result.fallback_used = fallback;
  result.selected_model = models[index];
  return result;
}

TuneResult dco_tune(const SampleView& train, const SampleView& tune,
                    std::span<const Candidate> candidates, double alpha,
                    const TuneOptions& options) {
  if (candidates.empty()) throw std::invalid_argument("empty candidate list");
  std::vector<ScoreModelPtr> models;
  models.reserve(candidates.size());
  for (const auto& candidate : candidates) models.push_back(fit_candidate(train, candidate, options.fit));
  return dco_tune_models(models, tune, alpha, options);
}

DirectTuneResult direct_tune_model(ScoreModelPtr model, const SampleView& tune, double alpha,
                                   const TuneOptions& options) {
  if (!model) throw std::invalid_argument("direct tune needs a fitted model");
  if (tune.empty()) throw std::invalid_argument("empty tuning set");
  auto scores = true_scores(*model, tune);
  const ThresholdGrid grid = options.grid.build(scores);
  std::sort(scores.begin(), scores.end());
  const auto index = min_feasible_index(scores, alpha - options.constraint_slack, grid);
  DirectTuneResult result{model->candidate()};
  result.feasible = index.has_value();
  result.lambda = index ? grid[*index] : grid.max();
  result.model = std::move(model);
  return result;
}

DirectTuneResult direct_tune(const SampleView& train, const SampleView& tune,
                             const Candidate& fixed, double alpha, const TuneOptions& options) {
  return direct_tune_model(fit_candidate(train, fixed, options.fit), tune, alpha, options);
}

std::size_t tuning_sample_size(double eps_risk, double eps_size, double eta,
                               std::size_t class_size, double size_bound) {
  if (!(eps_risk > 0.0) || !(eps_size > 0.0) || !(eta > 0.0) || !(eta < 1.0) ||
      class_size == 0 || !(size_bound > 0.0)) {
    throw std::invalid_argument("tuning_sample_size needs positive arguments and eta < 1");
  }
  const double log_term = std::log(4.0 * static_cast<double>(class_size) / eta);
  const double risk_branch = log_term / (2.0 * eps_risk * eps_risk);
  const double size_branch = size_bound * size_bound * log_term / (2.0 * eps_size * eps_size);
  return static_cast<std::size_t>(std::ceil(std::max(risk_branch, size_branch)));
}

}  // namespace dco::tuning
