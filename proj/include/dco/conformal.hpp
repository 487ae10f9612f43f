#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "dco/scores.hpp"

namespace dco {

/// Miscoverage level in (0, 1). A rational p/q form keeps the conformal
/// rank exact; a decimal form snaps (m+1)(1-alpha) to an integer when it is
/// within 1e-12 (relative) of one before taking the ceiling.
class Alpha {
 public:
  static Alpha decimal(double value);
  static Alpha rational(std::int64_t numerator, std::int64_t denominator);
  /// "1/5" or "0.2".
  static Alpha parse(std::string_view text);
  static Alpha from_json(const nlohmann::json& j);

  double value() const { return value_; }
  bool is_rational() const { return denominator_ != 0; }
  std::int64_t numerator() const { return numerator_; }
  std::int64_t denominator() const { return denominator_; }

  /// k_alpha = ceil((m + 1)(1 - alpha)), in [1, m + 1].
  std::size_t conformal_rank(std::size_t m) const;

  std::string to_string() const;
  nlohmann::json to_json() const;

 private:
  Alpha(double value, std::int64_t numerator, std::int64_t denominator)
      : value_(value), numerator_(numerator), denominator_(denominator) {}

  double value_;
  std::int64_t numerator_ = 0;
  std::int64_t denominator_ = 0;
};

namespace conformal {

/// S_(k_alpha) of the scores, or +inf when k_alpha = m + 1. Throws on empty
/// input or non-finite scores. Ties are kept (sorted multiset).
double conformal_quantile(std::span<const double> scores, const Alpha& alpha);

/// Coverage P(S_{m+1} <= S_(k)) for exchangeable continuous scores: k/(m+1).
double exact_coverage(std::size_t m, const Alpha& alpha);

enum class RuleMethod { conformal, risk_control, direct_tune };

std::string_view to_string(RuleMethod method);
RuleMethod rule_method_from_string(std::string_view text);

/// A deployable (structure, threshold) pair.
struct CalibratedRule {
  Candidate candidate;
  double threshold = 0.0;   // may be +inf
  Alpha alpha = Alpha::decimal(0.1);
  std::size_t m_cal = 0;
  RuleMethod method = RuleMethod::conformal;
  bool certified = true;
  ScoreModelPtr model;      // fitted structure the threshold applies to

  bool infinite() const;
  nlohmann::json to_json() const;
  /// Restores the rule; the model is rebuilt when the JSON embeds one.
  static CalibratedRule from_json(const nlohmann::json& j,
                                  std::shared_ptr<const ScoreTable> table = nullptr);
};

/// Scores every calibration pair with the model and takes the exact
/// split-conformal quantile.
CalibratedRule calibrate(ScoreModelPtr model, const SampleView& cal, const Alpha& alpha);

/// {y : S(x, y) <= threshold} for the rule's structure.
PredictionSet predict_set(const CalibratedRule& rule, const ScoreModel& model,
                          std::span<const double> x);

}  // namespace conformal

/// JSON encoding for thresholds: finite numbers as-is, +inf as "+inf".
nlohmann::json threshold_to_json(double threshold);
double threshold_from_json(const nlohmann::json& j);

}  // namespace dco
