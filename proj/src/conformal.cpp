#include "dco/conformal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dco/errors.hpp"

namespace dco {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

Alpha Alpha::decimal(double value) {
  if (!(value > 0.0 && value < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  return Alpha(value, 0, 0);
}

Alpha Alpha::rational(std::int64_t numerator, std::int64_t denominator) {
  if (denominator <= 0 || numerator <= 0 || numerator >= denominator) {
    throw std::invalid_argument("alpha must lie in (0, 1)");
  }
  const std::int64_t g = std::gcd(numerator, denominator);
  return Alpha(static_cast<double>(numerator) / static_cast<double>(denominator), numerator / g,
               denominator / g);
}

namespace {

template <typename T>
T parse_number(std::string_view text) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("cannot parse alpha '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

Alpha Alpha::parse(std::string_view text) {
  try {
    if (const auto slash = text.find('/'); slash != std::string_view::npos) {
      return rational(parse_number<std::int64_t>(text.substr(0, slash)),
                      parse_number<std::int64_t>(text.substr(slash + 1)));
    }
    return decimal(parse_number<double>(text));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("alpha '" + std::string(text) + "': " + e.what());
  }
}

Alpha Alpha::from_json(const nlohmann::json& j) {
  if (j.is_string()) return parse(j.get<std::string>());
  if (j.is_number()) {
    try {
      return decimal(j.get<double>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  throw ConfigError("alpha must be a number or a \"p/q\" string");
}

std::size_t Alpha::conformal_rank(std::size_t m) const {
  const auto m1 = static_cast<std::int64_t>(m) + 1;
  std::int64_t k = 0;
  if (is_rational()) {
    // ceil(m1 (1 - p/q)) = m1 - floor(m1 p / q)
    k = m1 - (m1 * numerator_) / denominator_;
  } else {
    const double x = static_cast<double>(m1) * (1.0 - value_);
    const double nearest = std::round(x);
    if (std::fabs(x - nearest) <= 1e-12 * std::max(1.0, x)) {
      k = static_cast<std::int64_t>(nearest);
    } else {
      k = static_cast<std::int64_t>(std::ceil(x));
    }
  }
  return static_cast<std::size_t>(std::clamp<std::int64_t>(k, 1, m1));
}

std::string Alpha::to_string() const {
  if (is_rational()) return std::to_string(numerator_) + "/" + std::to_string(denominator_);
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value_);
  return std::string(buf, ptr);
}

nlohmann::json Alpha::to_json() const {
  if (is_rational()) return to_string();
  return value_;
}

nlohmann::json threshold_to_json(double threshold) {
  if (threshold == kInf) return "+inf";
  return threshold;
}

double threshold_from_json(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "+inf") return kInf;
  if (j.is_number()) return j.get<double>();
  throw SchemaError("threshold must be a number or \"+inf\"");
}

namespace conformal {

double conformal_quantile(std::span<const double> scores, const Alpha& alpha) {
  if (scores.empty()) throw std::invalid_argument("empty calibration scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("calibration scores must be finite");
  }
  const std::size_t m = scores.size();
  const std::size_t k = alpha.conformal_rank(m);
  if (k == m + 1) return kInf;
  std::vector<double> work(scores.begin(), scores.end());
  auto kth = work.begin() + static_cast<std::ptrdiff_t>(k - 1);
  std::nth_element(work.begin(), kth, work.end());
  return *kth;
}

double exact_coverage(std::size_t m, const Alpha& alpha) {
  return static_cast<double>(alpha.conformal_rank(m)) / static_cast<double>(m + 1);
}

std::string_view to_string(RuleMethod method) {
  switch (method) {
    case RuleMethod::conformal: return "conformal";
    case RuleMethod::risk_control: return "risk-control";
    case RuleMethod::direct_tune: return "direct-tune";
  }
  return "unknown";
}

RuleMethod rule_method_from_string(std::string_view text) {
  if (text == "conformal") return RuleMethod::conformal;
  if (text == "risk-control") return RuleMethod::risk_control;
  if (text == "direct-tune") return RuleMethod::direct_tune;
  throw SchemaError("unknown rule method " + std::string(text));
}

bool CalibratedRule::infinite() const { return threshold == kInf; }

nlohmann::json CalibratedRule::to_json() const {
  nlohmann::json j{{"candidate_id", candidate.id()},
                   {"candidate", candidate.to_json()},
                   {"alpha", alpha.to_json()},
                   {"m_cal", m_cal},
                   {"threshold", threshold_to_json(threshold)},
                   {"method", std::string(to_string(method))},
                   {"certified", certified}};
  if (model) j["model"] = model->to_json();
  return j;
}

CalibratedRule CalibratedRule::from_json(const nlohmann::json& j,
                                         std::shared_ptr<const ScoreTable> table) {
  try {
    CalibratedRule rule{Candidate::from_json(j.at("candidate")),
                        threshold_from_json(j.at("threshold")),
                        Alpha::from_json(j.at("alpha")),
                        j.at("m_cal").get<std::size_t>(),
                        rule_method_from_string(j.value("method", std::string("conformal"))),
                        j.value("certified", true),
                        nullptr};
    if (j.at("candidate_id").get<std::string>() != rule.candidate.id()) {
      throw SchemaError("candidate_id does not match the embedded candidate");
    }
    if (j.contains("model")) {
      rule.model = model_from_json(j.at("model"), std::move(table));
      if (rule.model->candidate().id() != rule.candidate.id()) {
        throw SchemaError("embedded model belongs to a different candidate");
      }
    }
    return rule;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed rule: ") + e.what());
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("malformed rule: ") + e.what());
  }
}

CalibratedRule calibrate(ScoreModelPtr model, const SampleView& cal, const Alpha& alpha) {
  if (!model) throw std::invalid_argument("calibrate needs a fitted model");
  if (cal.empty()) throw std::invalid_argument("empty calibration set");
  std::vector<double> scores(cal.size());
  for (std::size_t i = 0; i < cal.size(); ++i) scores[i] = model->score(cal.x(i), cal.y(i));
  CalibratedRule rule{model->candidate(), conformal_quantile(scores, alpha), alpha, cal.size(),
                      RuleMethod::conformal, true, std::move(model)};
  return rule;
}

PredictionSet predict_set(const CalibratedRule& rule, const ScoreModel& model,
                          std::span<const double> x) {
  if (model.candidate().id() != rule.candidate.id()) {
    throw std::invalid_argument("rule candidate " + rule.candidate.id() +
                                " does not match model candidate " + model.candidate().id());
  }
  return model.predict_set(x, rule.threshold);
}

}  // namespace conformal
}  // namespace dco
