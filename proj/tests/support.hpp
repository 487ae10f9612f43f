#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dco/scores.hpp"

namespace dco::fixtures {

/// S(x, y) = y, |C(x)| = max(lambda, 0) * (1 + |x0|). Lets a test pick the
/// score of every sample directly through the response column.
class ToyModel final : public ScoreModel {
 public:
  explicit ToyModel(std::string id) : ScoreModel(Candidate(std::move(id), TaskKind::regression)) {}

  double score(std::span<const double>, double y) const override { return y; }
  double set_size_at(std::span<const double> x, double lambda) const override {
    if (std::isinf(lambda)) return max_size();
    return std::max(lambda, 0.0) * (1.0 + std::fabs(x[0]));
  }
  PredictionSet predict_set(std::span<const double> x, double lambda) const override {
    PredictionSet s;
    s.full = std::isinf(lambda);
    s.upper = lambda;
    s.size = set_size_at(x, lambda);
    return s;
  }
  double max_size() const override { return 1e6; }
  nlohmann::json to_json() const override { return {{"type", "toy"}}; }
};

/// One-feature regression dataset whose responses are the given scores.
inline Dataset score_dataset(const std::vector<double>& scores, const std::vector<double>& x = {}) {
  Dataset d;
  d.kind = TaskKind::regression;
  d.dimension = 1;
  d.responses = scores;
  d.features = x.empty() ? std::vector<double>(scores.size(), 0.0) : x;
  return d;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace dco::fixtures
