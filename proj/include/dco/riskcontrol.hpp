#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "dco/conformal.hpp"
#include "dco/rng.hpp"
#include "dco/scores.hpp"
#include "dco/tuning.hpp"

namespace dco::riskcontrol {

struct BqConfig {
  double delta = 0.05;        // failure probability
  double loss_bound = 1.0;    // B, worst-case loss of the unseen point
  std::size_t mc_draws = 1000;
  std::uint64_t rng_seed = 0;
  /// One Dirichlet draw matrix shared by every lambda. Off: fresh draws per
  /// lambda and a linear scan (sensitivity checks only).
  bool common_draws = true;

  void validate() const;
  nlohmann::json to_json() const;
};

struct BqDiagnostics {
  bool feasible = false;
  double selected_lambda = 0.0;   // max(grid) when infeasible
  double feasibility_prob = 0.0;  // p_hat at selected_lambda
  std::map<double, double> per_lambda_probs;  // every lambda evaluated
  double empirical_risk = 0.0;    // pool risk at selected_lambda
  /// (1 - delta) quantile of L+ minus the pool risk, at selected_lambda.
  double empirical_margin = 0.0;
  std::size_t pool_size = 0;

  nlohmann::json to_json(bool include_curve = false) const;
};

/// M flat-Dirichlet weight vectors over m + 1 coordinates; the last
/// coordinate is the unseen point.
class DirichletDraws {
 public:
  DirichletDraws(std::size_t m, std::size_t draws, std::uint64_t seed);

  std::size_t m() const { return m_; }
  std::size_t draws() const { return draws_; }
  std::span<const double> weights(std::size_t j) const {
    return {weights_.data() + j * (m_ + 1), m_ + 1};
  }

  /// L+ for draw j: sum_i w_i loss_i + w_{m+1} B.
  double upper_bound(std::size_t j, std::span<const double> losses, double loss_bound) const;

 private:
  std::size_t m_;
  std::size_t draws_;
  std::vector<double> weights_;
};

/// Fills `out` (size m + 1) with one normalized flat-Dirichlet draw. Shared by
/// DirichletDraws and the streaming path so both see identical weights.
void draw_dirichlet(Rng& rng, std::span<double> out);

/// p_hat = (1/M) #{j : L+_j <= alpha}.
double feasibility_probability(const DirichletDraws& draws, std::span<const double> losses,
                               double alpha, double loss_bound);

using LossFunction = std::function<std::vector<double>(double lambda)>;

/// Smallest grid lambda with p_hat(lambda) >= 1 - delta. Losses must be
/// pointwise non-increasing in lambda and lie in [0, B].
BqDiagnostics bq_threshold(const LossFunction& losses_at, const tuning::ThresholdGrid& grid,
                           double alpha, const BqConfig& cfg);

/// Same selection for miscoverage-indicator losses 1{score_i > lambda},
/// streaming over draws so memory stays O(m + |grid|). The full p_hat curve
/// is returned. Passing `shared` reuses an already drawn weight matrix (it
/// must hold cfg.mc_draws draws over the pool); the result is identical to
/// drawing from cfg.rng_seed.
BqDiagnostics bq_threshold_scores(std::span<const double> pool_scores,
                                  const tuning::ThresholdGrid& grid, double alpha,
                                  const BqConfig& cfg, const DirichletDraws* shared = nullptr);

struct BqResult {
  conformal::CalibratedRule rule;
  BqDiagnostics diagnostics;
};

/// Coupled risk-control calibration on the pool. The default grid is every
/// distinct pool score, where the empirical losses change. An infeasible
/// pool yields a +inf threshold.
BqResult bq_calibrate(ScoreModelPtr model, const SampleView& pool, const Alpha& alpha,
                      const BqConfig& cfg, const tuning::ThresholdGrid* grid = nullptr,
                      const DirichletDraws* shared = nullptr);

struct MatchedPhiResult {
  BqResult best;
  std::size_t selected_index = 0;
  std::vector<double> pool_sizes;  // pool-average size at each candidate's BQ threshold
};

/// Exploratory: BQ per candidate, then the candidate with the smallest
/// pool-average set size at its own threshold (ties by id).
MatchedPhiResult bq_matched_phi(std::span<const ScoreModelPtr> models, const SampleView& pool,
                                const Alpha& alpha, const BqConfig& cfg);

}  // namespace dco::riskcontrol
