#include "dco/riskcontrol.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <tuple>

#include "dco/rng.hpp"
#include "dco/stats.hpp"

namespace dco::riskcontrol {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::size_t required_count(const BqConfig& cfg) {
  return static_cast<std::size_t>(
      std::ceil((1.0 - cfg.delta) * static_cast<double>(cfg.mc_draws) - 1e-9));
}

double as_probability(std::size_t count, std::size_t draws) {
  return static_cast<double>(count) / static_cast<double>(draws);
}

}  // namespace

void BqConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
  if (!(loss_bound > 0.0)) throw std::invalid_argument("loss bound B must be positive");
  if (mc_draws < 1) throw std::invalid_argument("need at least one Dirichlet draw");
}

nlohmann::json BqConfig::to_json() const {
  return {{"delta", delta},
          {"loss_bound", loss_bound},
          {"mc_draws", mc_draws},
          {"rng_seed", rng_seed},
          {"common_draws", common_draws}};
}

nlohmann::json BqDiagnostics::to_json(bool include_curve) const {
  nlohmann::json j{{"feasible", feasible},
                   {"selected_lambda", selected_lambda},
                   {"feasibility_prob", feasibility_prob},
                   {"empirical_risk", empirical_risk},
                   {"empirical_margin", empirical_margin},
                   {"pool_size", pool_size}};
  if (include_curve) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [lambda, p] : per_lambda_probs) curve.push_back({lambda, p});
    j["curve"] = curve;
  }
  return j;
}

void draw_dirichlet(Rng& rng, std::span<double> out) {
  std::exponential_distribution<double> exponential(1.0);
  double total = 0.0;
  for (double& w : out) {
    w = exponential(rng);
    total += w;
  }
  for (double& w : out) w /= total;
}

DirichletDraws::DirichletDraws(std::size_t m, std::size_t draws, std::uint64_t seed)
    : m_(m), draws_(draws), weights_(draws * (m + 1)) {
  Rng rng(seed);
  for (std::size_t j = 0; j < draws_; ++j) {
    draw_dirichlet(rng, std::span<double>(weights_.data() + j * (m_ + 1), m_ + 1));
  }
}

double DirichletDraws::upper_bound(std::size_t j, std::span<const double> losses,
                                   double loss_bound) const {
  if (losses.size() != m_) throw std::invalid_argument("loss vector length != pool size");
  const auto w = weights(j);
  double total = w[m_] * loss_bound;
  for (std::size_t i = 0; i < m_; ++i) total += w[i] * losses[i];
  return total;
}

double feasibility_probability(const DirichletDraws& draws, std::span<const double> losses,
                               double alpha, double loss_bound) {
  std::size_t hits = 0;
  for (std::size_t j = 0; j < draws.draws(); ++j) {
    if (draws.upper_bound(j, losses, loss_bound) <= alpha) ++hits;
  }
  return as_probability(hits, draws.draws());
}

namespace {

void check_losses(std::span<const double> losses, double loss_bound) {
  for (double l : losses) {
    if (!(l >= 0.0 && l <= loss_bound)) throw std::invalid_argument("loss outside [0, B]");
  }
}

double margin_at(const std::vector<double>& upper_bounds, double risk, double delta) {
  return stats::percentile(upper_bounds, 1.0 - delta) - risk;
}

}  // namespace

BqDiagnostics bq_threshold(const LossFunction& losses_at, const tuning::ThresholdGrid& grid,
                           double alpha, const BqConfig& cfg) {
  cfg.validate();
  const std::vector<double> probe = losses_at(grid[0]);
  const std::size_t m = probe.size();
  if (m == 0) throw std::invalid_argument("empty calibration pool");
  const std::size_t need = required_count(cfg);

  BqDiagnostics diag;
  diag.pool_size = m;

  std::optional<DirichletDraws> common;
  if (cfg.common_draws) common.emplace(m, cfg.mc_draws, cfg.rng_seed);

  auto draws_for = [&](std::size_t g) -> DirichletDraws {
    return DirichletDraws(m, cfg.mc_draws, derive_seed(cfg.rng_seed, g));
  };
  auto probability = [&](std::size_t g) {
    const std::vector<double> losses = losses_at(grid[g]);
    if (losses.size() != m) throw std::invalid_argument("loss vector length changed with lambda");
    check_losses(losses, cfg.loss_bound);
    const double p = cfg.common_draws
                         ? feasibility_probability(*common, losses, alpha, cfg.loss_bound)
                         : feasibility_probability(draws_for(g), losses, alpha, cfg.loss_bound);
    diag.per_lambda_probs[grid[g]] = p;
    return p;
  };
  auto feasible = [&](std::size_t g) {
    return probability(g) * static_cast<double>(cfg.mc_draws) >= static_cast<double>(need) - 1e-9;
  };

  std::size_t selected = grid.size();
  if (cfg.common_draws) {
    // p_hat is non-decreasing in lambda under shared draws
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
    selected = lo;
  } else {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (feasible(g)) {
        selected = g;
        break;
      }
    }
  }

  diag.feasible = selected < grid.size();
  const std::size_t at = diag.feasible ? selected : grid.size() - 1;
  diag.selected_lambda = grid[at];
  if (!diag.per_lambda_probs.contains(grid[at])) probability(at);
  diag.feasibility_prob = diag.per_lambda_probs.at(grid[at]);

  const std::vector<double> losses = losses_at(grid[at]);
  diag.empirical_risk = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(m);
  const DirichletDraws margin_draws = cfg.common_draws ? *common : draws_for(at);
  std::vector<double> bounds(cfg.mc_draws);
  for (std::size_t j = 0; j < cfg.mc_draws; ++j) {
    bounds[j] = margin_draws.upper_bound(j, losses, cfg.loss_bound);
  }
  diag.empirical_margin = margin_at(bounds, diag.empirical_risk, cfg.delta);
  return diag;
}

BqDiagnostics bq_threshold_scores(std::span<const double> pool_scores,
                                  const tuning::ThresholdGrid& grid, double alpha,
                                  const BqConfig& cfg, const DirichletDraws* shared) {
  cfg.validate();
  const std::size_t m = pool_scores.size();
  if (m == 0) throw std::invalid_argument("empty calibration pool");
  if (shared != nullptr && (shared->m() != m || shared->draws() != cfg.mc_draws)) {
    throw std::invalid_argument("shared Dirichlet draws do not match the pool");
  }

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pool_scores[a] < pool_scores[b]; });
  std::vector<double> sorted(m);
  for (std::size_t p = 0; p < m; ++p) sorted[p] = pool_scores[order[p]];
  // first sorted position whose score exceeds each grid value
  std::vector<std::size_t> first_miss(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    first_miss[g] = static_cast<std::size_t>(
        std::upper_bound(sorted.begin(), sorted.end(), grid[g]) - sorted.begin());
  }

  std::vector<double> own(m + 1);
  std::vector<double> suffix(m + 1);
  std::optional<Rng> rng;
  // fills suffix[p] = sum of weights of sorted positions >= p for draw j and
  // returns the unseen-point weight
  auto next_draw = [&](std::size_t j) {
    std::span<const double> w;
    if (shared != nullptr) {
      w = shared->weights(j);
    } else {
      draw_dirichlet(*rng, own);
      w = own;
    }
    suffix[m] = 0.0;
    for (std::size_t p = m; p-- > 0;) suffix[p] = suffix[p + 1] + w[order[p]];
    return w[m];
  };

  std::vector<std::size_t> hits(grid.size(), 0);
  rng.emplace(cfg.rng_seed);
  for (std::size_t j = 0; j < cfg.mc_draws; ++j) {
    const double tail = next_draw(j) * cfg.loss_bound;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (suffix[first_miss[g]] + tail <= alpha) ++hits[g];
    }
  }

  BqDiagnostics diag;
  diag.pool_size = m;
  const std::size_t need = required_count(cfg);
  std::size_t selected = grid.size();
  for (std::size_t g = 0; g < grid.size(); ++g) {
    diag.per_lambda_probs[grid[g]] = as_probability(hits[g], cfg.mc_draws);
    if (selected == grid.size() && hits[g] >= need) selected = g;
  }
  diag.feasible = selected < grid.size();
  const std::size_t at = diag.feasible ? selected : grid.size() - 1;
  diag.selected_lambda = grid[at];
  diag.feasibility_prob = as_probability(hits[at], cfg.mc_draws);
  diag.empirical_risk = static_cast<double>(m - first_miss[at]) / static_cast<double>(m);

  // second pass over the same draws for the margin at the selected lambda
  rng.emplace(cfg.rng_seed);
  std::vector<double> bounds(cfg.mc_draws);
  for (std::size_t j = 0; j < cfg.mc_draws; ++j) {
    const double tail = next_draw(j) * cfg.loss_bound;
    bounds[j] = suffix[first_miss[at]] + tail;
  }
  diag.empirical_margin = margin_at(bounds, diag.empirical_risk, cfg.delta);
  return diag;
}

BqResult bq_calibrate(ScoreModelPtr model, const SampleView& pool, const Alpha& alpha,
                      const BqConfig& cfg, const tuning::ThresholdGrid* grid,
                      const DirichletDraws* shared) {
  if (!model) throw std::invalid_argument("bq_calibrate needs a fitted model");
  if (pool.empty()) throw std::invalid_argument("empty calibration pool");
  std::vector<double> scores(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) scores[i] = model->score(pool.x(i), pool.y(i));

  const tuning::ThresholdGrid own_grid =
      grid != nullptr ? *grid : tuning::ThresholdGrid::from_scores(scores);
  BqDiagnostics diag;
  if (cfg.common_draws) {
    diag = bq_threshold_scores(scores, own_grid, alpha.value(), cfg, shared);
  } else {
    const auto losses_at = [&](double lambda) {
      std::vector<double> losses(scores.size());
      for (std::size_t i = 0; i < scores.size(); ++i) losses[i] = scores[i] > lambda ? 1.0 : 0.0;
      return losses;
    };
    diag = bq_threshold(losses_at, own_grid, alpha.value(), cfg);
  }

  conformal::CalibratedRule rule{model->candidate(),
                                 diag.feasible ? diag.selected_lambda : kInf,
                                 alpha,
                                 pool.size(),
                                 conformal::RuleMethod::risk_control,
                                 true,
                                 std::move(model)};
  return {std::move(rule), std::move(diag)};
}

MatchedPhiResult bq_matched_phi(std::span<const ScoreModelPtr> models, const SampleView& pool,
                                const Alpha& alpha, const BqConfig& cfg) {
  if (models.empty()) throw std::invalid_argument("empty candidate list");
  std::vector<BqResult> results;
  std::vector<double> pool_sizes;
  // every candidate sees the same pool and seed, so the weights are drawn once
  std::optional<DirichletDraws> draws;
  if (cfg.common_draws) draws.emplace(pool.size(), cfg.mc_draws, cfg.rng_seed);
  for (const auto& model : models) {
    BqResult r = bq_calibrate(model, pool, alpha, cfg, nullptr, draws ? &*draws : nullptr);
    double size = kInf;
    if (!r.rule.infinite()) {
      size = 0.0;
      for (std::size_t i = 0; i < pool.size(); ++i) size += model->set_size_at(pool.x(i), r.rule.threshold);
      size /= static_cast<double>(pool.size());
    }
    pool_sizes.push_back(size);
    results.push_back(std::move(r));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < results.size(); ++i) {
    const auto& id_i = models[i]->candidate().id();
    const auto& id_b = models[best]->candidate().id();
    if (std::tie(pool_sizes[i], id_i) < std::tie(pool_sizes[best], id_b)) best = i;
  }
  return {std::move(results[best]), best, std::move(pool_sizes)};
}

}  // namespace dco::riskcontrol
