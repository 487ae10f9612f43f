#include "dco/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dco/conformal.hpp"

namespace dco::stats {

double percentile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("percentile of empty input");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("percentile p outside [0, 1]");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  if (lo == hi) return sorted[lo];
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double percentile(std::span<const double> values, double p) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return percentile_sorted(sorted, p);
}

double mean(std::span<const double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double mu = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace {

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double x, double a, double b) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("incomplete beta requires a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete beta requires 0 <= x <= 1");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(x, a, b) / a;
  return 1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b;
}

namespace {

struct RankedDiffs {
  std::vector<long> doubled_ranks;  // 2 * rank, integral even with ties
  std::vector<bool> positive;
  double tie_term = 0.0;            // sum of (t^3 - t) over tie groups
};

RankedDiffs rank_differences(const PairedSamples& pairs) {
  std::vector<double> diffs;
  diffs.reserve(pairs.a.size());
  for (std::size_t i = 0; i < pairs.a.size(); ++i) {
    const double d = pairs.a[i] - pairs.b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  std::vector<std::size_t> order(diffs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    return std::fabs(diffs[l]) < std::fabs(diffs[r]);
  });

  RankedDiffs out;
  out.doubled_ranks.resize(diffs.size());
  out.positive.resize(diffs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) {
      ++j;
    }
    // ranks i+1 .. j+1 share their average; doubled that is i+j+2
    const long doubled = static_cast<long>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) {
      out.doubled_ranks[order[k]] = doubled;
      out.positive[order[k]] = diffs[order[k]] > 0.0;
    }
    const double t = static_cast<double>(j - i + 1);
    out.tie_term += t * t * t - t;
    i = j + 1;
  }
  return out;
}

// Null distribution of doubled W+ as probabilities indexed by doubled sum.
std::vector<double> exact_null_distribution(const std::vector<long>& doubled_ranks) {
  long total = 0;
  for (long r : doubled_ranks) total += r;
  std::vector<double> dist(static_cast<std::size_t>(total) + 1, 0.0);
  dist[0] = 1.0;
  long reach = 0;
  for (long r : doubled_ranks) {
    reach += r;
    for (long s = reach; s >= 0; --s) {
      const double keep = dist[static_cast<std::size_t>(s)] * 0.5;
      const double add = s >= r ? dist[static_cast<std::size_t>(s - r)] * 0.5 : 0.0;
      dist[static_cast<std::size_t>(s)] = keep + add;
    }
  }
  return dist;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(const PairedSamples& pairs, WilcoxonMode mode) {
  if (pairs.a.size() != pairs.b.size()) {
    throw std::invalid_argument("paired samples must have equal length");
  }
  if (pairs.a.empty()) throw std::invalid_argument("paired samples must be non-empty");

  const RankedDiffs ranked = rank_differences(pairs);
  WilcoxonResult result;
  result.n_used = ranked.doubled_ranks.size();
  if (result.n_used == 0) {
    result.degenerate = true;
    result.p_value = 1.0;
    return result;
  }

  long doubled_w = 0;
  for (std::size_t i = 0; i < ranked.doubled_ranks.size(); ++i) {
    if (ranked.positive[i]) doubled_w += ranked.doubled_ranks[i];
  }
  result.statistic = static_cast<double>(doubled_w) / 2.0;

  const bool use_exact = mode == WilcoxonMode::exact ||
                         (mode == WilcoxonMode::automatic && result.n_used <= kWilcoxonExactLimit);
  const auto n = static_cast<double>(result.n_used);
  if (use_exact) {
    const std::vector<double> dist = exact_null_distribution(ranked.doubled_ranks);
    double lower = 0.0;
    double upper = 0.0;
    for (std::size_t s = 0; s < dist.size(); ++s) {
      if (static_cast<long>(s) <= doubled_w) lower += dist[s];
      if (static_cast<long>(s) >= doubled_w) upper += dist[s];
    }
    result.exact = true;
    result.p_value = std::min(1.0, 2.0 * std::min(lower, upper));
    return result;
  }

  const double mu = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ranked.tie_term / 48.0;
  if (var <= 0.0) {
    result.p_value = 1.0;
    return result;
  }
  const double dev = result.statistic - mu;
  const double corrected = std::max(0.0, std::fabs(dev) - 0.5);
  const double z = corrected / std::sqrt(var);
  // erfc keeps precision in the far tail where 1 - cdf would round to 0
  result.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return result;
}

double quantile_concentration_bound(std::size_t m, double c, double t) {
  const auto md = static_cast<double>(m);
  const double gap = std::max(0.0, c * t - 2.0 / md);
  return std::min(1.0, 2.0 * std::exp(-2.0 * md * gap * gap));
}

ConcentrationCheck check_quantile_concentration(const ScoreSampler& sampler,
                                                double population_quantile,
                                                double alpha, std::size_t m, double t,
                                                double c, std::size_t trials,
                                                std::uint64_t seed) {
  if (!(t > 0.0) || !(c > 0.0)) throw std::invalid_argument("t and c must be positive");
  if (m == 0 || trials == 0) throw std::invalid_argument("m and trials must be positive");

  ConcentrationCheck check;
  check.t = t;
  check.density_floor_c = c;
  check.m_cal = m;
  check.trials = trials;
  check.bound = quantile_concentration_bound(m, c, t);
  check.vacuous = c * t <= 2.0 / static_cast<double>(m);

  const Alpha level = Alpha::decimal(alpha);
  std::size_t misses = 0;
  std::vector<double> scores(m);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed(seed, trial));
    for (auto& s : scores) s = sampler(rng);
    const double q = conformal::conformal_quantile(scores, level);
    if (!(std::fabs(q - population_quantile) <= t)) ++misses;
  }
  check.observed_rate = static_cast<double>(misses) / static_cast<double>(trials);
  const double p = std::min(check.bound, 1.0);
  check.slack = 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
  check.passed = check.vacuous || check.observed_rate <= check.bound + check.slack;
  return check;
}

}  // namespace dco::stats
