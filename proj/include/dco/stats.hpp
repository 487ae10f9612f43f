#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dco/rng.hpp"

namespace dco::stats {

/// Linear-interpolation empirical quantile: h = p*(n-1) on the sorted
/// values, interpolated between floor(h) and ceil(h). Throws on empty input
/// or p outside [0, 1].
double percentile(std::span<const double> values, double p);

/// Same as percentile() for input that is already sorted ascending.
double percentile_sorted(std::span<const double> sorted, double p);

double mean(std::span<const double> values);

/// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
double stddev(std::span<const double> values);

double normal_cdf(double z);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double regularized_incomplete_beta(double x, double a, double b);

struct PairedSamples {
  std::vector<double> a;
  std::vector<double> b;
};

enum class WilcoxonMode { automatic, exact, normal_approx };

struct WilcoxonResult {
  double p_value = 1.0;
  double statistic = 0.0;  // W+ (sum of ranks of positive differences)
  std::size_t n_used = 0;  // nonzero differences
  bool degenerate = false; // every difference was zero
  bool exact = false;
};

/// Two-sided paired signed-rank test. Zero differences are dropped, tied
/// |d| get average ranks. Exact mode computes the null distribution of W+
/// over all 2^n sign assignments; automatic uses exact for n <= 12.
WilcoxonResult wilcoxon_signed_rank(const PairedSamples& pairs,
                                    WilcoxonMode mode = WilcoxonMode::automatic);

inline constexpr std::size_t kWilcoxonExactLimit = 12;

struct ConcentrationCheck {
  double t = 0.0;
  double density_floor_c = 0.0;
  std::size_t m_cal = 0;
  std::size_t trials = 0;
  double bound = 1.0;
  double observed_rate = 0.0;
  double slack = 0.0;  // 3 sigma binomial slack at the bound
  bool vacuous = false;
  bool passed = false;
};

/// 2 exp(-2 m (c t - 2/m)_+^2), capped at 1.
double quantile_concentration_bound(std::size_t m, double c, double t);

using ScoreSampler = std::function<double(Rng&)>;

/// Runs `trials` independent conformal calibrations of size m on draws from
/// `sampler` and measures how often the calibrated quantile misses
/// `population_quantile` by more than t.
ConcentrationCheck check_quantile_concentration(const ScoreSampler& sampler,
                                                double population_quantile,
                                                double alpha, std::size_t m, double t,
                                                double c, std::size_t trials,
                                                std::uint64_t seed);

}  // namespace dco::stats
