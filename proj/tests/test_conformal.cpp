#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dco/conformal.hpp"
#include "dco/errors.hpp"
#include "dco/rng.hpp"
#include "support.hpp"

using namespace dco;
using namespace dco::conformal;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// ceil((m+1)(1 - p/q)) computed in integers.
std::size_t rank_oracle(std::size_t m, std::int64_t p, std::int64_t q) {
  const std::int64_t num = static_cast<std::int64_t>(m + 1) * (q - p);
  return static_cast<std::size_t>((num + q - 1) / q);
}

}  // namespace

TEST(ConformalQuantile, SmallWorkedCases) {
  const std::vector<double> s{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(conformal_quantile(s, Alpha::rational(1, 2)), 3.0);
  EXPECT_EQ(conformal_quantile(s, Alpha::rational(1, 10)), kInf);
  EXPECT_EQ(conformal_quantile(s, Alpha::decimal(0.1)), kInf);
}

TEST(ConformalQuantile, NinetyNineScoresAtOneFifth) {
  std::vector<double> s(99);
  for (std::size_t i = 0; i < 99; ++i) s[i] = static_cast<double>(99 - i);
  EXPECT_DOUBLE_EQ(conformal_quantile(s, Alpha::rational(1, 5)), 80.0);
  // (m+1)(1-0.2) evaluates to 80.00000000000001 in floating point
  EXPECT_DOUBLE_EQ(conformal_quantile(s, Alpha::decimal(0.2)), 80.0);
  EXPECT_DOUBLE_EQ(conformal_quantile(s, Alpha::parse("0.2")), 80.0);
}

TEST(ConformalQuantile, MatchesSortedOrderStatistic) {
  Rng rng(8);
  std::uniform_int_distribution<int> size(1, 200);
  std::uniform_int_distribution<int> denom(2, 50);
  std::uniform_int_distribution<int> tie(0, 9);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = static_cast<std::size_t>(size(rng));
    const std::int64_t q = denom(rng);
    const std::int64_t p = std::uniform_int_distribution<std::int64_t>(1, q - 1)(rng);
    std::vector<double> s(m);
    for (double& v : s) v = trial % 3 == 0 ? tie(rng) : normal(rng);
    const Alpha alpha = Alpha::rational(p, q);
    const std::size_t k = rank_oracle(m, p, q);
    ASSERT_EQ(alpha.conformal_rank(m), k);
    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    const double expected = k == m + 1 ? kInf : sorted[k - 1];
    EXPECT_EQ(conformal_quantile(s, alpha), expected);
    std::shuffle(s.begin(), s.end(), rng);
    EXPECT_EQ(conformal_quantile(s, alpha), expected) << "permutation changed the quantile";
  }
}

TEST(ConformalQuantile, DecimalSnapAgreesWithRational) {
  for (std::size_t m = 1; m < 2000; m += 7) {
    for (auto [p, q] : {std::pair{1, 5}, {1, 10}, {1, 20}, {3, 10}, {1, 100}}) {
      EXPECT_EQ(Alpha::decimal(static_cast<double>(p) / q).conformal_rank(m),
                Alpha::rational(p, q).conformal_rank(m))
          << m << ' ' << p << '/' << q;
    }
  }
}

TEST(ConformalQuantile, RejectsEmptyOrNonFinite) {
  EXPECT_THROW(conformal_quantile(std::vector<double>{}, Alpha::rational(1, 5)), std::invalid_argument);
  EXPECT_THROW(conformal_quantile(std::vector<double>{1.0, kInf}, Alpha::rational(1, 5)),
               std::invalid_argument);
}

TEST(ConformalCoverage, SimulatedCoverageMatchesRankFraction) {
  Rng rng(21);
  std::exponential_distribution<double> expo(1.0);
  const Alpha alpha = Alpha::rational(1, 10);
  for (std::size_t m : {9u, 25u, 100u}) {
    const double target = exact_coverage(m, alpha);
    EXPECT_GE(target, 0.9);
    EXPECT_LE(target, 0.9 + 1.0 / static_cast<double>(m + 1) + 1e-12);
    int covered = 0;
    const int trials = 40000;
    std::vector<double> s(m);
    for (int t = 0; t < trials; ++t) {
      for (double& v : s) v = expo(rng);
      if (expo(rng) <= conformal_quantile(s, alpha)) ++covered;
    }
    const double rate = static_cast<double>(covered) / trials;
    EXPECT_NEAR(rate, target, 4.0 * std::sqrt(target * (1 - target) / trials)) << "m=" << m;
  }
}

TEST(AlphaParsing, AcceptsRationalAndDecimalForms) {
  const Alpha r = Alpha::parse("2/10");
  EXPECT_TRUE(r.is_rational());
  EXPECT_EQ(r.numerator(), 1);
  EXPECT_EQ(r.denominator(), 5);
  EXPECT_DOUBLE_EQ(r.value(), 0.2);
  EXPECT_FALSE(Alpha::parse("0.05").is_rational());
  EXPECT_EQ(Alpha::from_json(nlohmann::json("1/20")).denominator(), 20);
  EXPECT_DOUBLE_EQ(Alpha::from_json(nlohmann::json(0.1)).value(), 0.1);
}

TEST(AlphaParsing, RejectsOutOfRangeAndGarbage) {
  for (const char* bad : {"0", "1", "1.5", "-0.1", "abc", "1/0", "5/5", "0/3", "", "0.1x"}) {
    EXPECT_THROW(Alpha::parse(bad), ConfigError) << bad;
  }
  EXPECT_THROW(Alpha::from_json(nlohmann::json(true)), ConfigError);
}

TEST(AlphaParsing, JsonRoundTripPreservesForm) {
  for (const char* text : {"1/5", "0.1", "3/40"}) {
    const Alpha a = Alpha::parse(text);
    const Alpha b = Alpha::from_json(a.to_json());
    EXPECT_EQ(a.is_rational(), b.is_rational());
    EXPECT_EQ(a.value(), b.value());
    EXPECT_EQ(a.conformal_rank(123), b.conformal_rank(123));
  }
}

TEST(CalibratedRule, CalibrateUsesCalibrationScores) {
  const auto data = fixtures::score_dataset({5, 3, 1, 4, 2});
  auto model = std::make_shared<fixtures::ToyModel>("toy");
  const auto rule = calibrate(model, SampleView(data, fixtures::all_indices(5)), Alpha::rational(1, 3));
  // k = ceil(6 * 2/3) = 4
  EXPECT_DOUBLE_EQ(rule.threshold, 4.0);
  EXPECT_EQ(rule.m_cal, 5u);
  EXPECT_TRUE(rule.certified);
  EXPECT_THROW(calibrate(model, SampleView(data, {}), Alpha::rational(1, 3)), std::invalid_argument);
}

TEST(CalibratedRule, GaussianIntervalAtOneSdScore) {
  const Candidate c("g", TaskKind::regression, {{"prior_scale", 1.0}});
  const auto model = std::make_shared<GaussianLinearModel>(
      c, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2), 1.0, SizeMode::analytic,
      ResponseGrid{-5, 5, 300});
  CalibratedRule rule{c, GaussianPredictive(0, 1).nll(1.0), Alpha::rational(1, 5), 10,
                      RuleMethod::conformal, true, model};
  const auto set = predict_set(rule, *model, std::vector{0.3});
  EXPECT_NEAR(set.lower, -1.0, 1e-12);
  EXPECT_NEAR(set.upper, 1.0, 1e-12);
  EXPECT_NEAR(set.size, 2.0, 1e-12);
}

TEST(CalibratedRule, CandidateMismatchIsRejected) {
  const auto data = fixtures::score_dataset({1, 2, 3});
  auto a = std::make_shared<fixtures::ToyModel>("a");
  fixtures::ToyModel b("b");
  const auto rule = calibrate(a, SampleView(data, {0, 1, 2}), Alpha::rational(1, 2));
  EXPECT_THROW(predict_set(rule, b, std::vector{0.0}), std::invalid_argument);
}

TEST(CalibratedRule, JsonRoundTripWithInfiniteThreshold) {
  const SyntheticTask task({TaskKind::regression, 3, 1.0, 0, 1.0, 4});
  const auto data = task.generate(60, 1);
  const auto model = fit_candidate(SampleView(data, fixtures::all_indices(40)),
                                   default_regression_candidates()[2]);
  std::vector<std::size_t> cal(20);
  std::iota(cal.begin(), cal.end(), 40);
  // 20 calibration points at alpha = 1/50 need rank 21 > m
  const auto rule = calibrate(model, SampleView(data, cal), Alpha::rational(1, 50));
  ASSERT_TRUE(rule.infinite());
  const auto j = nlohmann::json::parse(rule.to_json().dump());
  EXPECT_EQ(j.at("threshold"), "+inf");
  const auto back = CalibratedRule::from_json(j);
  EXPECT_TRUE(back.infinite());
  EXPECT_EQ(back.candidate, rule.candidate);
  EXPECT_EQ(back.m_cal, 20u);
  ASSERT_TRUE(back.model);
  EXPECT_DOUBLE_EQ(back.model->score(data.x(0), data.y(0)), model->score(data.x(0), data.y(0)));
  EXPECT_TRUE(predict_set(back, *back.model, data.x(1)).full);
}

TEST(CalibratedRule, MalformedJsonRaisesSchemaError) {
  EXPECT_THROW(CalibratedRule::from_json(nlohmann::json::object()), SchemaError);
  EXPECT_THROW(threshold_from_json(nlohmann::json("inf-ish")), SchemaError);
  EXPECT_EQ(threshold_from_json(threshold_to_json(kInf)), kInf);
  EXPECT_EQ(threshold_from_json(threshold_to_json(1.25)), 1.25);
  auto j = CalibratedRule{Candidate("a", TaskKind::regression), 1.0, Alpha::rational(1, 5), 3,
                          RuleMethod::conformal, true, nullptr}
               .to_json();
  j["candidate_id"] = "b";
  EXPECT_THROW(CalibratedRule::from_json(j), SchemaError);
}
