// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Tolerances are fixed; nothing here is
// tuned to make a result pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/commands.hpp"
#include "dco/conformal.hpp"
#include "dco/harness.hpp"
#include "dco/riskcontrol.hpp"
#include "dco/rng.hpp"
#include "dco/stats.hpp"
#include "dco/tuning.hpp"

namespace fs = std::filesystem;
using namespace dco;
using namespace dco::harness;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

double mean_of(const std::vector<double>& v) { return stats::mean(v); }

// standard error of a mean estimated from the per-trial spread
double pooled_sigma(const std::vector<double>& v) {
  return stats::stddev(v) / std::sqrt(static_cast<double>(v.size()));
}

std::vector<double> column(const ExperimentReport& r, std::size_t method_index,
                           double TrialMetrics::*field) {
  std::vector<double> out;
  for (const auto& row : r.per_seed) out.push_back(row[method_index].*field);
  return out;
}

std::size_t method_index(const ExperimentReport& r, Method m) {
  return static_cast<std::size_t>(std::find(r.methods.begin(), r.methods.end(), m) - r.methods.begin());
}

SyntheticTask regression_task(std::size_t dim = 8, std::uint64_t seed = 2024) {
  return SyntheticTask({TaskKind::regression, dim, 1.0, 0, 1.0, seed});
}

ExperimentConfig base_config(std::vector<Method> methods, std::size_t seeds, SplitSizes sizes) {
  ExperimentConfig cfg;
  cfg.candidates = default_regression_candidates();
  cfg.methods = std::move(methods);
  cfg.n_seeds = seeds;
  cfg.master_seed = 20240601;
  cfg.split.by_count = true;
  cfg.split.sizes = sizes;
  cfg.workers = 0;
  return cfg;
}

// ---------------------------------------------------------------------------

Outcome ac1_exact_coverage_band() {
  const std::size_t trials = 2000, m = 99, n_test = 100;
  auto cfg = base_config({Method::split_cp}, trials, {50, 0, m, n_test});
  cfg.candidates = {Candidate("fixed", TaskKind::regression, {{"prior_scale", 1.0}})};
  const auto source = TaskSource::synthetic(regression_task(), 50 + m + n_test, DataMode::fresh, 1);
  const auto report = run_experiment(source, cfg);
  const auto cov = column(report, 0, &TrialMetrics::coverage);
  const double target = static_cast<double>(cfg.alpha.conformal_rank(m)) / (m + 1.0);
  const double sigma = pooled_sigma(cov);
  const double naive = std::sqrt(0.8 * 0.2 / (trials * static_cast<double>(n_test)));
  const double mean = mean_of(cov);
  return {std::fabs(mean - target) <= 3.0 * sigma,
          fmt("mean coverage %.5f, target %.4f, 3 sigma %.5f (binomial-only sigma %.5f)", mean,
              target, 3.0 * sigma, naive)};
}

Outcome ac2_overflow_branch() {
  auto cfg = base_config({Method::split_cp, Method::dco}, 100, {50, 40, 4, 50});
  cfg.alpha = Alpha::rational(1, 10);
  const auto source = TaskSource::synthetic(regression_task(), 144, DataMode::fresh, 2);
  const auto report = run_experiment(source, cfg);
  std::size_t bad = 0;
  for (const auto& row : report.per_seed) {
    for (const auto& t : row) {
      if (!t.infinite_threshold || std::isfinite(t.threshold) || t.coverage != 1.0) ++bad;
    }
  }
  return {bad == 0, fmt("%zu of %zu trials lack a +inf threshold with coverage 1", bad,
                        report.per_seed.size() * report.methods.size())};
}

Outcome ac3_pipeline_coverage() {
  const std::size_t seeds = 1000, m = 200;
  auto cfg = base_config({Method::dco, Method::direct}, seeds, {200, 200, m, 400});
  const auto source = TaskSource::synthetic(regression_task(), 1000, DataMode::fresh, 3);
  const auto report = run_experiment(source, cfg);
  const auto dco = column(report, method_index(report, Method::dco), &TrialMetrics::coverage);
  const auto direct = column(report, method_index(report, Method::direct), &TrialMetrics::coverage);
  const double mean = mean_of(dco);
  const double sigma = pooled_sigma(dco);
  const double lo = 0.80 - 3.0 * sigma;
  const double hi = 0.80 + 1.0 / (m + 1.0) + 3.0 * sigma;
  const double sd_dco = stats::stddev(dco);
  const double sd_direct = stats::stddev(direct);
  const bool band = mean >= lo && mean <= hi;
  const bool differs = mean_of(direct) != mean;
  const bool spread = sd_direct >= sd_dco;
  return {band && differs && spread,
          fmt("dco mean %.5f in [%.5f, %.5f]; direct mean %.5f; sd direct %.4f vs dco %.4f", mean,
              lo, hi, mean_of(direct), sd_direct, sd_dco)};
}

Outcome ac4_conservativeness() {
  auto cfg = base_config({Method::dco, Method::bq_fixed}, 200, {200, 200, 200, 400});
  const auto source = TaskSource::synthetic(regression_task(), 1000, DataMode::fresh, 4);
  const auto report = run_experiment(source, cfg);
  const auto& bq = report.summary(Method::bq_fixed);
  const auto& dco = report.summary(Method::dco);
  double p = 1.0;
  for (const auto& t : report.tests) {
    if (t.a == Method::dco && t.b == Method::bq_fixed && t.metric == "avg_size") p = t.result.p_value;
  }
  const bool pass = bq.coverage.mean >= dco.coverage.mean && bq.avg_size.mean >= dco.avg_size.mean &&
                    p < 0.01;
  return {pass, fmt("coverage bq %.4f vs dco %.4f; size bq %.4f vs dco %.4f; Wilcoxon p %.3g",
                    bq.coverage.mean, dco.coverage.mean, bq.avg_size.mean, dco.avg_size.mean, p)};
}

Outcome ac5_bq_beta_oracle() {
  // 80 scores below every grid point, then blocks that leave 20, 5, 1 and 0
  // scores above the successive grid points
  std::vector<double> scores(80, 0.0);
  scores.insert(scores.end(), 15, 1.5);
  scores.insert(scores.end(), 4, 2.5);
  scores.push_back(3.5);
  const auto grid = tuning::ThresholdGrid::explicit_values({1.0, 2.0, 3.0, 4.0});
  const std::map<double, int> ones{{1.0, 20}, {2.0, 5}, {3.0, 1}, {4.0, 0}};
  const std::size_t m = scores.size(), draws = 1000;
  bool pass = true;
  double worst = 0.0;
  for (double alpha : {0.1, 0.2}) {
    riskcontrol::BqConfig cfg;
    cfg.mc_draws = draws;
    cfg.rng_seed = alpha == 0.1 ? 501 : 502;
    const auto diag = riskcontrol::bq_threshold_scores(scores, grid, alpha, cfg);
    for (const auto& [lambda, j] : ones) {
      const double expected = stats::regularized_incomplete_beta(alpha, j + 1.0, static_cast<double>(m - j));
      const double got = diag.per_lambda_probs.at(lambda);
      const double tol = 3.0 * std::sqrt(expected * (1.0 - expected) / draws);
      worst = std::max(worst, std::fabs(got - expected) - tol);
      if (std::fabs(got - expected) > tol) pass = false;
    }
  }
  return {pass, fmt("8 (alpha, j) cells; worst excess over 3 sigma %.5f", worst)};
}

Outcome ac6_asymptotic_agreement() {
  const auto task = regression_task(4, 66);
  const auto train = task.generate(500, 1);
  std::vector<std::size_t> idx(500);
  std::iota(idx.begin(), idx.end(), 0);
  const auto model = fit_candidate(SampleView(train, idx),
                                   Candidate("fixed", TaskKind::regression, {{"prior_scale", 1.0}}));
  const Alpha alpha = Alpha::rational(1, 10);
  std::vector<double> medians;
  std::string detail;
  for (std::size_t m : {100u, 1000u, 10000u}) {
    std::vector<double> gaps;
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto pool_data = task.generate(m, derive_seed(m, s));
      std::vector<std::size_t> pool(m);
      std::iota(pool.begin(), pool.end(), 0);
      const SampleView view(pool_data, pool);
      std::vector<double> scores(m);
      for (std::size_t i = 0; i < m; ++i) scores[i] = model->score(view.x(i), view.y(i));
      riskcontrol::BqConfig cfg;
      cfg.rng_seed = derive_seed(0x6271, m * 100 + s);
      const auto bq = riskcontrol::bq_calibrate(model, view, alpha, cfg);
      const double q = conformal::conformal_quantile(scores, alpha);
      gaps.push_back(std::fabs(bq.rule.threshold - q));
    }
    medians.push_back(stats::percentile(gaps, 0.5));
    detail += fmt("m=%zu median %.5f; ", m, medians.back());
  }
  const bool pass = medians[0] > medians[1] && medians[1] > medians[2] && medians[2] < 0.5 * medians[0];
  return {pass, detail};
}

// Upper-tail standard normal quantile by bisection on the CDF.
double normal_quantile(double p) {
  double lo = -10.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (stats::normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Outcome ac7_oracle_inequality() {
  constexpr double kAlpha = 0.2, kEpsR = 0.05, kEta = 0.1, kLambda = 3.0;
  constexpr std::size_t kRepeats = 200, kTrain = 2000;
  // Target population risks at lambda = 3: four at or below alpha - 2 epsR,
  // four above alpha + epsR. With a near-exact posterior mean the interval
  // half-width is h(s) = s sqrt(2 (lambda - log(s sqrt(2 pi)))), and the risk
  // of assumed noise s is 2 (1 - Phi(h(s))) for unit true noise. Solving on the
  // increasing branch of h gives one candidate per target.
  const std::vector<double> targets{0.04, 0.06, 0.08, 0.10, 0.26, 0.30, 0.35, 0.40};
  const double log_sqrt_2pi = 0.5 * std::log(2.0 * M_PI);
  auto half_width = [&](double s) { return s * std::sqrt(2.0 * (kLambda - std::log(s) - log_sqrt_2pi)); };
  const double s_peak = std::exp(kLambda - log_sqrt_2pi - 0.5);
  std::vector<Candidate> candidates;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const double h = normal_quantile(1.0 - targets[k] / 2.0);
    double lo = 1e-6, hi = s_peak;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (half_width(mid) < h ? lo : hi) = mid;
    }
    candidates.emplace_back("k" + std::to_string(k), TaskKind::regression,
                            ParamMap{{"prior_scale", 1.0}, {"noise_scale", 0.5 * (lo + hi)}});
  }
  const std::size_t m_tune = tuning::tuning_sample_size(kEpsR, kEpsR, kEta, candidates.size(), 1.0);

  tuning::TuneOptions opts;
  opts.grid = {tuning::GridSource::explicit_values, 80, {kLambda}};
  opts.constraint_slack = kEpsR;
  const auto task = regression_task(4, 77);
  std::size_t ok = 0, fallbacks = 0;
  std::vector<double> realized;
  for (std::size_t r = 0; r < kRepeats; ++r) {
    const auto data = task.generate(kTrain + m_tune, derive_seed(7, r));
    std::vector<std::size_t> train(kTrain), tune(m_tune);
    std::iota(train.begin(), train.end(), 0);
    std::iota(tune.begin(), tune.end(), kTrain);
    const auto result = tuning::dco_tune(SampleView(data, train), SampleView(data, tune), candidates,
                                         kAlpha, opts);
    if (result.fallback_used) ++fallbacks;
    const double risk =
        task.population_risk(*result.selected_model, result.lambda_tune, 20000, derive_seed(8, r)).value;
    realized.push_back(risk);
    if (risk <= kAlpha) ++ok;
  }
  // realized risks of the candidates on one fit, as a check on the design
  const double rate = static_cast<double>(ok) / kRepeats;
  const double floor = 0.9 - 3.0 * std::sqrt(0.9 * 0.1 / kRepeats);
  return {rate >= floor,
          fmt("m_tune %zu; rate R(selected) <= alpha %.3f (floor %.4f); fallbacks %zu; mean risk %.4f",
              m_tune, rate, floor, fallbacks, mean_of(realized))};
}

Outcome ac8_quantile_concentration() {
  const auto check = stats::check_quantile_concentration(
      [](Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }, 0.9, 0.1,
      1000, 0.05, 1.0, 10000, 88);
  const double sigma = std::sqrt(check.bound * (1.0 - check.bound) / 10000.0);
  const bool pass = !check.vacuous && check.observed_rate <= check.bound + 3.0 * sigma;
  return {pass, fmt("observed %.4f vs bound %.4f + 3 sigma %.4f", check.observed_rate, check.bound,
                    3.0 * sigma)};
}

double brute_force_wilcoxon(const std::vector<double>& d_in) {
  std::vector<double> d;
  for (double v : d_in) {
    if (v != 0.0) d.push_back(v);
  }
  const std::size_t n = d.size();
  if (n == 0) return 1.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::fabs(d[a]) < std::fabs(d[b]); });
  std::vector<double> rank(n);
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e + 1 < n && std::fabs(d[order[e + 1]]) == std::fabs(d[order[s]])) ++e;
    for (std::size_t k = s; k <= e; ++k) rank[order[k]] = 0.5 * static_cast<double>(s + e) + 1.0;
    s = e + 1;
  }
  double w = 0.0;
  for (std::size_t i = 0; i < n; ++i) w += d[i] > 0 ? rank[i] : 0.0;
  std::size_t le = 0, ge = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (mask >> i & 1U) ? rank[i] : 0.0;
    le += s <= w + 1e-9;
    ge += s >= w - 1e-9;
  }
  const double total = static_cast<double>(std::size_t{1} << n);
  return std::min(1.0, 2.0 * std::min(le / total, ge / total));
}

Outcome ac9_wilcoxon() {
  Rng rng(909);
  std::uniform_int_distribution<int> size(1, 12);
  std::uniform_int_distribution<int> integer(-3, 3);
  std::normal_distribution<double> normal(0.2, 1.0);
  double exact_err = 0.0;
  for (int i = 0; i < 50; ++i) {
    stats::PairedSamples pairs;
    const int n = size(rng);
    for (int k = 0; k < n; ++k) {
      pairs.a.push_back(i % 2 ? integer(rng) : normal(rng));
      pairs.b.push_back(0.0);
    }
    const double p = stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::exact).p_value;
    exact_err = std::max(exact_err, std::fabs(p - brute_force_wilcoxon(pairs.a)));
  }
  double approx_err = 0.0;
  for (int i = 0; i < 50; ++i) {
    stats::PairedSamples pairs;
    for (int k = 0; k < 12; ++k) {
      pairs.a.push_back(normal(rng));
      pairs.b.push_back(std::normal_distribution<double>()(rng));
    }
    approx_err = std::max(approx_err,
                          std::fabs(stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::exact).p_value -
                                    stats::wilcoxon_signed_rank(pairs, stats::WilcoxonMode::normal_approx).p_value));
  }
  return {exact_err < 1e-12 && approx_err <= 0.02,
          fmt("max |exact - brute force| %.2e over 50; max |normal - exact| at n=12 %.4f", exact_err,
              approx_err)};
}

Outcome ac10_split_ratio_trend() {
  auto cfg = base_config({Method::dco}, 200, {200, 200, 200, 400});
  const auto source = TaskSource::synthetic(regression_task(), 1000, DataMode::fresh, 10);
  std::vector<SplitRatio> ratios;
  for (const char* r : {"20/80", "33/67", "50/50", "67/33", "80/20"}) ratios.push_back(SplitRatio::parse(r));
  const auto reports = ablate_split_ratios(source, cfg, ratios);
  std::map<std::string, double> p95_sd, stability;
  std::string detail;
  for (const auto& r : reports) {
    p95_sd[r.label] = stats::stddev(column(r, 0, &TrialMetrics::p95_size));
    stability[r.label] = r.stability;
    detail += fmt("%s sd(P95) %.4f stab %.3f; ", r.label.c_str(), p95_sd[r.label], r.stability);
  }
  const bool pass = p95_sd["80/20"] > p95_sd["20/80"] && stability["33/67"] >= stability["20/80"];
  return {pass, detail};
}

Outcome ac11_determinism() {
  const fs::path dir = fs::temp_directory_path() / "dco_acceptance_ac11";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const nlohmann::json cfg{
      {"task", {{"kind", "regression"}, {"n", 800}, {"dimension", 6}}},
      {"methods", {"dco", "direct", "bq_fixed", "bq_matched_phi", "bq_recalibrate_dco", "split_cp"}},
      {"splits", {{"train", 200}, {"tune", 200}, {"cal", 200}, {"test", 200}}},
      {"n_seeds", 10},
      {"master_seed", 11},
      {"output_dir", (dir / "out").string()}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  auto run = [&] {
    std::ostringstream out, err;
    const int code = cli::cmd_experiment(dir / "config.json", {}, std::nullopt, out, err);
    std::ifstream in(dir / "out" / "report.json", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return std::pair{code, ss.str()};
  };
  const auto [c1, first] = run();
  const auto [c2, second] = run();
  const bool pass = c1 == 0 && c2 == 0 && !first.empty() && first == second;
  return {pass, fmt("exit codes %d/%d; %zu bytes; identical %s", c1, c2, first.size(),
                    first == second ? "yes" : "no")};
}

Outcome ac12_data_hygiene() {
  auto cfg = base_config({Method::dco}, 100, {200, 200, 200, 200});
  const auto source = TaskSource::synthetic(regression_task(), 800, DataMode::fresh, 12);
  std::size_t leaks = 0, reads = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto setup = setup_seed(source, cfg.split, trial_seed(cfg.master_seed, i));
    std::set<std::size_t> forbidden(setup.plan.cal.begin(), setup.plan.cal.end());
    forbidden.insert(setup.plan.test.begin(), setup.plan.test.end());
    for (Method m : {Method::dco, Method::direct}) {
      IndexReadLog log;
      run_trial(*setup.data, cfg, m, setup.plan, nullptr, &log);
      reads += log.reads().size();
      for (auto idx : log.reads()) leaks += forbidden.contains(idx);
    }
  }
  return {leaks == 0 && reads > 0,
          fmt("%zu logged reads over 100 trials x 2 methods; %zu in cal or test", reads, leaks)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
      {"AC1 exact coverage band", ac1_exact_coverage_band},
      {"AC2 overflow branch", ac2_overflow_branch},
      {"AC3 pipeline coverage", ac3_pipeline_coverage},
      {"AC4 conservativeness direction", ac4_conservativeness},
      {"AC5 BQ Beta oracle", ac5_bq_beta_oracle},
      {"AC6 asymptotic agreement", ac6_asymptotic_agreement},
      {"AC7 oracle inequality", ac7_oracle_inequality},
      {"AC8 quantile concentration", ac8_quantile_concentration},
      {"AC9 Wilcoxon correctness", ac9_wilcoxon},
      {"AC10 split-ratio trend", ac10_split_ratio_trend},
      {"AC11 determinism", ac11_determinism},
      {"AC12 data hygiene", ac12_data_hygiene},
  };
  int failures = 0;
  for (const auto& [name, check] : checks) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " | " << o.detail << fmt(" | %.1fs", secs)
              << std::endl;
    failures += o.pass ? 0 : 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : fmt("%d criteria failed", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
