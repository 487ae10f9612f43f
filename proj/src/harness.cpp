#include "dco/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dco/errors.hpp"
#include "dco/rng.hpp"

namespace dco::harness {

namespace {

struct MethodName {
  Method method;
  std::string_view name;
};

constexpr MethodName kMethodNames[] = {
    {Method::dco, "dco"},
    {Method::direct, "direct"},
    {Method::bq_fixed, "bq_fixed"},
    {Method::bq_matched_phi, "bq_matched_phi"},
    {Method::bq_recalibrate_dco, "bq_recalibrate_dco"},
    {Method::split_cp, "split_cp"},
};

}  // namespace

std::string_view to_string(Method method) {
  for (const auto& entry : kMethodNames) {
    if (entry.method == method) return entry.name;
  }
  return "unknown";
}

Method method_from_string(std::string_view text) {
  for (const auto& entry : kMethodNames) {
    if (entry.name == text) return entry.method;
  }
  throw ConfigError("unknown method '" + std::string(text) + "'");
}

bool certified(Method method) { return method != Method::direct; }

// ---------------------------------------------------------------------------
// Splits

bool SplitPlan::pairwise_disjoint() const {
  std::vector<std::size_t> all;
  all.reserve(train.size() + tune.size() + cal.size() + test.size());
  for (const auto* part : {&train, &tune, &cal, &test}) all.insert(all.end(), part->begin(), part->end());
  std::sort(all.begin(), all.end());
  return std::adjacent_find(all.begin(), all.end()) == all.end();
}

std::vector<std::size_t> SplitPlan::pool() const {
  std::vector<std::size_t> out(tune);
  out.insert(out.end(), cal.begin(), cal.end());
  return out;
}

std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size(), 0);
  if (weights.empty() || total == 0) return counts;
  if (!(sum > 0.0)) throw std::invalid_argument("largest_remainder needs positive total weight");
  std::vector<double> remainders(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) throw std::invalid_argument("negative split weight");
    const double exact = static_cast<double>(total) * weights[i] / sum;
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainders[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b] + 1e-12; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size()) {
    ++counts[order[k]];
    ++assigned;
  }
  while (assigned > total) {
    // floating slack can over-assign by one; take it back from the smallest remainder
    for (auto it = order.rbegin(); it != order.rend() && assigned > total; ++it) {
      if (counts[*it] > 0) {
        --counts[*it];
        --assigned;
      }
    }
  }
  return counts;
}

namespace {

using Parts = std::array<std::vector<std::size_t>, 4>;

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  // Fisher-Yates with an explicit draw so results do not depend on the
  // standard library's shuffle implementation
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

void deal(const std::vector<std::size_t>& shuffled, const std::array<std::size_t, 4>& counts,
          Parts& parts) {
  std::size_t at = 0;
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t c = 0; c < counts[p]; ++c) parts[p].push_back(shuffled[at++]);
  }
}

SplitPlan finish(Parts parts, std::uint64_t seed) {
  SplitPlan plan;
  for (auto& part : parts) std::sort(part.begin(), part.end());
  plan.train = std::move(parts[0]);
  plan.tune = std::move(parts[1]);
  plan.cal = std::move(parts[2]);
  plan.test = std::move(parts[3]);
  plan.seed = seed;
  const double budget = static_cast<double>(plan.tune.size() + plan.cal.size());
  if (budget > 0.0) {
    plan.tune_frac = static_cast<double>(plan.tune.size()) / budget;
    plan.cal_frac = static_cast<double>(plan.cal.size()) / budget;
  }
  return plan;
}

std::map<int, std::vector<std::size_t>> group_by_stratum(std::size_t n, std::span<const int> strata) {
  if (strata.size() != n) throw std::invalid_argument("strata length must equal n");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[strata[i]].push_back(i);
  return groups;
}

Parts split_by_counts(std::size_t n, const std::array<std::size_t, 4>& counts, std::uint64_t seed,
                      std::span<const int> strata) {
  Rng rng(seed);
  Parts parts;
  const std::size_t used = counts[0] + counts[1] + counts[2] + counts[3];
  if (used > n) throw std::invalid_argument("split sizes exceed the dataset size");

  if (strata.empty()) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle_indices(idx, rng);
    deal(idx, counts, parts);
    return parts;
  }

  // Stratified: each class is cut in proportion to the global counts. The
  // per-part class quotas come from a largest-remainder allocation of each
  // part over classes, which keeps per-class counts within one of the
  // proportional target and the part totals exact.
  const auto groups = group_by_stratum(n, strata);
  std::vector<double> class_weights;
  for (const auto& [label, members] : groups) class_weights.push_back(static_cast<double>(members.size()));
  std::vector<std::array<std::size_t, 4>> quota(groups.size(), {0, 0, 0, 0});
  for (std::size_t p = 0; p < 4; ++p) {
    const auto per_class = largest_remainder(counts[p], class_weights);
    for (std::size_t c = 0; c < groups.size(); ++c) quota[c][p] = per_class[c];
  }
  // a class can be over-subscribed by rounding; move the excess to the
  // class with the most spare members
  std::vector<std::size_t> capacity;
  for (const auto& [label, members] : groups) capacity.push_back(members.size());
  auto load = [&](std::size_t c) { return quota[c][0] + quota[c][1] + quota[c][2] + quota[c][3]; };
  std::vector<std::size_t> spare(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    spare[c] = capacity[c] >= load(c) ? capacity[c] - load(c) : 0;
  }
  for (std::size_t c = 0; c < groups.size(); ++c) {
    while (load(c) > capacity[c]) {
      const std::size_t p = static_cast<std::size_t>(
          std::max_element(quota[c].begin(), quota[c].end()) - quota[c].begin());
      const std::size_t donor = static_cast<std::size_t>(
          std::max_element(spare.begin(), spare.end()) - spare.begin());
      if (spare[donor] == 0) throw std::invalid_argument("cannot satisfy stratified split sizes");
      --quota[c][p];
      ++quota[donor][p];
      --spare[donor];
    }
  }
  std::size_t c = 0;
  for (const auto& [label, members] : groups) {
    std::vector<std::size_t> idx = members;
    shuffle_indices(idx, rng);
    deal(idx, quota[c], parts);
    ++c;
  }
  return parts;
}

}  // namespace

SplitPlan make_splits(std::size_t n, const SplitSizes& sizes, std::uint64_t seed,
                      std::span<const int> strata) {
  const std::array<std::size_t, 4> counts{sizes.train, sizes.tune, sizes.cal, sizes.test};
  return finish(split_by_counts(n, counts, seed, strata), seed);
}

SplitPlan make_splits(std::size_t n, const SplitFractions& fractions, std::uint64_t seed,
                      std::span<const int> strata) {
  const std::array<double, 4> f{fractions.train, fractions.tune, fractions.cal, fractions.test};
  double sum = 0.0;
  for (double v : f) {
    if (!(v >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
    sum += v;
  }
  if (!(sum > 0.0) || sum > 1.0 + 1e-9) throw std::invalid_argument("split fractions must sum to (0, 1]");
  // the unused remainder acts as a fifth, discarded part
  std::vector<double> weights(f.begin(), f.end());
  weights.push_back(std::max(0.0, 1.0 - sum));
  const auto counts = largest_remainder(n, weights);
  static constexpr const char* kNames[] = {"train", "tune", "cal", "test"};
  for (std::size_t p = 0; p < 4; ++p) {
    if (f[p] > 0.0 && counts[p] == 0) {
      throw std::invalid_argument(std::string("split '") + kNames[p] + "' would be empty for n = " +
                                  std::to_string(n));
    }
  }
  return make_splits(n, SplitSizes{counts[0], counts[1], counts[2], counts[3]}, seed, strata);
}

SplitRatio SplitRatio::parse(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) throw ConfigError("ratio must look like a/b: " + std::string(text));
  auto number = [&](std::string_view part) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc{} || ptr != part.data() + part.size() || !(v >= 0.0)) {
      throw ConfigError("bad ratio component in " + std::string(text));
    }
    return v;
  };
  SplitRatio ratio;
  ratio.tune = number(text.substr(0, slash));
  ratio.cal = number(text.substr(slash + 1));
  if (!(ratio.tune > 0.0) || !(ratio.cal > 0.0)) {
    throw ConfigError("ratio " + std::string(text) + " leaves the tune or cal split empty");
  }
  ratio.label = std::string(text);
  return ratio;
}

SplitSpec SplitSpec::with_ratio(const SplitRatio& ratio, std::size_t n) const {
  if (!(ratio.tune > 0.0) || !(ratio.cal > 0.0)) {
    throw std::invalid_argument("ratio " + ratio.label + " leaves the tune or cal split empty");
  }
  SplitSpec out = *this;
  const double weights[] = {ratio.tune, ratio.cal};
  if (by_count) {
    const auto parts = largest_remainder(sizes.tune + sizes.cal, weights);
    out.sizes.tune = parts[0];
    out.sizes.cal = parts[1];
    if (out.sizes.tune == 0 || out.sizes.cal == 0) {
      throw std::invalid_argument("ratio " + ratio.label + " leaves the tune or cal split empty");
    }
  } else {
    const double budget = fractions.tune + fractions.cal;
    out.fractions.tune = budget * ratio.tune / (ratio.tune + ratio.cal);
    out.fractions.cal = budget - out.fractions.tune;
    (void)n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data

TaskSource TaskSource::synthetic(SyntheticTask task, std::size_t n, DataMode mode,
                                 std::uint64_t data_seed) {
  if (n == 0) throw std::invalid_argument("synthetic dataset size must be positive");
  TaskSource source;
  source.n_ = n;
  source.mode_ = mode;
  if (mode == DataMode::fixed) {
    source.fixed_ = std::make_shared<const Dataset>(task.generate(n, data_seed));
  }
  source.task_.emplace(std::move(task));
  return source;
}

TaskSource TaskSource::fixed(std::shared_ptr<const Dataset> data) {
  if (!data || data->size() == 0) throw std::invalid_argument("fixed dataset must be non-empty");
  TaskSource source;
  source.n_ = data->size();
  source.fixed_ = std::move(data);
  source.mode_ = DataMode::fixed;
  return source;
}

TaskKind TaskSource::kind() const { return fixed_ ? fixed_->kind : task_->kind(); }

std::shared_ptr<const Dataset> TaskSource::dataset_for(std::uint64_t seed) const {
  if (mode_ == DataMode::fixed) return fixed_;
  return std::make_shared<const Dataset>(task_->generate(n_, seed));
}

// ---------------------------------------------------------------------------
// Trials

const Candidate& ExperimentConfig::fixed() const {
  if (candidates.empty()) throw ConfigError("empty candidate list");
  if (fixed_candidate.empty()) return candidates.front();
  for (const auto& c : candidates) {
    if (c.id() == fixed_candidate) return c;
  }
  throw ConfigError("fixed candidate '" + fixed_candidate + "' is not in the candidate list");
}

ModelCache::ModelCache(const Dataset& data, std::vector<std::size_t> train, FitOptions options,
                       IndexReadLog* log)
    : train_(data, std::move(train), log), options_(options) {}

ScoreModelPtr ModelCache::get(const Candidate& candidate) {
  if (auto it = fitted_.find(candidate.id()); it != fitted_.end()) return it->second;
  auto model = fit_candidate(train_, candidate, options_);
  fitted_.emplace(candidate.id(), model);
  return model;
}

std::vector<ScoreModelPtr> ModelCache::all(std::span<const Candidate> candidates) {
  std::vector<ScoreModelPtr> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(get(c));
  return out;
}

TrialMetrics evaluate_threshold(const ScoreModel& model, double threshold, const SampleView& test) {
  if (test.empty()) throw std::invalid_argument("empty test split");
  TrialMetrics m;
  m.threshold = threshold;
  m.test_size = test.size();
  m.selected_candidate = model.candidate().id();
  if (std::isinf(threshold) && threshold > 0.0) {
    m.infinite_threshold = true;
    m.coverage = 1.0;
    m.avg_size = model.max_size();
    m.p95_size = model.max_size();
    return m;
  }
  std::size_t covered = 0;
  std::vector<double> sizes(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto point = model.evaluate(test.x(i), test.y(i), threshold);
    if (point.covered) ++covered;
    sizes[i] = point.size;
  }
  m.coverage = static_cast<double>(covered) / static_cast<double>(test.size());
  m.avg_size = stats::mean(sizes);
  m.p95_size = stats::percentile(sizes, 0.95);
  return m;
}

namespace {

void require(bool ok, Method method, const char* what) {
  if (!ok) {
    throw std::invalid_argument(std::string(to_string(method)) + " needs a non-empty " + what +
                                " split");
  }
}

}  // namespace

TrialMetrics run_trial(const Dataset& data, const ExperimentConfig& cfg, Method method,
                       const SplitPlan& plan, ModelCache* cache, IndexReadLog* tuning_reads) {
  for (const auto& c : cfg.candidates) {
    if (c.kind() != data.kind) {
      throw std::invalid_argument("candidate " + c.id() + " is " + std::string(to_string(c.kind())) +
                                  " but the task is " + std::string(to_string(data.kind)));
    }
  }
  require(!plan.test.empty(), method, "test");
  const bool bq = method == Method::bq_fixed || method == Method::bq_matched_phi ||
                  method == Method::bq_recalibrate_dco;
  if (method == Method::dco || method == Method::direct || method == Method::bq_recalibrate_dco) {
    require(!plan.tune.empty(), method, "tune");
  }
  if (method == Method::dco || method == Method::split_cp) require(!plan.cal.empty(), method, "cal");
  if (bq) require(!plan.tune.empty() || !plan.cal.empty(), method, "tune+cal pool");

  std::optional<ModelCache> own;
  if (cache == nullptr) {
    own.emplace(data, plan.train, cfg.tune.fit, tuning_reads);
    cache = &*own;
  }
  const SampleView tune(data, plan.tune, tuning_reads);
  const SampleView cal(data, plan.cal);
  const SampleView test(data, plan.test);
  const double alpha = cfg.alpha.value();

  TrialMetrics out;
  switch (method) {
    case Method::split_cp: {
      const auto model = cache->get(cfg.fixed());
      const auto rule = conformal::calibrate(model, cal, cfg.alpha);
      out = evaluate_threshold(*model, rule.threshold, test);
      out.q_cal = rule.threshold;
      out.calibration_size = cal.size();
      break;
    }
    case Method::dco: {
      const auto result = tuning::dco_tune_models(cache->all(cfg.candidates), tune, alpha, cfg.tune);
      const auto rule = conformal::calibrate(result.selected_model, cal, cfg.alpha);
      out = evaluate_threshold(*result.selected_model, rule.threshold, test);
      out.fallback_used = result.fallback_used;
      out.lambda_tune = result.lambda_tune;
      out.q_cal = rule.threshold;
      out.calibration_size = cal.size();
      break;
    }
    case Method::direct: {
      const auto result = tuning::direct_tune_model(cache->get(cfg.fixed()), tune, alpha, cfg.tune);
      out = evaluate_threshold(*result.model, result.lambda, test);
      out.fallback_used = !result.feasible;
      out.lambda_tune = result.lambda;
      out.calibration_size = tune.size();
      break;
    }
    case Method::bq_fixed:
    case Method::bq_recalibrate_dco: {
      ScoreModelPtr model;
      if (method == Method::bq_fixed) {
        model = cache->get(cfg.fixed());
      } else {
        const auto result = tuning::dco_tune_models(cache->all(cfg.candidates), tune, alpha, cfg.tune);
        model = result.selected_model;
        out.lambda_tune = result.lambda_tune;
        out.fallback_used = result.fallback_used;
      }
      const SampleView pool(data, plan.pool());
      auto bq_cfg = cfg.bq;
      bq_cfg.rng_seed = derive_seed(plan.seed, 0x6271);
      const auto bq = riskcontrol::bq_calibrate(model, pool, cfg.alpha, bq_cfg);
      const double lambda_tune = out.lambda_tune;
      const bool fallback = out.fallback_used;
      out = evaluate_threshold(*model, bq.rule.threshold, test);
      out.lambda_tune = lambda_tune;
      out.fallback_used = fallback || !bq.diagnostics.feasible;
      out.lambda_bq = bq.diagnostics.selected_lambda;
      out.p_bq = bq.diagnostics.feasibility_prob;
      out.calibration_size = pool.size();
      break;
    }
    case Method::bq_matched_phi: {
      const SampleView pool(data, plan.pool());
      auto bq_cfg = cfg.bq;
      bq_cfg.rng_seed = derive_seed(plan.seed, 0x6271);
      const auto models = cache->all(cfg.candidates);
      const auto result = riskcontrol::bq_matched_phi(models, pool, cfg.alpha, bq_cfg);
      out = evaluate_threshold(*models[result.selected_index], result.best.rule.threshold, test);
      out.fallback_used = !result.best.diagnostics.feasible;
      out.lambda_bq = result.best.diagnostics.selected_lambda;
      out.p_bq = result.best.diagnostics.feasibility_prob;
      out.calibration_size = pool.size();
      break;
    }
  }
  out.method = method;
  out.certified = certified(method);
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

std::uint64_t trial_seed(std::uint64_t master, std::size_t index) {
  return derive_seed(master, static_cast<std::uint64_t>(index));
}

std::size_t worker_count(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DCO_WORKERS"); env != nullptr && *env != '\0') {
    std::size_t v = 0;
    const std::string_view text(env);
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec == std::errc{} && ptr == text.data() + text.size() && v > 0) return v;
    throw ConfigError("DCO_WORKERS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

struct SeedOutcome {
  std::vector<TrialMetrics> metrics;
  SplitSizes sizes;
};

std::vector<int> strata_of(const Dataset& data) {
  if (data.kind == TaskKind::regression) return {};
  std::vector<int> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.label(i);
  return labels;
}

SeedOutcome run_seed(const TaskSource& source, const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto [data, plan] = setup_seed(source, cfg.split, seed);
  ModelCache cache(*data, plan.train, cfg.tune.fit);
  SeedOutcome outcome;
  outcome.sizes = {plan.train.size(), plan.tune.size(), plan.cal.size(), plan.test.size()};
  for (Method method : cfg.methods) outcome.metrics.push_back(run_trial(*data, cfg, method, plan, &cache));
  return outcome;
}

template <typename Job>
void parallel_for(std::size_t n, std::size_t workers, Job&& job) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.n = values.size();
  if (!values.empty()) {
    s.mean = stats::mean(values);
    s.sd = stats::stddev(values);
  }
  return s;
}

bool selects(Method method) {
  return method == Method::dco || method == Method::bq_matched_phi ||
         method == Method::bq_recalibrate_dco;
}

std::vector<std::pair<Method, Method>> declared_pairs(const ExperimentConfig& cfg) {
  for (const auto& [a, b] : cfg.wilcoxon_pairs) {
    const auto in = [&](Method m) {
      return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
    };
    if (!in(a) || !in(b)) {
      throw ConfigError("Wilcoxon pair " + std::string(to_string(a)) + " vs " +
                        std::string(to_string(b)) + " names a method that is not run");
    }
  }
  if (!cfg.wilcoxon_pairs.empty()) return cfg.wilcoxon_pairs;
  std::vector<std::pair<Method, Method>> pairs;
  const Method anchor = std::find(cfg.methods.begin(), cfg.methods.end(), Method::dco) != cfg.methods.end()
                            ? Method::dco
                            : cfg.methods.front();
  for (Method m : cfg.methods) {
    if (m != anchor) pairs.emplace_back(anchor, m);
  }
  return pairs;
}

std::size_t method_slot(const std::vector<Method>& methods, Method m) {
  return static_cast<std::size_t>(std::find(methods.begin(), methods.end(), m) - methods.begin());
}

ExperimentReport aggregate(const ExperimentConfig& cfg, const TaskSource& source,
                           std::vector<SeedOutcome> outcomes, std::vector<std::uint64_t> seeds) {
  ExperimentReport report;
  report.alpha = cfg.alpha;
  report.n_seeds = cfg.n_seeds;
  report.master_seed = cfg.master_seed;
  report.methods = cfg.methods;
  report.size_units = source.kind() == TaskKind::regression ? "width" : "labels";
  report.config_echo = cfg.echo;
  report.overrides = cfg.overrides;
  report.seeds = std::move(seeds);
  if (!outcomes.empty()) report.mean_split = outcomes.front().sizes;
  for (auto& o : outcomes) report.per_seed.push_back(std::move(o.metrics));

  for (std::size_t k = 0; k < cfg.methods.size(); ++k) {
    MethodSummary s;
    s.method = cfg.methods[k];
    s.certified = certified(s.method);
    std::vector<double> coverage, avg, p95, threshold;
    for (const auto& row : report.per_seed) {
      const auto& t = row[k];
      coverage.push_back(t.coverage);
      if (t.fallback_used) ++s.fallback_trials;
      if (t.infinite_threshold) {
        ++s.infinite_trials;
      } else {
        avg.push_back(t.avg_size);
        p95.push_back(t.p95_size);
        threshold.push_back(t.threshold);
      }
      ++s.selection_frequencies[t.selected_candidate];
    }
    s.coverage = summarize(coverage);
    s.avg_size = summarize(avg);
    s.p95_size = summarize(p95);
    s.threshold = summarize(threshold);
    std::size_t modal = 0;
    for (const auto& [id, count] : s.selection_frequencies) modal = std::max(modal, count);
    s.stability = report.per_seed.empty()
                      ? 0.0
                      : static_cast<double>(modal) / static_cast<double>(report.per_seed.size());
    report.summaries.push_back(std::move(s));
  }

  for (Method m : cfg.methods) {
    if (selects(m)) {
      const auto& s = report.summaries[method_slot(cfg.methods, m)];
      report.selection_frequencies = s.selection_frequencies;
      report.stability = s.stability;
      break;
    }
  }

  static constexpr std::string_view kMetrics[] = {"coverage", "avg_size", "p95_size"};
  for (const auto& [a, b] : declared_pairs(cfg)) {
    const std::size_t ia = method_slot(cfg.methods, a);
    const std::size_t ib = method_slot(cfg.methods, b);
    for (std::string_view metric : kMetrics) {
      stats::PairedSamples pairs;
      for (const auto& row : report.per_seed) {
        const auto& ta = row[ia];
        const auto& tb = row[ib];
        if (metric == "coverage") {
          pairs.a.push_back(ta.coverage);
          pairs.b.push_back(tb.coverage);
          continue;
        }
        if (ta.infinite_threshold || tb.infinite_threshold) continue;
        pairs.a.push_back(metric == "avg_size" ? ta.avg_size : ta.p95_size);
        pairs.b.push_back(metric == "avg_size" ? tb.avg_size : tb.p95_size);
      }
      PairedTest test;
      test.a = a;
      test.b = b;
      test.metric = std::string(metric);
      test.n_pairs = pairs.a.size();
      if (!pairs.a.empty()) {
        test.result = stats::wilcoxon_signed_rank(pairs);
      } else {
        test.result.degenerate = true;
      }
      report.tests.push_back(std::move(test));
    }
  }
  return report;
}

std::string fmt(double v, int precision = 4) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// shortest round-trip decimal, used where bit-exact output matters
std::string exact(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

nlohmann::json number_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return threshold_to_json(v);
}

nlohmann::json summary_json(const MetricSummary& s) {
  return {{"mean", s.n ? nlohmann::json(s.mean) : nlohmann::json(nullptr)},
          {"std", s.n > 1 ? nlohmann::json(s.sd) : nlohmann::json(nullptr)},
          {"n", s.n}};
}

}  // namespace

const MethodSummary& ExperimentReport::summary(Method method) const {
  for (const auto& s : summaries) {
    if (s.method == method) return s;
  }
  throw std::out_of_range("method not in report: " + std::string(to_string(method)));
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json methods_json = nlohmann::json::array();
  for (const auto& s : summaries) {
    nlohmann::json freq = nlohmann::json::object();
    for (const auto& [id, count] : s.selection_frequencies) freq[id] = count;
    methods_json.push_back({{"method", std::string(to_string(s.method))},
                            {"certified", s.certified},
                            {"exploratory", s.method == Method::bq_matched_phi},
                            {"coverage", summary_json(s.coverage)},
                            {"avg_size", summary_json(s.avg_size)},
                            {"p95_size", summary_json(s.p95_size)},
                            {"threshold", summary_json(s.threshold)},
                            {"infinite_threshold_trials", s.infinite_trials},
                            {"fallback_trials", s.fallback_trials},
                            {"selection_frequencies", freq},
                            {"stability", s.stability}});
  }
  nlohmann::json tests_json = nlohmann::json::array();
  for (const auto& t : tests) {
    tests_json.push_back({{"a", std::string(to_string(t.a))},
                          {"b", std::string(to_string(t.b))},
                          {"metric", t.metric},
                          {"n_pairs", t.n_pairs},
                          {"p_value", t.result.p_value},
                          {"statistic", t.result.statistic},
                          {"n_nonzero", t.result.n_used},
                          {"exact", t.result.exact},
                          {"degenerate", t.result.degenerate}});
  }
  nlohmann::json freq = nlohmann::json::object();
  for (const auto& [id, count] : selection_frequencies) freq[id] = count;

  nlohmann::json trace = nlohmann::json::object();
  if (!per_seed.empty()) {
    for (const auto& t : per_seed.front()) {
      trace[std::string(to_string(t.method))] = {{"lambda_tune", number_or_null(t.lambda_tune)},
                                                 {"q_cal", number_or_null(t.q_cal)},
                                                 {"lambda_bq", number_or_null(t.lambda_bq)},
                                                 {"p_bq", number_or_null(t.p_bq)},
                                                 {"threshold", number_or_null(t.threshold)}};
    }
  }

  return {{"schema_version", kReportSchemaVersion},
          {"label", label},
          {"master_seed", master_seed},
          {"alpha", alpha.to_json()},
          {"n_seeds", n_seeds},
          {"size_units", size_units},
          {"split_sizes",
           {{"train", mean_split.train},
            {"tune", mean_split.tune},
            {"cal", mean_split.cal},
            {"test", mean_split.test}}},
          {"methods", methods_json},
          {"wilcoxon", tests_json},
          {"selection_frequencies", freq},
          {"stability", stability},
          {"single_seed_trace", trace},
          {"notes",
           {"trials with an infinite threshold count as coverage 1 and are excluded from size and "
            "threshold means",
            "ties among calibration scores are kept as a sorted multiset",
            "classification probabilities are clamped at 1e-12 before logs"}},
          {"config", config_echo},
          {"cli_overrides", overrides.is_null() ? nlohmann::json::object() : overrides}};
}

std::string ExperimentReport::per_seed_csv() const {
  std::ostringstream os;
  os << "label,seed_index,seed,method,coverage,avg_size,p95_size,threshold,selected_candidate,"
        "certified,fallback_used,infinite_threshold,test_size,calibration_size,lambda_tune,q_cal,"
        "lambda_bq,p_bq,size_units\n";
  for (std::size_t i = 0; i < per_seed.size(); ++i) {
    for (const auto& t : per_seed[i]) {
      os << label << ',' << i << ',' << seeds[i] << ',' << to_string(t.method) << ','
         << exact(t.coverage) << ',' << exact(t.avg_size) << ',' << exact(t.p95_size) << ','
         << exact(t.threshold) << ',' << t.selected_candidate << ',' << (t.certified ? 1 : 0)
         << ',' << (t.fallback_used ? 1 : 0) << ',' << (t.infinite_threshold ? 1 : 0) << ','
         << t.test_size << ',' << t.calibration_size << ',' << exact(t.lambda_tune) << ','
         << exact(t.q_cal) << ',' << exact(t.lambda_bq) << ',' << exact(t.p_bq) << ','
         << size_units << '\n';
    }
  }
  return os.str();
}

std::string ExperimentReport::summary_table() const {
  std::ostringstream os;
  const std::string size_label = size_units == "width" ? "Avg Width" : "Avg Size";
  if (!label.empty()) os << "[" << label << "] ";
  os << "alpha=" << alpha.to_string() << "  seeds=" << n_seeds << "  target coverage="
     << fmt(1.0 - alpha.value(), 3) << '\n';
  os << std::left << std::setw(20) << "Method" << std::setw(20) << "Coverage" << std::setw(22)
     << size_label << std::setw(20) << "P95" << std::setw(8) << "Inf" << "Certified\n";
  for (const auto& s : summaries) {
    os << std::left << std::setw(20) << to_string(s.method) << std::setw(20)
       << (fmt(s.coverage.mean) + " +- " + fmt(s.coverage.sd)) << std::setw(22)
       << (fmt(s.avg_size.mean) + " +- " + fmt(s.avg_size.sd)) << std::setw(20)
       << (fmt(s.p95_size.mean) + " +- " + fmt(s.p95_size.sd)) << std::setw(8)
       << s.infinite_trials << (s.certified ? "yes" : "no") << '\n';
  }
  for (const auto& t : tests) {
    os << "  wilcoxon " << to_string(t.a) << " vs " << to_string(t.b) << " [" << t.metric
       << "]: p=" << std::setprecision(3) << std::scientific << t.result.p_value << std::fixed
       << (t.result.degenerate ? " (degenerate)" : "") << '\n';
  }
  if (!selection_frequencies.empty()) {
    os << "  selection stability=" << fmt(stability, 3) << '\n';
  }
  return os.str();
}

SeedSetup setup_seed(const TaskSource& source, const SplitSpec& split, std::uint64_t seed) {
  SeedSetup setup;
  setup.data = source.dataset_for(derive_seed(seed, 1));
  const auto strata = strata_of(*setup.data);
  const std::uint64_t split_seed = derive_seed(seed, 2);
  setup.plan = split.by_count ? make_splits(setup.data->size(), split.sizes, split_seed, strata)
                              : make_splits(setup.data->size(), split.fractions, split_seed, strata);
  return setup;
}

ExperimentReport run_experiment(const TaskSource& source, const ExperimentConfig& cfg) {
  if (cfg.methods.empty()) throw ConfigError("no methods requested");
  if (cfg.n_seeds < 1) throw ConfigError("n_seeds must be at least 1");
  if (cfg.candidates.empty()) throw ConfigError("empty candidate list");
  cfg.bq.validate();
  (void)cfg.fixed();
  (void)declared_pairs(cfg);

  std::vector<std::uint64_t> seeds(cfg.n_seeds);
  for (std::size_t i = 0; i < cfg.n_seeds; ++i) seeds[i] = trial_seed(cfg.master_seed, i);
  std::vector<SeedOutcome> outcomes(cfg.n_seeds);
  parallel_for(cfg.n_seeds, worker_count(cfg.workers),
               [&](std::size_t i) { outcomes[i] = run_seed(source, cfg, seeds[i]); });
  return aggregate(cfg, source, std::move(outcomes), std::move(seeds));
}

std::vector<ExperimentReport> ablate_split_ratios(const TaskSource& source,
                                                  const ExperimentConfig& cfg,
                                                  std::span<const SplitRatio> ratios) {
  if (ratios.empty()) throw ConfigError("ratio list must be non-empty");
  std::vector<ExperimentReport> reports;
  for (const auto& ratio : ratios) {
    ExperimentConfig local = cfg;
    local.split = cfg.split.with_ratio(ratio, source.dataset_size());
    auto report = run_experiment(source, local);
    report.label = ratio.label;
    reports.push_back(std::move(report));
  }
  return reports;
}

std::vector<ExperimentReport> sweep_alpha(const TaskSource& source, const ExperimentConfig& cfg,
                                          std::span<const Alpha> alphas) {
  if (alphas.empty()) throw ConfigError("alpha list must be non-empty");
  std::vector<ExperimentReport> reports;
  for (const auto& alpha : alphas) {
    ExperimentConfig local = cfg;
    local.alpha = alpha;
    auto report = run_experiment(source, local);
    report.label = "alpha=" + alpha.to_string();
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace dco::harness
