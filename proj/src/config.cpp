#include "dco/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "dco/errors.hpp"

namespace dco::config {

namespace {

using nlohmann::json;

void only_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || key == a;
    if (!known) throw ConfigError("unknown key '" + key + "' in " + std::string(where));
  }
}

template <typename T>
T get(const json& j, std::string_view key, T fallback, std::string_view where) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer() || (std::is_unsigned_v<T> && it->get<std::int64_t>() < 0 &&
                                       !it->is_number_unsigned())) {
        throw ConfigError("");
      }
    } else {
      if (!it->is_number()) throw ConfigError("");
    }
    return it->get<T>();
  } catch (const std::exception&) {
    throw ConfigError(std::string(where) + "." + std::string(key) + " has the wrong type");
  }
}

void require_positive(double v, std::string_view what) {
  if (!(v > 0.0)) throw ConfigError(std::string(what) + " must be positive");
}

std::vector<std::string_view> split_list(std::string_view list) {
  std::vector<std::string_view> out;
  while (!list.empty()) {
    const auto comma = list.find(',');
    auto item = list.substr(0, comma);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  return out;
}

TaskConfig parse_task(const json& j, const std::filesystem::path& base_dir) {
  only_keys(j, "task",
            {"kind", "dimension", "noise_scale", "class_count", "signal_scale", "task_seed", "n",
             "data_mode", "data_seed", "precomputed_dir"});
  TaskConfig task;
  try {
    task.kind = task_kind_from_string(get<std::string>(j, "kind", "regression", "task"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  task.synthetic.kind = task.kind;
  task.synthetic.dimension = get<std::size_t>(j, "dimension", 8, "task");
  task.synthetic.noise_scale = get<double>(j, "noise_scale", 1.0, "task");
  task.synthetic.class_count = get<std::size_t>(j, "class_count", 10, "task");
  task.synthetic.signal_scale = get<double>(j, "signal_scale", 1.0, "task");
  task.synthetic.rng_seed = get<std::uint64_t>(j, "task_seed", 0, "task");
  task.n = get<std::size_t>(j, "n", 1000, "task");
  task.data_seed = get<std::uint64_t>(j, "data_seed", 0, "task");
  const auto mode = get<std::string>(j, "data_mode", "fresh", "task");
  if (mode == "fresh") {
    task.data_mode = harness::DataMode::fresh;
  } else if (mode == "fixed") {
    task.data_mode = harness::DataMode::fixed;
  } else {
    throw ConfigError("task.data_mode must be 'fresh' or 'fixed'");
  }

  if (task.kind == TaskKind::precomputed) {
    const auto dir = get<std::string>(j, "precomputed_dir", "", "task");
    if (dir.empty()) throw ConfigError("precomputed tasks need task.precomputed_dir");
    task.precomputed_dir = std::filesystem::path(dir).is_absolute() ? std::filesystem::path(dir)
                                                                     : base_dir / dir;
  } else {
    if (j.contains("precomputed_dir")) throw ConfigError("precomputed_dir is only valid for precomputed tasks");
    if (task.synthetic.dimension < 1) throw ConfigError("task.dimension must be at least 1");
    require_positive(task.synthetic.noise_scale, "task.noise_scale");
    require_positive(task.synthetic.signal_scale, "task.signal_scale");
    if (task.kind == TaskKind::classification && task.synthetic.class_count < 2) {
      throw ConfigError("task.class_count must be at least 2");
    }
    if (task.n < 4) throw ConfigError("task.n must be at least 4");
  }
  return task;
}

harness::SplitSpec parse_splits(const json& j) {
  only_keys(j, "splits", {"units", "train", "tune", "cal", "test"});
  harness::SplitSpec spec;
  const auto units = get<std::string>(j, "units", "count", "splits");
  if (units == "count") {
    spec.by_count = true;
    spec.sizes = {get<std::size_t>(j, "train", 0, "splits"), get<std::size_t>(j, "tune", 0, "splits"),
                  get<std::size_t>(j, "cal", 0, "splits"), get<std::size_t>(j, "test", 0, "splits")};
  } else if (units == "fraction") {
    spec.by_count = false;
    spec.fractions = {get<double>(j, "train", 0.0, "splits"), get<double>(j, "tune", 0.0, "splits"),
                      get<double>(j, "cal", 0.0, "splits"), get<double>(j, "test", 0.0, "splits")};
    const auto& f = spec.fractions;
    for (double v : {f.train, f.tune, f.cal, f.test}) {
      if (v < 0.0 || v > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
    }
    if (f.train + f.tune + f.cal + f.test > 1.0 + 1e-9) throw ConfigError("split fractions sum above 1");
  } else {
    throw ConfigError("splits.units must be 'count' or 'fraction'");
  }
  return spec;
}

riskcontrol::BqConfig parse_bq(const json& j) {
  only_keys(j, "bq", {"delta", "loss_bound", "mc_draws", "common_draws"});
  riskcontrol::BqConfig bq;
  bq.delta = get<double>(j, "delta", bq.delta, "bq");
  bq.loss_bound = get<double>(j, "loss_bound", bq.loss_bound, "bq");
  bq.mc_draws = get<std::size_t>(j, "mc_draws", bq.mc_draws, "bq");
  bq.common_draws = get<bool>(j, "common_draws", bq.common_draws, "bq");
  try {
    bq.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bq: ") + e.what());
  }
  return bq;
}

std::vector<Candidate> parse_candidates(const json& j, TaskKind kind) {
  if (!j.is_array() || j.empty()) throw ConfigError("candidates must be \"default\" or a non-empty array");
  std::vector<Candidate> out;
  std::set<std::string> ids;
  for (const auto& item : j) {
    only_keys(item, "candidate", {"id", "kind", "params"});
    json full = item;
    if (!full.contains("kind")) full["kind"] = std::string(to_string(kind));
    if (!full.contains("id") || !full["id"].is_string()) throw ConfigError("candidate.id must be a string");
    try {
      out.push_back(Candidate::from_json(full));
    } catch (const std::exception& e) {
      throw ConfigError(std::string("bad candidate: ") + e.what());
    }
    if (out.back().kind() != kind) throw ConfigError("candidate " + out.back().id() + " has the wrong kind");
    if (!ids.insert(out.back().id()).second) throw ConfigError("duplicate candidate id " + out.back().id());
  }
  return out;
}

}  // namespace

std::string_view to_string(RunMode mode) {
  switch (mode) {
    case RunMode::experiment: return "experiment";
    case RunMode::ablation: return "ablation";
    case RunMode::sweep: return "sweep";
  }
  return "unknown";
}

std::vector<harness::Method> parse_methods(std::string_view list) {
  std::vector<harness::Method> out;
  for (auto item : split_list(list)) {
    const auto m = harness::method_from_string(item);
    if (std::find(out.begin(), out.end(), m) != out.end()) {
      throw ConfigError("method listed twice: " + std::string(item));
    }
    out.push_back(m);
  }
  if (out.empty()) throw ConfigError("method list is empty");
  return out;
}

std::vector<harness::SplitRatio> parse_ratios(std::string_view list) {
  std::vector<harness::SplitRatio> out;
  for (auto item : split_list(list)) out.push_back(harness::SplitRatio::parse(item));
  if (out.empty()) throw ConfigError("ratio list is empty");
  return out;
}

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  only_keys(j, "config",
            {"mode", "task", "candidates", "fixed_candidate", "alpha", "alphas", "methods",
             "wilcoxon_pairs", "n_seeds", "master_seed", "splits", "ratios", "bq", "grid",
             "constraint_slack", "size_mode", "grid_points", "workers", "output_dir"});
  RunConfig cfg;
  cfg.raw = j;
  auto& exp = cfg.experiment;

  const auto mode = get<std::string>(j, "mode", "experiment", "config");
  if (mode == "experiment") {
    cfg.mode = RunMode::experiment;
  } else if (mode == "ablation") {
    cfg.mode = RunMode::ablation;
  } else if (mode == "sweep") {
    cfg.mode = RunMode::sweep;
  } else {
    throw ConfigError("mode must be experiment, ablation or sweep");
  }

  cfg.task = parse_task(j.value("task", json::object()), base_dir);

  if (!j.contains("candidates") || j["candidates"] == "default") {
    if (cfg.task.kind == TaskKind::regression) exp.candidates = default_regression_candidates();
    if (cfg.task.kind == TaskKind::classification) exp.candidates = default_classification_candidates();
    // precomputed candidates are resolved from the table directory in make_source()
  } else {
    exp.candidates = parse_candidates(j["candidates"], cfg.task.kind);
  }
  exp.fixed_candidate = get<std::string>(j, "fixed_candidate", "", "config");
  if (!exp.candidates.empty()) (void)exp.fixed();

  if (j.contains("alpha")) exp.alpha = Alpha::from_json(j["alpha"]);
  if (j.contains("alphas")) {
    if (!j["alphas"].is_array() || j["alphas"].empty()) throw ConfigError("alphas must be a non-empty array");
    for (const auto& a : j["alphas"]) cfg.alphas.push_back(Alpha::from_json(a));
  }
  if (j.contains("methods")) {
    if (!j["methods"].is_array()) throw ConfigError("methods must be an array of names");
    std::string joined;
    for (const auto& m : j["methods"]) {
      if (!m.is_string()) throw ConfigError("methods must be an array of names");
      joined += m.get<std::string>() + ",";
    }
    exp.methods = parse_methods(joined);
  }
  if (j.contains("wilcoxon_pairs")) {
    if (!j["wilcoxon_pairs"].is_array()) throw ConfigError("wilcoxon_pairs must be an array of pairs");
    for (const auto& p : j["wilcoxon_pairs"]) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string()) {
        throw ConfigError("each Wilcoxon pair must be [method, method]");
      }
      exp.wilcoxon_pairs.emplace_back(harness::method_from_string(p[0].get<std::string>()),
                                      harness::method_from_string(p[1].get<std::string>()));
    }
  }
  exp.n_seeds = get<std::size_t>(j, "n_seeds", 50, "config");
  if (exp.n_seeds < 1) throw ConfigError("n_seeds must be at least 1");
  exp.master_seed = get<std::uint64_t>(j, "master_seed", 0, "config");

  if (j.contains("splits")) {
    exp.split = parse_splits(j["splits"]);
  } else {
    exp.split.by_count = false;
    exp.split.fractions = {0.4, 0.2, 0.2, 0.2};
  }
  if (exp.split.by_count && cfg.task.kind != TaskKind::precomputed &&
      exp.split.sizes.total() > cfg.task.n) {
    throw ConfigError("split sizes add up to more than task.n");
  }
  if (j.contains("ratios")) {
    if (!j["ratios"].is_array() || j["ratios"].empty()) throw ConfigError("ratios must be a non-empty array");
    for (const auto& r : j["ratios"]) {
      if (!r.is_string()) throw ConfigError("ratios must be strings like \"20/80\"");
      cfg.ratios.push_back(harness::SplitRatio::parse(r.get<std::string>()));
    }
  }
  if (j.contains("bq")) exp.bq = parse_bq(j["bq"]);
  if (j.contains("grid")) {
    try {
      exp.tune.grid = tuning::GridPolicy::from_json(j["grid"]);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("grid: ") + e.what());
    }
    only_keys(j["grid"], "grid", {"policy", "count", "values"});
  }
  exp.tune.constraint_slack = get<double>(j, "constraint_slack", 0.0, "config");
  if (exp.tune.constraint_slack < 0.0 || exp.tune.constraint_slack >= exp.alpha.value()) {
    throw ConfigError("constraint_slack must lie in [0, alpha)");
  }
  const auto size_mode = get<std::string>(j, "size_mode", "analytic", "config");
  if (size_mode == "analytic") {
    exp.tune.fit.size_mode = SizeMode::analytic;
  } else if (size_mode == "grid") {
    exp.tune.fit.size_mode = SizeMode::grid;
  } else {
    throw ConfigError("size_mode must be 'analytic' or 'grid'");
  }
  exp.tune.fit.grid_points = get<std::size_t>(j, "grid_points", 300, "config");
  if (exp.tune.fit.grid_points < 2) throw ConfigError("grid_points must be at least 2");
  exp.workers = get<std::size_t>(j, "workers", 0, "config");
  cfg.output_dir = get<std::string>(j, "output_dir", "out", "config");

  if (cfg.mode == RunMode::ablation && cfg.ratios.empty()) {
    cfg.ratios = parse_ratios("20/80,33/67,50/50,67/33,80/20");
  }
  if (cfg.mode == RunMode::sweep && cfg.alphas.empty()) {
    cfg.alphas = {Alpha::rational(1, 5), Alpha::rational(1, 10), Alpha::rational(1, 20)};
  }
  exp.echo = cfg.raw;
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j, path.parent_path());
}

void apply_overrides(RunConfig& cfg, const Overrides& o) {
  auto& exp = cfg.experiment;
  json record = json::object();
  if (o.out) {
    // not echoed: reports must not depend on where they are written
    cfg.output_dir = *o.out;
  }
  if (o.seed) {
    exp.master_seed = *o.seed;
    record["seed"] = *o.seed;
  }
  if (o.methods) {
    exp.methods = parse_methods(*o.methods);
    // pairs declared in the file may no longer apply
    exp.wilcoxon_pairs.clear();
    record["methods"] = *o.methods;
  }
  if (o.alpha) {
    exp.alpha = Alpha::parse(*o.alpha);
    record["alpha"] = *o.alpha;
  }
  if (o.seeds) {
    if (*o.seeds < 1) throw ConfigError("--seeds must be at least 1");
    exp.n_seeds = *o.seeds;
    record["seeds"] = *o.seeds;
  }
  if (o.ratios) {
    cfg.ratios = parse_ratios(*o.ratios);
    record["ratios"] = *o.ratios;
  }
  exp.overrides = record;
}

harness::TaskSource prepare_source(RunConfig& cfg) {
  const auto& task = cfg.task;
  if (task.kind != TaskKind::precomputed) {
    return harness::TaskSource::synthetic(SyntheticTask(task.synthetic), task.n, task.data_mode,
                                          task.data_seed);
  }
  auto scores = std::make_shared<const PrecomputedScores>(load_precomputed_directory(task.precomputed_dir));
  auto& candidates = cfg.experiment.candidates;
  if (candidates.empty()) {
    for (const auto& [id, table] : scores->tables) candidates.emplace_back(id, TaskKind::precomputed);
    (void)cfg.experiment.fixed();
  }
  for (const auto& c : candidates) {
    if (!scores->tables.contains(c.id())) {
      throw ConfigError("no score table " + c.id() + ".csv in " + task.precomputed_dir.string());
    }
  }
  return harness::TaskSource::fixed(
      std::make_shared<const Dataset>(make_precomputed_dataset(std::move(scores))));
}

}  // namespace dco::config
