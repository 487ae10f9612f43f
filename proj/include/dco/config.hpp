#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/harness.hpp"

namespace dco::config {

enum class RunMode { experiment, ablation, sweep };

std::string_view to_string(RunMode mode);

struct TaskConfig {
  TaskKind kind = TaskKind::regression;
  SyntheticTaskSpec synthetic;
  std::size_t n = 1000;
  harness::DataMode data_mode = harness::DataMode::fresh;
  std::uint64_t data_seed = 0;           // fixed data mode only
  std::filesystem::path precomputed_dir;  // precomputed kind only
};

/// Fully validated run configuration.
struct RunConfig {
  RunMode mode = RunMode::experiment;
  TaskConfig task;
  harness::ExperimentConfig experiment;
  std::vector<harness::SplitRatio> ratios;
  std::vector<Alpha> alphas;
  std::filesystem::path output_dir = "out";
  nlohmann::json raw;
};

/// Builds the synthetic generator or loads the precomputed tables. For
/// precomputed tasks without an explicit candidate list, every table becomes
/// one candidate.
harness::TaskSource prepare_source(RunConfig& cfg);

/// Flag values that take precedence over the file.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> methods;  // comma separated
  std::optional<std::string> alpha;
  std::optional<std::size_t> seeds;
  std::optional<std::string> ratios;   // comma separated a/b list
};

/// Throws ConfigError on unknown keys, wrong types or out-of-range values.
/// Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
void apply_overrides(RunConfig& cfg, const Overrides& overrides);

std::vector<harness::Method> parse_methods(std::string_view list);
std::vector<harness::SplitRatio> parse_ratios(std::string_view list);

}  // namespace dco::config
