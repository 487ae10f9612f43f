#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "dco/config.hpp"

namespace dco::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitFallback = 3,
};

/// Writes through a sibling temp file and a rename, so readers never see a
/// half-written file.
void write_atomic(const std::filesystem::path& path, const std::string& content);

/// Tuning stage on the first seed's split; writes tune_result.json.
int cmd_tune(const std::filesystem::path& config_path, const config::Overrides& overrides,
             std::ostream& out, std::ostream& err);

/// Tuning plus conformal recalibration; writes tune_result.json and rule.json.
int cmd_calibrate(const std::filesystem::path& config_path, const config::Overrides& overrides,
                  std::ostream& out, std::ostream& err);

/// Applies a serialized rule to every row of `input_path` and writes
/// predictions.csv to `out_dir`.
int cmd_predict(const std::filesystem::path& rule_path, const std::filesystem::path& input_path,
                const std::filesystem::path& out_dir, std::ostream& out, std::ostream& err);

/// Experiment, ablation or sweep; `mode` overrides the config's own mode.
int cmd_experiment(const std::filesystem::path& config_path, const config::Overrides& overrides,
                   std::optional<config::RunMode> mode, std::ostream& out, std::ostream& err);

}  // namespace dco::cli
