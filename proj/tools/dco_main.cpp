// Command-line driver: tune, calibrate, predict, experiment, ablation, sweep.

#include <iostream>

#include <CLI11.hpp>

#include "dco/commands.hpp"

namespace {

void add_overrides(CLI::App* cmd, dco::config::Overrides& o) {
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--methods", o.methods, "comma-separated methods");
  cmd->add_option("--alpha", o.alpha, "miscoverage level, p/q or decimal");
  cmd->add_option("--seeds", o.seeds, "number of seeds");
  cmd->add_option("--ratios", o.ratios, "comma-separated tune/cal ratios such as 20/80,50/50");
}

}  // namespace

int main(int argc, char** argv) {
  using dco::config::RunMode;

  CLI::App app{"Decoupled conformal tuning and calibration toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  dco::config::Overrides overrides;

  auto* tune = app.add_subcommand("tune", "select a candidate structure on the tune split");
  auto* calibrate = app.add_subcommand("calibrate", "tune, then recalibrate the threshold on cal");
  auto* experiment = app.add_subcommand("experiment", "repeated-split experiment (mode from config)");
  auto* ablation = app.add_subcommand("ablation", "split-ratio ablation over the non-training budget");
  auto* sweep = app.add_subcommand("sweep", "miscoverage sweep");
  for (auto* cmd : {tune, calibrate, experiment, ablation, sweep}) {
    cmd->add_option("--config", config_path, "JSON run config")->required();
    add_overrides(cmd, overrides);
  }

  std::string rule_path;
  std::string input_path;
  std::string predict_out = "out";
  auto* predict = app.add_subcommand("predict", "apply a saved rule to input rows");
  predict->add_option("--rule", rule_path, "rule.json written by calibrate")->required();
  predict->add_option("--input", input_path, "feature CSV or precomputed score CSV")->required();
  predict->add_option("--out", predict_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dco::cli::kExitConfigError;
  }

  auto& out = std::cout;
  auto& err = std::cerr;
  if (*tune) return dco::cli::cmd_tune(config_path, overrides, out, err);
  if (*calibrate) return dco::cli::cmd_calibrate(config_path, overrides, out, err);
  if (*predict) return dco::cli::cmd_predict(rule_path, input_path, predict_out, out, err);
  if (*experiment) return dco::cli::cmd_experiment(config_path, overrides, std::nullopt, out, err);
  if (*ablation) return dco::cli::cmd_experiment(config_path, overrides, RunMode::ablation, out, err);
  if (*sweep) return dco::cli::cmd_experiment(config_path, overrides, RunMode::sweep, out, err);
  return dco::cli::kExitFailure;
}
