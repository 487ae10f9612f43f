#include "dco/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dco/errors.hpp"
#include "dco/rng.hpp"

namespace dco::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::size_t kSummaryRows = 10;

std::string dump(const json& j) { return j.dump(2) + "\n"; }

/// Maps known error families to exit codes; anything else is a plain failure.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

config::RunConfig load(const fs::path& path, const config::Overrides& overrides) {
  auto cfg = config::load_run_config(path);
  config::apply_overrides(cfg, overrides);
  return cfg;
}

struct TuneRun {
  tuning::TuneResult result;
  harness::SeedSetup setup;
  std::uint64_t seed = 0;
};

TuneRun run_tuning(config::RunConfig& cfg) {
  const auto source = config::prepare_source(cfg);
  const auto& exp = cfg.experiment;
  const std::uint64_t seed = harness::trial_seed(exp.master_seed, 0);
  auto setup = harness::setup_seed(source, exp.split, seed);
  if (setup.plan.tune.empty()) throw ConfigError("the tune split is empty");
  harness::ModelCache cache(*setup.data, setup.plan.train, exp.tune.fit);
  const SampleView tune(*setup.data, setup.plan.tune);
  auto result = tuning::dco_tune_models(cache.all(exp.candidates), tune, exp.alpha.value(), exp.tune);
  return {std::move(result), std::move(setup), seed};
}

json provenance(const config::RunConfig& cfg) {
  return {{"schema_version", harness::kReportSchemaVersion},
          {"master_seed", cfg.experiment.master_seed}};
}

json tune_document(const config::RunConfig& cfg, const TuneRun& run) {
  json doc = provenance(cfg);
  const auto& plan = run.setup.plan;
  doc["alpha"] = cfg.experiment.alpha.to_json();
  doc["constraint_slack"] = cfg.experiment.tune.constraint_slack;
  doc["grid"] = cfg.experiment.tune.grid.to_json();
  doc["split_sizes"] = {{"train", plan.train.size()},
                        {"tune", plan.tune.size()},
                        {"cal", plan.cal.size()},
                        {"test", plan.test.size()}};
  doc["tune"] = run.result.to_json();
  doc["config"] = cfg.raw;
  doc["cli_overrides"] = cfg.experiment.overrides.is_null() ? json::object() : cfg.experiment.overrides;
  return doc;
}

void print_tune_table(const tuning::TuneResult& result, std::ostream& out) {
  std::vector<const tuning::CandidateRow*> rows;
  for (const auto& row : result.table) rows.push_back(&row);
  std::stable_sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) {
    if (a->feasible != b->feasible) return a->feasible;
    return a->emp_size < b->emp_size;
  });
  out << std::left << std::setw(12) << "Candidate" << std::setw(16) << "Variant" << std::setw(12)
      << "Lambda" << std::setw(12) << "Status" << std::setw(12) << "Avg Size" << "P95\n";
  for (std::size_t i = 0; i < std::min(kSummaryRows, rows.size()); ++i) {
    const auto& r = *rows[i];
    out << std::left << std::setw(12) << r.candidate.id() << std::setw(16)
        << r.candidate.text_or("score_variant", "-") << std::setw(12) << std::fixed
        << std::setprecision(3) << r.lambda_eval << std::setw(12)
        << (r.feasible ? "feasible" : "infeasible") << std::setw(12) << r.emp_size << r.p95_size
        << '\n';
  }
  if (rows.size() > kSummaryRows) out << "(" << rows.size() - kSummaryRows << " more rows in the JSON)\n";
  out << "selected " << result.selected.id() << (result.fallback_used ? " (fallback: nothing feasible)" : "")
      << '\n';
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, std::size_t line_no) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    throw SchemaError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
  }
  return v;
}

std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::size_t model_dimension(const ScoreModel& model) {
  const json j = model.to_json();
  const auto type = j.at("type").get<std::string>();
  if (type == "gaussian_linear") return j.at("posterior_mean").size() - 1;
  if (type == "softmax") return j.at("dimension").get<std::size_t>();
  return 1;
}

std::string prediction_row(const std::string& id, const PredictionSet& set) {
  std::ostringstream os;
  os << id << ',' << (set.full ? 1 : 0) << ',' << (set.empty ? 1 : 0) << ',';
  if (set.kind == TaskKind::regression && !set.empty) {
    os << number(set.lower) << ',' << number(set.upper);
  } else {
    os << ',';
  }
  os << ',';
  for (std::size_t i = 0; i < set.labels.size(); ++i) os << (i ? ";" : "") << set.labels[i];
  os << ',' << number(set.size) << '\n';
  return os.str();
}

}  // namespace

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

int cmd_tune(const fs::path& config_path, const config::Overrides& overrides, std::ostream& out,
             std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load(config_path, overrides);
    const auto run = run_tuning(cfg);
    write_atomic(cfg.output_dir / "tune_result.json", dump(tune_document(cfg, run)));
    print_tune_table(run.result, out);
    return run.result.fallback_used ? kExitFallback : kExitOk;
  });
}

int cmd_calibrate(const fs::path& config_path, const config::Overrides& overrides,
                  std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load(config_path, overrides);
    const auto run = run_tuning(cfg);
    const auto& plan = run.setup.plan;
    if (plan.cal.empty()) throw ConfigError("the cal split is empty");
    const SampleView cal(*run.setup.data, plan.cal);
    const auto rule = conformal::calibrate(run.result.selected_model, cal, cfg.experiment.alpha);

    json rule_doc = rule.to_json();
    const json extra = provenance(cfg);
    for (const auto& [key, value] : extra.items()) rule_doc[key] = value;
    rule_doc["lambda_tune"] = run.result.lambda_tune;
    rule_doc["lambda_tune_status"] = "discard before deployment";
    write_atomic(cfg.output_dir / "tune_result.json", dump(tune_document(cfg, run)));
    write_atomic(cfg.output_dir / "rule.json", dump(rule_doc));
    print_tune_table(run.result, out);
    out << "threshold " << number(rule.threshold) << " from m_cal=" << rule.m_cal << " at alpha="
        << rule.alpha.to_string() << '\n';
    return run.result.fallback_used ? kExitFallback : kExitOk;
  });
}

int cmd_predict(const fs::path& rule_path, const fs::path& input_path, const fs::path& out_dir,
                std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> int {
    std::ifstream rule_file(rule_path);
    if (!rule_file) throw ConfigError("cannot open rule file " + rule_path.string());
    json rule_json;
    try {
      rule_json = json::parse(rule_file);
    } catch (const json::parse_error& e) {
      throw SchemaError("rule file is not valid JSON: " + std::string(e.what()));
    }
    if (!fs::exists(input_path)) throw ConfigError("input file not found: " + input_path.string());

    const auto kind = task_kind_from_string(
        rule_json.at("candidate").at("kind").get<std::string>());
    std::string csv = "sample_id,full,empty,lower,upper,labels,size\n";
    std::size_t rows = 0;

    if (kind == TaskKind::precomputed) {
      auto table = std::make_shared<const ScoreTable>(load_precomputed(input_path));
      const auto rule = conformal::CalibratedRule::from_json(rule_json, table);
      if (!rule.model) throw SchemaError("rule has no embedded model");
      for (std::size_t r = 0; r < table->rows(); ++r) {
        const double x = static_cast<double>(r);
        const auto set = conformal::predict_set(rule, *rule.model, std::span<const double>(&x, 1));
        csv += prediction_row(table->sample_ids[r], set);
      }
      rows = table->rows();
    } else {
      const auto rule = conformal::CalibratedRule::from_json(rule_json);
      if (!rule.model) throw SchemaError("rule has no embedded model");
      std::ifstream in(input_path);
      std::string line;
      if (!std::getline(in, line)) throw SchemaError("input file is empty");
      const auto header = split_csv_line(line);
      const bool has_id = !header.empty() && header.front() == "sample_id";
      const std::size_t d = model_dimension(*rule.model);
      if (header.size() - (has_id ? 1 : 0) != d) {
        throw SchemaError("input has " + std::to_string(header.size() - (has_id ? 1 : 0)) +
                          " feature columns but the model expects " + std::to_string(d));
      }
      std::vector<double> x(d);
      std::size_t line_no = 1;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
          throw SchemaError("line " + std::to_string(line_no) + " has the wrong number of cells");
        }
        for (std::size_t c = 0; c < d; ++c) x[c] = parse_cell(cells[c + (has_id ? 1 : 0)], line_no);
        const std::string id = has_id ? cells.front() : std::to_string(rows);
        csv += prediction_row(id, conformal::predict_set(rule, *rule.model, x));
        ++rows;
      }
    }
    write_atomic(out_dir / "predictions.csv", csv);
    out << "wrote " << rows << " prediction sets to " << (out_dir / "predictions.csv").string() << '\n';
    return kExitOk;
  });
}

int cmd_experiment(const fs::path& config_path, const config::Overrides& overrides,
                   std::optional<config::RunMode> mode, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto cfg = load(config_path, overrides);
    if (mode) cfg.mode = *mode;
    if (cfg.mode == config::RunMode::ablation && cfg.ratios.empty()) {
      cfg.ratios = config::parse_ratios("20/80,33/67,50/50,67/33,80/20");
    }
    if (cfg.mode == config::RunMode::sweep && cfg.alphas.empty()) {
      cfg.alphas = {Alpha::rational(1, 5), Alpha::rational(1, 10), Alpha::rational(1, 20)};
    }
    const auto source = config::prepare_source(cfg);

    std::vector<harness::ExperimentReport> reports;
    switch (cfg.mode) {
      case config::RunMode::experiment:
        reports.push_back(harness::run_experiment(source, cfg.experiment));
        break;
      case config::RunMode::ablation:
        reports = harness::ablate_split_ratios(source, cfg.experiment, cfg.ratios);
        break;
      case config::RunMode::sweep:
        reports = harness::sweep_alpha(source, cfg.experiment, cfg.alphas);
        break;
    }

    json doc;
    std::string csv;
    if (cfg.mode == config::RunMode::experiment) {
      doc = reports.front().to_json();
      csv = reports.front().per_seed_csv();
    } else {
      doc = provenance(cfg);
      doc["mode"] = std::string(config::to_string(cfg.mode));
      doc["reports"] = json::array();
      for (std::size_t i = 0; i < reports.size(); ++i) {
        doc["reports"].push_back(reports[i].to_json());
        const std::string part = reports[i].per_seed_csv();
        // keep a single header line across reports
        csv += i == 0 ? part : part.substr(part.find('\n') + 1);
      }
      doc["config"] = cfg.raw;
    }
    write_atomic(cfg.output_dir / "report.json", dump(doc));
    write_atomic(cfg.output_dir / "per_seed.csv", csv);
    for (const auto& r : reports) out << r.summary_table() << '\n';
    return kExitOk;
  });
}

}  // namespace dco::cli
