#include "dco/scores.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "dco/errors.hpp"
#include "dco/rng.hpp"
#include "dco/stats.hpp"

namespace dco {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kInterceptPriorVariance = 10.0;
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::regression: return "regression";
    case TaskKind::classification: return "classification";
    case TaskKind::precomputed: return "precomputed";
  }
  return "unknown";
}

TaskKind task_kind_from_string(std::string_view text) {
  if (text == "regression") return TaskKind::regression;
  if (text == "classification") return TaskKind::classification;
  if (text == "precomputed") return TaskKind::precomputed;
  throw std::invalid_argument("unknown task kind: " + std::string(text));
}

// ---------------------------------------------------------------------------
// Candidate

Candidate::Candidate(std::string id, TaskKind kind, ParamMap params)
    : id_(std::move(id)), kind_(kind), params_(std::move(params)) {
  if (id_.empty()) throw std::invalid_argument("candidate id must be non-empty");
}

bool Candidate::has(std::string_view key) const { return params_.find(key) != params_.end(); }

double Candidate::number(std::string_view key) const {
  auto it = params_.find(key);
  if (it == params_.end()) {
    throw std::invalid_argument("candidate " + id_ + " lacks parameter " + std::string(key));
  }
  if (const auto* v = std::get_if<double>(&it->second)) return *v;
  throw std::invalid_argument("candidate " + id_ + " parameter " + std::string(key) +
                              " is not numeric");
}

double Candidate::number_or(std::string_view key, double fallback) const {
  return has(key) ? number(key) : fallback;
}

std::string Candidate::text_or(std::string_view key, std::string fallback) const {
  auto it = params_.find(key);
  if (it == params_.end()) return fallback;
  if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
  throw std::invalid_argument("candidate " + id_ + " parameter " + std::string(key) +
                              " is not text");
}

nlohmann::json Candidate::to_json() const {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [key, value] : params_) {
    std::visit([&](const auto& v) { params[key] = v; }, value);
  }
  return {{"id", id_}, {"kind", std::string(to_string(kind_))}, {"params", params}};
}

Candidate Candidate::from_json(const nlohmann::json& j) {
  ParamMap params;
  if (j.contains("params")) {
    for (const auto& [key, value] : j.at("params").items()) {
      if (value.is_number()) {
        params.emplace(key, value.get<double>());
      } else if (value.is_string()) {
        params.emplace(key, value.get<std::string>());
      } else {
        throw SchemaError("candidate parameter " + key + " must be a number or string");
      }
    }
  }
  return Candidate(j.at("id").get<std::string>(),
                   task_kind_from_string(j.at("kind").get<std::string>()), std::move(params));
}

namespace {

std::string candidate_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "cand_%03zu", index);
  return buf;
}

}  // namespace

std::vector<Candidate> default_regression_candidates() {
  std::vector<Candidate> out;
  std::size_t index = 1;
  for (double prior : {1.0, 0.3, 0.1, 0.02}) {
    for (double noise : {0.5, 1.0, 1.5, 2.0}) {
      out.emplace_back(candidate_id(index++), TaskKind::regression,
                       ParamMap{{"prior_scale", prior}, {"noise_scale", noise}});
    }
  }
  return out;
}

std::vector<Candidate> default_classification_candidates() {
  std::vector<Candidate> out;
  std::size_t index = 1;
  for (const char* variant : {"posterior_nll", "aoi_nll"}) {
    for (double jitter : {0.05, 0.10, 0.20, 0.30}) {
      for (double temperature : {1.0, 2.0}) {
        out.emplace_back(candidate_id(index++), TaskKind::classification,
                         ParamMap{{"score_variant", std::string(variant)},
                                  {"jitter", jitter},
                                  {"temperature", temperature}});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// GaussianPredictive

GaussianPredictive::GaussianPredictive(double mean, double stddev) : mean_(mean), stddev_(stddev) {
  if (!(stddev > 0.0) || !std::isfinite(stddev)) {
    throw std::invalid_argument("predictive stddev must be positive and finite");
  }
}

double GaussianPredictive::density(double y) const { return std::exp(-nll(y)); }

double GaussianPredictive::nll(double y) const {
  const double z = (y - mean_) / stddev_;
  return std::log(stddev_) + kLogSqrt2Pi + 0.5 * z * z;
}

double GaussianPredictive::mode_score() const { return std::log(stddev_) + kLogSqrt2Pi; }

double GaussianPredictive::half_width(double lambda) const {
  if (lambda == kInf) return kInf;
  const double excess = lambda - mode_score();
  if (!(excess > 0.0)) return 0.0;
  return stddev_ * std::sqrt(2.0 * excess);
}

void ClassScoreRow::validate(std::size_t class_count) const {
  if (scores.size() != class_count) throw std::invalid_argument("score row length != class count");
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("score row has a non-finite entry");
  }
  if (true_label < 0 || static_cast<std::size_t>(true_label) >= class_count) {
    throw std::invalid_argument("true label out of range");
  }
}

// ---------------------------------------------------------------------------
// Precomputed score CSV

namespace {

std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_double(const std::string& cell, std::size_t line_no) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  while (begin < end && *begin == ' ') ++begin;
  if (begin < end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  while (ptr < end && *ptr == ' ') ++ptr;
  if (ec != std::errc() || ptr != end || begin == end) {
    throw SchemaError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
  }
  return value;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("failed to format number");
  return std::string(buf, ptr);
}

}  // namespace

ScoreTable load_precomputed(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open score file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "true_label") {
    throw SchemaError(path.string() + ": header must start with sample_id,true_label,score_0");
  }
  ScoreTable table;
  table.class_count = header.size() - 2;
  for (std::size_t k = 0; k < table.class_count; ++k) {
    if (header[k + 2] != "score_" + std::to_string(k)) {
      throw SchemaError(path.string() + ": expected column score_" + std::to_string(k) +
                        ", found '" + header[k + 2] + "'");
    }
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw SchemaError(path.string() + ": line " + std::to_string(line_no) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(header.size()));
    }
    const double label = parse_double(cells[1], line_no);
    if (label != std::floor(label) || label < 0 ||
        label >= static_cast<double>(table.class_count)) {
      throw SchemaError(path.string() + ": line " + std::to_string(line_no) +
                        ": label out of range");
    }
    table.sample_ids.push_back(cells[0]);
    table.labels.push_back(static_cast<int>(label));
    for (std::size_t k = 0; k < table.class_count; ++k) {
      const double v = parse_double(cells[k + 2], line_no);
      if (!std::isfinite(v)) {
        throw SchemaError(path.string() + ": line " + std::to_string(line_no) +
                          ": non-finite score");
      }
      table.values.push_back(v);
    }
  }
  return table;
}

void export_precomputed(const ScoreTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sample_id,true_label";
  for (std::size_t k = 0; k < table.class_count; ++k) out << ",score_" << k;
  out << '\n';
  for (std::size_t r = 0; r < table.rows(); ++r) {
    out << (r < table.sample_ids.size() ? table.sample_ids[r] : std::to_string(r)) << ','
        << table.labels[r];
    for (double v : table.row(r)) out << ',' << format_double(v);
    out << '\n';
  }
}

PrecomputedScores load_precomputed_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw SchemaError("score directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw SchemaError("no <candidate_id>.csv files in " + dir.string());

  PrecomputedScores scores;
  const ScoreTable* first = nullptr;
  for (const auto& file : files) {
    auto table = std::make_shared<ScoreTable>(load_precomputed(file));
    if (first != nullptr &&
        (table->labels != first->labels || table->class_count != first->class_count)) {
      throw SchemaError(file.string() + ": rows, labels or class count differ from " +
                        files.front().string());
    }
    if (first == nullptr) first = table.get();
    scores.tables.emplace(file.stem().string(), std::move(table));
  }
  return scores;
}

Dataset make_precomputed_dataset(std::shared_ptr<const PrecomputedScores> scores) {
  if (!scores || scores->tables.empty()) throw std::invalid_argument("no precomputed tables");
  const ScoreTable& first = *scores->tables.begin()->second;
  Dataset data;
  data.kind = TaskKind::precomputed;
  data.dimension = 1;
  data.class_count = first.class_count;
  for (std::size_t r = 0; r < first.rows(); ++r) {
    data.features.push_back(static_cast<double>(r));
    data.responses.push_back(static_cast<double>(first.labels[r]));
  }
  data.precomputed = std::move(scores);
  return data;
}

// ---------------------------------------------------------------------------
// SampleView

SampleView::SampleView(const Dataset& data, std::vector<std::size_t> indices, IndexReadLog* log)
    : data_(&data), indices_(std::move(indices)), log_(log) {
  for (std::size_t i : indices_) {
    if (i >= data.size()) throw std::out_of_range("sample index outside dataset");
  }
}

void SampleView::touch(std::size_t k) const {
  if (log_ != nullptr) log_->record(indices_[k]);
}

std::span<const double> SampleView::x(std::size_t k) const {
  touch(k);
  return data_->x(indices_.at(k));
}

double SampleView::y(std::size_t k) const {
  touch(k);
  return data_->y(indices_.at(k));
}

// ---------------------------------------------------------------------------
// ScoreModel

PointEvaluation ScoreModel::evaluate(std::span<const double> x, double y, double lambda) const {
  return {score(x, y) <= lambda, set_size_at(x, lambda)};
}

GaussianLinearModel::GaussianLinearModel(Candidate candidate, Eigen::VectorXd posterior_mean,
                                         Eigen::MatrixXd posterior_cov, double noise_sd,
                                         SizeMode mode, ResponseGrid grid)
    : ScoreModel(std::move(candidate)),
      mean_(std::move(posterior_mean)),
      cov_(std::move(posterior_cov)),
      noise_sd_(noise_sd),
      mode_(mode),
      grid_(grid) {}

GaussianPredictive GaussianLinearModel::predictive(std::span<const double> x) const {
  const auto d = static_cast<Eigen::Index>(x.size());
  if (d + 1 != mean_.size()) throw std::invalid_argument("feature dimension mismatch");
  Eigen::VectorXd phi(d + 1);
  phi(0) = 1.0;
  for (Eigen::Index j = 0; j < d; ++j) phi(j + 1) = x[static_cast<std::size_t>(j)];
  const double mu = phi.dot(mean_);
  const double var = noise_sd_ * noise_sd_ + phi.dot(cov_ * phi);
  return {mu, std::sqrt(var)};
}

double GaussianLinearModel::score(std::span<const double> x, double y) const {
  return predictive(x).nll(y);
}

double GaussianLinearModel::grid_width(std::span<const double> x, double lambda) const {
  if (lambda == kInf) return grid_.span();
  const GaussianPredictive pred = predictive(x);
  const double step = grid_.step();
  std::size_t inside = 0;
  for (std::size_t g = 0; g < grid_.points; ++g) {
    const double y = grid_.lo + step * static_cast<double>(g);
    if (pred.nll(y) <= lambda) ++inside;
  }
  return std::min(static_cast<double>(inside) * step, grid_.span());
}

double GaussianLinearModel::set_size_at(std::span<const double> x, double lambda) const {
  if (mode_ == SizeMode::grid) return grid_width(x, lambda);
  return 2.0 * predictive(x).half_width(lambda);
}

PredictionSet GaussianLinearModel::predict_set(std::span<const double> x, double lambda) const {
  PredictionSet set;
  set.kind = TaskKind::regression;
  if (lambda == kInf) {
    set.full = true;
    set.lower = -kInf;
    set.upper = kInf;
    set.size = mode_ == SizeMode::grid ? grid_.span() : kInf;
    return set;
  }
  const GaussianPredictive pred = predictive(x);
  const double h = pred.half_width(lambda);
  set.empty = lambda < pred.mode_score();
  set.lower = pred.mean() - h;
  set.upper = pred.mean() + h;
  set.size = set_size_at(x, lambda);
  return set;
}

nlohmann::json GaussianLinearModel::to_json() const {
  std::vector<double> mean(mean_.data(), mean_.data() + mean_.size());
  std::vector<double> cov(cov_.data(), cov_.data() + cov_.size());
  return {{"type", "gaussian_linear"},
          {"candidate", candidate().to_json()},
          {"posterior_mean", mean},
          {"posterior_cov", cov},
          {"noise_sd", noise_sd_},
          {"size_mode", mode_ == SizeMode::grid ? "grid" : "analytic"},
          {"response_grid", {{"lo", grid_.lo}, {"hi", grid_.hi}, {"points", grid_.points}}}};
}

SoftmaxScorer::SoftmaxScorer(Candidate candidate, Eigen::MatrixXd centroids,
                             double pooled_variance, double temperature, double jitter,
                             std::size_t draws, ScoreVariant variant, std::uint64_t seed)
    : ScoreModel(std::move(candidate)),
      centroids_(std::move(centroids)),
      pooled_variance_(pooled_variance),
      temperature_(temperature),
      jitter_(jitter),
      draws_(draws),
      variant_(variant),
      seed_(seed) {}

std::vector<std::vector<double>> SoftmaxScorer::probability_draws(std::span<const double> x) const {
  const auto k_count = static_cast<std::size_t>(centroids_.rows());
  const auto d = static_cast<std::size_t>(centroids_.cols());
  if (x.size() != d) throw std::invalid_argument("feature dimension mismatch");

  Rng rng(hash_doubles(x, seed_));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(pooled_variance_);
  const double scale = 1.0 / (2.0 * pooled_variance_ * temperature_);

  std::vector<std::vector<double>> out(draws_, std::vector<double>(k_count));
  std::vector<double> xt(d);
  std::vector<double> logits(k_count);
  for (std::size_t t = 0; t < draws_; ++t) {
    for (std::size_t j = 0; j < d; ++j) xt[j] = x[j] + jitter_ * sd * normal(rng);
    double top = -kInf;
    for (std::size_t c = 0; c < k_count; ++c) {
      double dist2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = xt[j] - centroids_(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j));
        dist2 += diff * diff;
      }
      logits[c] = -dist2 * scale;
      top = std::max(top, logits[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < k_count; ++c) {
      out[t][c] = std::exp(logits[c] - top);
      total += out[t][c];
    }
    for (double& p : out[t]) p /= total;
  }
  return out;
}

std::vector<double> SoftmaxScorer::score_row(std::span<const double> x) const {
  const auto draws = probability_draws(x);
  const auto k_count = static_cast<std::size_t>(centroids_.rows());
  std::vector<double> row(k_count);
  for (std::size_t c = 0; c < k_count; ++c) {
    double sum = 0.0;
    double sum_sq = 0.0;
    for (const auto& p : draws) {
      sum += p[c];
      sum_sq += p[c] * p[c];
    }
    double prob = 0.0;
    if (variant_ == ScoreVariant::posterior_nll) {
      prob = sum / static_cast<double>(draws.size());
    } else {
      prob = sum > 0.0 ? sum_sq / sum : 0.0;
    }
    row[c] = -std::log(std::max(prob, kProbabilityFloor));
  }
  return row;
}

double SoftmaxScorer::score(std::span<const double> x, double y) const {
  const auto label = static_cast<std::size_t>(y);
  const auto row = score_row(x);
  if (label >= row.size()) throw std::invalid_argument("label out of range");
  return row[label];
}

double SoftmaxScorer::set_size_at(std::span<const double> x, double lambda) const {
  const auto row = score_row(x);
  return static_cast<double>(std::count_if(row.begin(), row.end(), [&](double s) { return s <= lambda; }));
}

PointEvaluation SoftmaxScorer::evaluate(std::span<const double> x, double y, double lambda) const {
  const auto row = score_row(x);
  const auto label = static_cast<std::size_t>(y);
  if (label >= row.size()) throw std::invalid_argument("label out of range");
  const auto size = std::count_if(row.begin(), row.end(), [&](double s) { return s <= lambda; });
  return {row[label] <= lambda, static_cast<double>(size)};
}

namespace {

PredictionSet label_set(std::span<const double> row, double lambda) {
  PredictionSet set;
  set.kind = TaskKind::classification;
  set.full = lambda == kInf;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (row[c] <= lambda) set.labels.push_back(static_cast<int>(c));
  }
  set.empty = set.labels.empty();
  set.size = static_cast<double>(set.labels.size());
  return set;
}

}  // namespace

PredictionSet SoftmaxScorer::predict_set(std::span<const double> x, double lambda) const {
  return label_set(score_row(x), lambda);
}

nlohmann::json SoftmaxScorer::to_json() const {
  std::vector<double> centroids(static_cast<std::size_t>(centroids_.size()));
  for (Eigen::Index r = 0; r < centroids_.rows(); ++r) {
    for (Eigen::Index c = 0; c < centroids_.cols(); ++c) {
      centroids[static_cast<std::size_t>(r * centroids_.cols() + c)] = centroids_(r, c);
    }
  }
  return {{"type", "softmax"},
          {"candidate", candidate().to_json()},
          {"class_count", centroids_.rows()},
          {"dimension", centroids_.cols()},
          {"centroids", centroids},
          {"pooled_variance", pooled_variance_},
          {"temperature", temperature_},
          {"jitter", jitter_},
          {"draws", draws_},
          {"score_variant", variant_ == ScoreVariant::posterior_nll ? "posterior_nll" : "aoi_nll"},
          {"seed", seed_},
          {"probability_floor", kProbabilityFloor}};
}

TableScorer::TableScorer(Candidate candidate, std::shared_ptr<const ScoreTable> table)
    : ScoreModel(std::move(candidate)), table_(std::move(table)) {
  if (!table_) throw std::invalid_argument("table scorer needs a score table");
}

std::size_t TableScorer::row_of(std::span<const double> x) const {
  if (x.size() != 1 || !(x[0] >= 0.0) ||
      static_cast<std::size_t>(x[0]) >= table_->rows()) {
    throw std::invalid_argument("precomputed row index out of range");
  }
  return static_cast<std::size_t>(x[0]);
}

double TableScorer::score(std::span<const double> x, double y) const {
  const auto label = static_cast<std::size_t>(y);
  if (y < 0.0 || label >= table_->class_count) throw std::invalid_argument("label out of range");
  return table_->at(row_of(x), label);
}

double TableScorer::set_size_at(std::span<const double> x, double lambda) const {
  const auto row = table_->row(row_of(x));
  return static_cast<double>(std::count_if(row.begin(), row.end(), [&](double s) { return s <= lambda; }));
}

PredictionSet TableScorer::predict_set(std::span<const double> x, double lambda) const {
  return label_set(table_->row(row_of(x)), lambda);
}

nlohmann::json TableScorer::to_json() const {
  return {{"type", "table"},
          {"candidate", candidate().to_json()},
          {"class_count", table_->class_count}};
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

ScoreModelPtr fit_regression(const SampleView& train, const Candidate& candidate,
                             const FitOptions& options) {
  const double prior_scale = candidate.number("prior_scale");
  if (!(prior_scale > 0.0)) throw std::invalid_argument("non-positive prior scale");
  const double noise_sd = candidate.number_or("noise_scale", train.noise_scale());
  if (!(noise_sd > 0.0)) throw std::invalid_argument("non-positive noise scale");

  const std::size_t n = train.size();
  const auto d = static_cast<Eigen::Index>(train.x(0).size());
  Eigen::MatrixXd design(static_cast<Eigen::Index>(n), d + 1);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  double y_min = kInf;
  double y_max = -kInf;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const auto x = train.x(i);
    design(row, 0) = 1.0;
    for (Eigen::Index j = 0; j < d; ++j) design(row, j + 1) = x[static_cast<std::size_t>(j)];
    y(row) = train.y(i);
    y_min = std::min(y_min, y(row));
    y_max = std::max(y_max, y(row));
  }

  const double noise_var = noise_sd * noise_sd;
  Eigen::MatrixXd precision = design.transpose() * design / noise_var;
  precision(0, 0) += 1.0 / kInterceptPriorVariance;
  for (Eigen::Index j = 1; j <= d; ++j) precision(j, j) += 1.0 / (prior_scale * prior_scale);

  const Eigen::LDLT<Eigen::MatrixXd> ldlt(precision);
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(d + 1, d + 1));
  const Eigen::VectorXd mean = ldlt.solve(design.transpose() * y / noise_var);

  ResponseGrid grid{y_min - 2.0, y_max + 2.0, std::max<std::size_t>(options.grid_points, 2)};
  return std::make_shared<GaussianLinearModel>(candidate, mean, cov, noise_sd, options.size_mode,
                                               grid);
}

ScoreModelPtr fit_classification(const SampleView& train, const Candidate& candidate) {
  const double temperature = candidate.number_or("temperature", 1.0);
  if (!(temperature > 0.0)) throw std::invalid_argument("non-positive temperature");
  const double jitter = candidate.number_or("jitter", 0.0);
  if (jitter < 0.0) throw std::invalid_argument("negative jitter");
  const double draws = candidate.number_or("draws", 20.0);
  if (!(draws >= 1.0)) throw std::invalid_argument("draws must be at least 1");
  const std::string variant_name = candidate.text_or("score_variant", "posterior_nll");
  ScoreVariant variant;
  if (variant_name == "posterior_nll") {
    variant = ScoreVariant::posterior_nll;
  } else if (variant_name == "aoi_nll") {
    variant = ScoreVariant::aoi_nll;
  } else {
    throw std::invalid_argument("unknown score variant " + variant_name);
  }

  const std::size_t k_count = train.class_count();
  const std::size_t n = train.size();
  const auto d = static_cast<Eigen::Index>(train.x(0).size());
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k_count), d);
  std::vector<double> counts(k_count, 0.0);
  Eigen::RowVectorXd overall = Eigen::RowVectorXd::Zero(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = train.x(i);
    const auto c = static_cast<std::size_t>(train.y(i));
    if (c >= k_count) throw std::invalid_argument("training label out of range");
    counts[c] += 1.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      sums(static_cast<Eigen::Index>(c), j) += x[static_cast<std::size_t>(j)];
      overall(j) += x[static_cast<std::size_t>(j)];
    }
  }
  overall /= static_cast<double>(n);
  Eigen::MatrixXd centroids(static_cast<Eigen::Index>(k_count), d);
  for (std::size_t c = 0; c < k_count; ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    centroids.row(row) = counts[c] > 0.0 ? Eigen::RowVectorXd(sums.row(row) / counts[c]) : overall;
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = train.x(i);
    const auto c = static_cast<Eigen::Index>(train.y(i));
    for (Eigen::Index j = 0; j < d; ++j) {
      const double diff = x[static_cast<std::size_t>(j)] - centroids(c, j);
      ss += diff * diff;
    }
  }
  const double pooled = std::max(ss / (static_cast<double>(n) * static_cast<double>(d)), 1e-6);
  const std::uint64_t seed = hash_string(candidate.id());
  return std::make_shared<SoftmaxScorer>(candidate, centroids, pooled, temperature, jitter,
                                         static_cast<std::size_t>(draws), variant, seed);
}

}  // namespace

ScoreModelPtr fit_candidate(const SampleView& train, const Candidate& candidate,
                            const FitOptions& options) {
  if (candidate.kind() != train.kind()) {
    throw std::invalid_argument("candidate kind " + std::string(to_string(candidate.kind())) +
                                " does not match task kind " +
                                std::string(to_string(train.kind())));
  }
  switch (candidate.kind()) {
    case TaskKind::regression:
      if (train.empty()) throw std::invalid_argument("empty training set");
      return fit_regression(train, candidate, options);
    case TaskKind::classification:
      if (train.empty()) throw std::invalid_argument("empty training set");
      return fit_classification(train, candidate);
    case TaskKind::precomputed: {
      const auto& scores = train.precomputed();
      if (!scores) throw std::invalid_argument("precomputed task without score tables");
      auto it = scores->tables.find(candidate.id());
      if (it == scores->tables.end()) {
        throw std::invalid_argument("no score table for candidate " + candidate.id());
      }
      return std::make_shared<TableScorer>(candidate, it->second);
    }
  }
  throw std::logic_error("unhandled task kind");
}

ScoreModelPtr model_from_json(const nlohmann::json& j, std::shared_ptr<const ScoreTable> table) {
  const std::string type = j.at("type").get<std::string>();
  Candidate candidate = Candidate::from_json(j.at("candidate"));
  if (type == "gaussian_linear") {
    const auto mean = j.at("posterior_mean").get<std::vector<double>>();
    const auto cov = j.at("posterior_cov").get<std::vector<double>>();
    const auto p = static_cast<Eigen::Index>(mean.size());
    if (cov.size() != mean.size() * mean.size()) throw SchemaError("posterior_cov has wrong size");
    const auto& g = j.at("response_grid");
    ResponseGrid grid{g.at("lo").get<double>(), g.at("hi").get<double>(),
                      g.at("points").get<std::size_t>()};
    const SizeMode mode = j.at("size_mode").get<std::string>() == "grid" ? SizeMode::grid
                                                                          : SizeMode::analytic;
    return std::make_shared<GaussianLinearModel>(
        std::move(candidate), Eigen::Map<const Eigen::VectorXd>(mean.data(), p),
        Eigen::Map<const Eigen::MatrixXd>(cov.data(), p, p), j.at("noise_sd").get<double>(), mode,
        grid);
  }
  if (type == "softmax") {
    const auto k_count = j.at("class_count").get<Eigen::Index>();
    const auto d = j.at("dimension").get<Eigen::Index>();
    const auto flat = j.at("centroids").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(flat.size()) != k_count * d) {
      throw SchemaError("centroids have wrong size");
    }
    Eigen::MatrixXd centroids(k_count, d);
    for (Eigen::Index r = 0; r < k_count; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) centroids(r, c) = flat[static_cast<std::size_t>(r * d + c)];
    }
    const ScoreVariant variant = j.at("score_variant").get<std::string>() == "aoi_nll"
                                     ? ScoreVariant::aoi_nll
                                     : ScoreVariant::posterior_nll;
    return std::make_shared<SoftmaxScorer>(
        std::move(candidate), centroids, j.at("pooled_variance").get<double>(),
        j.at("temperature").get<double>(), j.at("jitter").get<double>(),
        j.at("draws").get<std::size_t>(), variant, j.at("seed").get<std::uint64_t>());
  }
  if (type == "table") {
    if (!table) throw SchemaError("precomputed rule needs a score table to predict on");
    if (table->class_count != j.at("class_count").get<std::size_t>()) {
      throw SchemaError("score table class count does not match the rule");
    }
    return std::make_shared<TableScorer>(std::move(candidate), std::move(table));
  }
  throw SchemaError("unknown model type " + type);
}

// ---------------------------------------------------------------------------
// SyntheticTask

SyntheticTask::SyntheticTask(SyntheticTaskSpec spec) : spec_(spec) {
  if (spec_.kind == TaskKind::precomputed) {
    throw std::invalid_argument("synthetic task must be regression or classification");
  }
  if (spec_.dimension < 1) throw std::invalid_argument("dimension must be at least 1");
  if (!(spec_.noise_scale > 0.0)) throw std::invalid_argument("noise_scale must be positive");
  if (spec_.kind == TaskKind::classification && spec_.class_count < 2) {
    throw std::invalid_argument("class_count must be at least 2");
  }
  Rng rng(derive_seed(spec_.rng_seed, 0x7461736bULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(spec_.dimension);
  if (spec_.kind == TaskKind::regression) {
    coefficients_.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) coefficients_(j) = spec_.signal_scale * normal(rng);
    intercept_ = normal(rng);
  } else {
    class_means_.resize(static_cast<Eigen::Index>(spec_.class_count), d);
    for (Eigen::Index c = 0; c < class_means_.rows(); ++c) {
      for (Eigen::Index j = 0; j < d; ++j) class_means_(c, j) = spec_.signal_scale * normal(rng);
    }
  }
}

Dataset SyntheticTask::generate(std::size_t n, std::uint64_t seed) const {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset data;
  data.kind = spec_.kind;
  data.dimension = spec_.dimension;
  data.noise_scale = spec_.noise_scale;
  data.features.resize(n * spec_.dimension);
  data.responses.resize(n);
  const std::size_t d = spec_.dimension;
  if (spec_.kind == TaskKind::regression) {
    for (std::size_t i = 0; i < n; ++i) {
      double mu = intercept_;
      for (std::size_t j = 0; j < d; ++j) {
        const double xj = normal(rng);
        data.features[i * d + j] = xj;
        mu += coefficients_(static_cast<Eigen::Index>(j)) * xj;
      }
      data.responses[i] = mu + spec_.noise_scale * normal(rng);
    }
  } else {
    data.class_count = spec_.class_count;
    std::uniform_int_distribution<std::size_t> pick(0, spec_.class_count - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = pick(rng);
      for (std::size_t j = 0; j < d; ++j) {
        data.features[i * d + j] = class_means_(static_cast<Eigen::Index>(c),
                                                static_cast<Eigen::Index>(j)) +
                                   spec_.noise_scale * normal(rng);
      }
      data.responses[i] = static_cast<double>(c);
    }
  }
  return data;
}

Estimate SyntheticTask::population_risk(const ScoreModel& model, double lambda, std::size_t n_mc,
                                        std::uint64_t seed) const {
  if (n_mc == 0) throw std::invalid_argument("n_mc must be positive");
  if (lambda == kInf) return {0.0, 0.0};
  const Dataset draw = generate(n_mc, seed);
  std::vector<double> miss(n_mc);
  if (spec_.kind == TaskKind::regression) {
    const auto* linear = dynamic_cast<const GaussianLinearModel*>(&model);
    if (linear == nullptr) throw std::invalid_argument("regression risk needs a Gaussian model");
    for (std::size_t i = 0; i < n_mc; ++i) {
      const auto x = draw.x(i);
      double truth = intercept_;
      for (std::size_t j = 0; j < x.size(); ++j) truth += coefficients_(static_cast<Eigen::Index>(j)) * x[j];
      const GaussianPredictive pred = linear->predictive(x);
      const double h = pred.half_width(lambda);
      const double hi = (pred.mean() + h - truth) / spec_.noise_scale;
      const double lo = (pred.mean() - h - truth) / spec_.noise_scale;
      miss[i] = 1.0 - (stats::normal_cdf(hi) - stats::normal_cdf(lo));
    }
  } else {
    for (std::size_t i = 0; i < n_mc; ++i) {
      miss[i] = model.score(draw.x(i), draw.y(i)) > lambda ? 1.0 : 0.0;
    }
  }
  return {stats::mean(miss), stats::stddev(miss) / std::sqrt(static_cast<double>(n_mc))};
}

Estimate SyntheticTask::population_size(const ScoreModel& model, double lambda, std::size_t n_mc,
                                        std::uint64_t seed) const {
  if (n_mc == 0) throw std::invalid_argument("n_mc must be positive");
  const Dataset draw = generate(n_mc, seed);
  std::vector<double> sizes(n_mc);
  for (std::size_t i = 0; i < n_mc; ++i) sizes[i] = model.set_size_at(draw.x(i), lambda);
  return {stats::mean(sizes), stats::stddev(sizes) / std::sqrt(static_cast<double>(n_mc))};
}

}  // namespace dco
