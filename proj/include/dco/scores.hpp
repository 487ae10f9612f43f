#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace dco {

enum class TaskKind { regression, classification, precomputed };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view text);

using ParamValue = std::variant<double, std::string>;
using ParamMap = std::map<std::string, ParamValue, std::less<>>;

/// A structural choice: score variant, prior scale, temperature and so on.
/// Immutable once built.
class Candidate {
 public:
  Candidate(std::string id, TaskKind kind, ParamMap params = {});

  const std::string& id() const { return id_; }
  TaskKind kind() const { return kind_; }
  const ParamMap& params() const { return params_; }

  bool has(std::string_view key) const;
  double number(std::string_view key) const;
  double number_or(std::string_view key, double fallback) const;
  std::string text_or(std::string_view key, std::string fallback) const;

  nlohmann::json to_json() const;
  static Candidate from_json(const nlohmann::json& j);

  friend bool operator==(const Candidate&, const Candidate&) = default;

 private:
  std::string id_;
  TaskKind kind_;
  ParamMap params_;
};

/// Prior scale x assumed noise scale, 4 x 4.
std::vector<Candidate> default_regression_candidates();
/// Score variant x jitter x temperature, 2 x 4 x 2.
std::vector<Candidate> default_classification_candidates();

/// Posterior predictive N(mean, stddev^2) for one input.
class GaussianPredictive {
 public:
  GaussianPredictive(double mean, double stddev);

  double mean() const { return mean_; }
  double stddev() const { return stddev_; }

  double density(double y) const;
  /// -log p(y)
  double nll(double y) const;
  /// Smallest attainable score, log(stddev * sqrt(2 pi)); the set is empty below it.
  double mode_score() const;
  /// Half-width of {y : nll(y) <= lambda}; 0 below mode_score(), +inf at lambda = +inf.
  double half_width(double lambda) const;

 private:
  double mean_;
  double stddev_;
};

struct ClassScoreRow {
  std::vector<double> scores;
  int true_label = 0;

  /// Throws unless scores has K finite entries and 0 <= true_label < K.
  void validate(std::size_t class_count) const;
};

/// Per-sample, per-label score matrix plus the true labels.
struct ScoreTable {
  std::vector<std::string> sample_ids;
  std::vector<int> labels;
  std::size_t class_count = 0;
  std::vector<double> values;  // row-major, rows() x class_count

  std::size_t rows() const { return labels.size(); }
  double at(std::size_t row, std::size_t label) const { return values[row * class_count + label]; }
  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * class_count, class_count};
  }
};

/// Loads the `sample_id,true_label,score_0,...,score_{K-1}` CSV format.
ScoreTable load_precomputed(const std::filesystem::path& path);
void export_precomputed(const ScoreTable& table, const std::filesystem::path& path);

/// One table per candidate, loaded from `<candidate_id>.csv` files.
struct PrecomputedScores {
  std::map<std::string, std::shared_ptr<const ScoreTable>, std::less<>> tables;
};
PrecomputedScores load_precomputed_directory(const std::filesystem::path& dir);

/// Features and responses for one draw of a task. For precomputed tasks the
/// single feature column holds the row index into the candidate tables.
struct Dataset {
  TaskKind kind = TaskKind::regression;
  std::size_t dimension = 0;
  std::vector<double> features;     // row-major, size() x dimension
  std::vector<double> responses;    // y, or the class label as a double
  std::size_t class_count = 0;
  double noise_scale = 1.0;         // known observation noise (regression)
  std::shared_ptr<const PrecomputedScores> precomputed;

  std::size_t size() const { return responses.size(); }
  std::span<const double> x(std::size_t i) const {
    return {features.data() + i * dimension, dimension};
  }
  double y(std::size_t i) const { return responses[i]; }
  int label(std::size_t i) const { return static_cast<int>(responses[i]); }
};

/// Dataset whose rows are the rows of the precomputed tables.
Dataset make_precomputed_dataset(std::shared_ptr<const PrecomputedScores> scores);

/// Records every dataset index read through a SampleView.
class IndexReadLog {
 public:
  void record(std::size_t index) { reads_.push_back(index); }
  const std::vector<std::size_t>& reads() const { return reads_; }

 private:
  std::vector<std::size_t> reads_;
};

/// Restricted view of a dataset: only the listed indices are reachable.
class SampleView {
 public:
  SampleView(const Dataset& data, std::vector<std::size_t> indices, IndexReadLog* log = nullptr);

  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  const std::vector<std::size_t>& indices() const { return indices_; }
  TaskKind kind() const { return data_->kind; }
  std::size_t class_count() const { return data_->class_count; }
  double noise_scale() const { return data_->noise_scale; }
  const std::shared_ptr<const PrecomputedScores>& precomputed() const { return data_->precomputed; }

  std::span<const double> x(std::size_t k) const;
  double y(std::size_t k) const;

 private:
  void touch(std::size_t k) const;

  const Dataset* data_;
  std::vector<std::size_t> indices_;
  IndexReadLog* log_;
};

enum class SizeMode { analytic, grid };

/// Equally spaced response grid used for counting-based interval widths.
struct ResponseGrid {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t points = 300;

  double step() const { return (hi - lo) / static_cast<double>(points - 1); }
  double span() const { return hi - lo; }
};

struct FitOptions {
  SizeMode size_mode = SizeMode::analytic;
  std::size_t grid_points = 300;
};

struct PredictionSet {
  TaskKind kind = TaskKind::regression;
  bool full = false;         // threshold was +inf
  bool empty = false;
  double lower = 0.0;        // regression endpoints
  double upper = 0.0;
  std::vector<int> labels;   // classification, ascending
  double size = 0.0;         // width or label count
};

struct PointEvaluation {
  bool covered = false;
  double size = 0.0;
};

/// A fitted score function S(x, y) with nested sets {y : S(x, y) <= lambda}.
class ScoreModel {
 public:
  explicit ScoreModel(Candidate candidate) : candidate_(std::move(candidate)) {}
  virtual ~ScoreModel() = default;

  const Candidate& candidate() const { return candidate_; }
  TaskKind kind() const { return candidate_.kind(); }

  virtual double score(std::span<const double> x, double y) const = 0;
  virtual double set_size_at(std::span<const double> x, double lambda) const = 0;
  virtual PredictionSet predict_set(std::span<const double> x, double lambda) const = 0;
  virtual PointEvaluation evaluate(std::span<const double> x, double y, double lambda) const;
  /// Size reported when the threshold is +inf.
  virtual double max_size() const = 0;
  virtual nlohmann::json to_json() const = 0;

 private:
  Candidate candidate_;
};

using ScoreModelPtr = std::shared_ptr<const ScoreModel>;

/// Conjugate Gaussian linear model with known noise variance. Features get an
/// intercept column with a N(0, 10) prior; slopes get N(0, prior_scale^2).
class GaussianLinearModel final : public ScoreModel {
 public:
  GaussianLinearModel(Candidate candidate, Eigen::VectorXd posterior_mean,
                      Eigen::MatrixXd posterior_cov, double noise_sd, SizeMode mode,
                      ResponseGrid grid);

  GaussianPredictive predictive(std::span<const double> x) const;

  double score(std::span<const double> x, double y) const override;
  double set_size_at(std::span<const double> x, double lambda) const override;
  PredictionSet predict_set(std::span<const double> x, double lambda) const override;
  double max_size() const override { return grid_.span(); }
  nlohmann::json to_json() const override;

  /// Grid-counting width, available regardless of the configured mode.
  double grid_width(std::span<const double> x, double lambda) const;
  const ResponseGrid& response_grid() const { return grid_; }
  SizeMode size_mode() const { return mode_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  double noise_sd_;
  SizeMode mode_;
  ResponseGrid grid_;
};

enum class ScoreVariant { posterior_nll, aoi_nll };

/// Nearest-centroid softmax scorer. T jittered logit draws stand in for
/// stochastic forward passes; the variant picks how they are aggregated.
class SoftmaxScorer final : public ScoreModel {
 public:
  SoftmaxScorer(Candidate candidate, Eigen::MatrixXd centroids, double pooled_variance,
                double temperature, double jitter, std::size_t draws, ScoreVariant variant,
                std::uint64_t seed);

  /// Per-class scores for x.
  std::vector<double> score_row(std::span<const double> x) const;
  /// Per-class draw-averaged probabilities (before the variant transform).
  std::vector<std::vector<double>> probability_draws(std::span<const double> x) const;

  double score(std::span<const double> x, double y) const override;
  double set_size_at(std::span<const double> x, double lambda) const override;
  PredictionSet predict_set(std::span<const double> x, double lambda) const override;
  PointEvaluation evaluate(std::span<const double> x, double y, double lambda) const override;
  double max_size() const override { return static_cast<double>(centroids_.rows()); }
  nlohmann::json to_json() const override;

  static constexpr double kProbabilityFloor = 1e-12;

 private:
  Eigen::MatrixXd centroids_;  // K x d
  double pooled_variance_;
  double temperature_;
  double jitter_;
  std::size_t draws_;
  ScoreVariant variant_;
  std::uint64_t seed_;
};

/// Scores looked up from a precomputed table; x[0] is the row index.
class TableScorer final : public ScoreModel {
 public:
  TableScorer(Candidate candidate, std::shared_ptr<const ScoreTable> table);

  double score(std::span<const double> x, double y) const override;
  double set_size_at(std::span<const double> x, double lambda) const override;
  PredictionSet predict_set(std::span<const double> x, double lambda) const override;
  double max_size() const override { return static_cast<double>(table_->class_count); }
  nlohmann::json to_json() const override;

  const ScoreTable& table() const { return *table_; }

 private:
  std::size_t row_of(std::span<const double> x) const;
  std::shared_ptr<const ScoreTable> table_;
};

/// Fits the candidate on the training view.
ScoreModelPtr fit_candidate(const SampleView& train, const Candidate& candidate,
                            const FitOptions& options = {});

/// Rebuilds a model serialized by ScoreModel::to_json. Precomputed models
/// need the score table they index.
ScoreModelPtr model_from_json(const nlohmann::json& j,
                              std::shared_ptr<const ScoreTable> table = nullptr);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::regression;
  std::size_t dimension = 8;
  double noise_scale = 1.0;
  std::size_t class_count = 10;  // classification only
  double signal_scale = 1.0;     // coefficient scale, or class-mean spread
  std::uint64_t rng_seed = 0;
};

struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// Synthetic generator with hidden parameters drawn from rng_seed.
class SyntheticTask {
 public:
  explicit SyntheticTask(SyntheticTaskSpec spec);

  const SyntheticTaskSpec& spec() const { return spec_; }
  TaskKind kind() const { return spec_.kind; }

  Dataset generate(std::size_t n, std::uint64_t seed) const;

  /// R(phi, lambda). Regression integrates the exact conditional miscoverage
  /// over n_mc feature draws; classification counts misses on n_mc fresh samples.
  Estimate population_risk(const ScoreModel& model, double lambda, std::size_t n_mc,
                           std::uint64_t seed) const;
  /// E|C(X)| by Monte Carlo over n_mc feature draws.
  Estimate population_size(const ScoreModel& model, double lambda, std::size_t n_mc,
                           std::uint64_t seed) const;

  const Eigen::VectorXd& coefficients() const { return coefficients_; }
  double intercept() const { return intercept_; }
  const Eigen::MatrixXd& class_means() const { return class_means_; }

 private:
  SyntheticTaskSpec spec_;
  Eigen::VectorXd coefficients_;
  double intercept_ = 0.0;
  Eigen::MatrixXd class_means_;
};

}  // namespace dco
