#pragma once

#include "ssalab/model.hpp"
#include "ssalab/tasks.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssalab {

/// Anything that maps prompts to per-target outputs: a regression value, or
/// a True-minus-False logit margin for binary readouts.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Readout readout() const = 0;
  virtual std::string id() const = 0;
  /// Must be safe to call concurrently.
  virtual std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> instances) const = 0;
};

class ModelPredictor final : public Predictor {
 public:
  explicit ModelPredictor(const Model& model, std::string id = "model");
  Readout readout() const override { return model_.config().readout; }
  std::string id() const override { return id_; }
  std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> instances) const override;

 private:
  const Model& model_;
  std::string id_;
};

/// Ground-truth evaluator: exact f(x) for linear_fn, a +-1 margin for quantifiers.
class OraclePredictor final : public Predictor {
 public:
  explicit OraclePredictor(TaskKind kind) : kind_(kind) {}
  Readout readout() const override { return readout_for(kind_); }
  std::string id() const override { return "oracle"; }
  std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> instances) const override;

 private:
  TaskKind kind_;
};

struct LinearMetricParams {
  Index functions = 100;  // N
  Index batches = 64;     // N_b
  Index points = 40;      // N_p
  Index first_position = 3;  // 1-based first scored k; errors are summed over k >= first_position
};

/// Squared-error metric over predictions[f][b][k] vs targets[f][b][k]:
/// mean over functions and batches of (1/N_p) * sum_{k >= first_position} err^2.
double linear_metric(const std::vector<std::vector<Eigen::VectorXd>>& predictions,
                     const std::vector<std::vector<Eigen::VectorXd>>& targets, Index first_position);

/// Function `f` of the stream: a, b ~ N(0, sigma_fn); batch `j` draws N_p inputs ~ N(0, sigma_input).
PromptInstance linear_metric_instance(double sigma_input, double sigma_fn, Index points,
                                      std::uint64_t seed, Index function, Index batch);

double linear_fn_mse(const Predictor& predictor, double sigma_input, double sigma_fn,
                     const LinearMetricParams& params, std::uint64_t seed);

struct QuantifierMetricParams {
  Index samples = 100;
  Index batches = 64;
  bool all_positions = false;  // off scores the final query only
};

/// Fraction of wrong True/False calls; a margin > 0 means True.
double quantifier_error(const Predictor& predictor, TaskKind kind, Index length, double sigma,
                        const QuantifierMetricParams& params, std::uint64_t seed);

struct GridAxis {
  std::string name;
  std::vector<double> values;
};

struct GridSpec {
  TaskKind task = TaskKind::linear_fn;
  GridAxis rows;
  GridAxis cols;
  LinearMetricParams linear;
  QuantifierMetricParams quantifier;
  std::uint64_t seed = 0;

  /// Quantifier: lengths 10..200 step 10 x sigma 1..10. Linear: sigma_input 1..10 x sigma_fn 1..10.
  static GridSpec defaults(TaskKind task);
  void validate() const;
};

struct CellFailure {
  Index row = 0;
  Index col = 0;
  std::string message;
};

struct GridResult {
  TaskKind task = TaskKind::linear_fn;
  std::string model_id;
  GridAxis rows;
  GridAxis cols;
  /// NaN where a cell failed.
  RowMatrix cells;
  std::vector<CellFailure> failures;
  GridSpec spec;
};

std::uint64_t cell_seed(std::uint64_t grid_seed, Index row, Index col);

/// Metric for one cell: quantifier rows are lengths and cols sigma; linear rows
/// are sigma_input and cols sigma_fn.
double eval_cell(const Predictor& predictor, const GridSpec& spec, Index row, Index col);

GridResult eval_grid(const Predictor& predictor, const GridSpec& spec, int threads = 1);

/// Header row of column values, then one row per row value; cells in %.6e.
void write_grid_csv(std::ostream& os, const GridResult& grid);

struct HeatmapRange {
  double min_log = 0.0;
  double max_log = 0.0;
};

/// 8-bit binary PGM of log10(cell + 1e-8), linearly mapped to 0..255. Failed cells are 0.
HeatmapRange write_grid_pgm(std::ostream& os, const GridResult& grid);
nlohmann::json grid_metadata(const GridResult& grid, const HeatmapRange& range);

struct Plateau {
  double level = 0.0;
  double residual = 0.0;  // RMS deviation of the window from its mean
};

struct BoundaryReport {
  double a = 0.0;
  double b = 0.0;
  std::vector<double> xs;
  std::vector<double> predictions;
  std::vector<double> targets;
  Index window = 10;
  double tol_fraction = 0.05;
  std::optional<Plateau> upper;
  std::optional<Plateau> lower;
};

struct BoundaryOptions {
  Index window = 10;
  /// Spread threshold is tol_fraction * (|plateau| + 1).
  double tol_fraction = 0.05;
  Index context = 39;  // in-context pairs before each query
  double context_sigma = 1.0;
  std::uint64_t seed = 0;
};

/// Queries f(x) = a x + b at each sweep point after a fixed context drawn
/// from N(0, context_sigma). A plateau is reported at an end of the sweep
/// when the last `window` predictions there have spread below tolerance while
/// the targets spread beyond it.
BoundaryReport boundary_probe(const Predictor& predictor, double a, double b,
                              std::span<const double> xs, const BoundaryOptions& options = {});

void write_boundary_csv(std::ostream& os, const BoundaryReport& report);
nlohmann::json boundary_json(const BoundaryReport& report);

std::vector<double> linspace(double lo, double hi, Index count);

struct HeadFocus {
  Index layer = 0;
  Index head = 0;
  Index argmax_key = 0;
  double weight = 0.0;
};

struct AttentionReport {
  std::vector<Token> tokens;
  Index query = 0;  // final token position
  /// maps[layer][head]: seq x seq, row = query, col = key.
  std::vector<std::vector<RowMatrix>> maps;
  /// Final query of the last layer, one entry per head.
  std::vector<HeadFocus> last_layer;
};

AttentionReport attention_inspect(const Model& model, const PromptInstance& instance);

/// Weight from the final query onto `key` in the last layer, the max over heads.
double last_layer_weight_on(const AttentionReport& report, Index key);

void write_attention_csv(std::ostream& os, const RowMatrix& map);
nlohmann::json attention_json(const AttentionReport& report);

struct DeviantSpec {
  Index min_length = 11;
  Index max_length = 40;
  double magnitude_lo = 50.0;
  double magnitude_hi = 100.0;
  double sigma = 1.0;
};

/// Mixed-sign sequence: a length uniform in [min_length, max_length], entries
/// from N(0, sigma) with at least one positive and one negative before the
/// final position, and a value uniform in [magnitude_lo, magnitude_hi] as the
/// final query. Its token index is 2 * (length - 1).
PromptInstance deviant_instance(TaskKind kind, const DeviantSpec& spec, std::uint64_t seed);

}  // namespace ssalab
