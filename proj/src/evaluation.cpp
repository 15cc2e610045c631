#include "ssalab/evaluation.hpp"

#include "ssalab/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <thread>

namespace ssalab {

namespace {

constexpr std::uint64_t kFunctionTag = 0x66756e63ULL;
constexpr std::uint64_t kBatchTag = 0x62617463ULL;
constexpr std::uint64_t kContextTag = 0x63747874ULL;

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void check_increasing(const GridAxis& axis, const char* which) {
  if (axis.values.empty()) throw ConfigError(std::string("grid.") + which + " axis is empty");
  for (std::size_t i = 0; i < axis.values.size(); ++i) {
    if (!std::isfinite(axis.values[i]) || axis.values[i] <= 0.0) {
      throw ConfigError(std::string("grid.") + which + " values must be finite and > 0");
    }
    if (i > 0 && !(axis.values[i] > axis.values[i - 1])) {
      throw ConfigError(std::string("grid.") + which + " values must be strictly increasing");
    }
  }
}

GridAxis range_axis(std::string name, double first, double step, int count) {
  GridAxis axis{std::move(name), {}};
  for (int i = 0; i < count; ++i) axis.values.push_back(first + step * i);
  return axis;
}

}  // namespace

ModelPredictor::ModelPredictor(const Model& model, std::string id) : model_(model), id_(std::move(id)) {}

std::vector<Eigen::VectorXd> ModelPredictor::predict(std::span<const PromptInstance> instances) const {
  return predict_targets(model_, instances);
}

std::vector<Eigen::VectorXd> OraclePredictor::predict(std::span<const PromptInstance> instances) const {
  std::vector<Eigen::VectorXd> out;
  out.reserve(instances.size());
  for (const PromptInstance& inst : instances) {
    if (inst.kind != kind_) throw ContractError("oracle predictor got an instance of another task");
    Eigen::VectorXd v(inst.length());
    for (Index i = 0; i < inst.length(); ++i) {
      const double y = inst.ys[static_cast<std::size_t>(i)];
      v[i] = is_quantifier(kind_) ? (y > 0.5 ? 1.0 : -1.0) : y;
    }
    out.push_back(std::move(v));
  }
  return out;
}

double linear_metric(const std::vector<std::vector<Eigen::VectorXd>>& predictions,
                     const std::vector<std::vector<Eigen::VectorXd>>& targets, Index first_position) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw DimensionError("linear_metric: prediction and target function counts differ or are zero");
  }
  if (first_position < 1) throw ContractError("linear_metric: first_position is 1-based");
  double total = 0.0;
  for (std::size_t f = 0; f < predictions.size(); ++f) {
    const auto& pf = predictions[f];
    const auto& tf = targets[f];
    if (pf.empty() || pf.size() != tf.size()) {
      throw DimensionError("linear_metric: batch counts differ or are zero");
    }
    // Running means stay exact when every term is equal.
    double per_function = 0.0;
    for (std::size_t b = 0; b < pf.size(); ++b) {
      if (pf[b].size() != tf[b].size() || pf[b].size() == 0) {
        throw DimensionError("linear_metric: point counts differ or are zero");
      }
      const Index np = pf[b].size();
      const Index k0 = std::min(first_position - 1, np);
      const double term = (pf[b].tail(np - k0) - tf[b].tail(np - k0)).squaredNorm() / static_cast<double>(np);
      per_function += (term - per_function) / static_cast<double>(b + 1);
    }
    total += (per_function - total) / static_cast<double>(f + 1);
  }
  return total;
}

PromptInstance linear_metric_instance(double sigma_input, double sigma_fn, Index points,
                                      std::uint64_t seed, Index function, Index batch) {
  CounterRng frng(derive_seed({seed, kFunctionTag, static_cast<std::uint64_t>(function)}));
  const double a = frng.normal(0.0, sigma_fn);
  const double b = frng.normal(0.0, sigma_fn);
  CounterRng xrng(derive_seed(
      {seed, kBatchTag, static_cast<std::uint64_t>(function), static_cast<std::uint64_t>(batch)}));
  std::vector<double> xs(static_cast<std::size_t>(points));
  for (double& x : xs) x = xrng.normal(0.0, sigma_input);
  PromptInstance inst = make_linear_instance(a, b, std::move(xs));
  inst.seed = seed;
  return inst;
}

double linear_fn_mse(const Predictor& predictor, double sigma_input, double sigma_fn,
                     const LinearMetricParams& params, std::uint64_t seed) {
  if (predictor.readout() != Readout::regression) {
    throw ContractError("linear_fn_mse needs a regression predictor");
  }
  if (params.functions < 1 || params.batches < 1 || params.points < 1) {
    throw ConfigError("linear metric needs functions, batches and points >= 1");
  }
  std::vector<std::vector<Eigen::VectorXd>> preds, targets;
  preds.reserve(static_cast<std::size_t>(params.functions));
  targets.reserve(static_cast<std::size_t>(params.functions));
  std::vector<PromptInstance> batch;
  for (Index f = 0; f < params.functions; ++f) {
    batch.clear();
    std::vector<Eigen::VectorXd> tf;
    for (Index j = 0; j < params.batches; ++j) {
      batch.push_back(linear_metric_instance(sigma_input, sigma_fn, params.points, seed, f, j));
      tf.push_back(Eigen::Map<const Eigen::VectorXd>(batch.back().ys.data(), params.points));
    }
    preds.push_back(predictor.predict(batch));
    targets.push_back(std::move(tf));
  }
  return linear_metric(preds, targets, params.first_position);
}

double quantifier_error(const Predictor& predictor, TaskKind kind, Index length, double sigma,
                        const QuantifierMetricParams& params, std::uint64_t seed) {
  if (!is_quantifier(kind)) throw ContractError("quantifier_error needs a quantifier task");
  if (predictor.readout() != Readout::binary) {
    throw ContractError("quantifier_error needs a binary predictor");
  }
  if (length < 1 || params.samples < 1 || params.batches < 1) {
    throw ConfigError("quantifier metric needs length, samples and batches >= 1");
  }
  TaskSpec spec;
  spec.kind = kind;
  spec.sigma_input = sigma;
  spec.seed = seed;
  std::size_t wrong = 0, total = 0;
  std::vector<PromptInstance> chunk;
  for (Index s = 0; s < params.samples; ++s) {
    chunk.clear();
    for (Index j = 0; j < params.batches; ++j) {
      chunk.push_back(gen_instance(spec, length, static_cast<std::uint64_t>(s * params.batches + j)));
    }
    const auto out = predictor.predict(chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const Index first = params.all_positions ? 0 : length - 1;
      for (Index k = first; k < length; ++k) {
        wrong += (out[i][k] > 0.0) != chunk[i].truth(k);
        total += 1;
      }
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

GridSpec GridSpec::defaults(TaskKind task) {
  GridSpec g;
  g.task = task;
  if (is_quantifier(task)) {
    g.rows = range_axis("length", 10, 10, 20);
    g.cols = range_axis("sigma", 1, 1, 10);
  } else {
    g.rows = range_axis("sigma_input", 1, 1, 10);
    g.cols = range_axis("sigma_fn", 1, 1, 10);
  }
  return g;
}

void GridSpec::validate() const {
  check_increasing(rows, "rows");
  check_increasing(cols, "cols");
  if (is_quantifier(task)) {
    for (double v : rows.values) {
      if (v != std::floor(v)) throw ConfigError("grid.rows must be integer lengths for quantifier tasks");
    }
    if (quantifier.samples < 1 || quantifier.batches < 1) {
      throw ConfigError("grid.quantifier samples and batches must be >= 1");
    }
  } else {
    if (linear.functions < 1 || linear.batches < 1 || linear.points < 1) {
      throw ConfigError("grid.linear functions, batches and points must be >= 1");
    }
    if (linear.first_position < 1 || linear.first_position > linear.points) {
      throw ConfigError("grid.linear.first_position must be in [1, points]");
    }
  }
}

std::uint64_t cell_seed(std::uint64_t grid_seed, Index row, Index col) {
  return derive_seed({grid_seed, static_cast<std::uint64_t>(row), static_cast<std::uint64_t>(col)});
}

double eval_cell(const Predictor& predictor, const GridSpec& spec, Index row, Index col) {
  const double r = spec.rows.values.at(static_cast<std::size_t>(row));
  const double c = spec.cols.values.at(static_cast<std::size_t>(col));
  const std::uint64_t seed = cell_seed(spec.seed, row, col);
  if (is_quantifier(spec.task)) {
    return quantifier_error(predictor, spec.task, static_cast<Index>(r), c, spec.quantifier, seed);
  }
  return linear_fn_mse(predictor, r, c, spec.linear, seed);
}

GridResult eval_grid(const Predictor& predictor, const GridSpec& spec, int threads) {
  spec.validate();
  if (predictor.readout() != readout_for(spec.task)) {
    throw ContractError("predictor readout " + std::string(to_string(predictor.readout())) +
                        " does not match task " + std::string(to_string(spec.task)));
  }
  const Index R = static_cast<Index>(spec.rows.values.size());
  const Index C = static_cast<Index>(spec.cols.values.size());
  GridResult out;
  out.task = spec.task;
  out.model_id = predictor.id();
  out.rows = spec.rows;
  out.cols = spec.cols;
  out.spec = spec;
  out.cells = RowMatrix::Constant(R, C, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::string> errors(static_cast<std::size_t>(R * C));
  std::atomic<Index> next{0};
  auto worker = [&] {
    for (Index cell = next++; cell < R * C; cell = next++) {
      const Index r = cell / C, c = cell % C;
      try {
        const double v = eval_cell(predictor, spec, r, c);
        if (!std::isfinite(v) || v < 0.0) throw NumericError("metric is " + fmt("%g", v));
        out.cells(r, c) = v;
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(cell)] = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(R * C)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (Index cell = 0; cell < R * C; ++cell) {
    if (!errors[static_cast<std::size_t>(cell)].empty()) {
      out.cells(cell / C, cell % C) = std::numeric_limits<double>::quiet_NaN();
      out.failures.push_back({cell / C, cell % C, errors[static_cast<std::size_t>(cell)]});
    }
  }
  return out;
}

void write_grid_csv(std::ostream& os, const GridResult& grid) {
  os << grid.rows.name << '\\' << grid.cols.name;
  for (double c : grid.cols.values) os << ',' << fmt("%.6g", c);
  os << '\n';
  for (Index r = 0; r < grid.cells.rows(); ++r) {
    os << fmt("%.6g", grid.rows.values[static_cast<std::size_t>(r)]);
    for (Index c = 0; c < grid.cells.cols(); ++c) os << ',' << fmt("%.6e", grid.cells(r, c));
    os << '\n';
  }
}

HeatmapRange write_grid_pgm(std::ostream& os, const GridResult& grid) {
  const RowMatrix& m = grid.cells;
  HeatmapRange range{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (!std::isfinite(v)) continue;
    const double l = std::log10(v + 1e-8);
    range.min_log = std::min(range.min_log, l);
    range.max_log = std::max(range.max_log, l);
  }
  if (!std::isfinite(range.min_log)) range = {0.0, 0.0};
  os << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const double span = range.max_log - range.min_log;
  for (Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    unsigned char px = 0;
    if (std::isfinite(v) && span > 0.0) {
      px = static_cast<unsigned char>(std::lround(255.0 * (std::log10(v + 1e-8) - range.min_log) / span));
    }
    os.put(static_cast<char>(px));
  }
  return range;
}

nlohmann::json grid_metadata(const GridResult& grid, const HeatmapRange& range) {
  nlohmann::json j;
  j["task"] = std::string(to_string(grid.task));
  j["model"] = grid.model_id;
  j["rows"] = {{"name", grid.rows.name}, {"values", grid.rows.values}};
  j["cols"] = {{"name", grid.cols.name}, {"values", grid.cols.values}};
  j["seed"] = grid.spec.seed;
  if (is_quantifier(grid.task)) {
    j["samples"] = grid.spec.quantifier.samples;
    j["batches"] = grid.spec.quantifier.batches;
    j["all_positions"] = grid.spec.quantifier.all_positions;
  } else {
    j["functions"] = grid.spec.linear.functions;
    j["batches"] = grid.spec.linear.batches;
    j["points"] = grid.spec.linear.points;
    j["first_position"] = grid.spec.linear.first_position;
  }
  j["heatmap"] = {{"transform", "log10(x + 1e-8)"}, {"min", range.min_log}, {"max", range.max_log}};
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : grid.failures) failures.push_back({{"row", f.row}, {"col", f.col}, {"error", f.message}});
  j["failures"] = failures;
  return j;
}

namespace {

std::optional<Plateau> detect_plateau(std::span<const double> preds, std::span<const double> targets,
                                      double tol_fraction) {
  const auto [pmin, pmax] = std::minmax_element(preds.begin(), preds.end());
  const auto [tmin, tmax] = std::minmax_element(targets.begin(), targets.end());
  double mean = 0.0;
  for (double p : preds) mean += p;
  mean /= static_cast<double>(preds.size());
  const double tol = tol_fraction * (std::abs(mean) + 1.0);
  if (!(*pmax - *pmin < tol) || !(*tmax - *tmin > tol)) return std::nullopt;
  double sq = 0.0;
  for (double p : preds) sq += (p - mean) * (p - mean);
  return Plateau{mean, std::sqrt(sq / static_cast<double>(preds.size()))};
}

}  // namespace

BoundaryReport boundary_probe(const Predictor& predictor, double a, double b,
                              std::span<const double> xs, const BoundaryOptions& options) {
  if (predictor.readout() != Readout::regression) {
    throw ContractError("boundary_probe needs a regression predictor");
  }
  if (options.window < 1 || static_cast<Index>(xs.size()) < 2 * options.window) {
    throw ContractError("boundary_probe needs a sweep of at least 2 * window points");
  }
  if (!std::is_sorted(xs.begin(), xs.end())) throw ContractError("boundary_probe needs an ascending sweep");
  CounterRng rng(derive_seed({options.seed, kContextTag}));
  std::vector<double> context(static_cast<std::size_t>(options.context));
  for (double& x : context) x = rng.normal(0.0, options.context_sigma);
  std::vector<PromptInstance> prompts;
  for (double x : xs) {
    std::vector<double> p = context;
    p.push_back(x);
    prompts.push_back(make_linear_instance(a, b, std::move(p)));
  }
  const auto out = predictor.predict(prompts);
  BoundaryReport report;
  report.a = a;
  report.b = b;
  report.xs.assign(xs.begin(), xs.end());
  report.window = options.window;
  report.tol_fraction = options.tol_fraction;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    report.predictions.push_back(out[i][out[i].size() - 1]);
    report.targets.push_back(a * xs[i] + b);
  }
  const std::size_t w = static_cast<std::size_t>(options.window);
  const std::span<const double> preds(report.predictions), targets(report.targets);
  const std::pair<std::span<const double>, std::span<const double>> ends[] = {
      {preds.first(w), targets.first(w)}, {preds.last(w), targets.last(w)}};
  for (const auto& [p, t] : ends) {
    auto plateau = detect_plateau(p, t, options.tol_fraction);
    if (!plateau) continue;
    double tmean = 0.0;
    for (double v : t) tmean += v;
    tmean /= static_cast<double>(t.size());
    auto& slot = tmean > plateau->level ? report.upper : report.lower;
    if (!slot) slot = plateau;
  }
  return report;
}

void write_boundary_csv(std::ostream& os, const BoundaryReport& report) {
  os << "x,target,prediction\n";
  for (std::size_t i = 0; i < report.xs.size(); ++i) {
    os << fmt("%.6g", report.xs[i]) << ',' << fmt("%.6e", report.targets[i]) << ','
       << fmt("%.6e", report.predictions[i]) << '\n';
  }
}

nlohmann::json boundary_json(const BoundaryReport& report) {
  auto plateau = [](const std::optional<Plateau>& p) -> nlohmann::json {
    if (!p) return "none";
    return {{"level", p->level}, {"residual", p->residual}};
  };
  return {{"a", report.a},
          {"b", report.b},
          {"sweep", {{"min", report.xs.front()}, {"max", report.xs.back()}, {"points", report.xs.size()}}},
          {"window", report.window},
          {"tol_fraction", report.tol_fraction},
          {"upper", plateau(report.upper)},
          {"lower", plateau(report.lower)}};
}

std::vector<double> linspace(double lo, double hi, Index count) {
  if (count < 2) throw ContractError("linspace needs at least two points");
  std::vector<double> v(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    v[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  }
  return v;
}

AttentionReport attention_inspect(const Model& model, const PromptInstance& instance) {
  if (!model.config().has_attention()) throw ContractError("attention_inspect needs attention layers");
  const EncodedPrompt enc = encode_prompt(instance);
  Graph g(false);
  ForwardOptions opts;
  opts.capture_attention = true;
  const ForwardResult fr = forward(model, g, std::span<const EncodedPrompt>(&enc, 1), opts);
  AttentionReport report;
  report.tokens = enc.tokens;
  report.query = enc.length() - 1;
  const AttentionMaps& maps = *fr.maps;
  for (std::size_t l = 0; l < maps.layers.size(); ++l) {
    std::vector<RowMatrix> heads;
    for (Index h = 0; h < maps.heads; ++h) heads.push_back(maps.map(static_cast<Index>(l), h, 0));
    report.maps.push_back(std::move(heads));
  }
  const Index last = static_cast<Index>(report.maps.size()) - 1;
  for (Index h = 0; h < maps.heads; ++h) {
    Index key = 0;
    const double w = report.maps.back()[static_cast<std::size_t>(h)].row(report.query).maxCoeff(&key);
    report.last_layer.push_back({last, h, key, w});
  }
  return report;
}

double last_layer_weight_on(const AttentionReport& report, Index key) {
  if (key < 0 || key > report.query) throw ContractError("key outside the causal prefix");
  double best = 0.0;
  for (const RowMatrix& m : report.maps.back()) best = std::max(best, m(report.query, key));
  return best;
}

void write_attention_csv(std::ostream& os, const RowMatrix& map) {
  for (Index r = 0; r < map.rows(); ++r) {
    for (Index c = 0; c < map.cols(); ++c) os << (c ? "," : "") << fmt("%.6g", map(r, c));
    os << '\n';
  }
}

nlohmann::json attention_json(const AttentionReport& report) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const Token& t : report.tokens) {
    if (t.kind == TokenKind::boolean) {
      tokens.push_back(t.value > 0.5);
    } else {
      tokens.push_back(t.value);
    }
  }
  nlohmann::json heads = nlohmann::json::array();
  for (const HeadFocus& f : report.last_layer) {
    heads.push_back({{"layer", f.layer}, {"head", f.head}, {"argmax_key", f.argmax_key}, {"weight", f.weight}});
  }
  return {{"tokens", tokens}, {"query", report.query}, {"last_layer", heads}};
}

PromptInstance deviant_instance(TaskKind kind, const DeviantSpec& spec, std::uint64_t seed) {
  if (spec.min_length < 3 || spec.max_length < spec.min_length) {
    throw ConfigError("deviant length range must satisfy 3 <= min <= max");
  }
  CounterRng rng(seed);
  const Index length = rng.uniform_int(spec.min_length, spec.max_length);
  std::vector<double> xs(static_cast<std::size_t>(length));
  bool pos = false, neg = false;
  while (!(pos && neg)) {
    pos = neg = false;
    for (Index i = 0; i + 1 < length; ++i) {
      const double x = rng.normal(0.0, spec.sigma);
      xs[static_cast<std::size_t>(i)] = x;
      pos |= x > 0.0;
      neg |= x < 0.0;
    }
  }
  xs.back() = spec.magnitude_lo + (spec.magnitude_hi - spec.magnitude_lo) * rng.uniform01();
  PromptInstance inst = make_quantifier_instance(kind, std::move(xs));
  inst.seed = seed;
  return inst;
}

}  // namespace ssalab
