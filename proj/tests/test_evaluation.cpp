#include "ssalab/evaluation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

using namespace ssalab;

namespace {

class OffsetPredictor final : public Predictor {
 public:
  explicit OffsetPredictor(double offset) : offset_(offset) {}
  Readout readout() const override { return Readout::regression; }
  std::string id() const override { return "offset"; }
  std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> xs) const override {
    std::vector<Eigen::VectorXd> out;
    for (const auto& inst : xs) {
      out.push_back(Eigen::Map<const Eigen::VectorXd>(inst.ys.data(), inst.length()).array() + offset_);
    }
    return out;
  }

 private:
  double offset_;
};

class ClampPredictor final : public Predictor {
 public:
  Readout readout() const override { return Readout::regression; }
  std::string id() const override { return "clamp"; }
  std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> xs) const override {
    std::vector<Eigen::VectorXd> out;
    for (const auto& inst : xs) {
      Eigen::VectorXd v(inst.length());
      for (Index i = 0; i < inst.length(); ++i) v[i] = std::clamp(inst.ys[static_cast<std::size_t>(i)], -3.0, 3.0);
      out.push_back(v);
    }
    return out;
  }
};

// Binary predictors: +1 margin means True.
class QuantifierPredictor final : public Predictor {
 public:
  enum class Mode { perfect, inverted, coin };
  explicit QuantifierPredictor(Mode mode) : mode_(mode) {}
  Readout readout() const override { return Readout::binary; }
  std::string id() const override { return "q"; }
  std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> xs) const override {
    std::vector<Eigen::VectorXd> out;
    for (const auto& inst : xs) {
      Eigen::VectorXd v(inst.length());
      for (Index i = 0; i < inst.length(); ++i) {
        const bool truth = inst.truth(i);
        bool call = truth;
        if (mode_ == Mode::inverted) call = !truth;
        if (mode_ == Mode::coin) {
          const auto bits = std::bit_cast<std::uint64_t>(inst.xs[static_cast<std::size_t>(i)]);
          call = (mix64(bits) & 1U) != 0;
        }
        v[i] = call ? 1.0 : -1.0;
      }
      out.push_back(v);
    }
    return out;
  }

 private:
  Mode mode_;
};

// Independent evaluation of the averaged squared-error metric from raw arrays.
double brute_force_metric(const std::vector<std::vector<std::vector<double>>>& p,
                          const std::vector<std::vector<std::vector<double>>>& t, int first) {
  double outer = 0.0;
  for (std::size_t f = 0; f < p.size(); ++f) {
    double mid = 0.0;
    for (std::size_t b = 0; b < p[f].size(); ++b) {
      const std::size_t np = p[f][b].size();
      double inner = 0.0;
      for (std::size_t k = static_cast<std::size_t>(first); k <= np; ++k) {
        const double e = p[f][b][k - 1] - t[f][b][k - 1];
        inner += e * e;
      }
      mid += inner / static_cast<double>(np);
    }
    outer += mid / static_cast<double>(p[f].size());
  }
  return outer / static_cast<double>(p.size());
}

using Nested = std::vector<std::vector<Eigen::VectorXd>>;

Nested to_eigen(const std::vector<std::vector<std::vector<double>>>& raw) {
  Nested out;
  for (const auto& f : raw) {
    auto& row = out.emplace_back();
    for (const auto& b : f) row.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Index>(b.size())));
  }
  return out;
}

GridSpec small_linear_grid() {
  GridSpec g = GridSpec::defaults(TaskKind::linear_fn);
  g.rows.values = {1, 2, 3};
  g.cols.values = {1, 4};
  g.linear.functions = 4;
  g.linear.batches = 3;
  g.seed = 12;
  return g;
}

ModelConfig regression_model(ScoreKind kind) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.emb_dim = 8;
  c.max_positions = 96;
  c.scoring.kind = kind;
  return c;
}

}  // namespace

TEST(LinearMetric, OracleIsZero) {
  EXPECT_EQ(linear_fn_mse(OraclePredictor(TaskKind::linear_fn), 1.0, 1.0, {}, 3), 0.0);
}

TEST(LinearMetric, UnitOffsetGivesNpMinusTwoOverNp) {
  EXPECT_NEAR(linear_fn_mse(OffsetPredictor(1.0), 1.0, 1.0, {}, 3), 0.95, 1e-12);
  LinearMetricParams p;
  p.points = 10;
  EXPECT_NEAR(linear_fn_mse(OffsetPredictor(1.0), 2.0, 3.0, p, 4), 0.8, 1e-12);
}

TEST(LinearMetric, ConstantOffsetFixtureIsExact) {
  std::vector<std::vector<std::vector<double>>> t(5, std::vector<std::vector<double>>(7)), p = t;
  for (std::size_t f = 0; f < 5; ++f) {
    for (std::size_t b = 0; b < 7; ++b) {
      for (int k = 0; k < 40; ++k) {
        t[f][b].push_back(static_cast<double>(k + static_cast<int>(f) - 20));
        p[f][b].push_back(t[f][b].back() + 1.0);
      }
    }
  }
  EXPECT_EQ(linear_metric(to_eigen(p), to_eigen(t), 3), 38.0 / 40.0);
}

TEST(LinearMetric, MatchesBruteForceOnRandomFixtures) {
  for (std::uint64_t fixture = 0; fixture < 100; ++fixture) {
    CounterRng rng(derive_seed({77, fixture}));
    const auto nf = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto nb = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const auto np = static_cast<std::size_t>(rng.uniform_int(3, 45));
    const int first = static_cast<int>(rng.uniform_int(1, 3));
    std::vector<std::vector<std::vector<double>>> p(nf, std::vector<std::vector<double>>(nb)), t = p;
    for (std::size_t f = 0; f < nf; ++f) {
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t k = 0; k < np; ++k) {
          t[f][b].push_back(rng.normal(0.0, 3.0));
          p[f][b].push_back(rng.normal(0.0, 3.0));
        }
      }
    }
    EXPECT_NEAR(linear_metric(to_eigen(p), to_eigen(t), first), brute_force_metric(p, t, first), 1e-12);
  }
}

TEST(LinearMetric, ShapeErrors) {
  Nested a{{Eigen::VectorXd::Zero(3)}}, b{{Eigen::VectorXd::Zero(4)}};
  EXPECT_THROW(linear_metric(a, b, 3), DimensionError);
  EXPECT_THROW(linear_metric(a, a, 0), ContractError);
  EXPECT_THROW(linear_fn_mse(QuantifierPredictor(QuantifierPredictor::Mode::perfect), 1, 1, {}, 0), ContractError);
}

TEST(LinearMetric, InstancesAreSeededPerFunction) {
  const auto a = linear_metric_instance(1.0, 2.0, 40, 9, 3, 0);
  const auto b = linear_metric_instance(1.0, 2.0, 40, 9, 3, 1);
  const auto c = linear_metric_instance(1.0, 2.0, 40, 9, 4, 0);
  EXPECT_EQ(a.a, b.a);
  EXPECT_EQ(a.b, b.b);
  EXPECT_NE(a.xs, b.xs);
  EXPECT_NE(a.a, c.a);
  EXPECT_EQ(a.xs, linear_metric_instance(1.0, 2.0, 40, 9, 3, 0).xs);
}

TEST(QuantifierMetric, PerfectInvertedAndCoin) {
  using M = QuantifierPredictor::Mode;
  const QuantifierMetricParams p;
  EXPECT_EQ(quantifier_error(QuantifierPredictor(M::perfect), TaskKind::every, 20, 1.0, p, 1), 0.0);
  EXPECT_EQ(quantifier_error(QuantifierPredictor(M::inverted), TaskKind::some, 20, 1.0, p, 1), 1.0);
  const double coin = quantifier_error(QuantifierPredictor(M::coin), TaskKind::every, 20, 1.0, p, 1);
  EXPECT_NEAR(coin, 0.5, 0.02);
  EXPECT_EQ(quantifier_error(OraclePredictor(TaskKind::every), TaskKind::every, 30, 2.0, p, 5), 0.0);
  QuantifierMetricParams all = p;
  all.all_positions = true;
  all.samples = 5;
  EXPECT_EQ(quantifier_error(QuantifierPredictor(M::inverted), TaskKind::every, 7, 1.0, all, 1), 1.0);
  EXPECT_THROW(quantifier_error(OraclePredictor(TaskKind::linear_fn), TaskKind::every, 5, 1.0, p, 1), ContractError);
}

TEST(Grid, DefaultAxes) {
  const GridSpec q = GridSpec::defaults(TaskKind::every);
  EXPECT_EQ(q.rows.values.size(), 20u);
  EXPECT_EQ(q.cols.values.size(), 10u);
  EXPECT_EQ(q.rows.values.front(), 10.0);
  EXPECT_EQ(q.rows.values.back(), 200.0);
  const GridSpec l = GridSpec::defaults(TaskKind::linear_fn);
  EXPECT_EQ(l.rows.values.size(), 10u);
  EXPECT_EQ(l.cols.values.back(), 10.0);
  GridSpec bad = l;
  bad.rows.values = {1, 3, 2};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = q;
  bad.rows.values = {10.5};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Grid, SingleCellEqualsDirectCall) {
  const Model model(regression_model(ScoreKind::ssa), 3);
  const ModelPredictor pred(model);
  GridSpec g = small_linear_grid();
  g.rows.values = {2.0};
  g.cols.values = {3.0};
  const GridResult r = eval_grid(pred, g);
  EXPECT_EQ(r.cells(0, 0), linear_fn_mse(pred, 2.0, 3.0, g.linear, cell_seed(g.seed, 0, 0)));
}

TEST(Grid, ParallelEqualsSerial) {
  const Model model(regression_model(ScoreKind::softmax), 3);
  const ModelPredictor pred(model);
  const GridSpec g = small_linear_grid();
  const GridResult serial = eval_grid(pred, g, 1), parallel = eval_grid(pred, g, 4);
  EXPECT_TRUE(serial.failures.empty());
  EXPECT_EQ(serial.cells, parallel.cells);
  std::ostringstream a, b;
  write_grid_csv(a, serial);
  write_grid_csv(b, parallel);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Grid, OracleGivesAllZeroDefaultGrids) {
  for (TaskKind task : {TaskKind::every, TaskKind::some, TaskKind::linear_fn}) {
    GridSpec g = GridSpec::defaults(task);
    if (task == TaskKind::linear_fn) g.linear.functions = 10;
    const GridResult r = eval_grid(OraclePredictor(task), g, 2);
    EXPECT_TRUE(r.failures.empty());
    EXPECT_TRUE(r.cells.isZero(0.0)) << to_string(task);
  }
}

TEST(Grid, ReadoutMismatchRejected) {
  EXPECT_THROW(eval_grid(OraclePredictor(TaskKind::every), small_linear_grid()), ContractError);
}

TEST(Grid, FailedCellsAreRecorded) {
  class Flaky final : public Predictor {
   public:
    Readout readout() const override { return Readout::regression; }
    std::string id() const override { return "flaky"; }
    std::vector<Eigen::VectorXd> predict(std::span<const PromptInstance> xs) const override {
      if (std::abs(xs.front().xs.front()) > 2.5) throw NumericError("boom");
      return OraclePredictor(TaskKind::linear_fn).predict(xs);
    }
  };
  GridSpec g = small_linear_grid();
  g.rows.values = {0.01, 100.0};
  const GridResult r = eval_grid(Flaky(), g);
  ASSERT_FALSE(r.failures.empty());
  for (const auto& f : r.failures) {
    EXPECT_EQ(f.row, 1);
    EXPECT_TRUE(std::isnan(r.cells(f.row, f.col)));
  }
  EXPECT_EQ(r.cells(0, 0), 0.0);
  const auto meta = grid_metadata(r, {});
  EXPECT_EQ(meta["failures"].size(), r.failures.size());
}

TEST(GridExport, CsvLayout) {
  GridResult r;
  r.rows = {"length", {10, 20}};
  r.cols = {"sigma", {1, 2.5}};
  r.cells = RowMatrix(2, 2);
  r.cells << 0.0, 0.125, 1.5, 2e-7;
  std::ostringstream os;
  write_grid_csv(os, r);
  EXPECT_EQ(os.str(),
            "length\\sigma,1,2.5\n"
            "10,0.000000e+00,1.250000e-01\n"
            "20,1.500000e+00,2.000000e-07\n");
}

TEST(GridExport, PgmLogScale) {
  GridResult r;
  r.rows = {"sigma_input", {1, 2}};
  r.cols = {"sigma_fn", {1, 2, 3}};
  r.cells = RowMatrix(2, 3);
  r.cells << 1e-8 - 1e-8, 1e-2 - 1e-8, 1.0 - 1e-8, 1.0 - 1e-8, 1e-6 - 1e-8, std::nan("");
  std::ostringstream os;
  const HeatmapRange range = write_grid_pgm(os, r);
  EXPECT_NEAR(range.min_log, -8.0, 1e-9);
  EXPECT_NEAR(range.max_log, 0.0, 1e-9);
  const std::string bytes = os.str();
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const auto px = [&](int i) { return static_cast<unsigned char>(bytes[header.size() + static_cast<std::size_t>(i)]); };
  EXPECT_EQ(px(0), 0);
  EXPECT_EQ(px(1), 191);  // log10 = -2
  EXPECT_EQ(px(2), 255);
  EXPECT_EQ(px(4), 64);   // log10 = -6
  EXPECT_EQ(px(5), 0);    // failed cell
}

TEST(Boundary, ClampOracleRecoversPlateaus) {
  const auto xs = linspace(-10.0, 10.0, 201);
  const BoundaryReport r = boundary_probe(ClampPredictor(), 10.0, 0.0, xs);
  ASSERT_TRUE(r.upper.has_value());
  ASSERT_TRUE(r.lower.has_value());
  EXPECT_NEAR(r.upper->level, 3.0, 0.05 * 3.0);
  EXPECT_NEAR(r.lower->level, -3.0, 0.05 * 3.0);
  EXPECT_EQ(boundary_json(r)["upper"]["level"].get<double>(), r.upper->level);
}

TEST(Boundary, ExactOracleNeverPlateaus) {
  const auto xs = linspace(-10.0, 10.0, 201);
  const OraclePredictor oracle(TaskKind::linear_fn);
  for (double a = -100.0; a <= 100.0; a += 0.5) {
    for (double b : {-5.0, 0.0, 3.0}) {
      const BoundaryReport r = boundary_probe(oracle, a, b, xs);
      EXPECT_FALSE(r.upper.has_value()) << a;
      EXPECT_FALSE(r.lower.has_value()) << a;
    }
  }
  const BoundaryReport r = boundary_probe(oracle, 10.0, 0.0, xs);
  EXPECT_EQ(boundary_json(r)["upper"], "none");
  EXPECT_EQ(boundary_json(r)["lower"], "none");
}

TEST(Boundary, PreconditionsAndCsv) {
  const OraclePredictor oracle(TaskKind::linear_fn);
  const std::vector<double> few{1, 2, 3};
  EXPECT_THROW(boundary_probe(oracle, 1, 0, few), ContractError);
  auto desc = linspace(-1, 1, 30);
  std::reverse(desc.begin(), desc.end());
  EXPECT_THROW(boundary_probe(oracle, 1, 0, desc), ContractError);
  const BoundaryReport r = boundary_probe(oracle, 2.0, 1.0, linspace(0.0, 1.0, 20));
  std::ostringstream os;
  write_boundary_csv(os, r);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "x,target,prediction");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 21);
}

TEST(AttentionInspect, SingleTokenAttendsToItself) {
  ModelConfig c = regression_model(ScoreKind::softmax);
  c.layers = 2;
  const Model model(c, 1);
  const auto report = attention_inspect(model, make_linear_instance(1.0, 0.0, {0.8}));
  ASSERT_EQ(report.last_layer.size(), 2u);
  for (const auto& h : report.last_layer) {
    EXPECT_EQ(h.argmax_key, 0);
    EXPECT_DOUBLE_EQ(h.weight, 1.0);
  }
  EXPECT_DOUBLE_EQ(last_layer_weight_on(report, 0), 1.0);
}

TEST(AttentionInspect, UniformHeadsAreUniform) {
  const Model model(regression_model(ScoreKind::uniform_avg), 1);
  const auto inst = make_linear_instance(2.0, -1.0, {0.5, -1.0, 3.0, 0.2});
  const auto report = attention_inspect(model, inst);
  EXPECT_EQ(report.query, 6);
  for (const auto& layer : report.maps) {
    for (const RowMatrix& m : layer) {
      for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j <= i; ++j) EXPECT_NEAR(m(i, j), 1.0 / static_cast<double>(i + 1), 1e-15);
      }
    }
  }
  std::ostringstream os;
  write_attention_csv(os, report.maps[0][0]);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const auto j = attention_json(report);
  EXPECT_EQ(j["query"], 6);
}

TEST(AttentionInspect, NeedsAttentionLayers) {
  ModelConfig c = regression_model(ScoreKind::softmax);
  c.ablation = Ablation::ff_only;
  const Model model(c, 1);
  EXPECT_THROW(attention_inspect(model, make_linear_instance(1.0, 0.0, {1.0})), ContractError);
}
