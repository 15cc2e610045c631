#include "support.hpp"

#include "ssalab/model.hpp"
#include "ssalab/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ssalab;
using ssalab::testing::max_fd_rel_error;
using ssalab::testing::random_tensor;

namespace {

ModelConfig small_config(ScoreKind kind, Index layers = 1, Index heads = 1, Index d = 8) {
  ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.emb_dim = d;
  c.max_positions = 128;
  c.scoring.kind = kind;
  if (kind == ScoreKind::hybrid) c.scoring.hybrid_assignment = hybrid_assign(heads, HybridVariant::soft_avg);
  return c;
}

std::vector<double> outputs_of(const Model& model, const EncodedPrompt& prompt) {
  Graph g(false);
  const auto fr = forward(model, g, std::span(&prompt, 1));
  const auto v = fr.outputs.value().values();
  return {v.begin(), v.end()};
}

const std::vector<ScoreKind> kAllKinds{ScoreKind::softmax,     ScoreKind::ssa,        ScoreKind::sa_softmax,
                                       ScoreKind::uniform_avg, ScoreKind::tanh_score, ScoreKind::relu_score,
                                       ScoreKind::square_score, ScoreKind::hybrid};

// qkv for one head of width 1: q, k, v columns.
Tensor qkv_columns(const std::vector<double>& q, const std::vector<double>& k, const std::vector<double>& v) {
  const Index t = static_cast<Index>(q.size());
  Tensor out({t, 3});
  for (Index i = 0; i < t; ++i) {
    out.at(i, 0) = q[static_cast<std::size_t>(i)];
    out.at(i, 1) = k[static_cast<std::size_t>(i)];
    out.at(i, 2) = v[static_cast<std::size_t>(i)];
  }
  return out;
}

Var run_attention(Graph& g, const Tensor& qkv, ScoreKind kind, double b = 1.0, double n = 1.5,
                  RowMatrix* capture = nullptr) {
  const AttentionGeometry geo{1, qkv.rows(), 1, qkv.cols() / 3};
  return causal_attention(g.constant(qkv), g.constant(Tensor::vector({ssa_b_to_raw(b)})),
                          g.constant(Tensor::vector({ssa_n_to_raw(n)})), geo, {kind}, capture);
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.ablation = Ablation::ff_only;
  c.mlp_enabled = false;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_ablation("attention_only"), Ablation::attention_only);
  EXPECT_THROW(parse_positional("rotary"), ConfigError);
}

TEST(Model, ParameterCountByHand) {
  ModelConfig c = small_config(ScoreKind::softmax, 1, 1, 4);
  c.max_positions = 8;
  // embeddings 4 + 8 + 32, ln1 8, qkv 48 + 12, out 16 + 4, ln2 8, fc1 64 + 16, fc2 64 + 4, final 8, readout 5
  EXPECT_EQ(parameter_count(c), 301u);
  EXPECT_EQ(Model(c, 1).parameter_count(), 301);
  for (ScoreKind kind : kAllKinds) {
    const ModelConfig k = small_config(kind, 2, 2, 8);
    EXPECT_EQ(static_cast<std::uint64_t>(Model(k, 3).parameter_count()), parameter_count(k));
  }
}

TEST(Model, SameSeedSameParameters) {
  const ModelConfig c = small_config(ScoreKind::ssa, 2, 2, 8);
  Model a(c, 5), b(c, 5), other(c, 6);
  const auto pa = a.parameters(), pb = b.parameters(), po = other.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].tensor->vec(), pb[i].tensor->vec());
    differs = differs || pa[i].tensor->vec() != po[i].tensor->vec();
  }
  EXPECT_TRUE(differs);
}

TEST(EmbedScalar, Examples) {
  const Eigen::VectorXd w = random_tensor({6}, 7).vec();
  EXPECT_TRUE(embed_scalar(0.0, w).isZero());
  Eigen::VectorXd e0 = Eigen::VectorXd::Zero(6);
  e0[0] = 1.0;
  const Eigen::VectorXd two = embed_scalar(2.0, e0);
  EXPECT_EQ(two[0], 2.0);
  EXPECT_TRUE(two.tail(5).isZero());
  EXPECT_LT(embed_scalar(3.0, w).norm(), embed_scalar(5.0, w).norm());
  EXPECT_LT(embed_scalar(-3.0, w).norm(), embed_scalar(-5.0, w).norm());
}

TEST(EmbedTokens, ScalarAndBooleanRows) {
  Graph g(false);
  Tensor scalar = random_tensor({1, 4}, 11), boolean = random_tensor({2, 4}, 12);
  const auto prompt = encode_prompt(make_quantifier_instance(TaskKind::every, {1.5, -2.0}));
  Var e = embed_tokens(g.constant(scalar), g.constant(boolean), std::span(&prompt, 1));
  const Tensor& v = e.value();
  for (Index j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(v.at(0, j), 1.5 * scalar[j]);
    EXPECT_DOUBLE_EQ(v.at(1, j), boolean.at(1, j));
    EXPECT_DOUBLE_EQ(v.at(2, j), -2.0 * scalar[j]);
  }
}

TEST(Attention, SinglePositionHasWeightOne) {
  for (ScoreKind kind : {ScoreKind::softmax, ScoreKind::ssa, ScoreKind::uniform_avg}) {
    Graph g(false);
    RowMatrix cap;
    Var c = run_attention(g, qkv_columns({0.7}, {-1.3}, {2.5}), kind, 1.0, 1.5, &cap);
    EXPECT_DOUBLE_EQ(cap(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(c.value()[0], 2.5);
  }
}

TEST(Attention, UniformOverIdenticalValuesReturnsValue) {
  Graph g(false);
  Var c = run_attention(g, qkv_columns({0.3, -4.0}, {1.0, 9.0}, {1.75, 1.75}), ScoreKind::uniform_avg);
  EXPECT_DOUBLE_EQ(c.value()[1], 1.75);
}

TEST(Attention, SaturatedSoftmaxSelectsOneValue) {
  // logits from the last query: 0, 25, 0, 0
  Graph g(false);
  Var c = run_attention(g, qkv_columns({0, 0, 0, 1}, {0, 25, 0, 0}, {3.0, -1.2, 8.0, 5.0}), ScoreKind::softmax);
  EXPECT_NEAR(c.value()[3], -1.2, 1e-6);
}

TEST(Attention, SsaApproachesSaturatedOutputMonotonically) {
  const Tensor qkv = qkv_columns({0, 0, 0, 1}, {0, 4, 1, -1}, {3.0, -1.2, 8.0, 5.0});
  double prev = INFINITY;
  for (auto [b, n] : {std::pair{1.0, 1.5}, std::pair{2.0, 3.0}, std::pair{5.0, 6.0}, std::pair{20.0, 12.0},
                      std::pair{100.0, 30.0}}) {
    Graph g(false);
    const double dist = std::abs(run_attention(g, qkv, ScoreKind::ssa, b, n).value()[3] - (-1.2));
    EXPECT_LT(dist, prev) << b << " " << n;
    prev = dist;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(Attention, WeightsMatchScoreVectorOnEveryRow) {
  const Index T = 6, dk = 3;
  const Tensor qkv = random_tensor({T, 3 * dk}, 21);
  for (ScoreKind kind : {ScoreKind::softmax, ScoreKind::ssa, ScoreKind::sa_softmax, ScoreKind::uniform_avg,
                         ScoreKind::tanh_score, ScoreKind::relu_score, ScoreKind::square_score}) {
    Graph g(false);
    RowMatrix cap;
    run_attention(g, qkv, kind, 1.7, 2.2, &cap);
    ScoringConfig sc;
    sc.kind = kind;
    sc.ssa_b_init = 1.7;
    sc.ssa_n = 2.2;
    const RowMatrix q = qkv.mat().leftCols(dk), k = qkv.mat().middleCols(dk, dk);
    for (Index i = 0; i < T; ++i) {
      Eigen::VectorXd z(i + 1);
      for (Index j = 0; j <= i; ++j) z[j] = q.row(i).dot(k.row(j)) / std::sqrt(double(dk));
      const auto w = score_vector(z, sc).weights;
      for (Index j = 0; j < T; ++j) {
        EXPECT_NEAR(cap(i, j), j <= i ? w[j] : 0.0, 1e-13) << to_string(kind) << " " << i << "," << j;
      }
    }
  }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  const AttentionGeometry geo{2, 5, 2, 3};
  const Tensor w = random_tensor({10, 6}, 31);
  const std::vector<std::vector<ScoreKind>> head_sets{
      {ScoreKind::softmax, ScoreKind::softmax},       {ScoreKind::ssa, ScoreKind::ssa},
      {ScoreKind::sa_softmax, ScoreKind::tanh_score}, {ScoreKind::relu_score, ScoreKind::square_score},
      {ScoreKind::softmax, ScoreKind::uniform_avg},   {ScoreKind::ssa, ScoreKind::uniform_avg}};
  for (const auto& kinds : head_sets) {
    std::vector<Tensor> in{random_tensor({10, 18}, 32), Tensor::vector({0.2, -0.4}), Tensor::vector({-0.5, 0.3})};
    const double err = max_fd_rel_error(
        [&](Graph& g, const std::vector<Var>& v) {
          return sum(mul(causal_attention(v[0], v[1], v[2], geo, kinds), g.constant(w)));
        },
        in);
    EXPECT_LT(err, 1e-6) << to_string(kinds[0]) << "/" << to_string(kinds[1]);
  }
}

TEST(Forward, CausalForEveryScoringKind) {
  for (ScoreKind kind : kAllKinds) {
    const ModelConfig c = small_config(kind, 2, 2, 8);
    const Model model(c, 9);
    auto inst = gen_instance(TaskSpec{}, 6, 0);
    auto prompt = encode_prompt(inst);
    const auto base = outputs_of(model, prompt);
    for (Index pos = 1; pos < prompt.length(); ++pos) {
      EncodedPrompt changed = prompt;
      changed.tokens[static_cast<std::size_t>(pos)].value += 3.7;
      const auto after = outputs_of(model, changed);
      for (Index r = 0; r < pos; ++r) {
        EXPECT_EQ(after[static_cast<std::size_t>(r)], base[static_cast<std::size_t>(r)])
            << to_string(kind) << " pos " << pos << " row " << r;
      }
      EXPECT_NE(after[static_cast<std::size_t>(pos)], base[static_cast<std::size_t>(pos)]) << to_string(kind);
    }
  }
}

TEST(Forward, FeedForwardOnlyIsPositionLocal) {
  ModelConfig c = small_config(ScoreKind::softmax, 2, 1, 8);
  c.ablation = Ablation::ff_only;
  const Model model(c, 4);
  const auto prompt = encode_prompt(gen_instance(TaskSpec{}, 5, 1));
  const auto base = outputs_of(model, prompt);
  for (Index pos = 0; pos < prompt.length(); ++pos) {
    EncodedPrompt changed = prompt;
    changed.tokens[static_cast<std::size_t>(pos)].value -= 2.0;
    const auto after = outputs_of(model, changed);
    for (Index r = 0; r < prompt.length(); ++r) {
      if (r == pos) continue;
      EXPECT_EQ(after[static_cast<std::size_t>(r)], base[static_cast<std::size_t>(r)]);
    }
  }
}

TEST(Forward, AttentionOnlyTwelveLayersEightHeads) {
  ModelConfig c = small_config(ScoreKind::softmax, 12, 8, 64);
  c.ablation = Ablation::attention_only;
  c.readout = Readout::binary;
  const Model model(c, 2);
  TaskSpec spec;
  spec.kind = TaskKind::every;
  std::vector<PromptInstance> batch;
  for (std::uint64_t i = 0; i < 4; ++i) batch.push_back(gen_instance(spec, 40, i));
  const auto preds = predict_targets(model, batch);
  ASSERT_EQ(preds.size(), 4u);
  for (const auto& p : preds) {
    EXPECT_EQ(p.size(), 40);
    EXPECT_TRUE(p.allFinite());
  }
}

TEST(Forward, ReadoutShapesAndOverLengthPrompt) {
  ModelConfig c = small_config(ScoreKind::ssa);
  c.max_positions = 9;
  const Model reg(c, 1);
  const auto prompt = encode_prompt(gen_instance(TaskSpec{}, 5, 0));
  Graph g(false);
  const auto fr = forward(reg, g, std::span(&prompt, 1));
  EXPECT_EQ(fr.outputs.shape(), (Shape{9, 1}));
  EXPECT_EQ(fr.target_outputs.shape(), (Shape{5, 1}));
  c.readout = Readout::binary;
  const Model bin(c, 1);
  Graph g2(false);
  EXPECT_EQ(forward(bin, g2, std::span(&prompt, 1)).outputs.shape(), (Shape{9, 2}));
  const auto long_prompt = encode_prompt(gen_instance(TaskSpec{}, 6, 0));
  Graph g3(false);
  EXPECT_THROW(forward(reg, g3, std::span(&long_prompt, 1)), ContractError);
}

TEST(Forward, AttentionMapsAreCausalDistributions) {
  const ModelConfig c = small_config(ScoreKind::ssa, 2, 2, 8);
  const Model model(c, 3);
  const auto prompt = encode_prompt(gen_instance(TaskSpec{}, 4, 2));
  Graph g(false);
  const auto fr = forward(model, g, std::span(&prompt, 1), {.capture_attention = true});
  ASSERT_TRUE(fr.maps.has_value());
  ASSERT_EQ(fr.maps->layers.size(), 2u);
  for (Index l = 0; l < 2; ++l) {
    for (Index h = 0; h < 2; ++h) {
      const RowMatrix m = fr.maps->map(l, h);
      for (Index i = 0; i < m.rows(); ++i) {
        EXPECT_NEAR(m.row(i).sum(), 1.0, 1e-12);
        for (Index j = i + 1; j < m.cols(); ++j) EXPECT_EQ(m(i, j), 0.0);
      }
    }
  }
}

TEST(Forward, PositionalModes) {
  for (Positional p : {Positional::learned, Positional::sinusoidal, Positional::none}) {
    ModelConfig c = small_config(ScoreKind::softmax);
    c.positional = p;
    const Model model(c, 1);
    const auto prompt = encode_prompt(gen_instance(TaskSpec{}, 3, 0));
    for (double v : outputs_of(model, prompt)) EXPECT_TRUE(std::isfinite(v));
  }
  const RowMatrix table = sinusoidal_table(4, 6);
  EXPECT_DOUBLE_EQ(table(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(table(0, 1), 1.0);
  EXPECT_NEAR(table(3, 0), std::sin(3.0), 1e-15);
}

TEST(ModelGradients, FullForwardAndLossMatchFiniteDifferences) {
  struct Case {
    Index layers, heads;
    ScoreKind kind;
    TaskKind task;
    bool layer_norm;
  };
  const std::vector<Case> cases{
      {1, 1, ScoreKind::softmax, TaskKind::linear_fn, true}, {1, 1, ScoreKind::ssa, TaskKind::linear_fn, true},
      {2, 2, ScoreKind::softmax, TaskKind::every, true},     {2, 2, ScoreKind::ssa, TaskKind::some, true},
      {2, 2, ScoreKind::ssa, TaskKind::linear_fn, false},    {2, 2, ScoreKind::sa_softmax, TaskKind::linear_fn, true},
      {2, 2, ScoreKind::hybrid, TaskKind::every, true}};
  for (const auto& cs : cases) {
    ModelConfig c = small_config(cs.kind, cs.layers, cs.heads, 64);
    c.layer_norm = cs.layer_norm;
    c.scoring.ssa_n_trainable = cs.kind == ScoreKind::ssa;
    const auto report = check_model_gradients(c, cs.task, 42);
    EXPECT_TRUE(report.passed) << to_string(cs.kind) << " " << cs.layers << "L " << report.diagnostic
                               << " max rel " << report.max_rel_error;
    EXPECT_LT(report.max_rel_error, 1e-4);
    for (const auto& t : report.tensors) {
      if (!t.passed) ADD_FAILURE() << t.name << " rel " << t.rel_error << " abs " << t.max_abs_error;
    }
    bool saw_b = false;
    for (const auto& t : report.tensors) saw_b = saw_b || t.name.find("ssa_b") != std::string::npos;
    EXPECT_EQ(saw_b, cs.kind == ScoreKind::ssa);
  }
}
