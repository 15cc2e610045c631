#pragma once

#include "ssalab/scoring.hpp"
#include "ssalab/tasks.hpp"
#include "ssalab/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ssalab {

enum class Ablation { full, attention_only, ff_only };
enum class Positional { learned, sinusoidal, none };
enum class Readout { regression, binary };

std::string_view to_string(Ablation a);
std::string_view to_string(Positional p);
std::string_view to_string(Readout r);
Ablation parse_ablation(std::string_view name);
Positional parse_positional(std::string_view name);
Readout parse_readout(std::string_view name);

/// Readout a task needs: binary for quantifiers, regression for linear_fn.
constexpr Readout readout_for(TaskKind kind) {
  return is_quantifier(kind) ? Readout::binary : Readout::regression;
}

struct ModelConfig {
  Index layers = 1;
  Index heads = 1;
  Index emb_dim = 64;
  bool mlp_enabled = true;
  Ablation ablation = Ablation::full;
  Positional positional = Positional::learned;
  Index max_positions = 512;
  /// Pre-norm residual blocks plus a final norm; off gives bare residual blocks.
  bool layer_norm = true;
  Index mlp_ratio = 4;
  ScoringConfig scoring;
  Readout readout = Readout::regression;

  void validate() const;
  Index head_dim() const { return emb_dim / heads; }
  bool has_attention() const { return ablation != Ablation::ff_only; }
  bool has_mlp() const { return mlp_enabled && ablation != Ablation::attention_only; }
  Index output_dim() const { return readout == Readout::binary ? 2 : 1; }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;  // d x 3d, columns [Q | K | V], heads contiguous inside each
  Tensor out_weight, out_bias;
  Tensor score_b;  // per-head raw SSA b (b = exp(raw))
  Tensor score_n;  // per-head raw SSA n (n = 1 + exp(raw))
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

/// Decoder-only transformer over scalar and boolean tokens.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;
  Index parameter_count() const;
  void zero_grad();

  Tensor scalar_embedding;   // 1 x d, shared by every real-valued token
  Tensor boolean_embedding;  // 2 x d, rows False, True
  Tensor position_table;     // max_positions x d (learned mode only)
  std::vector<LayerWeights> layers;
  Tensor final_gain, final_bias;
  Tensor readout_weight, readout_bias;

 private:
  ModelConfig config_;
};

std::uint64_t parameter_count(const ModelConfig& config);

/// Per-layer attention weights captured by forward.
struct AttentionMaps {
  Index batch = 0;
  Index seq = 0;
  Index heads = 0;
  /// One (batch * heads * seq) x seq matrix per layer; rows are query positions.
  std::vector<RowMatrix> layers;

  /// Weights for one layer, head and batch element: seq x seq, lower triangular.
  RowMatrix map(Index layer, Index head, Index batch_index = 0) const;
};

struct ForwardOptions {
  bool capture_attention = false;
};

struct ForwardResult {
  Var outputs;         // (B * T) x output_dim, one row per token
  Var target_outputs;  // (B * k) x output_dim, one row per target position
  std::optional<AttentionMaps> maps;
};

/// Runs a batch of equal-length prompts. Trainable parameters are tracked when `graph` records.
ForwardResult forward(Model& model, Graph& graph, std::span<const EncodedPrompt> batch,
                      const ForwardOptions& options = {});
/// Same computation with every parameter treated as a constant.
ForwardResult forward(const Model& model, Graph& graph, std::span<const EncodedPrompt> batch,
                      const ForwardOptions& options = {});

struct AttentionGeometry {
  Index batch = 1;
  Index seq = 1;
  Index heads = 1;
  Index head_dim = 1;
};

/// Multi-head causal self-attention over packed projections.
///
/// `qkv` is (batch * seq) x (3 * heads * head_dim). Row i of each head
/// attends to positions j <= i with weights from that head's scoring kind
/// applied to (q_i . k_j) / sqrt(head_dim). `score_b` and `score_n` hold the
/// per-head raw SSA parameters. When `capture` is set it receives the
/// weights in AttentionMaps layer layout.
Var causal_attention(Var qkv, Var score_b, Var score_n, const AttentionGeometry& geometry,
                     std::vector<ScoreKind> head_kinds, RowMatrix* capture = nullptr);

/// x * W for scalar tokens, the boolean embedding row for boolean tokens.
Var embed_tokens(Var scalar_embedding, Var boolean_embedding, std::span<const EncodedPrompt> batch);

/// Scalar embedding x -> x * W.
Eigen::VectorXd embed_scalar(double x, const Eigen::Ref<const Eigen::VectorXd>& w);

/// Fixed sinusoidal table, rows are positions.
RowMatrix sinusoidal_table(Index positions, Index dim);

/// Forward over instances grouped by length. Row i holds instance i's
/// per-target outputs: the regression value, or logit(True) - logit(False).
std::vector<Eigen::VectorXd> predict_targets(const Model& model,
                                             std::span<const PromptInstance> instances,
                                             Index max_batch = 64);

}  // namespace ssalab
