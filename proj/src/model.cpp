#include "ssalab/model.hpp"

#include "ssalab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace ssalab {

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full:
      return "full";
    case Ablation::attention_only:
      return "attention_only";
    case Ablation::ff_only:
      return "ff_only";
  }
  return "unknown";
}

std::string_view to_string(Positional p) {
  switch (p) {
    case Positional::learned:
      return "learned";
    case Positional::sinusoidal:
      return "sinusoidal";
    case Positional::none:
      return "none";
  }
  return "unknown";
}

std::string_view to_string(Readout r) { return r == Readout::binary ? "binary" : "regression"; }

Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::full;
  if (name == "attention_only") return Ablation::attention_only;
  if (name == "ff_only") return Ablation::ff_only;
  throw ConfigError("unknown ablation '" + std::string(name) + "'");
}

Positional parse_positional(std::string_view name) {
  if (name == "learned") return Positional::learned;
  if (name == "sinusoidal") return Positional::sinusoidal;
  if (name == "none") return Positional::none;
  throw ConfigError("unknown positional mode '" + std::string(name) + "'");
}

Readout parse_readout(std::string_view name) {
  if (name == "regression") return Readout::regression;
  if (name == "binary") return Readout::binary;
  throw ConfigError("unknown readout '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (heads < 1) throw ConfigError("model.heads must be >= 1");
  if (emb_dim < 1) throw ConfigError("model.emb_dim must be >= 1");
  if (emb_dim % heads != 0) throw ConfigError("model.emb_dim must be divisible by model.heads");
  if (max_positions < 1) throw ConfigError("model.max_positions must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio must be >= 1");
  if (ablation == Ablation::ff_only && !mlp_enabled) {
    throw ConfigError("model.ablation ff_only needs model.mlp_enabled");
  }
  scoring.validate(heads);
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, CounterRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor constant_tensor(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const Index d = config_.emb_dim;
  const Index h = config_.heads;
  const Index hidden = config_.mlp_ratio * d;
  CounterRng rng(derive_seed({seed, 0x6d6f64656cULL}));
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double w_std = 0.02;
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.layers));

  scalar_embedding = normal_tensor({1, d}, emb_std, rng);
  boolean_embedding = normal_tensor({2, d}, emb_std, rng);
  if (config_.positional == Positional::learned) {
    position_table = normal_tensor({config_.max_positions, d}, emb_std, rng);
  }
  layers.resize(static_cast<std::size_t>(config_.layers));
  for (LayerWeights& lw : layers) {
    if (config_.has_attention()) {
      if (config_.layer_norm) {
        lw.ln1_gain = constant_tensor({d}, 1.0);
        lw.ln1_bias = constant_tensor({d}, 0.0);
      }
      lw.qkv_weight = normal_tensor({d, 3 * d}, w_std, rng);
      lw.qkv_bias = constant_tensor({3 * d}, 0.0);
      lw.out_weight = normal_tensor({d, d}, proj_std, rng);
      lw.out_bias = constant_tensor({d}, 0.0);
      if (config_.scoring.uses_ssa()) {
        lw.score_b = constant_tensor({h}, ssa_b_to_raw(config_.scoring.ssa_b_init));
        lw.score_b.set_requires_grad(config_.scoring.ssa_b_trainable);
        lw.score_n = constant_tensor({h}, ssa_n_to_raw(config_.scoring.ssa_n));
        lw.score_n.set_requires_grad(config_.scoring.ssa_n_trainable);
      }
    }
    if (config_.has_mlp()) {
      if (config_.layer_norm) {
        lw.ln2_gain = constant_tensor({d}, 1.0);
        lw.ln2_bias = constant_tensor({d}, 0.0);
      }
      lw.fc1_weight = normal_tensor({d, hidden}, w_std, rng);
      lw.fc1_bias = constant_tensor({hidden}, 0.0);
      lw.fc2_weight = normal_tensor({hidden, d}, proj_std, rng);
      lw.fc2_bias = constant_tensor({d}, 0.0);
    }
  }
  if (config_.layer_norm) {
    final_gain = constant_tensor({d}, 1.0);
    final_bias = constant_tensor({d}, 0.0);
  }
  readout_weight = normal_tensor({d, config_.output_dim()}, w_std, rng);
  readout_bias = constant_tensor({config_.output_dim()}, 0.0);
}

namespace {

// Declaration order shared by parameters(), checkpoints and parameter_count.
template <typename M, typename Ref>
std::vector<Ref> collect(M& m) {
  const ModelConfig& c = m.config();
  std::vector<Ref> out;
  auto push = [&out](std::string name, auto& t) { out.push_back(Ref{std::move(name), &t}); };
  push("embed.scalar", m.scalar_embedding);
  push("embed.boolean", m.boolean_embedding);
  if (c.positional == Positional::learned) push("embed.position", m.position_table);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& lw = m.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    if (c.has_attention()) {
      if (c.layer_norm) {
        push(p + "ln1.gain", lw.ln1_gain);
        push(p + "ln1.bias", lw.ln1_bias);
      }
      push(p + "attn.qkv.weight", lw.qkv_weight);
      push(p + "attn.qkv.bias", lw.qkv_bias);
      push(p + "attn.out.weight", lw.out_weight);
      push(p + "attn.out.bias", lw.out_bias);
      if (c.scoring.uses_ssa()) {
        push(p + "attn.ssa_b", lw.score_b);
        push(p + "attn.ssa_n", lw.score_n);
      }
    }
    if (c.has_mlp()) {
      if (c.layer_norm) {
        push(p + "ln2.gain", lw.ln2_gain);
        push(p + "ln2.bias", lw.ln2_bias);
      }
      push(p + "mlp.fc1.weight", lw.fc1_weight);
      push(p + "mlp.fc1.bias", lw.fc1_bias);
      push(p + "mlp.fc2.weight", lw.fc2_weight);
      push(p + "mlp.fc2.bias", lw.fc2_bias);
    }
  }
  if (c.layer_norm) {
    push("final.gain", m.final_gain);
    push("final.bias", m.final_bias);
  }
  push("readout.weight", m.readout_weight);
  push("readout.bias", m.readout_bias);
  return out;
}

}  // namespace

std::vector<ParamRef> Model::parameters() { return collect<Model, ParamRef>(*this); }

std::vector<ConstParamRef> Model::parameters() const {
  return collect<const Model, ConstParamRef>(*this);
}

Index Model::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

std::uint64_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = static_cast<std::uint64_t>(c.emb_dim);
  const std::uint64_t h = static_cast<std::uint64_t>(c.heads);
  const std::uint64_t hidden = static_cast<std::uint64_t>(c.mlp_ratio) * d;
  std::uint64_t n = 3 * d;
  if (c.positional == Positional::learned) n += static_cast<std::uint64_t>(c.max_positions) * d;
  std::uint64_t per_layer = 0;
  if (c.has_attention()) {
    per_layer += (c.layer_norm ? 2 * d : 0) + 3 * d * d + 3 * d + d * d + d;
    if (c.scoring.uses_ssa()) per_layer += 2 * h;
  }
  if (c.has_mlp()) per_layer += (c.layer_norm ? 2 * d : 0) + 2 * d * hidden + hidden + d;
  n += per_layer * static_cast<std::uint64_t>(c.layers);
  if (c.layer_norm) n += 2 * d;
  const std::uint64_t out = static_cast<std::uint64_t>(c.output_dim());
  n += d * out + out;
  return n;
}

RowMatrix AttentionMaps::map(Index layer, Index head, Index batch_index) const {
  if (layer < 0 || layer >= static_cast<Index>(layers.size()) || head < 0 || head >= heads ||
      batch_index < 0 || batch_index >= batch) {
    throw ContractError("attention map index out of range");
  }
  return layers[static_cast<std::size_t>(layer)].middleRows((batch_index * heads + head) * seq, seq);
}

Eigen::VectorXd embed_scalar(double x, const Eigen::Ref<const Eigen::VectorXd>& w) { return x * w; }

RowMatrix sinusoidal_table(Index positions, Index dim) {
  RowMatrix t(positions, dim);
  for (Index p = 0; p < positions; ++p) {
    for (Index i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      t(p, i) = i % 2 == 0 ? std::sin(static_cast<double>(p) * rate) : std::cos(static_cast<double>(p) * rate);
    }
  }
  return t;
}

Var embed_tokens(Var scalar_embedding, Var boolean_embedding, std::span<const EncodedPrompt> batch) {
  if (batch.empty()) throw ContractError("embed_tokens needs a non-empty batch");
  Graph& g = *scalar_embedding.graph;
  const Tensor& w = scalar_embedding.value();
  const Tensor& e = boolean_embedding.value();
  const Index d = w.cols();
  const Index t = batch.front().length();
  std::vector<Token> tokens;
  tokens.reserve(static_cast<std::size_t>(t) * batch.size());
  for (const EncodedPrompt& p : batch) {
    if (p.length() != t) throw ContractError("embed_tokens: prompts in a batch must share a length");
    tokens.insert(tokens.end(), p.tokens.begin(), p.tokens.end());
  }
  Tensor out(Shape{static_cast<Index>(tokens.size()), d});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const Token& tok = tokens[r];
    if (tok.kind == TokenKind::scalar) {
      out.mat().row(static_cast<Index>(r)) = tok.value * w.mat().row(0);
    } else {
      out.mat().row(static_cast<Index>(r)) = e.mat().row(tok.value > 0.5 ? 1 : 0);
    }
  }
  return g.emit(std::move(out), {scalar_embedding, boolean_embedding},
                [scalar_embedding, boolean_embedding, toks = std::move(tokens)](Graph& gr,
                                                                                const Tensor& dout) {
                  const bool dw = gr.needs_grad(scalar_embedding);
                  const bool de = gr.needs_grad(boolean_embedding);
                  for (std::size_t r = 0; r < toks.size(); ++r) {
                    const auto row = dout.mat().row(static_cast<Index>(r));
                    if (toks[r].kind == TokenKind::scalar) {
                      if (dw) gr.grad(scalar_embedding).mat().row(0) += toks[r].value * row;
                    } else if (de) {
                      gr.grad(boolean_embedding).mat().row(toks[r].value > 0.5 ? 1 : 0) += row;
                    }
                  }
                });
}

namespace {

// Causal score rows of a square logit block. Softmax and SSA rows use
// vectorised exp/log; the sign of an SSA logit follows z, and log(1 + 0) = 0.
void score_causal(ScoreKind kind, const SsaParams& sp, const RowMatrix& s, RowMatrix& p) {
  const Index T = s.rows();
  p.setZero();
  for (Index i = 0; i < T; ++i) {
    auto z = s.row(i).head(i + 1).array();
    auto r = p.row(i).head(i + 1).array();
    if (kind == ScoreKind::softmax) {
      r = (z - z.maxCoeff()).exp();
    } else if (kind == ScoreKind::ssa) {
      r = sp.n * (1.0 + sp.b * z.abs()).log();
      r = (z < 0.0).select(-r, r);
      r = (r - r.maxCoeff()).exp();
    } else {
      score_kernel(kind, sp, s.row(i).head(i + 1), p.row(i).head(i + 1));
      continue;
    }
    r /= r.sum();
  }
}

// Writes dL/ds for one block. Softmax rows never read `s`.
void score_causal_vjp(ScoreKind kind, const SsaParams& sp, const RowMatrix& s, const RowMatrix& p,
                      const RowMatrix& dp, RowMatrix& ds, SsaGrad& pg) {
  const Index T = p.rows();
  ds.setZero();
  for (Index i = 0; i < T; ++i) {
    auto w = p.row(i).head(i + 1).array();
    auto dw = dp.row(i).head(i + 1).array();
    auto dz = ds.row(i).head(i + 1).array();
    if (kind == ScoreKind::softmax || kind == ScoreKind::ssa) {
      dz = w * (dw - (w * dw).sum());
    } else {
      score_kernel_vjp(kind, sp, s.row(i).head(i + 1), p.row(i).head(i + 1), dp.row(i).head(i + 1),
                       ds.row(i).head(i + 1), pg);
      continue;
    }
    if (kind == ScoreKind::ssa) {
      auto z = s.row(i).head(i + 1).array();
      const auto inv = 1.0 / (1.0 + sp.b * z.abs());
      const auto mag = (1.0 + sp.b * z.abs()).log();
      pg.db += sp.n * (dz * z * inv).sum();
      pg.dn += (z < 0.0).select(-dz * mag, dz * mag).sum();
      dz *= (sp.n * sp.b) * inv;
    }
  }
}

}  // namespace

Var causal_attention(Var qkv, Var score_b, Var score_n, const AttentionGeometry& geo,
                     std::vector<ScoreKind> head_kinds, RowMatrix* capture) {
  Graph& g = *qkv.graph;
  const Index B = geo.batch, T = geo.seq, H = geo.heads, dk = geo.head_dim;
  const Index d = H * dk;
  const Tensor& x = qkv.value();
  if (x.rows() != B * T || x.cols() != 3 * d) {
    throw DimensionError("causal_attention: qkv has shape " + shape_string(x.shape()) +
                         ", expected " + std::to_string(B * T) + "x" + std::to_string(3 * d));
  }
  if (static_cast<Index>(head_kinds.size()) != H) {
    throw ContractError("causal_attention: one scoring kind per head required");
  }
  const bool any_ssa =
      std::find(head_kinds.begin(), head_kinds.end(), ScoreKind::ssa) != head_kinds.end();
  if (any_ssa && (score_b.value().size() != H || score_n.value().size() != H)) {
    throw DimensionError("causal_attention: SSA parameters need one entry per head");
  }
  std::vector<SsaParams> params(static_cast<std::size_t>(H));
  if (any_ssa) {
    for (Index h = 0; h < H; ++h) {
      params[static_cast<std::size_t>(h)] = {ssa_b_from_raw(score_b.value()[h]),
                                             ssa_n_from_raw(score_n.value()[h])};
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool keep = g.recording();
  RowMatrix weights(keep || capture ? B * H * T : 0, T);
  if (keep || capture) weights.setZero();
  Tensor out(Shape{B * T, d});
  const ConstMatrixMap xm = x.mat();
  MatrixMap om = out.mat();
  // Logits are kept for heads whose score derivative depends on them.
  bool keep_logits = false;
  for (ScoreKind k : head_kinds) keep_logits |= k != ScoreKind::softmax && k != ScoreKind::uniform_avg;
  keep_logits &= keep;
  RowMatrix logits(keep_logits ? B * H * T : 0, T);
  RowMatrix s(T, T), p(T, T);
  for (Index b = 0; b < B; ++b) {
    for (Index h = 0; h < H; ++h) {
      const auto q = xm.block(b * T, h * dk, T, dk);
      const auto k = xm.block(b * T, d + h * dk, T, dk);
      const auto v = xm.block(b * T, 2 * d + h * dk, T, dk);
      s.noalias() = scale * (q * k.transpose());
      score_causal(head_kinds[static_cast<std::size_t>(h)], params[static_cast<std::size_t>(h)], s, p);
      om.block(b * T, h * dk, T, dk).noalias() = p * v;
      if (keep || capture) weights.middleRows((b * H + h) * T, T) = p;
      if (keep_logits) logits.middleRows((b * H + h) * T, T) = s;
    }
  }
  if (!out.all_finite()) throw NumericError("causal_attention produced a non-finite value");
  if (capture) *capture = weights;
  if (!keep) weights.resize(0, 0);
  return g.emit(
      std::move(out), {qkv, score_b, score_n},
      [qkv, score_b, score_n, geo, kinds = std::move(head_kinds), params = std::move(params), scale,
       w = std::move(weights), logits = std::move(logits)](Graph& gr, const Tensor& dout) {
        const Index B = geo.batch, T = geo.seq, H = geo.heads, dk = geo.head_dim;
        const Index d = H * dk;
        const ConstMatrixMap xm = gr.value(qkv).mat();
        MatrixMap gx = gr.grad(qkv).mat();
        const ConstMatrixMap dm = dout.mat();
        const bool want_b = gr.needs_grad(score_b);
        const bool want_n = gr.needs_grad(score_n);
        RowMatrix s, p(T, T), ds(T, T), dp(T, T);
        for (Index h = 0; h < H; ++h) {
          const ScoreKind kind = kinds[static_cast<std::size_t>(h)];
          const SsaParams& sp = params[static_cast<std::size_t>(h)];
          SsaGrad pg;
          for (Index b = 0; b < B; ++b) {
            const auto q = xm.block(b * T, h * dk, T, dk);
            const auto k = xm.block(b * T, d + h * dk, T, dk);
            const auto v = xm.block(b * T, 2 * d + h * dk, T, dk);
            p = w.middleRows((b * H + h) * T, T);
            const auto dc = dm.block(b * T, h * dk, T, dk);
            dp.noalias() = dc * v.transpose();
            gx.block(b * T, 2 * d + h * dk, T, dk).noalias() += p.transpose() * dc;
            if (kind == ScoreKind::uniform_avg) continue;
            if (logits.size() > 0) s = logits.middleRows((b * H + h) * T, T);
            score_causal_vjp(kind, sp, s, p, dp, ds, pg);
            gx.block(b * T, h * dk, T, dk).noalias() += scale * (ds * k);
            gx.block(b * T, d + h * dk, T, dk).noalias() += scale * (ds.transpose() * q);
          }
          if (kind == ScoreKind::ssa) {
            if (want_b) gr.grad(score_b)[h] += pg.db * sp.b;
            if (want_n) gr.grad(score_n)[h] += pg.dn * (sp.n - 1.0);
          }
        }
      });
}

namespace {

template <typename M>
ForwardResult forward_impl(M& model, Graph& g, std::span<const EncodedPrompt> batch,
                           const ForwardOptions& options) {
  const ModelConfig& c = model.config();
  if (batch.empty()) throw ContractError("forward needs a non-empty batch");
  const Index T = batch.front().length();
  if (T < 1) throw ContractError("forward needs prompts with at least one token");
  if (T > c.max_positions) {
    throw ContractError("prompt of " + std::to_string(T) + " tokens exceeds max_positions " +
                        std::to_string(c.max_positions));
  }
  const Index B = static_cast<Index>(batch.size());
  const Index d = c.emb_dim;

  Var x = embed_tokens(g.parameter(model.scalar_embedding), g.parameter(model.boolean_embedding), batch);
  if (c.positional == Positional::learned) {
    std::vector<Index> rows(static_cast<std::size_t>(T));
    for (Index t = 0; t < T; ++t) rows[static_cast<std::size_t>(t)] = t;
    x = add_periodic_rows(x, gather_rows(g.parameter(model.position_table), std::move(rows)));
  } else if (c.positional == Positional::sinusoidal) {
    x = add_periodic_rows(x, g.constant(Tensor::from_matrix(sinusoidal_table(T, d))));
  }

  ForwardResult result;
  if (options.capture_attention && c.has_attention()) {
    result.maps = AttentionMaps{B, T, c.heads, {}};
  }
  std::vector<ScoreKind> kinds;
  for (Index h = 0; h < c.heads; ++h) kinds.push_back(c.scoring.head_kind(h));
  const AttentionGeometry geo{B, T, c.heads, c.head_dim()};

  for (auto& lw : model.layers) {
    if (c.has_attention()) {
      Var h = c.layer_norm ? layer_norm(x, g.parameter(lw.ln1_gain), g.parameter(lw.ln1_bias)) : x;
      Var qkv = add_row_vector(matmul(h, g.parameter(lw.qkv_weight)), g.parameter(lw.qkv_bias));
      Var sb = c.scoring.uses_ssa() ? g.parameter(lw.score_b) : g.constant(Tensor::scalar(0.0));
      Var sn = c.scoring.uses_ssa() ? g.parameter(lw.score_n) : g.constant(Tensor::scalar(0.0));
      RowMatrix* cap = nullptr;
      if (result.maps) cap = &result.maps->layers.emplace_back();
      Var ctx = causal_attention(qkv, sb, sn, geo, kinds, cap);
      x = add(x, add_row_vector(matmul(ctx, g.parameter(lw.out_weight)), g.parameter(lw.out_bias)));
    }
    if (c.has_mlp()) {
      Var h = c.layer_norm ? layer_norm(x, g.parameter(lw.ln2_gain), g.parameter(lw.ln2_bias)) : x;
      Var f = gelu(add_row_vector(matmul(h, g.parameter(lw.fc1_weight)), g.parameter(lw.fc1_bias)));
      x = add(x, add_row_vector(matmul(f, g.parameter(lw.fc2_weight)), g.parameter(lw.fc2_bias)));
    }
  }
  if (c.layer_norm) x = layer_norm(x, g.parameter(model.final_gain), g.parameter(model.final_bias));
  result.outputs =
      add_row_vector(matmul(x, g.parameter(model.readout_weight)), g.parameter(model.readout_bias));

  std::vector<Index> targets;
  for (Index b = 0; b < B; ++b) {
    for (Index pos : batch[static_cast<std::size_t>(b)].target_positions) targets.push_back(b * T + pos);
  }
  result.target_outputs = gather_rows(result.outputs, std::move(targets));
  return result;
}

}  // namespace

ForwardResult forward(Model& model, Graph& graph, std::span<const EncodedPrompt> batch,
                      const ForwardOptions& options) {
  return forward_impl(model, graph, batch, options);
}

ForwardResult forward(const Model& model, Graph& graph, std::span<const EncodedPrompt> batch,
                      const ForwardOptions& options) {
  return forward_impl(model, graph, batch, options);
}

std::vector<Eigen::VectorXd> predict_targets(const Model& model,
                                             std::span<const PromptInstance> instances,
                                             Index max_batch) {
  std::vector<Eigen::VectorXd> out(instances.size());
  std::map<Index, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < instances.size(); ++i) by_length[instances[i].length()].push_back(i);
  const bool binary = model.config().readout == Readout::binary;
  for (const auto& [len, idx] : by_length) {
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(max_batch)) {
      const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(max_batch));
      std::vector<EncodedPrompt> batch;
      for (std::size_t i = start; i < stop; ++i) batch.push_back(encode_prompt(instances[idx[i]]));
      Graph g(false);
      const ForwardResult fr = forward(model, g, batch);
      const Tensor& y = fr.target_outputs.value();
      for (std::size_t i = start; i < stop; ++i) {
        const Index row0 = static_cast<Index>(i - start) * len;
        Eigen::VectorXd v(len);
        for (Index k = 0; k < len; ++k) {
          v[k] = binary ? y.at(row0 + k, 1) - y.at(row0 + k, 0) : y.at(row0 + k, 0);
        }
        out[idx[i]] = std::move(v);
      }
    }
  }
  return out;
}

}  // namespace ssalab
