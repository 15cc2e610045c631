#include "ssalab/training.hpp"

#include "ssalab/rng.hpp"

#include <cmath>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ssalab {

Var autoregressive_loss(Var predictions, std::span<const double> targets, LossKind kind) {
  const Tensor& p = predictions.value();
  if (p.rows() != static_cast<Index>(targets.size())) {
    throw ContractError("autoregressive_loss: " + std::to_string(p.rows()) + " predictions for " +
                        std::to_string(targets.size()) + " targets");
  }
  if (kind == LossKind::mse) {
    if (p.cols() != 1) throw ContractError("mse loss needs one prediction column");
    Tensor t(Shape{static_cast<Index>(targets.size())});
    for (std::size_t i = 0; i < targets.size(); ++i) t[static_cast<Index>(i)] = targets[i];
    return mse_loss(predictions, t);
  }
  if (p.cols() != 2) throw ContractError("cross-entropy loss needs two logit columns");
  std::vector<int> labels(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) labels[i] = targets[i] > 0.5 ? 1 : 0;
  return cross_entropy_loss(predictions, labels);
}

AdamState AdamState::zeros_like(std::span<const ConstParamRef> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Eigen::VectorXd::Zero(p.tensor->size()));
    s.v.push_back(Eigen::VectorXd::Zero(p.tensor->size()));
  }
  return s;
}

void adam_step(std::span<const ParamRef> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = *params[i].tensor;
    if (state.m[i].size() != t.size() || state.v[i].size() != t.size()) {
      throw DimensionError("adam_step: moment shape mismatch for " + params[i].name);
    }
    if (t.has_grad() && !t.grad().allFinite()) {
      throw NumericError("adam_step: non-finite gradient in " + params[i].name);
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    if (!t.has_grad()) continue;
    const Eigen::VectorXd& g = t.grad();
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    t.vec().array() -= cfg.learning_rate * (state.m[i].array() / bc1) /
                       ((state.v[i].array() / bc2).sqrt() + cfg.eps);
  }
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (clip_grad_norm < 0.0) throw ConfigError("train.clip_grad_norm must be >= 0");
  curriculum.validate();
}

std::vector<PromptInstance> training_batch(const TaskSpec& task, const TrainConfig& cfg,
                                           std::int64_t step) {
  CounterRng len_rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(step), 0x6c656eULL}));
  const Index length = curriculum_length(step, cfg.curriculum, len_rng);
  std::vector<PromptInstance> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (Index b = 0; b < cfg.batch_size; ++b) {
    const auto index = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch_size) +
                       static_cast<std::uint64_t>(b);
    batch.push_back(gen_instance(task, length, derive_seed({cfg.seed, index})));
  }
  return batch;
}

double loss_and_gradient(Model& model, std::span<const PromptInstance> batch) {
  if (batch.empty()) throw ContractError("loss_and_gradient needs a non-empty batch");
  std::vector<EncodedPrompt> encoded;
  std::vector<double> targets;
  encoded.reserve(batch.size());
  for (const PromptInstance& inst : batch) {
    encoded.push_back(encode_prompt(inst));
    targets.insert(targets.end(), encoded.back().targets.begin(), encoded.back().targets.end());
  }
  Graph g;
  const ForwardResult fr = forward(model, g, encoded);
  // Equal lengths make the flat mean equal to the batch mean of per-prompt means.
  Var loss = autoregressive_loss(fr.target_outputs, targets, loss_for(batch.front().kind));
  const double value = loss.item();
  if (!std::isfinite(value)) return value;
  g.backward(loss);
  return value;
}

namespace {

// Keeps per-step activation buffers on the heap instead of fresh mmap pages.
void keep_large_allocations_on_heap() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

struct Snapshot {
  std::vector<Eigen::VectorXd> values;
  AdamState optimizer;
};

Snapshot take_snapshot(Model& model, const AdamState& state) {
  Snapshot s;
  for (const auto& p : model.parameters()) s.values.push_back(p.tensor->vec());
  s.optimizer = state;
  return s;
}

void restore(Model& model, const Snapshot& s, AdamState& state) {
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->vec() = s.values[i];
  state = s.optimizer;
}

void clip_gradients(std::span<const ParamRef> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.tensor->has_grad()) sq += p.tensor->grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double factor = max_norm / norm;
  for (const auto& p : params) {
    if (p.tensor->has_grad()) p.tensor->grad() *= factor;
  }
}

}  // namespace

TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg,
                  const TrainHooks& hooks, std::optional<AdamState> resume) {
  task.validate();
  cfg.validate();
  keep_large_allocations_on_heap();
  if (model.config().readout != readout_for(task.kind)) {
    throw ConfigError("model readout " + std::string(to_string(model.config().readout)) +
                      " does not match task " + std::string(to_string(task.kind)));
  }
  const auto params = model.parameters();
  TrainResult result;
  {
    std::vector<ConstParamRef> cparams;
    for (const auto& p : params) cparams.push_back({p.name, p.tensor});
    result.optimizer = resume ? std::move(*resume) : AdamState::zeros_like(cparams);
  }
  AdamState& state = result.optimizer;
  Snapshot last_good = take_snapshot(model, state);
  const std::int64_t first = state.step;
  const std::int64_t last = first + cfg.steps;
  double window = 0.0;
  std::int64_t window_n = 0;
  for (std::int64_t step = first; step < last; ++step) {
    model.zero_grad();
    const auto batch = training_batch(task, cfg, step);
    double loss = 0.0;
    try {
      loss = loss_and_gradient(model, batch);
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
      if (cfg.clip_grad_norm > 0.0) clip_gradients(params, cfg.clip_grad_norm);
      adam_step(params, state, cfg.adam);
    } catch (const NumericError& e) {
      restore(model, last_good, state);
      result.diverged = true;
      result.diagnostic = e.what();
      break;
    }
    result.step_losses.push_back(loss);
    result.steps_completed += 1;
    window += loss;
    window_n += 1;
    const std::int64_t done = step + 1;
    if (done % cfg.log_every == 0 || done == last) {
      const LossRecord rec{done, window / static_cast<double>(window_n)};
      result.trace.push_back(rec);
      if (hooks.on_log) hooks.on_log(rec);
      window = 0.0;
      window_n = 0;
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
      last_good = take_snapshot(model, state);
      if (hooks.on_checkpoint) hooks.on_checkpoint(done, model, state);
    }
  }
  model.zero_grad();
  return result;
}

GradCheckReport check_model_gradients(const ModelConfig& config, TaskKind task, std::uint64_t seed,
                                      const GradCheckOptions& options, Index batch, Index length,
                                      double jitter) {
  ModelConfig c = config;
  c.readout = readout_for(task);
  Model model(c, seed);
  CounterRng noise(derive_seed({seed, 0x6a6974ULL}));
  for (const auto& p : model.parameters()) {
    Tensor& t = *p.tensor;
    const double fan_in = t.rank() == 2 ? static_cast<double>(t.shape()[0]) : 1.0;
    for (Index i = 0; i < t.size(); ++i) t[i] += noise.normal(0.0, jitter / std::sqrt(fan_in));
  }
  TaskSpec spec;
  spec.kind = task;
  spec.seed = seed;
  std::vector<PromptInstance> instances;
  for (Index i = 0; i < batch; ++i) instances.push_back(gen_instance(spec, length, static_cast<std::uint64_t>(i)));
  std::vector<EncodedPrompt> encoded;
  std::vector<double> targets;
  for (const auto& inst : instances) {
    encoded.push_back(encode_prompt(inst));
    targets.insert(targets.end(), encoded.back().targets.begin(), encoded.back().targets.end());
  }
  const LossKind kind = loss_for(task);
  auto loss = [&](Graph& g) {
    return autoregressive_loss(forward(model, g, encoded).target_outputs, targets, kind);
  };
  GradCheckOptions o = options;
  o.seed = derive_seed({seed, options.seed});
  return grad_check(loss, model.parameters(), o);
}

double window_mean(std::span<const double> values, std::size_t first, std::size_t last) {
  if (first >= last || last > values.size()) throw ContractError("window_mean: empty or invalid range");
  return std::accumulate(values.begin() + static_cast<std::ptrdiff_t>(first),
                         values.begin() + static_cast<std::ptrdiff_t>(last), 0.0) /
         static_cast<double>(last - first);
}

}  // namespace ssalab
