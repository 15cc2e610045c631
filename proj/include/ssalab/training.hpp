#pragma once

#include "ssalab/grad_check.hpp"
#include "ssalab/model.hpp"
#include "ssalab/tasks.hpp"
#include "ssalab/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssalab {

enum class LossKind { mse, cross_entropy };

constexpr LossKind loss_for(TaskKind kind) {
  return is_quantifier(kind) ? LossKind::cross_entropy : LossKind::mse;
}

/// Mean per-target loss. `predictions` has one row per target: 1 column for
/// mse, 2 logits (False, True) for cross-entropy with targets 0/1.
Var autoregressive_loss(Var predictions, std::span<const double> targets, LossKind kind);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
  std::int64_t step = 0;

  static AdamState zeros_like(std::span<const ConstParamRef> params);
};

/// Bias-corrected Adam update on every parameter that tracks a gradient.
/// Throws NumericError, leaving parameters and state untouched, on any
/// non-finite gradient.
void adam_step(std::span<const ParamRef> params, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  std::int64_t steps = 50000;
  Index batch_size = 64;
  AdamConfig adam;
  CurriculumSchedule curriculum = CurriculumSchedule::ramp(1, 40, 10000);
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::int64_t log_every = 100;
  double clip_grad_norm = 0.0;        // 0 disables clipping

  void validate() const;
};

/// Mean training loss over one logging window ending at `step` (1-based).
struct LossRecord {
  std::int64_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::vector<double> step_losses;
  AdamState optimizer;
  std::int64_t steps_completed = 0;
  bool diverged = false;
  std::string diagnostic;
};

struct TrainHooks {
  std::function<void(std::int64_t step, const Model&, const AdamState&)> on_checkpoint;
  std::function<void(const LossRecord&)> on_log;
};

/// Training batch for `step`: a curriculum length and `batch_size` instances.
std::vector<PromptInstance> training_batch(const TaskSpec& task, const TrainConfig& cfg,
                                           std::int64_t step);

/// One forward/backward pass on a fixed batch. Leaves gradients in the model.
double loss_and_gradient(Model& model, std::span<const PromptInstance> batch);

/// Runs `cfg.steps` optimiser steps, continuing from `resume` when given.
/// On a non-finite loss or gradient the model is restored to the last
/// checkpointed (or initial) parameters and training halts.
TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg,
                  const TrainHooks& hooks = {}, std::optional<AdamState> resume = std::nullopt);

/// Finite-difference check of the full forward pass plus training loss on a
/// small batch of `task` prompts. The check point is a fresh initialisation
/// with N(0, jitter^2 / fan_in) noise added to every parameter, which moves
/// it off the near-linear regime of the small initial weights.
GradCheckReport check_model_gradients(const ModelConfig& config, TaskKind task, std::uint64_t seed,
                                      const GradCheckOptions& options = {}, Index batch = 2,
                                      Index length = 6, double jitter = 1.0);

/// Mean of `values[first, last)`.
double window_mean(std::span<const double> values, std::size_t first, std::size_t last);

}  // namespace ssalab
