#pragma once

#include "ssalab/rng.hpp"
#include "ssalab/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

namespace ssalab {

enum class TaskKind { every, some, linear_fn };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);
constexpr bool is_quantifier(TaskKind kind) { return kind != TaskKind::linear_fn; }

struct TaskSpec {
  TaskKind kind = TaskKind::linear_fn;
  double sigma_input = 1.0;  // D_I = N(0, sigma_input)
  double sigma_fn = 1.0;     // D_F = N(0, sigma_fn), linear_fn only
  Index min_length = 1;
  Index max_length = 40;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One in-context prompt: inputs, per-prefix targets and, for linear_fn, the function.
struct PromptInstance {
  TaskKind kind = TaskKind::linear_fn;
  std::vector<double> xs;
  /// linear_fn: a * x_i + b. Quantifiers: 1.0 for True, 0.0 for False.
  std::vector<double> ys;
  double a = 0.0;
  double b = 0.0;
  std::uint64_t seed = 0;

  Index length() const { return static_cast<Index>(xs.size()); }
  bool truth(Index i) const { return ys[static_cast<std::size_t>(i)] > 0.5; }
};

/// "every": all elements > 0. "some": at least one element > 0. Zero is not positive.
bool quantifier_truth(TaskKind kind, std::span<const double> prefix);

/// Instance with the given inputs and labels recomputed from them.
PromptInstance make_quantifier_instance(TaskKind kind, std::vector<double> xs);
PromptInstance make_linear_instance(double a, double b, std::vector<double> xs);

/// Draws from `rng`: linear_fn takes a, b first, then the inputs.
PromptInstance gen_instance(const TaskSpec& spec, Index length, CounterRng& rng);
/// Instance number `index` of the stream keyed by `spec.seed`.
PromptInstance gen_instance(const TaskSpec& spec, Index length, std::uint64_t index);

/// Overwrites x at `position` and recomputes every target.
PromptInstance make_deviant(const PromptInstance& instance, Index position, double magnitude);

enum class TokenKind : std::uint8_t { scalar, boolean };

struct Token {
  TokenKind kind = TokenKind::scalar;
  double value = 0.0;  // booleans: 0 or 1
};

/// Interleaved stream x1, y1, ..., xk; the model predicts y_i while reading x_i.
struct EncodedPrompt {
  std::vector<Token> tokens;
  std::vector<Index> target_positions;
  std::vector<double> targets;

  Index length() const { return static_cast<Index>(tokens.size()); }
};

EncodedPrompt encode_prompt(const PromptInstance& instance);

struct CurriculumSchedule {
  enum class Mode { fixed, ramp };
  Mode mode = Mode::ramp;
  Index length = 40;  // fixed
  Index min_length = 1;
  Index max_length = 40;
  std::int64_t warmup_steps = 10000;  // 0 samples uniformly from the full range

  static CurriculumSchedule fixed(Index length);
  static CurriculumSchedule ramp(Index min_length, Index max_length, std::int64_t warmup_steps);
  void validate() const;
};

/// Length for training step `step`; ramp grows its upper bound linearly over warmup.
Index curriculum_length(std::int64_t step, const CurriculumSchedule& schedule, CounterRng& rng);

nlohmann::json instance_to_json(const PromptInstance& instance);
PromptInstance instance_from_json(const nlohmann::json& j);
void write_jsonl(std::ostream& os, std::span<const PromptInstance> instances);

}  // namespace ssalab
