#include "ssalab/tasks.hpp"

#include <algorithm>
#include <ostream>

namespace ssalab {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::every:
      return "every";
    case TaskKind::some:
      return "some";
    case TaskKind::linear_fn:
      return "linear_fn";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "every") return TaskKind::every;
  if (name == "some") return TaskKind::some;
  if (name == "linear_fn") return TaskKind::linear_fn;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (!(sigma_input > 0.0)) throw ConfigError("task.sigma_input must be > 0");
  if (!(sigma_fn > 0.0)) throw ConfigError("task.sigma_fn must be > 0");
  if (min_length < 1) throw ConfigError("task.min_length must be >= 1");
  if (max_length < min_length) throw ConfigError("task.max_length must be >= task.min_length");
}

bool quantifier_truth(TaskKind kind, std::span<const double> prefix) {
  if (prefix.empty()) throw ContractError("quantifier_truth needs a non-empty prefix");
  const auto positive = [](double x) { return x > 0.0; };
  switch (kind) {
    case TaskKind::every:
      return std::all_of(prefix.begin(), prefix.end(), positive);
    case TaskKind::some:
      return std::any_of(prefix.begin(), prefix.end(), positive);
    case TaskKind::linear_fn:
      break;
  }
  throw ContractError("quantifier_truth called for a non-quantifier task");
}

namespace {

// Single pass over prefixes; equivalent to quantifier_truth on each prefix.
void relabel(PromptInstance& inst) {
  inst.ys.resize(inst.xs.size());
  if (inst.kind == TaskKind::linear_fn) {
    for (std::size_t i = 0; i < inst.xs.size(); ++i) inst.ys[i] = inst.a * inst.xs[i] + inst.b;
    return;
  }
  bool state = inst.kind == TaskKind::every;
  for (std::size_t i = 0; i < inst.xs.size(); ++i) {
    const bool pos = inst.xs[i] > 0.0;
    state = inst.kind == TaskKind::every ? (state && pos) : (state || pos);
    inst.ys[i] = state ? 1.0 : 0.0;
  }
}

}  // namespace

PromptInstance make_quantifier_instance(TaskKind kind, std::vector<double> xs) {
  if (!is_quantifier(kind)) throw ContractError("make_quantifier_instance needs every or some");
  PromptInstance inst;
  inst.kind = kind;
  inst.xs = std::move(xs);
  relabel(inst);
  return inst;
}

PromptInstance make_linear_instance(double a, double b, std::vector<double> xs) {
  PromptInstance inst;
  inst.kind = TaskKind::linear_fn;
  inst.a = a;
  inst.b = b;
  inst.xs = std::move(xs);
  relabel(inst);
  return inst;
}

PromptInstance gen_instance(const TaskSpec& spec, Index length, CounterRng& rng) {
  if (length < 1) throw ContractError("gen_instance needs length >= 1");
  PromptInstance inst;
  inst.kind = spec.kind;
  inst.seed = rng.key();
  if (spec.kind == TaskKind::linear_fn) {
    inst.a = rng.normal(0.0, spec.sigma_fn);
    inst.b = rng.normal(0.0, spec.sigma_fn);
  }
  inst.xs.resize(static_cast<std::size_t>(length));
  for (double& x : inst.xs) x = rng.normal(0.0, spec.sigma_input);
  relabel(inst);
  return inst;
}

PromptInstance gen_instance(const TaskSpec& spec, Index length, std::uint64_t index) {
  CounterRng rng(derive_seed({spec.seed, index}));
  return gen_instance(spec, length, rng);
}

PromptInstance make_deviant(const PromptInstance& instance, Index position, double magnitude) {
  if (position < 0 || position >= instance.length()) {
    throw ContractError("make_deviant: position " + std::to_string(position) +
                        " outside instance of length " + std::to_string(instance.length()));
  }
  PromptInstance out = instance;
  out.xs[static_cast<std::size_t>(position)] = magnitude;
  relabel(out);
  return out;
}

EncodedPrompt encode_prompt(const PromptInstance& instance) {
  EncodedPrompt enc;
  const Index k = instance.length();
  const TokenKind ykind = is_quantifier(instance.kind) ? TokenKind::boolean : TokenKind::scalar;
  enc.tokens.reserve(static_cast<std::size_t>(k > 0 ? 2 * k - 1 : 0));
  for (Index i = 0; i < k; ++i) {
    const auto si = static_cast<std::size_t>(i);
    enc.target_positions.push_back(static_cast<Index>(enc.tokens.size()));
    enc.targets.push_back(instance.ys[si]);
    enc.tokens.push_back({TokenKind::scalar, instance.xs[si]});
    if (i + 1 < k) enc.tokens.push_back({ykind, instance.ys[si]});
  }
  return enc;
}

CurriculumSchedule CurriculumSchedule::fixed(Index length) {
  CurriculumSchedule s;
  s.mode = Mode::fixed;
  s.length = length;
  s.min_length = length;
  s.max_length = length;
  return s;
}

CurriculumSchedule CurriculumSchedule::ramp(Index min_length, Index max_length,
                                            std::int64_t warmup_steps) {
  CurriculumSchedule s;
  s.mode = Mode::ramp;
  s.min_length = min_length;
  s.max_length = max_length;
  s.length = max_length;
  s.warmup_steps = warmup_steps;
  return s;
}

void CurriculumSchedule::validate() const {
  if (mode == Mode::fixed) {
    if (length < 1) throw ConfigError("curriculum.length must be >= 1");
    return;
  }
  if (min_length < 1 || max_length < min_length) {
    throw ConfigError("curriculum needs 1 <= min_length <= max_length");
  }
  if (warmup_steps < 0) throw ConfigError("curriculum.warmup_steps must be >= 0");
}

Index curriculum_length(std::int64_t step, const CurriculumSchedule& schedule, CounterRng& rng) {
  if (step < 0) throw ContractError("curriculum_length needs step >= 0");
  if (schedule.mode == CurriculumSchedule::Mode::fixed) return schedule.length;
  Index upper = schedule.max_length;
  if (schedule.warmup_steps > 0 && step < schedule.warmup_steps) {
    const Index growth = (schedule.max_length - schedule.min_length) * step / schedule.warmup_steps;
    upper = schedule.min_length + growth;
  }
  return rng.uniform_int(schedule.min_length, upper);
}

nlohmann::json instance_to_json(const PromptInstance& instance) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(instance.kind));
  j["xs"] = instance.xs;
  if (is_quantifier(instance.kind)) {
    std::vector<bool> labels;
    for (Index i = 0; i < instance.length(); ++i) labels.push_back(instance.truth(i));
    j["ys"] = labels;
  } else {
    j["ys"] = instance.ys;
    j["a"] = instance.a;
    j["b"] = instance.b;
  }
  j["seed"] = instance.seed;
  return j;
}

PromptInstance instance_from_json(const nlohmann::json& j) {
  const TaskKind kind = parse_task_kind(j.at("kind").get<std::string>());
  auto xs = j.at("xs").get<std::vector<double>>();
  PromptInstance inst = kind == TaskKind::linear_fn
                            ? make_linear_instance(j.at("a").get<double>(), j.at("b").get<double>(),
                                                   std::move(xs))
                            : make_quantifier_instance(kind, std::move(xs));
  inst.seed = j.value("seed", std::uint64_t{0});
  return inst;
}

void write_jsonl(std::ostream& os, std::span<const PromptInstance> instances) {
  for (const PromptInstance& inst : instances) os << instance_to_json(inst).dump() << '\n';
}

}  // namespace ssalab
