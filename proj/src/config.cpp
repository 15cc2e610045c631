#include "ssalab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace ssalab {

namespace {

using nlohmann::json;

const char* type_name(const json& v) { return v.type_name(); }

/// Strict reader over one JSON object.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object, got " + type_name(j));
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected a boolean, got " + type_name(*v));
      out = v->get<bool>();
    }
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number, got " + type_name(*v));
      out = v->get<double>();
    }
  }

  void get(const std::string& key, std::int64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + ": expected an integer, got " + type_name(*v));
      if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) {
        throw ConfigError(at(key) + ": integer out of range");
      }
      out = v->get<std::int64_t>();
    }
  }

  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        throw ConfigError(at(key) + ": expected a non-negative integer, got " + type_name(*v));
      }
      out = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string, got " + type_name(*v));
      out = v->get<std::string>();
    }
  }

  template <typename Parse, typename T>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string name;
    if (!has(key)) {
      find(key);
      return;
    }
    get(key, name);
    try {
      out = parse(name);
    } catch (const ConfigError& e) {
      throw ConfigError(at(key) + ": " + e.what());
    }
  }

  void get(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(at(key) + ": expected an array, got " + type_name(*v));
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number()) {
          throw ConfigError(at(key) + "[" + std::to_string(i) + "]: expected a number");
        }
        out.push_back((*v)[i].get<double>());
      }
    }
  }

  /// Rejects keys that no reader asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + what);
  }
}

std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

}  // namespace

json to_json(const ScoringConfig& c) {
  json j{{"kind", to_string(c.kind)},
         {"ssa_b_init", c.ssa_b_init},
         {"ssa_n", c.ssa_n},
         {"ssa_b_trainable", c.ssa_b_trainable},
         {"ssa_n_trainable", c.ssa_n_trainable}};
  if (c.kind == ScoreKind::hybrid) {
    json a = json::array();
    for (ScoreKind k : c.hybrid_assignment) a.push_back(to_string(k));
    j["hybrid_assignment"] = a;
  }
  return j;
}

ScoringConfig scoring_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  ScoringConfig c;
  f.get_enum("kind", c.kind, parse_score_kind);
  f.get("ssa_b_init", c.ssa_b_init);
  f.get("ssa_n", c.ssa_n);
  f.get("ssa_b_trainable", c.ssa_b_trainable);
  f.get("ssa_n_trainable", c.ssa_n_trainable);
  if (const json* a = f.find("hybrid_assignment")) {
    if (!a->is_array()) throw ConfigError(f.at("hybrid_assignment") + ": expected an array of scoring kinds");
    for (std::size_t i = 0; i < a->size(); ++i) {
      const std::string at = f.at("hybrid_assignment") + "[" + std::to_string(i) + "]";
      if (!(*a)[i].is_string()) throw ConfigError(at + ": expected a string");
      c.hybrid_assignment.push_back(with_path(at, [&] { return parse_score_kind((*a)[i].get<std::string>()); }));
    }
  }
  f.finish();
  return c;
}

json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"emb_dim", c.emb_dim},
          {"mlp_enabled", c.mlp_enabled},
          {"ablation", to_string(c.ablation)},
          {"positional", to_string(c.positional)},
          {"max_positions", c.max_positions},
          {"layer_norm", c.layer_norm},
          {"mlp_ratio", c.mlp_ratio},
          {"scoring", to_json(c.scoring)},
          {"readout", to_string(c.readout)}};
}

ModelConfig model_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  ModelConfig c;
  f.get("layers", c.layers);
  f.get("heads", c.heads);
  f.get("emb_dim", c.emb_dim);
  f.get("mlp_enabled", c.mlp_enabled);
  f.get_enum("ablation", c.ablation, parse_ablation);
  f.get_enum("positional", c.positional, parse_positional);
  f.get("max_positions", c.max_positions);
  f.get("layer_norm", c.layer_norm);
  f.get("mlp_ratio", c.mlp_ratio);
  f.get_enum("readout", c.readout, parse_readout);
  if (const json* s = f.find("scoring")) {
    // A variant name in place of the per-head list expands against the head count.
    json copy = *s;
    std::optional<HybridVariant> variant;
    if (copy.is_object() && copy.contains("hybrid_assignment") && copy["hybrid_assignment"].is_string()) {
      const std::string name = copy["hybrid_assignment"].get<std::string>();
      if (name == "soft_avg") {
        variant = HybridVariant::soft_avg;
      } else if (name == "four_fn") {
        variant = HybridVariant::four_fn;
      } else {
        throw ConfigError(join(path, "scoring.hybrid_assignment") + ": unknown hybrid variant '" + name + "'");
      }
      copy.erase("hybrid_assignment");
    }
    c.scoring = scoring_from_json(copy, join(path, "scoring"));
    if (variant) {
      c.scoring.hybrid_assignment =
          with_path(join(path, "scoring.hybrid_assignment"), [&] { return hybrid_assign(c.heads, *variant); });
    }
  }
  f.finish();
  return c;
}

json to_json(const TaskSpec& c) {
  return {{"kind", to_string(c.kind)},     {"sigma_input", c.sigma_input}, {"sigma_fn", c.sigma_fn},
          {"min_length", c.min_length}, {"max_length", c.max_length},   {"seed", c.seed}};
}

TaskSpec task_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  TaskSpec c;
  f.get_enum("kind", c.kind, parse_task_kind);
  f.get("sigma_input", c.sigma_input);
  f.get("sigma_fn", c.sigma_fn);
  f.get("min_length", c.min_length);
  f.get("max_length", c.max_length);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

json to_json(const CurriculumSchedule& c) {
  if (c.mode == CurriculumSchedule::Mode::fixed) return {{"mode", "fixed"}, {"length", c.length}};
  return {{"mode", "ramp"},
          {"min_length", c.min_length},
          {"max_length", c.max_length},
          {"warmup_steps", c.warmup_steps}};
}

CurriculumSchedule curriculum_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  CurriculumSchedule c;
  std::string mode = "ramp";
  f.get("mode", mode);
  if (mode == "fixed") {
    c.mode = CurriculumSchedule::Mode::fixed;
    f.get("length", c.length);
  } else if (mode == "ramp") {
    f.get("min_length", c.min_length);
    f.get("max_length", c.max_length);
    f.get("warmup_steps", c.warmup_steps);
  } else {
    throw ConfigError(f.at("mode") + ": unknown curriculum mode '" + mode + "'");
  }
  f.finish();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"curriculum", to_json(c.curriculum)},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"log_every", c.log_every},
          {"clip_grad_norm", c.clip_grad_norm}};
}

TrainConfig train_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  TrainConfig c;
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("learning_rate", c.adam.learning_rate);
  f.get("beta1", c.adam.beta1);
  f.get("beta2", c.adam.beta2);
  f.get("eps", c.adam.eps);
  if (const json* cur = f.find("curriculum")) c.curriculum = curriculum_from_json(*cur, join(path, "curriculum"));
  f.get("seed", c.seed);
  f.get("checkpoint_every", c.checkpoint_every);
  f.get("log_every", c.log_every);
  f.get("clip_grad_norm", c.clip_grad_norm);
  f.finish();
  return c;
}

json to_json(const GridSpec& c) {
  json j{{"task", to_string(c.task)},
         {"rows", {{"name", c.rows.name}, {"values", c.rows.values}}},
         {"cols", {{"name", c.cols.name}, {"values", c.cols.values}}},
         {"seed", c.seed}};
  if (is_quantifier(c.task)) {
    j["samples"] = c.quantifier.samples;
    j["batches"] = c.quantifier.batches;
    j["all_positions"] = c.quantifier.all_positions;
  } else {
    j["functions"] = c.linear.functions;
    j["batches"] = c.linear.batches;
    j["points"] = c.linear.points;
    j["first_position"] = c.linear.first_position;
  }
  return j;
}

GridSpec grid_from_json(const json& j, TaskKind task, const std::string& path) {
  Fields f(j, path);
  f.get_enum("task", task, parse_task_kind);
  GridSpec c = GridSpec::defaults(task);
  for (const char* axis : {"rows", "cols"}) {
    if (const json* a = f.find(axis)) {
      GridAxis& out = std::string(axis) == "rows" ? c.rows : c.cols;
      Fields af(*a, join(path, axis));
      af.get("name", out.name);
      af.get("values", out.values);
      af.finish();
    }
  }
  f.get("seed", c.seed);
  if (is_quantifier(task)) {
    f.get("samples", c.quantifier.samples);
    f.get("batches", c.quantifier.batches);
    f.get("all_positions", c.quantifier.all_positions);
  } else {
    f.get("functions", c.linear.functions);
    f.get("batches", c.linear.batches);
    f.get("points", c.linear.points);
    f.get("first_position", c.linear.first_position);
  }
  f.finish();
  return c;
}

void RunConfig::resolve() {
  task.seed = seed;
  train.seed = seed;
  model.readout = readout_for(task.kind);
  if (eval) eval->task = task.kind;
}

void RunConfig::validate() const {
  task.validate();
  model.validate();
  train.validate();
  if (model.readout != readout_for(task.kind)) throw ConfigError("model.readout does not match task.kind");
  const Index longest = 2 * std::max(task.max_length, train.curriculum.mode == CurriculumSchedule::Mode::fixed
                                                          ? train.curriculum.length
                                                          : train.curriculum.max_length) - 1;
  if (longest > model.max_positions) {
    throw ConfigError("model.max_positions " + std::to_string(model.max_positions) + " is below the " +
                      std::to_string(longest) + "-token training prompts");
  }
  if (eval) eval->validate();
}

json to_json(const RunConfig& c) {
  json j{{"task", to_json(c.task)}, {"model", to_json(c.model)}, {"train", to_json(c.train)},
         {"seed", c.seed}};
  j["task"].erase("seed");
  j["train"].erase("seed");
  j["model"].erase("readout");
  if (c.eval) j["eval"] = to_json(*c.eval);
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  Fields f(j, "");
  RunConfig c;
  f.get("seed", c.seed);
  f.get("output_dir", c.output_dir);
  if (const json* t = f.find("task")) {
    if (t->is_object() && t->contains("seed")) throw ConfigError("task.seed: set the run-level seed instead");
    c.task = task_from_json(*t, "task");
  }
  if (const json* m = f.find("model")) {
    if (m->is_object() && m->contains("readout")) throw ConfigError("model.readout: derived from task.kind");
    c.model = model_from_json(*m, "model");
  }
  if (const json* t = f.find("train")) {
    if (t->is_object() && t->contains("seed")) throw ConfigError("train.seed: set the run-level seed instead");
    c.train = train_from_json(*t, "train");
  }
  if (const json* e = f.find("eval")) c.eval = grid_from_json(*e, c.task.kind, "eval");
  f.finish();
  c.resolve();
  c.validate();
  return c;
}

json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": invalid JSON: " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError(file.string() + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(parse_json_text(ss.str(), file.string()));
}

}  // namespace ssalab
