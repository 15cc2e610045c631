#pragma once

#include "ssalab/evaluation.hpp"
#include "ssalab/model.hpp"
#include "ssalab/scoring.hpp"
#include "ssalab/tasks.hpp"
#include "ssalab/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace ssalab {

// JSON mapping for every configuration type. Readers are strict: unknown
// keys and wrongly typed values throw ConfigError naming the field path,
// e.g. "model.scoring.kind". Absent keys keep their defaults.

nlohmann::json to_json(const ScoringConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TaskSpec& c);
nlohmann::json to_json(const CurriculumSchedule& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const GridSpec& c);

ScoringConfig scoring_from_json(const nlohmann::json& j, const std::string& path = "scoring");
ModelConfig model_from_json(const nlohmann::json& j, const std::string& path = "model");
TaskSpec task_from_json(const nlohmann::json& j, const std::string& path = "task");
CurriculumSchedule curriculum_from_json(const nlohmann::json& j, const std::string& path = "curriculum");
TrainConfig train_from_json(const nlohmann::json& j, const std::string& path = "train");
/// Axes default to GridSpec::defaults for `task` when absent.
GridSpec grid_from_json(const nlohmann::json& j, TaskKind task, const std::string& path = "eval");

/// One document combining every stage of a run.
///
/// `seed` keys the model initialisation, the training stream and the task
/// stream. The model readout always follows the task.
struct RunConfig {
  TaskSpec task;
  ModelConfig model;
  TrainConfig train;
  std::optional<GridSpec> eval;
  std::string output_dir;
  std::uint64_t seed = 0;

  /// Pushes `seed` into the task and training configs and the readout into the model.
  void resolve();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Parses, resolves and validates.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& file);

/// Parses JSON text, reporting syntax errors as ConfigError.
nlohmann::json parse_json_text(const std::string& text, const std::string& source);

}  // namespace ssalab
