#include "ssalab/checkpoint.hpp"
#include "ssalab/config.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace ssalab;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

ModelConfig ssa_model() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.emb_dim = 8;
  c.max_positions = 96;
  c.scoring.kind = ScoreKind::ssa;
  c.scoring.ssa_n_trainable = true;
  return c;
}

}  // namespace

TEST(Config, MinimalDocumentResolvesSeedAndReadout) {
  const RunConfig c = run_config_from_json(json::parse(R"({"seed": 5, "task": {"kind": "some"}})"));
  EXPECT_EQ(c.task.seed, 5u);
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.model.readout, Readout::binary);
  EXPECT_FALSE(c.eval.has_value());
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_NE(config_error(json::parse(R"({"model": {"scoring": {"knd": "ssa"}}})")).find("model.scoring.knd"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"extra": 1})")).find("extra"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"train": {"curriculum": {"mode": "zigzag"}}})")).find("train.curriculum.mode"),
            std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"model": {"layers": "two"}})")).find("model.layers"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"model": {"scoring": {"kind": "sparsemax"}}})")).find("model.scoring.kind"),
            std::string::npos);
}

TEST(Config, StageSeedsAndReadoutAreRejected) {
  EXPECT_NE(config_error(json::parse(R"({"task": {"seed": 3}})")).find("task.seed"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"train": {"seed": 3}})")).find("train.seed"), std::string::npos);
  EXPECT_NE(config_error(json::parse(R"({"model": {"readout": "binary"}})")).find("model.readout"),
            std::string::npos);
}

TEST(Config, RangeChecks) {
  EXPECT_FALSE(config_error(json::parse(R"({"train": {"batch_size": 0}})")).empty());
  EXPECT_FALSE(config_error(json::parse(R"({"task": {"sigma_input": -1.0}})")).empty());
  EXPECT_FALSE(config_error(json::parse(R"({"model": {"max_positions": 4}})")).empty());
  EXPECT_THROW(parse_json_text("{\"a\": ", "inline"), ConfigError);
}

TEST(Config, RoundTrip) {
  const auto j = json::parse(R"({
    "seed": 9,
    "task": {"kind": "every", "sigma_input": 2.0, "min_length": 11, "max_length": 40},
    "model": {"layers": 2, "heads": 2, "emb_dim": 16,
              "scoring": {"kind": "hybrid", "hybrid_assignment": ["ssa", "softmax"]}},
    "train": {"steps": 7, "learning_rate": 0.001,
              "curriculum": {"mode": "fixed", "length": 40}},
    "eval": {"rows": {"name": "length", "values": [10, 20]}, "samples": 3},
    "output_dir": "out"
  })");
  const RunConfig a = run_config_from_json(j);
  EXPECT_EQ(a.model.scoring.kind, ScoreKind::hybrid);
  ASSERT_TRUE(a.eval.has_value());
  EXPECT_EQ(a.eval->quantifier.samples, 3);
  EXPECT_EQ(a.eval->cols.values.size(), 10u);
  const json once = to_json(a);
  const RunConfig b = run_config_from_json(once);
  EXPECT_EQ(to_json(b), once);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& entry : std::filesystem::directory_iterator(SSALAB_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_run_config(entry.path())) << entry.path();
  }
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Model model(ssa_model(), 4);
  CheckpointMeta meta;
  meta.step = 12;
  meta.model_seed = 4;
  meta.data_seed = 6;
  meta.extra = {{"note", "x"}};
  const auto bytes = save_checkpoint(model, nullptr, meta);
  const LoadedCheckpoint back = load_checkpoint(bytes);
  EXPECT_FALSE(back.optimizer.has_value());
  EXPECT_EQ(back.meta.step, 12);
  EXPECT_EQ(back.meta.data_seed, 6u);
  EXPECT_EQ(back.meta.extra["note"], "x");
  EXPECT_EQ(save_checkpoint(back.model, nullptr, back.meta), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "SSALABCK");
}

TEST(Checkpoint, LoadedModelComputesTheSameOutputs) {
  const Model model(ssa_model(), 4);
  const LoadedCheckpoint back = load_checkpoint(save_checkpoint(model, nullptr, {}));
  TaskSpec task;
  task.seed = 2;
  std::vector<PromptInstance> batch;
  for (std::uint64_t i = 0; i < 3; ++i) batch.push_back(gen_instance(task, 9, i));
  const auto a = ModelPredictor(model).predict(batch), b = ModelPredictor(back.model).predict(batch);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  Model model(ssa_model(), 1);
  TaskSpec task;
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.curriculum = CurriculumSchedule::fixed(4);
  const TrainResult r = train(model, task, cfg);
  const auto bytes = save_checkpoint(model, &r.optimizer, {});
  const LoadedCheckpoint back = load_checkpoint(bytes);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 3);
  ASSERT_EQ(back.optimizer->m.size(), r.optimizer.m.size());
  for (std::size_t i = 0; i < r.optimizer.m.size(); ++i) {
    EXPECT_EQ(back.optimizer->m[i], r.optimizer.m[i]);
    EXPECT_EQ(back.optimizer->v[i], r.optimizer.v[i]);
  }
}

TEST(Checkpoint, CorruptDataIsRejected) {
  const auto bytes = save_checkpoint(Model(ssa_model(), 2), nullptr, {});
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{15}, std::size_t{40}, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(load_checkpoint(truncated), CheckpointError) << cut;
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(load_checkpoint(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[8] = 99;
  EXPECT_THROW(load_checkpoint(bad_version), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(load_checkpoint(trailing), CheckpointError);
}

TEST(Checkpoint, FilesAndDigest) {
  const auto dir = ssalab::testing::scratch_dir("checkpoint");
  const auto bytes = save_checkpoint(Model(ssa_model(), 2), nullptr, {});
  write_checkpoint_file(dir / "a.ckpt", bytes);
  EXPECT_EQ(read_checkpoint_file(dir / "a.ckpt"), bytes);
  EXPECT_THROW(read_checkpoint_file(dir / "missing.ckpt"), CheckpointError);
  EXPECT_EQ(digest_hex({}), "cbf29ce484222325");
  EXPECT_EQ(digest_hex({'a'}), "af63dc4c8601ec8c");
  const std::string d = digest_hex(bytes);
  EXPECT_EQ(d.size(), 16u);
  EXPECT_NE(d, digest_hex(save_checkpoint(Model(ssa_model(), 3), nullptr, {})));
}
