#include "cli.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "ssalab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return ssalab::cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) out.push_back(line);
  return out;
}

fs::path write_config(const fs::path& dir) {
  const fs::path file = dir / "run.json";
  std::ofstream(file) << R"({
    "seed": 3,
    "task": {"kind": "linear_fn"},
    "model": {"layers": 1, "heads": 2, "emb_dim": 8, "scoring": {"kind": "ssa"}},
    "train": {"steps": 40, "batch_size": 4, "log_every": 2,
              "curriculum": {"mode": "ramp", "min_length": 1, "max_length": 10, "warmup_steps": 10}}
  })";
  return file;
}

}  // namespace

TEST(CliTrain, RepeatedRunsGiveIdenticalCheckpoints) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-train");
  const fs::path cfg = write_config(dir);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "a").string(), "--quiet"}), 0);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "b").string(), "--quiet"}), 0);
  EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
  const auto sa = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  const auto sb = nlohmann::json::parse(slurp(dir / "b" / "summary.json"));
  EXPECT_EQ(sa["checkpoint_digest"], sb["checkpoint_digest"]);
  EXPECT_EQ(sa["steps_completed"], 40);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "c").string(), "--seed", "4", "--quiet"}), 0);
  EXPECT_NE(slurp(dir / "a" / "model.ckpt"), slurp(dir / "c" / "model.ckpt"));
  const auto resolved = nlohmann::json::parse(slurp(dir / "c" / "config.resolved.json"));
  EXPECT_EQ(resolved["seed"], 4);
}

TEST(CliTrain, StepOverrideControlsLogRows) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-steps");
  const fs::path cfg = write_config(dir);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "o").string(), "--steps", "10", "--quiet"}), 0);
  const auto rows = lines(slurp(dir / "o" / "loss.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "step,loss");
  EXPECT_EQ(rows[1].substr(0, 2), "2,");
  EXPECT_EQ(rows[5].substr(0, 3), "10,");
}

TEST(CliTrain, MissingOrInvalidConfigFails) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-missing");
  EXPECT_NE(run({"train", "--config", (dir / "none.json").string(), "--out", (dir / "o").string()}), 0);
  EXPECT_FALSE(fs::exists(dir / "o"));
  std::ofstream(dir / "bad.json") << R"({"model": {"scoring": {"kind": "sparsemax"}}})";
  EXPECT_NE(run({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()}), 0);
  EXPECT_FALSE(fs::exists(dir / "o"));
  EXPECT_NE(run({"train"}), 0);
}

TEST(CliEvalGrid, OracleDefaultGridIsZeroAndThreadIndependent) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-grid");
  const std::vector<std::string> common{"eval-grid", "--oracle", "--task", "every", "--samples", "4", "--batches", "4"};
  auto args = common;
  args.insert(args.end(), {"--out", (dir / "one").string()});
  args.insert(args.begin(), {"--threads", "1"});
  ASSERT_EQ(run(args), 0);
  args = common;
  args.insert(args.end(), {"--out", (dir / "four").string()});
  args.insert(args.begin(), {"--threads", "4"});
  ASSERT_EQ(run(args), 0);
  for (const char* f : {"grid.csv", "grid.pgm", "grid.json"}) {
    EXPECT_EQ(slurp(dir / "one" / f), slurp(dir / "four" / f)) << f;
  }
  const auto rows = lines(slurp(dir / "one" / "grid.csv"));
  ASSERT_EQ(rows.size(), 21u);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    std::stringstream ss(rows[r]);
    std::string cell;
    std::getline(ss, cell, ',');
    int count = 0;
    while (std::getline(ss, cell, ',')) {
      EXPECT_EQ(std::stod(cell), 0.0);
      ++count;
    }
    EXPECT_EQ(count, 10);
  }
  const auto meta = nlohmann::json::parse(slurp(dir / "one" / "grid.json"));
  EXPECT_EQ(meta["task"], "every");
  EXPECT_TRUE(meta["failures"].empty());
}

TEST(CliEvalGrid, ReadoutMismatchFails) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-mismatch");
  const fs::path cfg = write_config(dir);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "m").string(), "--steps", "2", "--quiet"}), 0);
  EXPECT_NE(run({"eval-grid", "--checkpoint", (dir / "m" / "model.ckpt").string(), "--task", "every", "--out",
                 (dir / "g").string()}),
            0);
  EXPECT_NE(run({"eval-grid", "--out", (dir / "g").string()}), 0);
}

TEST(CliProbe, ScoreCurve) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-curve");
  ASSERT_EQ(run({"probe", "--mode", "score-curve", "--out", dir.string()}), 0);
  const std::string csv = slurp(dir / "score_curve.csv");
  EXPECT_NE(csv.find("0.982014"), std::string::npos);
  EXPECT_EQ(lines(csv).front().substr(0, 4), "gap,");
}

TEST(CliProbe, GradCheckPasses) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-grad");
  ASSERT_EQ(run({"probe", "--mode", "grad-check", "--layers", "1", "--heads", "1", "--emb-dim", "8", "--scoring",
                 "ssa", "--out", dir.string()}),
            0);
  const auto j = nlohmann::json::parse(slurp(dir / "grad_check.json"));
  EXPECT_TRUE(j["passed"].get<bool>());
}

TEST(CliProbe, BoundaryOracleAndAttention) {
  const fs::path dir = ssalab::testing::scratch_dir("cli-probe");
  ASSERT_EQ(run({"probe", "--mode", "boundary", "--oracle", "--a", "10", "--out", (dir / "b").string()}), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "b" / "boundary.json"));
  EXPECT_EQ(j["upper"], "none");
  EXPECT_EQ(j["lower"], "none");
  const fs::path cfg = write_config(dir);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "m").string(), "--steps", "2", "--quiet"}), 0);
  ASSERT_EQ(run({"probe", "--mode", "attn", "--checkpoint", (dir / "m" / "model.ckpt").string(), "--xs", "0.5,1,-2",
                 "--out", (dir / "a").string()}),
            0);
  EXPECT_TRUE(fs::exists(dir / "a" / "attention.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "attention_l0_h1.csv"));
}

TEST(CliProbe, UnknownModeIsAUsageError) {
  EXPECT_NE(run({"probe", "--mode", "dance"}), 0);
  EXPECT_NE(run({"frobnicate"}), 0);
}
