#include "cli.hpp"

#include "ssalab/checkpoint.hpp"
#include "ssalab/config.hpp"
#include "ssalab/evaluation.hpp"
#include "ssalab/grad_check.hpp"
#include "ssalab/scoring.hpp"
#include "ssalab/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace ssalab::cli {

namespace {

constexpr int kFailure = 1;
constexpr int kInvalid = 2;

const char* kOutputRootEnv = "SSALAB_OUTPUT_ROOT";

fs::path output_dir(const std::string& flag, const std::string& fallback_name) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "ssalab-out") / fallback_name;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

std::vector<double> parse_list(const std::string& text, const char* flag) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (values.empty()) throw ConfigError(std::string(flag) + ": empty list");
  return values;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

/// Where predictions come from: a trained checkpoint or the ground truth.
struct Source {
  std::optional<LoadedCheckpoint> checkpoint;
  std::optional<TaskKind> checkpoint_task;
  std::unique_ptr<Predictor> predictor;
  TaskKind task = TaskKind::linear_fn;
};

Source open_source(const std::string& checkpoint, bool oracle, const std::string& task_flag) {
  Source s;
  if (oracle == !checkpoint.empty()) throw ConfigError("give exactly one of --checkpoint or --oracle");
  std::optional<TaskKind> task;
  if (!task_flag.empty()) task = parse_task_kind(task_flag);
  if (oracle) {
    if (!task) throw ConfigError("--oracle needs --task");
    s.task = *task;
    s.predictor = std::make_unique<OraclePredictor>(s.task);
    return s;
  }
  s.checkpoint = load_checkpoint(read_checkpoint_file(checkpoint));
  const auto& extra = s.checkpoint->meta.extra;
  if (extra.contains("task") && extra["task"].contains("kind")) {
    s.checkpoint_task = parse_task_kind(extra["task"]["kind"].get<std::string>());
  }
  if (!task) task = s.checkpoint_task;
  if (!task) {
    task = s.checkpoint->model.config().readout == Readout::binary ? TaskKind::every : TaskKind::linear_fn;
  }
  s.task = *task;
  if (readout_for(s.task) != s.checkpoint->model.config().readout) {
    throw ConfigError("checkpoint readout " + std::string(to_string(s.checkpoint->model.config().readout)) +
                      " does not match task " + std::string(to_string(s.task)));
  }
  s.predictor = std::make_unique<ModelPredictor>(s.checkpoint->model, fs::path(checkpoint).filename().string());
  return s;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  bool quiet = false;
};

int cmd_train(const TrainArgs& args) {
  RunConfig cfg = load_run_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (args.steps) cfg.train.steps = *args.steps;
  cfg.resolve();
  cfg.validate();
  const fs::path dir = output_dir(args.out.empty() ? cfg.output_dir : args.out, "train-" + std::to_string(cfg.seed));
  fs::create_directories(dir);
  write_text(dir / "config.resolved.json", to_json(cfg).dump(2) + "\n");

  Model model(cfg.model, cfg.seed);
  CheckpointMeta meta;
  meta.model_seed = cfg.seed;
  meta.data_seed = cfg.seed;
  meta.extra = {{"task", to_json(cfg.task)}, {"train", to_json(cfg.train)}};
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::int64_t step, const Model& m, const AdamState& s) {
    CheckpointMeta mm = meta;
    mm.step = step;
    write_checkpoint_file(dir / ("step-" + std::to_string(step) + ".ckpt"), save_checkpoint(m, &s, mm));
  };
  hooks.on_log = [&](const LossRecord& r) {
    if (!args.quiet) std::printf("step %lld loss %.6g\n", static_cast<long long>(r.step), r.loss);
    std::fflush(stdout);
  };
  const TrainResult result = train(model, cfg.task, cfg.train, hooks);

  std::ostringstream csv;
  csv << "step,loss\n";
  for (const LossRecord& r : result.trace) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%lld,%.9e\n", static_cast<long long>(r.step), r.loss);
    csv << buf;
  }
  write_text(dir / "loss.csv", csv.str());
  meta.step = result.optimizer.step;
  const auto bytes = save_checkpoint(model, &result.optimizer, meta);
  write_checkpoint_file(dir / "model.ckpt", bytes);
  const nlohmann::json summary{{"steps_completed", result.steps_completed},
                               {"diverged", result.diverged},
                               {"diagnostic", result.diagnostic},
                               {"checkpoint_digest", digest_hex(bytes)}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::printf("checkpoint %s digest %s\n", (dir / "model.ckpt").string().c_str(), digest_hex(bytes).c_str());
  if (result.diverged) {
    std::fprintf(stderr, "training diverged: %s\n", result.diagnostic.c_str());
    return kFailure;
  }
  return 0;
}

struct GridArgs {
  std::string checkpoint;
  bool oracle = false;
  std::string task;
  std::string rows, cols;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
  std::optional<Index> samples, batches, functions, points, first_position;
  bool all_positions = false;
};

int cmd_eval_grid(const GridArgs& args) {
  Source src = open_source(args.checkpoint, args.oracle, args.task);
  GridSpec spec = GridSpec::defaults(src.task);
  spec.seed = args.seed;
  if (!args.rows.empty()) spec.rows.values = parse_list(args.rows, "--rows");
  if (!args.cols.empty()) spec.cols.values = parse_list(args.cols, "--cols");
  if (args.samples) spec.quantifier.samples = *args.samples;
  if (args.batches) spec.quantifier.batches = spec.linear.batches = *args.batches;
  if (args.functions) spec.linear.functions = *args.functions;
  if (args.points) spec.linear.points = *args.points;
  if (args.first_position) spec.linear.first_position = *args.first_position;
  spec.quantifier.all_positions = args.all_positions;
  spec.validate();
  const fs::path dir = output_dir(args.out, "grid-" + std::string(to_string(src.task)));
  fs::create_directories(dir);
  const GridResult grid = eval_grid(*src.predictor, spec, args.threads);
  std::ostringstream csv, pgm;
  write_grid_csv(csv, grid);
  const HeatmapRange range = write_grid_pgm(pgm, grid);
  write_text(dir / "grid.csv", csv.str());
  write_text(dir / "grid.pgm", pgm.str());
  write_text(dir / "grid.json", grid_metadata(grid, range).dump(2) + "\n");
  std::printf("%lldx%lld grid written to %s (%zu failed cells)\n", static_cast<long long>(grid.cells.rows()),
              static_cast<long long>(grid.cells.cols()), dir.string().c_str(), grid.failures.size());
  return grid.failures.empty() ? 0 : kFailure;
}

struct ProbeArgs {
  std::string mode;
  std::string checkpoint;
  bool oracle = false;
  std::string task;
  std::string out;
  std::uint64_t seed = 0;
  // boundary
  double a = 10.0, b = 0.0, xmin = -10.0, xmax = 10.0, tol = 0.05;
  Index points = 201, window = 10, context = 39;
  // attn
  std::string xs;
  // score-curve
  std::string kinds = "softmax,ssa";
  Index k = 2;
  double gap_max = 10.0, gap_step = 1.0, ssa_b = 1.0, ssa_n = 1.5;
  // grad-check
  Index layers = 1, heads = 1, emb_dim = 64, coords = 24;
  std::string scoring = "softmax";
  double step = 1e-5, tolerance = 1e-4;
};

int probe_boundary(const ProbeArgs& args, const fs::path& dir) {
  Source src = open_source(args.checkpoint, args.oracle, args.task.empty() ? "linear_fn" : args.task);
  if (src.task != TaskKind::linear_fn) throw ConfigError("boundary probe needs a linear_fn model");
  BoundaryOptions opts;
  opts.window = args.window;
  opts.tol_fraction = args.tol;
  opts.context = args.context;
  opts.seed = args.seed;
  const auto xs = linspace(args.xmin, args.xmax, args.points);
  const BoundaryReport report = boundary_probe(*src.predictor, args.a, args.b, xs, opts);
  fs::create_directories(dir);
  std::ostringstream csv;
  write_boundary_csv(csv, report);
  write_text(dir / "boundary.csv", csv.str());
  const auto j = boundary_json(report);
  write_text(dir / "boundary.json", j.dump(2) + "\n");
  std::printf("upper %s lower %s\n", j["upper"].dump().c_str(), j["lower"].dump().c_str());
  return 0;
}

int probe_attn(const ProbeArgs& args, const fs::path& dir) {
  Source src = open_source(args.checkpoint, false, args.task);
  PromptInstance inst;
  if (!args.xs.empty()) {
    auto xs = parse_list(args.xs, "--xs");
    inst = is_quantifier(src.task) ? make_quantifier_instance(src.task, std::move(xs))
                                   : make_linear_instance(1.0, 0.0, std::move(xs));
  } else if (is_quantifier(src.task)) {
    inst = deviant_instance(src.task, DeviantSpec{}, args.seed);
  } else {
    TaskSpec spec;
    spec.seed = args.seed;
    inst = gen_instance(spec, 40, std::uint64_t{0});
  }
  const AttentionReport report = attention_inspect(src.checkpoint->model, inst);
  fs::create_directories(dir);
  for (std::size_t l = 0; l < report.maps.size(); ++l) {
    for (std::size_t h = 0; h < report.maps[l].size(); ++h) {
      std::ostringstream csv;
      write_attention_csv(csv, report.maps[l][h]);
      write_text(dir / ("attention_l" + std::to_string(l) + "_h" + std::to_string(h) + ".csv"), csv.str());
    }
  }
  write_text(dir / "attention.json", attention_json(report).dump(2) + "\n");
  for (const HeadFocus& f : report.last_layer) {
    const Token& t = report.tokens[static_cast<std::size_t>(f.argmax_key)];
    std::printf("layer %lld head %lld: query %lld -> key %lld (value %g) weight %.6f\n",
                static_cast<long long>(f.layer), static_cast<long long>(f.head),
                static_cast<long long>(report.query), static_cast<long long>(f.argmax_key), t.value, f.weight);
  }
  return 0;
}

int probe_score_curve(const ProbeArgs& args, const fs::path& dir) {
  if (!(args.gap_step > 0.0) || args.gap_max < 0.0) throw ConfigError("--gap-step must be > 0 and --gap-max >= 0");
  std::vector<double> gaps;
  for (int i = 0; i * args.gap_step <= args.gap_max + 1e-12; ++i) gaps.push_back(i * args.gap_step);
  std::vector<std::pair<std::string, std::vector<SaturationPoint>>> curves;
  for (const std::string& name : split(args.kinds)) {
    ScoringConfig cfg;
    cfg.kind = parse_score_kind(name);
    cfg.ssa_b_init = args.ssa_b;
    cfg.ssa_n = args.ssa_n;
    cfg.validate(1);
    curves.emplace_back(name, saturation_curve(cfg, args.k, gaps));
  }
  fs::create_directories(dir);
  const std::string csv = saturation_csv(curves);
  write_text(dir / "score_curve.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int probe_grad_check(const ProbeArgs& args, const fs::path& dir) {
  ModelConfig cfg;
  TaskKind task = args.task.empty() ? TaskKind::linear_fn : parse_task_kind(args.task);
  if (!args.checkpoint.empty()) {
    Source src = open_source(args.checkpoint, false, args.task);
    cfg = src.checkpoint->model.config();
    task = src.task;
  } else {
    cfg.layers = args.layers;
    cfg.heads = args.heads;
    cfg.emb_dim = args.emb_dim;
    cfg.scoring.kind = parse_score_kind(args.scoring);
    if (cfg.scoring.kind == ScoreKind::hybrid) cfg.scoring.hybrid_assignment = hybrid_assign(cfg.heads, HybridVariant::soft_avg);
    cfg.readout = readout_for(task);
    cfg.validate();
  }
  GradCheckOptions opts;
  opts.step = args.step;
  opts.tolerance = args.tolerance;
  opts.coords_per_tensor = args.coords;
  const GradCheckReport report = check_model_gradients(cfg, task, args.seed, opts);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : report.tensors) {
    tensors.push_back({{"name", t.name}, {"coords", t.coords}, {"rel_error", t.rel_error}, {"passed", t.passed}});
  }
  fs::create_directories(dir);
  write_text(dir / "grad_check.json", nlohmann::json{{"passed", report.passed},
                                                     {"max_rel_error", report.max_rel_error},
                                                     {"tolerance", args.tolerance},
                                                     {"diagnostic", report.diagnostic},
                                                     {"tensors", tensors}}
                                              .dump(2) + "\n");
  std::printf("grad-check %s: max rel err %.3e (tol %.1e)%s%s\n", report.passed ? "PASS" : "FAIL",
              report.max_rel_error, args.tolerance, report.diagnostic.empty() ? "" : ": ",
              report.diagnostic.c_str());
  return report.passed ? 0 : kFailure;
}

int cmd_probe(const ProbeArgs& args) {
  const fs::path dir = output_dir(args.out, "probe-" + args.mode);
  if (args.mode == "boundary") return probe_boundary(args, dir);
  if (args.mode == "attn") return probe_attn(args, dir);
  if (args.mode == "score-curve") return probe_score_curve(args, dir);
  return probe_grad_check(args, dir);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"ssalab: scoring-function experiments for in-context learning"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for grid evaluation")->check(CLI::PositiveNumber);

  TrainArgs targs;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", targs.config, "Run config JSON")->required();
  train_cmd->add_option("--out", targs.out, "Output directory");
  train_cmd->add_option("--seed", targs.seed, "Run seed (overrides the config)");
  train_cmd->add_option("--steps", targs.steps, "Optimiser steps (overrides the config)")->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--quiet", targs.quiet, "No per-log progress lines");

  GridArgs gargs;
  auto* grid_cmd = app.add_subcommand("eval-grid", "Evaluate a distribution-shift grid");
  grid_cmd->add_option("--checkpoint", gargs.checkpoint, "Trained checkpoint");
  grid_cmd->add_flag("--oracle", gargs.oracle, "Use the ground-truth evaluator");
  grid_cmd->add_option("--task", gargs.task, "every | some | linear_fn");
  grid_cmd->add_option("--rows", gargs.rows, "Comma-separated row axis (lengths or sigma_input)");
  grid_cmd->add_option("--cols", gargs.cols, "Comma-separated column axis (sigma or sigma_fn)");
  grid_cmd->add_option("--out", gargs.out, "Output directory");
  grid_cmd->add_option("--seed", gargs.seed, "Grid seed");
  grid_cmd->add_option("--samples", gargs.samples, "Quantifier samples per cell");
  grid_cmd->add_option("--batches", gargs.batches, "Batches per sample or function");
  grid_cmd->add_option("--functions", gargs.functions, "Linear functions per cell");
  grid_cmd->add_option("--points", gargs.points, "Points per linear prompt");
  grid_cmd->add_option("--first-position", gargs.first_position, "First scored position (1-based)");
  grid_cmd->add_flag("--all-positions", gargs.all_positions, "Score every quantifier position");

  ProbeArgs pargs;
  auto* probe_cmd = app.add_subcommand("probe", "Boundary, attention, score-curve and gradient probes");
  probe_cmd->add_option("--mode", pargs.mode, "boundary | attn | score-curve | grad-check")
      ->required()
      ->check(CLI::IsMember({"boundary", "attn", "score-curve", "grad-check"}));
  probe_cmd->add_option("--checkpoint", pargs.checkpoint, "Trained checkpoint");
  probe_cmd->add_flag("--oracle", pargs.oracle, "Use the ground-truth evaluator (boundary)");
  probe_cmd->add_option("--task", pargs.task, "Task kind");
  probe_cmd->add_option("--out", pargs.out, "Output directory");
  probe_cmd->add_option("--seed", pargs.seed, "Probe seed");
  probe_cmd->add_option("--a", pargs.a, "Boundary: slope");
  probe_cmd->add_option("--b", pargs.b, "Boundary: intercept");
  probe_cmd->add_option("--xmin", pargs.xmin, "Boundary: sweep start");
  probe_cmd->add_option("--xmax", pargs.xmax, "Boundary: sweep end");
  probe_cmd->add_option("--points", pargs.points, "Boundary: sweep points");
  probe_cmd->add_option("--window", pargs.window, "Boundary: plateau window");
  probe_cmd->add_option("--tol", pargs.tol, "Boundary: relative spread tolerance");
  probe_cmd->add_option("--context", pargs.context, "Boundary: in-context pairs");
  probe_cmd->add_option("--xs", pargs.xs, "Attn: comma-separated inputs");
  probe_cmd->add_option("--kinds", pargs.kinds, "Score-curve: comma-separated scoring kinds");
  probe_cmd->add_option("--k", pargs.k, "Score-curve: vector length");
  probe_cmd->add_option("--gap-max", pargs.gap_max, "Score-curve: largest gap");
  probe_cmd->add_option("--gap-step", pargs.gap_step, "Score-curve: gap step");
  probe_cmd->add_option("--ssa-b", pargs.ssa_b, "Score-curve: SSA b");
  probe_cmd->add_option("--ssa-n", pargs.ssa_n, "Score-curve: SSA n");
  probe_cmd->add_option("--layers", pargs.layers, "Grad-check: layers");
  probe_cmd->add_option("--heads", pargs.heads, "Grad-check: heads");
  probe_cmd->add_option("--emb-dim", pargs.emb_dim, "Grad-check: embedding size");
  probe_cmd->add_option("--scoring", pargs.scoring, "Grad-check: scoring kind");
  probe_cmd->add_option("--coords", pargs.coords, "Grad-check: coordinates per tensor (0 = all)");
  probe_cmd->add_option("--step", pargs.step, "Grad-check: finite-difference step");
  probe_cmd->add_option("--tolerance", pargs.tolerance, "Grad-check: relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return cmd_train(targs);
    if (*grid_cmd) {
      gargs.threads = threads;
      return cmd_eval_grid(gargs);
    }
    return cmd_probe(pargs);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kInvalid;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "invalid request: %s\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}

}  // namespace ssalab::cli
