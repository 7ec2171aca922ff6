// Command-line front end: data generation, staged training, evaluation,
// rollout inspection and metric plots.
//
// Exit codes: 0 success, 1 other failure (including an unmet stage-0 target),
// 2 invalid input, 3 missing or unusable prerequisite checkpoint,
// 4 non-finite loss abort, 5 checkpoint mismatch or corruption.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "thinkdraw/checkpoint.hpp"
#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/error.hpp"
#include "thinkdraw/pipeline.hpp"
#include "thinkdraw/plot.hpp"
#include "thinkdraw/rewards.hpp"
#include "thinkdraw/rgpo.hpp"
#include "thinkdraw/rng.hpp"

namespace fs = std::filesystem;
using namespace thinkdraw;
using pipeline::Json;
using pipeline::RunConfig;

namespace {

enum Exit { kOk = 0, kFailure = 1, kInvalid = 2, kPrerequisite = 3, kNonFinite = 4, kMismatch = 5 };

// Raised for conditions that map to a specific exit code.
struct ExitError : std::runtime_error {
  int code;
  ExitError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ExitError(kInvalid, "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + path + "'");
}

std::string stage_ckpt(const std::string& dir, int stage) {
  return (fs::path(dir) / ("stage" + std::to_string(stage) + ".ckpt")).string();
}
std::string partial_ckpt(const std::string& dir, int stage) {
  return (fs::path(dir) / ("stage" + std::to_string(stage) + ".partial.ckpt")).string();
}
std::string metrics_path(const std::string& dir, int stage) {
  return (fs::path(dir) / ("stage" + std::to_string(stage) + ".metrics.jsonl")).string();
}

RunConfig embedded_config(const ckpt::Checkpoint& c) {
  if (!c.meta.contains("config")) throw CheckpointError("checkpoint carries no run configuration");
  return RunConfig::from_json(c.meta.at("config"));
}

// --config file, else the configuration embedded in `fallback`, else defaults;
// then the --set overrides.
RunConfig resolve_config(const std::string& config_path, const ckpt::Checkpoint* fallback,
                         const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) {
    cfg = pipeline::load_config(config_path);
  } else if (fallback) {
    cfg = embedded_config(*fallback);
  }
  cfg = pipeline::apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

world::SplitCounts parse_counts(const std::string& s) {
  world::SplitCounts c;
  int* fields[3] = {&c.train, &c.eval_direct, &c.eval_reasoning};
  std::stringstream in(s);
  std::string part;
  int k = 0;
  while (std::getline(in, part, ',')) {
    if (k >= 3) throw DatasetError("--counts takes three comma-separated integers");
    std::size_t used = 0;
    try {
      *fields[k] = std::stoi(part, &used);
    } catch (const std::exception&) {
      throw DatasetError("invalid count '" + part + "'");
    }
    if (used != part.size()) throw DatasetError("invalid count '" + part + "'");
    ++k;
  }
  if (k != 3) throw DatasetError("--counts takes three comma-separated integers (train,eval_direct,eval_reasoning)");
  return c;
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  std::uint64_t seed = 0;
  std::string out;
  std::string counts;
};

int cmd_gen_data(const GenDataArgs& a) {
  const world::SplitCounts counts = a.counts.empty() ? world::SplitCounts{} : parse_counts(a.counts);
  const world::Dataset data = world::generate_dataset(a.seed, counts);
  fs::create_directories(a.out);
  for (world::Split s : {world::Split::train, world::Split::eval_direct, world::Split::eval_reasoning}) {
    const std::string name(world::split_name(s));
    world::write_tasks(data.split(s), (fs::path(a.out) / (name + ".jsonl")).string());
    std::cout << name << ' ' << data.split(s).size() << '\n';
  }
  return kOk;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  int stage = -1;
  std::string config;
  std::vector<std::string> set;
  std::string out;
  std::string from;
  bool resume = false;
  long stop_after = -1;
  int threads = -1;
};

ckpt::Checkpoint load_prerequisite(const std::string& path) {
  if (!fs::exists(path)) throw ExitError(kPrerequisite, "missing prerequisite checkpoint '" + path + "'");
  return ckpt::load(path);
}

// Keeps the records of steps before `step`; later ones are recomputed.
void truncate_metrics(const std::string& path, long step) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_file(path));
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step") || j["step"].get<long>() >= step) break;
    kept += line + "\n";
  }
  write_file(path, kept);
}

int cmd_train(const TrainArgs& a) {
  const int stage = a.stage;
  fs::create_directories(a.out);
  RunConfig cfg;
  pipeline::Snapshot start;

  if (a.resume) {
    const std::string path = partial_ckpt(a.out, stage);
    if (!fs::exists(path)) throw ExitError(kPrerequisite, "nothing to resume: '" + path + "' does not exist");
    const ckpt::Checkpoint c = ckpt::load(path);
    cfg = resolve_config(a.config, &c, a.set);
    if (embedded_config(c).hash() != cfg.hash()) {
      throw CheckpointError("resume configuration differs from the one recorded in '" + path + "'");
    }
    start = pipeline::from_checkpoint(c, cfg);
    if (start.stage != stage || start.complete) {
      throw ExitError(kPrerequisite, "'" + path + "' is not a partial stage-" + std::to_string(stage) + " state");
    }
    truncate_metrics(metrics_path(a.out, stage), start.step);
    std::cerr << "resuming stage " << stage << " at step " << start.step << '\n';
  } else if (stage == 0) {
    cfg = resolve_config(a.config, nullptr, a.set);
    start = pipeline::initial_snapshot(cfg);
    write_file(metrics_path(a.out, stage), "");
  } else {
    // The stage-3 prerequisite depends on the configuration, which may itself
    // come from the prerequisite checkpoint; resolve against the default first.
    RunConfig probe = resolve_config(a.config, nullptr, a.set);
    std::string path = a.from;
    if (path.empty()) path = stage_ckpt(a.out, pipeline::prerequisite_stage(probe, stage));
    const ckpt::Checkpoint c = load_prerequisite(path);
    cfg = resolve_config(a.config, &c, a.set);
    const int pre = pipeline::prerequisite_stage(cfg, stage);
    start = pipeline::from_checkpoint(c, cfg);
    if (start.stage != pre || !start.complete) {
      throw ExitError(kPrerequisite, "'" + path + "' is not a completed stage-" + std::to_string(pre) + " checkpoint");
    }
    write_file(metrics_path(a.out, stage), "");
  }

  const world::Dataset data = world::generate_dataset(cfg.seed, cfg.data);
  std::ofstream metrics(metrics_path(a.out, stage), std::ios::app);
  pipeline::StageOptions opt;
  opt.threads = a.threads >= 0 ? a.threads : cfg.threads;
  opt.checkpoint_every = cfg.checkpoint_every;
  opt.stop_after = a.stop_after;
  opt.on_record = [&](const Json& rec) { metrics << rec.dump() << '\n' << std::flush; };
  opt.on_checkpoint = [&](const pipeline::Snapshot& s) {
    ckpt::save(pipeline::to_checkpoint(s), partial_ckpt(a.out, stage));
  };

  pipeline::Snapshot end;
  try {
    end = pipeline::run_stage(stage, data, start, opt);
  } catch (const NonFiniteError& e) {
    throw ExitError(kNonFinite, std::string(e.what()) + "; last good state kept in '" + partial_ckpt(a.out, stage) + "'");
  }
  if (!end.complete) {
    ckpt::save(pipeline::to_checkpoint(end), partial_ckpt(a.out, stage));
    std::cerr << "stopped after step " << end.step << "; partial state in '" << partial_ckpt(a.out, stage) << "'\n";
    return kOk;
  }
  ckpt::save(pipeline::to_checkpoint(end), stage_ckpt(a.out, stage));
  fs::remove(partial_ckpt(a.out, stage));
  std::cerr << "stage " << stage << " complete after " << end.step << " steps: " << stage_ckpt(a.out, stage) << '\n';
  if (!end.info.empty()) std::cerr << end.info.dump() << '\n';
  return kOk;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string ckpt;
  std::string config;
  std::vector<std::string> set;
  std::string thinking = "on";
  std::string report;
  std::string generator = "model";
  int threads = -1;
};

int cmd_eval(const EvalArgs& a) {
  const bool thinking = a.thinking == "on";
  RunConfig cfg;
  std::optional<pipeline::Snapshot> snap;
  if (a.generator == "model") {
    if (a.ckpt.empty()) throw ExitError(kInvalid, "--ckpt is required with the model generator");
    if (!fs::exists(a.ckpt)) throw CheckpointError("checkpoint '" + a.ckpt + "' does not exist");
    const ckpt::Checkpoint c = ckpt::load(a.ckpt);
    cfg = resolve_config(a.config, &c, a.set);
    snap = pipeline::from_checkpoint(c, cfg);
  } else {
    std::optional<ckpt::Checkpoint> c;
    if (!a.ckpt.empty()) c = ckpt::load(a.ckpt);
    cfg = resolve_config(a.config, c ? &*c : nullptr, a.set);
  }
  const int threads = a.threads >= 0 ? a.threads : cfg.threads;
  const world::Dataset data = world::generate_dataset(cfg.seed, cfg.data);
  pipeline::EvalReport report;
  if (snap) {
    report = pipeline::evaluate_model(snap->system, data, thinking, cfg.eval, threads);
  } else {
    const pipeline::Generator gen =
        a.generator == "oracle" ? pipeline::oracle_generator() : pipeline::noise_generator(cfg.eval.seed);
    report = pipeline::evaluate(data, gen, thinking, cfg.eval.tau, threads);
  }
  if (a.report.empty()) {
    std::cout << report.to_text();
  } else {
    const fs::path prefix(a.report);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    write_file(a.report + ".txt", report.to_text());
    write_file(a.report + ".json", report.to_json().dump(2) + "\n");
    std::cerr << "wrote " << a.report << ".txt and " << a.report << ".json\n";
  }
  return kOk;
}

// ------------------------------------------------------------------ rollout-inspect

struct InspectArgs {
  std::string ckpt;
  std::string task_id;
  std::uint64_t seed = 0;
  int group = 0;  // 0: configured group size
  std::string out = ".";
  std::vector<std::string> set;
};

const world::Task& find_task(const world::Dataset& data, const std::string& id) {
  std::string split = "train";
  std::string index = id;
  if (const auto colon = id.find(':'); colon != std::string::npos) {
    split = id.substr(0, colon);
    index = id.substr(colon + 1);
  }
  const std::vector<world::Task>* tasks = nullptr;
  try {
    tasks = &data.split(world::parse_split(split));
  } catch (const Error&) {
    throw ExitError(kInvalid, "unknown task id '" + id + "' (split must be train, eval_direct or eval_reasoning)");
  }
  std::size_t used = 0;
  long k = -1;
  try {
    k = std::stol(index, &used);
  } catch (const std::exception&) {
  }
  if (used != index.size() || k < 0 || static_cast<std::size_t>(k) >= tasks->size()) {
    throw ExitError(kInvalid, "unknown task id '" + id + "' (" + split + " holds " + std::to_string(tasks->size()) +
                                  " tasks)");
  }
  return (*tasks)[static_cast<std::size_t>(k)];
}

int cmd_rollout_inspect(const InspectArgs& a) {
  if (!fs::exists(a.ckpt)) throw CheckpointError("checkpoint '" + a.ckpt + "' does not exist");
  const ckpt::Checkpoint c = ckpt::load(a.ckpt);
  RunConfig cfg = resolve_config("", &c, a.set);
  if (a.group > 0) cfg.stage3.rgpo.group_size = a.group;
  cfg.validate();
  const pipeline::Snapshot snap = pipeline::from_checkpoint(c, cfg);
  const world::Dataset data = world::generate_dataset(cfg.seed, cfg.data);
  const world::Task& task = find_task(data, a.task_id);

  const agent::InferenceContext ctx(snap.system);
  rgpo::RolloutGroup group = rgpo::rollout(ctx, task, cfg.stage3.rgpo, a.seed, cfg.threads);
  rgpo::fill_advantages(group, cfg.stage3.rgpo.advantage);

  fs::create_directories(a.out);
  std::cout << "task: " << task.instruction << "\n";
  std::cout << "gt_prompt: " << task.gt_prompt << "\n";
  std::cout << "mode: " << world::mode_name(task.mode) << "\n\n";
  char line[200];
  double sum = 0;
  for (std::size_t i = 0; i < group.outputs.size(); ++i) {
    const auto& o = group.outputs[i];
    const auto parse = rewards::parse_cot(o.response);
    const double adv = o.advantage.value_or(0.0);
    sum += adv;
    const std::string stem = (fs::path(a.out) / ("rollout_" + std::to_string(i))).string();
    world::write_ppm(o.image, stem + ".ppm");
    write_file(stem + ".txt", o.response);
    std::cout << "[" << i << "] chain: " << o.response << "\n";
    std::cout << "    think: " << (parse.think ? "\"" + *parse.think + "\"" : std::string("<missing>")) << "\n";
    std::cout << "    answer: " << (parse.answer ? "\"" + *parse.answer + "\"" : std::string("<missing>")) << "\n";
    std::snprintf(line, sizeof(line), "    reward: format %d  consistency %.6f  total %.6f  advantage %.6f%s\n",
                  o.reward.format, o.reward.consistency, o.reward.total, adv, o.overflow ? "  (overflow)" : "");
    std::cout << line;
    std::cout << "    image: " << stem << ".ppm\n";
  }
  std::snprintf(line, sizeof(line), "\nadvantage sum: %.3e\n", sum);
  std::cout << line;
  return kOk;
}

// ------------------------------------------------------------------ plot

int cmd_plot(const std::string& metrics, const std::string& out) {
  const auto records = plot::parse_metrics(read_file(metrics));
  for (const auto& p : plot::write_curves(records, out)) std::cout << p << '\n';
  return kOk;
}

int cmd_show_config(const std::string& config, const std::vector<std::string>& set) {
  std::cout << resolve_config(config, nullptr, set).to_json().dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"thinkdraw: reasoning-driven toy image generation"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write the train/eval task splits as line-delimited records");
  gen->add_option("--seed", gd.seed, "Dataset seed");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--counts", gd.counts, "train,eval_direct,eval_reasoning (default 400,12,48)");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--stage", tr.stage, "Stage to run")->required()->check(CLI::Range(0, 3));
  train->add_option("--out", tr.out, "Run directory holding stage checkpoints and metrics")->required();
  train->add_option("--config", tr.config, "Configuration file (JSON)");
  train->add_option("--set", tr.set, "Override a config key, e.g. --set stage3.rgpo.beta_image=0");
  train->add_option("--from", tr.from, "Prerequisite checkpoint (default: the run directory's)");
  train->add_flag("--resume", tr.resume, "Continue the partial checkpoint of this stage");
  train->add_option("--stop-after", tr.stop_after, "Stop after this many completed steps (keeps a partial state)");
  train->add_option("--threads", tr.threads, "Worker threads (0: THINKDRAW_THREADS or all cores)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on the held-out splits");
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint to evaluate");
  eval->add_option("--config", ev.config, "Configuration file (default: the checkpoint's)");
  eval->add_option("--set", ev.set, "Override a config key");
  eval->add_option("--thinking", ev.thinking, "Thinking mode")->check(CLI::IsMember({"on", "off"}));
  eval->add_option("--report", ev.report, "Write PREFIX.txt and PREFIX.json instead of printing");
  eval->add_option("--generator", ev.generator, "Image source")->check(CLI::IsMember({"model", "oracle", "noise"}));
  eval->add_flag_callback("--oracle", [&ev] { ev.generator = "oracle"; }, "Shorthand for --generator oracle");
  eval->add_option("--threads", ev.threads, "Worker threads");

  InspectArgs in;
  auto* inspect = app.add_subcommand("rollout-inspect", "Sample one rollout group and show rewards and advantages");
  inspect->add_option("--ckpt", in.ckpt, "Checkpoint")->required();
  inspect->add_option("--task-id", in.task_id, "Task as SPLIT:INDEX or a train index")->required();
  inspect->add_option("--seed", in.seed, "Sampling seed");
  inspect->add_option("-G,--group-size", in.group, "Group size (default: configured)");
  inspect->add_option("--out", in.out, "Directory for the images and chains");
  inspect->add_option("--set", in.set, "Override a config key");

  std::string metrics, plot_out;
  auto* pl = app.add_subcommand("plot", "Emit SVG and CSV curves from a metrics stream");
  pl->add_option("--metrics", metrics, "Line-delimited metrics file")->required();
  pl->add_option("--out", plot_out, "Output directory")->required();

  std::string sc_config;
  std::vector<std::string> sc_set;
  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  show->add_option("--config", sc_config, "Configuration file");
  show->add_option("--set", sc_set, "Override a config key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInvalid;
  }

  try {
    if (*gen) return cmd_gen_data(gd);
    if (*train) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*inspect) return cmd_rollout_inspect(in);
    if (*pl) return cmd_plot(metrics, plot_out);
    if (*show) return cmd_show_config(sc_config, sc_set);
  } catch (const ExitError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << '\n';
    return kInvalid;
  } catch (const DatasetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const CheckpointError& e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kMismatch;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNonFinite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
