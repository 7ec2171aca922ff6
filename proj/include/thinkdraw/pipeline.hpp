#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thinkdraw/agent.hpp"
#include "thinkdraw/checkpoint.hpp"
#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/rgpo.hpp"

namespace thinkdraw::pipeline {

using Json = nlohmann::ordered_json;

// ------------------------------------------------------------------ config

struct Stage0Config {
  int steps = 2000;
  int batch = 32;
  double lr = 1e-3;
  bool cosine = true;
  double consistency_target = 0.9;  // mean over train concepts
  int eval_every = 100;
};

struct Stage1Config {
  int steps = 2000;
  int batch = 32;
  double lr = 1e-3;
  bool cosine = true;
  double distill_weight = 1.0;
  bool diffusion = true;
  bool distill = true;
};

struct Stage2Config {
  int steps = 4000;
  int batch = 32;
  double lr = 1e-3;
  bool cosine = true;
  double ce_weight = 1.0;
  double diffusion_weight = 1.0;
  // Share of direct tasks trained under the direct (empty-think) system prompt.
  double direct_prompt_fraction = 0.5;
};

struct Stage3Config {
  int updates = 2000;
  int prompts_per_update = 8;
  bool cosine = true;
  // Stage whose final checkpoint initializes the policy: 2, or 1 to skip SFT.
  int init_stage = 2;
  int warmup = 20;  // linear learning-rate warmup over the first updates
  rgpo::RgpoConfig rgpo;
};

struct EvalConfig {
  double tau = 0.8;
  std::uint64_t seed = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;  // 0: THINKDRAW_THREADS or hardware concurrency
  int checkpoint_every = 0;  // periodic partial checkpoints; 0 disables
  world::SplitCounts data;
  agent::SystemConfig model;
  Stage0Config stage0;
  Stage1Config stage1;
  Stage2Config stage2;
  Stage3Config stage3;
  EvalConfig eval;

  void validate() const;  // throws ConfigError
  Json to_json() const;
  // Unknown keys and wrongly typed values throw ConfigError; absent keys keep defaults.
  static RunConfig from_json(const Json& j);
  // FNV-1a of the canonical serialization.
  std::uint64_t hash() const;
  // Hash of the parts that fix parameter shapes and data (model, data, seed).
  std::uint64_t architecture_hash() const;
};

RunConfig load_config(const std::string& path);
// Applies "a.b.c=value" overrides (value parsed as JSON, else taken as a string).
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides);

// ------------------------------------------------------------------ stages

struct TrainableMask {
  bool teacher = false;
  bool policy = false;
  bool connector = false;
  bool decoder = false;
  friend bool operator==(const TrainableMask&, const TrainableMask&) = default;
};

struct LossToggles {
  bool diffusion = false;
  bool distill = false;
  bool cross_entropy = false;
  bool rgpo = false;
};

struct StageConfig {
  int stage = 0;
  int steps = 0;
  int batch = 0;
  double lr = 0;
  bool cosine = true;
  int warmup = 0;
  LossToggles losses;
  TrainableMask trainable;
  std::uint64_t seed = 0;

  void validate() const;  // mask must lie inside the stage protocol
};

StageConfig stage_config(const RunConfig& cfg, int stage);
// Components each stage is allowed to train.
TrainableMask allowed_mask(int stage);
// Linear warmup over `warmup` steps, then (optionally) cosine decay to zero.
double scheduled_lr(double base, long step, long total, bool cosine, long warmup = 0);

// Every model of a run plus optimizer state and position.
struct Snapshot {
  RunConfig config;
  int stage = -1;     // stage that produced this state (-1: fresh initialization)
  long step = 0;      // completed steps within `stage`
  bool complete = false;
  agent::System<float> system;
  gen::DecoderModel<float> teacher;
  std::optional<agent::System<float>> ref;  // stage 3 reference
  std::map<std::string, Adam<float>> optimizers;
  Json info = Json::object();  // stage-specific summary values
};

Snapshot initial_snapshot(const RunConfig& cfg);

ckpt::Checkpoint to_checkpoint(const Snapshot& s);
// Rebuilds the live architecture from `cfg` and restores every tensor into
// it; shape and architecture-hash mismatches throw CheckpointError.
Snapshot from_checkpoint(const ckpt::Checkpoint& c, const RunConfig& cfg);

// Component names that differ between two snapshots ("teacher", "policy", ...).
std::vector<std::string> changed_components(const Snapshot& a, const Snapshot& b);

struct StageOptions {
  int threads = 0;
  int checkpoint_every = 0;
  // Stop after this many completed steps (simulated interruption); < 0 runs to the end.
  long stop_after = -1;
  std::function<void(const Json&)> on_record;          // one record per step
  std::function<void(const Snapshot&)> on_checkpoint;  // periodic, start-of-stage and last-good snapshots
};

// Runs stage `stage` from `start`, which is either the completed previous
// stage (or the stage-3 initialization stage) or a partial snapshot of this
// stage to resume. Returns the state after the last step.
Snapshot run_stage(int stage, const world::Dataset& data, const Snapshot& start, const StageOptions& opt);

// Prerequisite stage whose completed snapshot `stage` starts from.
int prerequisite_stage(const RunConfig& cfg, int stage);

// Caption conditioning used by stage 1: "<think></think><answer>{caption}</answer><img>"
// after the direct system prompt and the caption as query.
Tensor<float> caption_states(const agent::System<float>& sys, const std::string& caption);

// ------------------------------------------------------------------ evaluation

struct SplitScore {
  int count = 0;
  double accuracy = 0;
  double mean_consistency = 0;
  double format_rate = 0;
};

struct EvalReport {
  bool thinking = true;
  double tau = 0.8;
  SplitScore eval_direct;
  SplitScore eval_reasoning;
  Json to_json() const;
  std::string to_text() const;
};

// Produces the image (and optionally the response text) for task `index`.
struct GeneratedSample {
  std::string response;
  world::Image image;
};
using Generator = std::function<GeneratedSample(const world::Task& task, std::size_t index)>;

Generator model_generator(const agent::InferenceContext& ctx, bool thinking, std::uint64_t seed, int image_steps);
Generator oracle_generator();
Generator noise_generator(std::uint64_t seed);

EvalReport evaluate(const world::Dataset& data, const Generator& gen, bool thinking, double tau, int threads = 0);
// Greedy decoding with the given model; deterministic for a fixed seed.
EvalReport evaluate_model(const agent::System<float>& sys, const world::Dataset& data, bool thinking,
                          const EvalConfig& cfg, int threads = 0);

}  // namespace thinkdraw::pipeline
