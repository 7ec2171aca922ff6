#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "thinkdraw/pipeline.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::pipeline {

namespace {

// Strict object reader: every key must be consumed by a get() or sub().
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + label() + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config key '" + path_ + key + "' must be true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("config key '" + path_ + key + "' must be an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
        throw ConfigError("config key '" + path_ + key + "' must be non-negative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config key '" + path_ + key + "' must be a number");
    } else {
      if (!v.is_string()) throw ConfigError("config key '" + path_ + key + "' must be a string");
    }
    out = v.get<T>();
  }

  Reader sub(const std::string& key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + k + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_.substr(0, path_.size() - 1); }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Json policy_json(const lm::PolicyConfig& p) {
  return Json{{"width", p.width}, {"layers", p.layers}, {"heads", p.heads}, {"ff", p.ff}, {"context", p.context}};
}

Json decoder_json(const gen::DecoderConfig& d) {
  return Json{{"width", d.width},
              {"layers", d.layers},
              {"heads", d.heads},
              {"ff", d.ff},
              {"cond_width", d.cond_width},
              {"connector_layers", d.connector_layers},
              {"time_frequencies", d.time_frequencies},
              {"sampling_steps", d.sampling_steps}};
}

Json data_json(const world::SplitCounts& c) {
  return Json{{"train", c.train}, {"eval_direct", c.eval_direct}, {"eval_reasoning", c.eval_reasoning}};
}

void positive(int v, const std::string& name) {
  if (v < 1) throw ConfigError(name + " must be at least 1");
}

void positive(double v, const std::string& name) {
  if (!(v > 0) || !std::isfinite(v)) throw ConfigError(name + " must be positive");
}

}  // namespace

void RunConfig::validate() const {
  positive(model.policy.width, "model.policy.width");
  positive(model.policy.layers, "model.policy.layers");
  positive(model.policy.heads, "model.policy.heads");
  positive(model.policy.ff, "model.policy.ff");
  if (model.policy.width % model.policy.heads != 0) throw ConfigError("policy width must be divisible by heads");
  if (model.policy.context < 16 || model.policy.context > lm::kContextLimit) {
    throw ConfigError("model.policy.context must lie in [16, " + std::to_string(lm::kContextLimit) + "]");
  }
  positive(model.decoder.width, "model.decoder.width");
  positive(model.decoder.layers, "model.decoder.layers");
  positive(model.decoder.heads, "model.decoder.heads");
  positive(model.decoder.ff, "model.decoder.ff");
  positive(model.decoder.connector_layers, "model.decoder.connector_layers");
  positive(model.decoder.time_frequencies, "model.decoder.time_frequencies");
  positive(model.decoder.sampling_steps, "model.decoder.sampling_steps");
  if (model.decoder.width % model.decoder.heads != 0) throw ConfigError("decoder width must be divisible by heads");
  if (model.decoder.cond_width != model.policy.width) {
    throw ConfigError("model.decoder.cond_width must equal model.policy.width");
  }
  if (model.decoder.cond_width % model.decoder.heads != 0) {
    throw ConfigError("connector width must be divisible by decoder heads");
  }
  positive(data.train, "data.train");
  positive(data.eval_direct, "data.eval_direct");
  positive(data.eval_reasoning, "data.eval_reasoning");
  if (threads < 0) throw ConfigError("threads must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");

  positive(stage0.steps, "stage0.steps");
  positive(stage0.batch, "stage0.batch");
  positive(stage0.lr, "stage0.lr");
  positive(stage0.eval_every, "stage0.eval_every");
  if (!(stage0.consistency_target <= 1.0)) throw ConfigError("stage0.consistency_target must be at most 1");
  positive(stage1.steps, "stage1.steps");
  positive(stage1.batch, "stage1.batch");
  positive(stage1.lr, "stage1.lr");
  if (stage1.distill_weight < 0) throw ConfigError("stage1.distill_weight must be non-negative");
  if (!stage1.diffusion && !stage1.distill) throw ConfigError("stage 1 needs at least one loss term");
  positive(stage2.steps, "stage2.steps");
  positive(stage2.batch, "stage2.batch");
  positive(stage2.lr, "stage2.lr");
  if (stage2.ce_weight < 0 || stage2.diffusion_weight < 0) throw ConfigError("stage 2 loss weights must be >= 0");
  if (stage2.direct_prompt_fraction < 0 || stage2.direct_prompt_fraction > 1) {
    throw ConfigError("stage2.direct_prompt_fraction must lie in [0, 1]");
  }
  positive(stage3.updates, "stage3.updates");
  positive(stage3.prompts_per_update, "stage3.prompts_per_update");
  if (stage3.init_stage != 1 && stage3.init_stage != 2) throw ConfigError("stage3.init_stage must be 1 or 2");
  if (stage3.warmup < 0) throw ConfigError("stage3.warmup must be >= 0");
  stage3.rgpo.validate();
  if (!(eval.tau > -1 && eval.tau <= 1)) throw ConfigError("eval.tau must lie in (-1, 1]");
}

Json RunConfig::to_json() const {
  const auto& r = stage3.rgpo;
  Json rg{{"group_size", r.group_size},
          {"beta_text", r.beta_text},
          {"beta_image", r.beta_image},
          {"eps_clip", r.eps_clip},
          {"lr", r.lr},
          {"updates_per_batch", r.updates_per_batch},
          {"advantage", std::string(rgpo::advantage_mode_name(r.advantage))},
          {"ratio", std::string(rgpo::ratio_mode_name(r.ratio))},
          {"train_connector", r.train_connector},
          {"train_decoder", r.train_decoder},
          {"image_kl_full_trajectory", r.image_kl_full_trajectory},
          {"reward_format", r.weights.format},
          {"reward_consistency", r.weights.consistency},
          {"thinking", r.generation.thinking},
          {"temperature", r.generation.sampling.temperature},
          {"top_k", r.generation.sampling.top_k},
          {"max_len", r.generation.sampling.max_len},
          {"image_steps", r.generation.image_steps}};
  return Json{{"seed", seed},
              {"threads", threads},
              {"checkpoint_every", checkpoint_every},
              {"data", data_json(data)},
              {"model", Json{{"policy", policy_json(model.policy)}, {"decoder", decoder_json(model.decoder)}}},
              {"stage0", Json{{"steps", stage0.steps},
                              {"batch", stage0.batch},
                              {"lr", stage0.lr},
                              {"cosine", stage0.cosine},
                              {"consistency_target", stage0.consistency_target},
                              {"eval_every", stage0.eval_every}}},
              {"stage1", Json{{"steps", stage1.steps},
                              {"batch", stage1.batch},
                              {"lr", stage1.lr},
                              {"cosine", stage1.cosine},
                              {"distill_weight", stage1.distill_weight},
                              {"diffusion", stage1.diffusion},
                              {"distill", stage1.distill}}},
              {"stage2", Json{{"steps", stage2.steps},
                              {"batch", stage2.batch},
                              {"lr", stage2.lr},
                              {"cosine", stage2.cosine},
                              {"ce_weight", stage2.ce_weight},
                              {"diffusion_weight", stage2.diffusion_weight},
                              {"direct_prompt_fraction", stage2.direct_prompt_fraction}}},
              {"stage3", Json{{"updates", stage3.updates},
                              {"prompts_per_update", stage3.prompts_per_update},
                              {"cosine", stage3.cosine},
                              {"warmup", stage3.warmup},
                              {"init_stage", stage3.init_stage},
                              {"rgpo", rg}}},
              {"eval", Json{{"tau", eval.tau}, {"seed", eval.seed}}}};
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  Reader root(j, "");
  root.get("seed", c.seed);
  root.get("threads", c.threads);
  root.get("checkpoint_every", c.checkpoint_every);
  {
    Reader d = root.sub("data");
    d.get("train", c.data.train);
    d.get("eval_direct", c.data.eval_direct);
    d.get("eval_reasoning", c.data.eval_reasoning);
    d.finish();
  }
  {
    Reader m = root.sub("model");
    Reader p = m.sub("policy");
    p.get("width", c.model.policy.width);
    p.get("layers", c.model.policy.layers);
    p.get("heads", c.model.policy.heads);
    p.get("ff", c.model.policy.ff);
    p.get("context", c.model.policy.context);
    p.finish();
    Reader d = m.sub("decoder");
    d.get("width", c.model.decoder.width);
    d.get("layers", c.model.decoder.layers);
    d.get("heads", c.model.decoder.heads);
    d.get("ff", c.model.decoder.ff);
    d.get("cond_width", c.model.decoder.cond_width);
    d.get("connector_layers", c.model.decoder.connector_layers);
    d.get("time_frequencies", c.model.decoder.time_frequencies);
    d.get("sampling_steps", c.model.decoder.sampling_steps);
    d.finish();
    m.finish();
  }
  {
    Reader s = root.sub("stage0");
    s.get("steps", c.stage0.steps);
    s.get("batch", c.stage0.batch);
    s.get("lr", c.stage0.lr);
    s.get("cosine", c.stage0.cosine);
    s.get("consistency_target", c.stage0.consistency_target);
    s.get("eval_every", c.stage0.eval_every);
    s.finish();
  }
  {
    Reader s = root.sub("stage1");
    s.get("steps", c.stage1.steps);
    s.get("batch", c.stage1.batch);
    s.get("lr", c.stage1.lr);
    s.get("cosine", c.stage1.cosine);
    s.get("distill_weight", c.stage1.distill_weight);
    s.get("diffusion", c.stage1.diffusion);
    s.get("distill", c.stage1.distill);
    s.finish();
  }
  {
    Reader s = root.sub("stage2");
    s.get("steps", c.stage2.steps);
    s.get("batch", c.stage2.batch);
    s.get("lr", c.stage2.lr);
    s.get("cosine", c.stage2.cosine);
    s.get("ce_weight", c.stage2.ce_weight);
    s.get("diffusion_weight", c.stage2.diffusion_weight);
    s.get("direct_prompt_fraction", c.stage2.direct_prompt_fraction);
    s.finish();
  }
  {
    Reader s = root.sub("stage3");
    s.get("updates", c.stage3.updates);
    s.get("prompts_per_update", c.stage3.prompts_per_update);
    s.get("cosine", c.stage3.cosine);
    s.get("warmup", c.stage3.warmup);
    s.get("init_stage", c.stage3.init_stage);
    Reader r = s.sub("rgpo");
    auto& g = c.stage3.rgpo;
    r.get("group_size", g.group_size);
    r.get("beta_text", g.beta_text);
    r.get("beta_image", g.beta_image);
    r.get("eps_clip", g.eps_clip);
    r.get("lr", g.lr);
    r.get("updates_per_batch", g.updates_per_batch);
    std::string adv(rgpo::advantage_mode_name(g.advantage));
    std::string ratio(rgpo::ratio_mode_name(g.ratio));
    r.get("advantage", adv);
    r.get("ratio", ratio);
    g.advantage = rgpo::parse_advantage_mode(adv);
    g.ratio = rgpo::parse_ratio_mode(ratio);
    r.get("train_connector", g.train_connector);
    r.get("train_decoder", g.train_decoder);
    r.get("image_kl_full_trajectory", g.image_kl_full_trajectory);
    r.get("reward_format", g.weights.format);
    r.get("reward_consistency", g.weights.consistency);
    r.get("thinking", g.generation.thinking);
    r.get("temperature", g.generation.sampling.temperature);
    r.get("top_k", g.generation.sampling.top_k);
    r.get("max_len", g.generation.sampling.max_len);
    r.get("image_steps", g.generation.image_steps);
    r.finish();
    s.finish();
  }
  {
    Reader e = root.sub("eval");
    e.get("tau", c.eval.tau);
    e.get("seed", c.eval.seed);
    e.finish();
  }
  root.finish();
  c.validate();
  return c;
}

std::uint64_t RunConfig::hash() const { return fnv1a(to_json().dump()); }

std::uint64_t RunConfig::architecture_hash() const {
  const Json j{{"seed", seed},
               {"data", data_json(data)},
               {"policy", policy_json(model.policy)},
               {"decoder", decoder_json(model.decoder)}};
  return fnv1a(j.dump());
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  Json j = base.to_json();
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string key = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    Json value;
    try {
      value = Json::parse(text);
    } catch (const nlohmann::json::exception&) {
      value = text;
    }
    Json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown config key '" + key + "'");
      node = &(*node)[parts[i]];
    }
    if (!node->is_object() || !node->contains(parts.back())) throw ConfigError("unknown config key '" + key + "'");
    (*node)[parts.back()] = value;
  }
  return RunConfig::from_json(j);
}

// ------------------------------------------------------------------ stages

TrainableMask allowed_mask(int stage) {
  switch (stage) {
    case 0: return {true, false, false, false};
    case 1: return {false, false, true, false};
    case 2: return {false, true, true, true};
    case 3: return {false, true, true, true};
  }
  throw ConfigError("unknown stage " + std::to_string(stage));
}

void StageConfig::validate() const {
  const TrainableMask a = allowed_mask(stage);
  auto check = [&](bool want, bool ok, const char* name) {
    if (want && !ok) throw ConfigError("stage " + std::to_string(stage) + " may not train the " + name);
  };
  check(trainable.teacher, a.teacher, "teacher");
  check(trainable.policy, a.policy, "policy");
  check(trainable.connector, a.connector, "connector");
  check(trainable.decoder, a.decoder, "decoder");
  if (steps < 1 || batch < 1 || !(lr > 0)) throw ConfigError("stage " + std::to_string(stage) + " has empty budget");
}

StageConfig stage_config(const RunConfig& cfg, int stage) {
  StageConfig s;
  s.stage = stage;
  s.seed = derive_seed(cfg.seed, {0x57a6e, static_cast<std::uint64_t>(stage)});
  switch (stage) {
    case 0:
      s.steps = cfg.stage0.steps;
      s.batch = cfg.stage0.batch;
      s.lr = cfg.stage0.lr;
      s.cosine = cfg.stage0.cosine;
      s.losses.diffusion = true;
      s.trainable.teacher = true;
      break;
    case 1:
      s.steps = cfg.stage1.steps;
      s.batch = cfg.stage1.batch;
      s.lr = cfg.stage1.lr;
      s.cosine = cfg.stage1.cosine;
      s.losses.diffusion = cfg.stage1.diffusion;
      s.losses.distill = cfg.stage1.distill && cfg.stage1.distill_weight > 0;
      s.trainable.connector = true;
      break;
    case 2:
      s.steps = cfg.stage2.steps;
      s.batch = cfg.stage2.batch;
      s.lr = cfg.stage2.lr;
      s.cosine = cfg.stage2.cosine;
      s.losses.cross_entropy = cfg.stage2.ce_weight > 0;
      s.losses.diffusion = cfg.stage2.diffusion_weight > 0;
      s.trainable = {false, true, true, true};
      break;
    case 3:
      s.steps = cfg.stage3.updates;
      s.batch = cfg.stage3.prompts_per_update * cfg.stage3.rgpo.group_size;
      s.lr = cfg.stage3.rgpo.lr;
      s.cosine = cfg.stage3.cosine;
      s.warmup = cfg.stage3.warmup;
      s.losses.rgpo = true;
      s.trainable = {false, true, cfg.stage3.rgpo.train_connector, cfg.stage3.rgpo.train_decoder};
      break;
    default:
      throw ConfigError("unknown stage " + std::to_string(stage));
  }
  s.validate();
  return s;
}

double scheduled_lr(double base, long step, long total, bool cosine, long warmup) {
  double lr = base;
  if (warmup > 0 && step < warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (!cosine || total <= 0) return lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

int prerequisite_stage(const RunConfig& cfg, int stage) {
  switch (stage) {
    case 0: return -1;
    case 1: return 0;
    case 2: return 1;
    case 3: return cfg.stage3.init_stage;
  }
  throw ConfigError("unknown stage " + std::to_string(stage));
}

}  // namespace thinkdraw::pipeline
