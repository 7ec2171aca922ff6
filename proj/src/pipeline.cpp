#include "thinkdraw/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "thinkdraw/parallel.hpp"
#include "thinkdraw/rewards.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::pipeline {

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const char* const kComponents[] = {"teacher", "policy", "connector", "decoder"};

const ParamStore<float>& component(const Snapshot& s, const std::string& name) {
  if (name == "teacher") return s.teacher.params;
  if (name == "policy") return s.system.policy.params;
  if (name == "connector") return s.system.connector.params;
  if (name == "decoder") return s.system.decoder.params;
  throw ConfigError("unknown component '" + name + "'");
}

bool mask_allows(const TrainableMask& m, const std::string& name) {
  if (name == "teacher") return m.teacher;
  if (name == "policy") return m.policy;
  if (name == "connector") return m.connector;
  return m.decoder;
}

// Frozen components must come out of a stage bit-identical.
void enforce_mask(const Snapshot& before, const Snapshot& after, const TrainableMask& mask, int stage) {
  for (const auto& name : changed_components(before, after)) {
    if (!mask_allows(mask, name)) {
      throw TrainingError("frozen parameter drift: stage " + std::to_string(stage) + " changed the " + name);
    }
  }
}

std::vector<std::string> train_captions(const world::Dataset& data) {
  std::set<std::string> s;
  for (const auto& t : data.train) s.insert(t.gt_prompt);
  return {s.begin(), s.end()};
}

Tensor<float> noise_tensor(Rng& rng) {
  return Tensor<float>::vector(normal_vector<float>(rng, static_cast<std::size_t>(gen::kLatent)));
}

Tensor<float> render_values(const std::string& prompt) {
  return world::image_values(world::render(world::parse_prompt(prompt)));
}

// Per-step bookkeeping shared by the supervised stages.
struct Progress {
  const StageOptions& opt;
  const StageConfig& sc;

  void emit(const Json& record) const {
    if (opt.on_record) opt.on_record(record);
  }
  bool periodic(long done) const { return opt.checkpoint_every > 0 && done % opt.checkpoint_every == 0; }
  bool interrupted(long done) const { return opt.stop_after >= 0 && done >= opt.stop_after; }
  void checkpoint(const Snapshot& s) const {
    if (opt.on_checkpoint) opt.on_checkpoint(s);
  }
};

// Mean consistency of teacher samples over the given prompts (fixed noise seeds).
double teacher_consistency(const gen::DecoderConfig& cfg, const gen::DecoderModel<float>& teacher,
                           const std::vector<std::string>& prompts, std::uint64_t seed, int threads) {
  NoGradGuard guard;
  const Binding<float> dec(teacher.params, false);
  std::vector<double> scores(prompts.size());
  parallel_for(
      prompts.size(),
      [&](std::size_t i) {
        const Tensor<float> cond = gen::prompt_condition(cfg, dec, prompts[i]).value();
        const world::Image img = gen::sample_image(cfg, dec, cond, cfg.sampling_steps, derive_seed(seed, {i}));
        scores[i] = rewards::consistency_reward(img, prompts[i]);
      },
      threads);
  double s = 0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

// ------------------------------------------------------------------ stage 0

Snapshot run_stage0(const world::Dataset& data, Snapshot snap, const StageOptions& opt) {
  const RunConfig& cfg = snap.config;
  const StageConfig sc = stage_config(cfg, 0);
  const Progress prog{opt, sc};
  const auto& dcfg = cfg.model.decoder;
  const auto captions = train_captions(data);
  const std::uint64_t eval_seed = derive_seed(sc.seed, {0xe7a1});
  Adam<float>& adam = snap.optimizers.try_emplace("teacher").first->second;
  const Snapshot begin = snap;

  for (long step = snap.step; step < sc.steps; ++step) {
    const double lr = scheduled_lr(sc.lr, step, sc.steps, sc.cosine, sc.warmup);
    std::vector<double> losses(static_cast<std::size_t>(sc.batch));
    std::vector<TensorMap<float>> grads(static_cast<std::size_t>(sc.batch));
    parallel_for(
        grads.size(),
        [&](std::size_t i) {
          Rng rng = make_rng(sc.seed, {static_cast<std::uint64_t>(step), i});
          const std::string& caption =
              captions[std::uniform_int_distribution<std::size_t>(0, captions.size() - 1)(rng)];
          const double t = uniform01(rng);
          const Tensor<float> eps = noise_tensor(rng);
          const Tensor<float> x0 = render_values(caption);
          Binding<float> dec(snap.teacher.params, true);
          const auto out = gen::decoder_forward(dcfg, dec, gen::prompt_condition(dcfg, dec, caption),
                                                constant(gen::interpolate(x0, eps, t)), t);
          const Var<float> loss =
              ops::scale(gen::diffusion_loss(out.velocity, x0, eps), 1.0f / static_cast<float>(sc.batch));
          backward(loss);
          losses[i] = loss.item();
          grads[i] = dec.grads();
        },
        opt.threads);
    TensorMap<float> g;
    double loss = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      loss += losses[i];
      accumulate_into(g, grads[i]);
    }
    if (!std::isfinite(loss)) throw NonFiniteError("non-finite teacher loss at step " + std::to_string(step));
    const double gnorm = adam.step(snap.teacher.params, g, lr);
    snap.step = step + 1;

    Json rec{{"step", step}, {"loss", loss}, {"grad_norm", gnorm}, {"lr", lr}};
    bool reached = false;
    if (snap.step % cfg.stage0.eval_every == 0 || snap.step == sc.steps) {
      const double c = teacher_consistency(dcfg, snap.teacher, captions, eval_seed, opt.threads);
      rec["consistency"] = c;
      snap.info["consistency"] = c;
      reached = c >= cfg.stage0.consistency_target;
    }
    prog.emit(rec);
    if (reached) {
      snap.complete = true;
      break;
    }
    if (prog.periodic(snap.step)) prog.checkpoint(snap);
    if (prog.interrupted(snap.step) && snap.step < sc.steps) return snap;
  }
  enforce_mask(begin, snap, sc.trainable, 0);
  if (!snap.complete) {
    prog.checkpoint(snap);
    const double c = snap.info.value("consistency", 0.0);
    throw TrainingError("teacher reached mean consistency " + std::to_string(c) + " < target " +
                        std::to_string(cfg.stage0.consistency_target) + " within " + std::to_string(sc.steps) +
                        " steps");
  }
  snap.info["steps_used"] = snap.step;
  return snap;
}

// ------------------------------------------------------------------ stage 1

struct Stage1Terms {
  double loss = 0, diffusion = 0, distill = 0;
};

// Loss of one (caption, t, eps) sample; gradients flow into `conn` only.
Stage1Terms stage1_sample(const RunConfig& cfg, const Binding<float>& conn, const Binding<float>& student,
                          const Binding<float>& teacher, const Tensor<float>& states, const std::string& caption,
                          double t, const Tensor<float>& eps, float weight) {
  const auto& dcfg = cfg.model.decoder;
  const Tensor<float> x0 = render_values(caption);
  const Tensor<float> xt = gen::interpolate(x0, eps, t);
  std::vector<Tensor<float>> teacher_feats;
  {
    NoGradGuard guard;
    const auto tout = gen::decoder_forward(dcfg, teacher, gen::prompt_condition(dcfg, teacher, caption), constant(xt), t);
    for (const auto& f : tout.features) teacher_feats.push_back(f.value());
  }
  const Var<float> cond = gen::connect(dcfg, conn, constant(states));
  const auto out = gen::decoder_forward(dcfg, student, cond, constant(xt), t);
  const Var<float> diff = gen::diffusion_loss(out.velocity, x0, eps);
  const Var<float> dist = gen::distill_loss(out.features, teacher_feats);
  Var<float> total;
  if (cfg.stage1.diffusion) total = diff;
  if (cfg.stage1.distill) {
    const Var<float> d = ops::scale(dist, static_cast<float>(cfg.stage1.distill_weight));
    total = total ? ops::add(total, d) : d;
  }
  total = ops::scale(total, weight);
  Stage1Terms terms{total.item(), diff.item(), dist.item()};
  if (grad_enabled()) backward(total);
  return terms;
}

// Fixed probe: every caption at a seeded (t, eps), averaged.
Stage1Terms stage1_probe(const Snapshot& snap, const std::vector<std::string>& captions,
                         const std::vector<Tensor<float>>& states, std::uint64_t seed, int threads) {
  NoGradGuard guard;
  const Binding<float> conn(snap.system.connector.params, false);
  const Binding<float> student(snap.system.decoder.params, false);
  const Binding<float> teacher(snap.teacher.params, false);
  std::vector<Stage1Terms> out(captions.size());
  parallel_for(
      captions.size(),
      [&](std::size_t i) {
        Rng rng = make_rng(seed, {i});
        const double t = uniform01(rng);
        const Tensor<float> eps = noise_tensor(rng);
        out[i] = stage1_sample(snap.config, conn, student, teacher, states[i], captions[i], t, eps, 1.0f);
      },
      threads);
  Stage1Terms m;
  for (const auto& o : out) {
    m.loss += o.loss / static_cast<double>(out.size());
    m.diffusion += o.diffusion / static_cast<double>(out.size());
    m.distill += o.distill / static_cast<double>(out.size());
  }
  return m;
}

Json terms_json(const Stage1Terms& t) { return Json{{"loss", t.loss}, {"diffusion", t.diffusion}, {"distill", t.distill}}; }

Snapshot run_stage1(const world::Dataset& data, Snapshot snap, const StageOptions& opt) {
  const RunConfig& cfg = snap.config;
  const StageConfig sc = stage_config(cfg, 1);
  const Progress prog{opt, sc};
  const auto captions = train_captions(data);
  std::vector<Tensor<float>> states(captions.size());
  parallel_for(
      captions.size(), [&](std::size_t i) { states[i] = caption_states(snap.system, captions[i]); }, opt.threads);
  const std::uint64_t probe_seed = derive_seed(sc.seed, {0x9b0e});

  if (snap.stage != 1) {
    // Fresh start: the student decoder begins as a copy of the teacher.
    snap.stage = 1;
    snap.step = 0;
    snap.complete = false;
    snap.optimizers.clear();
    snap.info = Json::object();
    snap.system.decoder.params = snap.teacher.params;
    snap.info["probe_start"] = terms_json(stage1_probe(snap, captions, states, probe_seed, opt.threads));
    prog.checkpoint(snap);
  }
  Adam<float>& adam = snap.optimizers.try_emplace("connector").first->second;
  const Snapshot begin = snap;
  const Binding<float> student(snap.system.decoder.params, false);
  const Binding<float> teacher(snap.teacher.params, false);

  for (long step = snap.step; step < sc.steps; ++step) {
    const double lr = scheduled_lr(sc.lr, step, sc.steps, sc.cosine, sc.warmup);
    std::vector<Stage1Terms> terms(static_cast<std::size_t>(sc.batch));
    std::vector<TensorMap<float>> grads(terms.size());
    parallel_for(
        terms.size(),
        [&](std::size_t i) {
          Rng rng = make_rng(sc.seed, {static_cast<std::uint64_t>(step), i});
          const std::size_t k = std::uniform_int_distribution<std::size_t>(0, captions.size() - 1)(rng);
          const double t = uniform01(rng);
          const Tensor<float> eps = noise_tensor(rng);
          Binding<float> conn(snap.system.connector.params, true);
          terms[i] = stage1_sample(cfg, conn, student, teacher, states[k], captions[k], t, eps,
                                   1.0f / static_cast<float>(sc.batch));
          grads[i] = conn.grads();
        },
        opt.threads);
    TensorMap<float> g;
    Stage1Terms m;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      m.loss += terms[i].loss;
      m.diffusion += terms[i].diffusion / static_cast<double>(sc.batch);
      m.distill += terms[i].distill / static_cast<double>(sc.batch);
      accumulate_into(g, grads[i]);
    }
    if (!std::isfinite(m.loss)) throw NonFiniteError("non-finite stage-1 loss at step " + std::to_string(step));
    const double gnorm = adam.step(snap.system.connector.params, g, lr);
    snap.step = step + 1;
    prog.emit(Json{{"step", step}, {"loss", m.loss}, {"diffusion", m.diffusion}, {"distill", m.distill},
                   {"grad_norm", gnorm}, {"lr", lr}});
    if (prog.periodic(snap.step)) prog.checkpoint(snap);
    if (prog.interrupted(snap.step) && snap.step < sc.steps) return snap;
  }
  enforce_mask(begin, snap, sc.trainable, 1);
  snap.info["probe_end"] = terms_json(stage1_probe(snap, captions, states, probe_seed, opt.threads));
  snap.complete = true;
  return snap;
}

// ------------------------------------------------------------------ stage 2

struct SftSample {
  std::vector<int> prompt;  // query + prefill
  std::vector<int> target;  // supervised response tokens
  bool thinking = true;
};

SftSample sft_sample(const world::Task& task, bool thinking) {
  SftSample s;
  s.thinking = thinking;
  s.prompt = agent::query_ids(task.instruction);
  const auto prefill = agent::prefill_ids(thinking);
  s.prompt.insert(s.prompt.end(), prefill.begin(), prefill.end());
  const std::vector<int> full = lm::tokenize(agent::sft_target(task));
  s.target.assign(full.begin() + static_cast<std::ptrdiff_t>(prefill.size()), full.end());
  return s;
}

Snapshot run_stage2(const world::Dataset& data, Snapshot snap, const StageOptions& opt) {
  const RunConfig& cfg = snap.config;
  const StageConfig sc = stage_config(cfg, 2);
  const Progress prog{opt, sc};
  const auto& pcfg = cfg.model.policy;
  const auto& dcfg = cfg.model.decoder;
  if (snap.stage != 2) {
    snap.stage = 2;
    snap.step = 0;
    snap.complete = false;
    snap.optimizers.clear();
    snap.info = Json::object();
    prog.checkpoint(snap);
  }
  Adam<float>& opt_policy = snap.optimizers.try_emplace("policy").first->second;
  Adam<float>& opt_connector = snap.optimizers.try_emplace("connector").first->second;
  Adam<float>& opt_decoder = snap.optimizers.try_emplace("decoder").first->second;
  const Snapshot begin = snap;
  const std::vector<int> prefix_ids[2] = {agent::system_prefix(false), agent::system_prefix(true)};

  for (long step = snap.step; step < sc.steps; ++step) {
    const double lr = scheduled_lr(sc.lr, step, sc.steps, sc.cosine, sc.warmup);
    struct Draw {
      std::size_t task;
      bool thinking;
      double t;
      Tensor<float> eps;
    };
    std::vector<Draw> draws;
    for (int i = 0; i < sc.batch; ++i) {
      Rng rng = make_rng(sc.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
      Draw d;
      d.task = std::uniform_int_distribution<std::size_t>(0, data.train.size() - 1)(rng);
      const double u = uniform01(rng);
      d.thinking = data.train[d.task].mode == world::Mode::reasoning || u >= cfg.stage2.direct_prompt_fraction;
      d.t = uniform01(rng);
      d.eps = noise_tensor(rng);
      draws.push_back(std::move(d));
    }
    bool used[2] = {false, false};
    for (const auto& d : draws) used[d.thinking ? 1 : 0] = true;

    Binding<float> shared(snap.system.policy.params, true);
    lm::PrefixCache<float> sources[2];
    for (int m = 0; m < 2; ++m) {
      if (used[m]) sources[m] = lm::compute_prefix(pcfg, shared, prefix_ids[m]);
    }

    struct Slot {
      double loss = 0, ce = 0, diffusion = 0;
      TensorMap<float> policy, connector, decoder;
      std::vector<Tensor<float>> prefix;
    };
    std::vector<Slot> slots(draws.size());
    const float w = 1.0f / static_cast<float>(sc.batch);
    parallel_for(
        draws.size(),
        [&](std::size_t i) {
          const Draw& d = draws[i];
          const world::Task& task = data.train[d.task];
          const SftSample s = sft_sample(task, d.thinking);
          Binding<float> pol(snap.system.policy.params, true);
          Binding<float> conn(snap.system.connector.params, true);
          Binding<float> dec(snap.system.decoder.params, true);
          const lm::PrefixCache<float> leaves = lm::leaf_prefix(sources[d.thinking ? 1 : 0], true);
          Var<float> hidden;
          const Var<float> lp = lm::continuation_logprobs(pcfg, pol, s.prompt, s.target, &leaves, &hidden);
          const Var<float> ce = ops::scale(ops::mean(lp), -1.0f);
          // The decoder path sees the teacher-forced states as constants.
          const int first = static_cast<int>(s.prompt.size()) - 1;
          const Tensor<float> states =
              ops::slice(hidden, 0, first, static_cast<int>(s.target.size())).value();
          const Tensor<float> x0 = render_values(task.gt_prompt);
          const Var<float> cond = gen::connect(dcfg, conn, constant(states));
          const auto out = gen::decoder_forward(dcfg, dec, cond, constant(gen::interpolate(x0, d.eps, d.t)), d.t);
          const Var<float> diff = gen::diffusion_loss(out.velocity, x0, d.eps);
          const Var<float> loss =
              ops::scale(ops::add(ops::scale(ce, static_cast<float>(cfg.stage2.ce_weight)),
                                  ops::scale(diff, static_cast<float>(cfg.stage2.diffusion_weight))),
                         w);
          backward(loss);
          Slot& slot = slots[i];
          slot.loss = loss.item();
          slot.ce = ce.item();
          slot.diffusion = diff.item();
          slot.policy = pol.grads();
          slot.connector = conn.grads();
          slot.decoder = dec.grads();
          slot.prefix = lm::prefix_grads(leaves);
        },
        opt.threads);

    TensorMap<float> g_policy, g_connector, g_decoder;
    std::vector<Tensor<float>> g_prefix[2];
    double loss = 0, ce = 0, diffusion = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const Slot& s = slots[i];
      loss += s.loss;
      ce += s.ce / sc.batch;
      diffusion += s.diffusion / sc.batch;
      accumulate_into(g_policy, s.policy);
      accumulate_into(g_connector, s.connector);
      accumulate_into(g_decoder, s.decoder);
      lm::accumulate_prefix_grads(g_prefix[draws[i].thinking ? 1 : 0], s.prefix);
    }
    if (!std::isfinite(loss)) throw NonFiniteError("non-finite stage-2 loss at step " + std::to_string(step));
    for (int m = 0; m < 2; ++m) {
      if (used[m]) lm::backprop_prefix(sources[m], g_prefix[m]);
    }
    accumulate_into(g_policy, shared.grads());
    const double n1 = opt_policy.step(snap.system.policy.params, g_policy, lr);
    const double n2 = opt_connector.step(snap.system.connector.params, g_connector, lr);
    const double n3 = opt_decoder.step(snap.system.decoder.params, g_decoder, lr);
    snap.step = step + 1;
    prog.emit(Json{{"step", step},
                   {"loss", loss},
                   {"cross_entropy", ce},
                   {"diffusion", diffusion},
                   {"grad_norm", std::sqrt(n1 * n1 + n2 * n2 + n3 * n3)},
                   {"lr", lr}});
    if (prog.periodic(snap.step)) prog.checkpoint(snap);
    if (prog.interrupted(snap.step) && snap.step < sc.steps) return snap;
  }
  enforce_mask(begin, snap, sc.trainable, 2);
  snap.complete = true;
  return snap;
}

// ------------------------------------------------------------------ stage 3

Snapshot run_stage3(const world::Dataset& data, Snapshot snap, const StageOptions& opt) {
  const RunConfig& cfg = snap.config;
  const StageConfig sc = stage_config(cfg, 3);
  const Progress prog{opt, sc};
  const rgpo::RgpoConfig& rc = cfg.stage3.rgpo;
  if (snap.stage != 3) {
    snap.stage = 3;
    snap.step = 0;
    snap.complete = false;
    snap.optimizers.clear();
    snap.info = Json::object();
    snap.ref = snap.system;
    prog.checkpoint(snap);
  }
  if (!snap.ref) throw CheckpointError("stage-3 snapshot has no reference model");
  const Snapshot begin = snap;

  rgpo::TrainState state{snap.system, *snap.ref, {}, {}, {}, snap.step};
  auto take = [&](const char* name, Adam<float>& dst) {
    if (auto it = snap.optimizers.find(name); it != snap.optimizers.end()) dst = it->second;
  };
  take("policy", state.policy_opt);
  take("connector", state.connector_opt);
  take("decoder", state.decoder_opt);
  auto sync = [&](Snapshot& s, const rgpo::TrainState& st) {
    s.system = st.theta;
    s.step = st.step;
    s.optimizers["policy"] = st.policy_opt;
    if (rc.train_connector) s.optimizers["connector"] = st.connector_opt;
    if (rc.train_decoder) s.optimizers["decoder"] = st.decoder_opt;
  };

  const std::size_t prompts = static_cast<std::size_t>(cfg.stage3.prompts_per_update);
  for (long step = state.step; step < sc.steps; ++step) {
    const double lr = scheduled_lr(sc.lr, step, sc.steps, sc.cosine, sc.warmup);
    std::vector<rgpo::RolloutGroup> groups(prompts);
    {
      const agent::InferenceContext ctx(state.theta);
      std::vector<std::size_t> picks(prompts);
      Rng rng = make_rng(sc.seed, {static_cast<std::uint64_t>(step)});
      for (auto& p : picks) p = std::uniform_int_distribution<std::size_t>(0, data.train.size() - 1)(rng);
      parallel_for(
          prompts,
          [&](std::size_t j) {
            groups[j] = rgpo::rollout(ctx, data.train[picks[j]], rc,
                                      derive_seed(sc.seed, {static_cast<std::uint64_t>(step), j, 0x726f}), 1);
            rgpo::fill_advantages(groups[j], rc.advantage);
          },
          opt.threads);
    }
    const rgpo::TrainState last_good = state;
    rgpo::UpdateMetrics m;
    try {
      m = rgpo::update_step(state, groups, rc, lr, opt.threads);
    } catch (const NonFiniteError&) {
      sync(snap, last_good);
      snap.info["aborted"] = "non-finite loss or gradient at update " + std::to_string(step);
      prog.checkpoint(snap);
      throw;
    }
    sync(snap, state);
    prog.emit(Json::parse(m.to_json()));
    if (prog.periodic(snap.step)) prog.checkpoint(snap);
    if (prog.interrupted(snap.step) && snap.step < sc.steps) return snap;
  }
  enforce_mask(begin, snap, sc.trainable, 3);
  snap.complete = true;
  return snap;
}

}  // namespace

// ------------------------------------------------------------------ snapshots

Snapshot initial_snapshot(const RunConfig& cfg) {
  cfg.validate();
  Snapshot s;
  s.config = cfg;
  s.stage = -1;
  s.complete = true;
  s.system = agent::System<float>::create(cfg.model, derive_seed(cfg.seed, {0x5157}));
  s.teacher = gen::DecoderModel<float>::create(cfg.model.decoder, derive_seed(cfg.seed, {0x7eac}));
  return s;
}

std::vector<std::string> changed_components(const Snapshot& a, const Snapshot& b) {
  std::vector<std::string> out;
  for (const char* name : kComponents) {
    if (!(component(a, name) == component(b, name))) out.emplace_back(name);
  }
  return out;
}

ckpt::Checkpoint to_checkpoint(const Snapshot& s) {
  ckpt::Checkpoint c;
  c.meta["format"] = "thinkdraw-run";
  c.meta["stage"] = s.stage;
  c.meta["step"] = s.step;
  c.meta["complete"] = s.complete;
  c.meta["config_hash"] = hex(s.config.hash());
  c.meta["architecture_hash"] = hex(s.config.architecture_hash());
  // Every random draw is a pure function of (stage seed, step, index), so the
  // generator state is fully described by the stage seed and the next step.
  c.meta["rng"] = Json{{"stage_seed", s.stage >= 0 ? hex(stage_config(s.config, s.stage).seed) : hex(s.config.seed)},
                       {"next_step", s.step}};
  c.meta["info"] = s.info;
  c.meta["config"] = s.config.to_json();
  for (const char* name : kComponents) ckpt::put(c, name, component(s, name));
  if (s.ref) {
    ckpt::put(c, "ref.policy", s.ref->policy.params);
    ckpt::put(c, "ref.connector", s.ref->connector.params);
    ckpt::put(c, "ref.decoder", s.ref->decoder.params);
  }
  c.meta["optimizers"] = Json::object();
  for (const auto& [name, opt] : s.optimizers) ckpt::put_optimizer(c, name, opt);
  return c;
}

Snapshot from_checkpoint(const ckpt::Checkpoint& c, const RunConfig& cfg) {
  if (c.meta.value("format", std::string()) != "thinkdraw-run") {
    throw CheckpointError("checkpoint does not hold a training run");
  }
  Snapshot s = initial_snapshot(cfg);
  ckpt::restore(c, "teacher", s.teacher.params);
  ckpt::restore(c, "policy", s.system.policy.params);
  ckpt::restore(c, "connector", s.system.connector.params);
  ckpt::restore(c, "decoder", s.system.decoder.params);
  if (c.meta.value("architecture_hash", std::string()) != hex(cfg.architecture_hash())) {
    throw CheckpointError("checkpoint was produced under a different model, data or seed configuration");
  }
  try {
    s.stage = c.meta.at("stage").get<int>();
    s.step = c.meta.at("step").get<long>();
    s.complete = c.meta.at("complete").get<bool>();
    s.info = c.meta.value("info", Json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  if (ckpt::has_component(c, "ref.policy")) {
    agent::System<float> ref = s.system;
    ckpt::restore(c, "ref.policy", ref.policy.params);
    ckpt::restore(c, "ref.connector", ref.connector.params);
    ckpt::restore(c, "ref.decoder", ref.decoder.params);
    s.ref = std::move(ref);
  }
  if (c.meta.contains("optimizers")) {
    for (const auto& [name, _] : c.meta.at("optimizers").items()) {
      Adam<float> opt;
      ckpt::restore_optimizer(c, name, component(s, name), opt);
      s.optimizers.emplace(name, std::move(opt));
    }
  }
  return s;
}

Tensor<float> caption_states(const agent::System<float>& sys, const std::string& caption) {
  NoGradGuard guard;
  const auto& pcfg = sys.config.policy;
  const Binding<float> p(sys.policy.params, false);
  std::vector<int> prompt = agent::system_prefix(false);
  const auto query = agent::query_ids(caption);
  prompt.insert(prompt.end(), query.begin(), query.end());
  const std::vector<int> cont = lm::tokenize("<think></think><answer>" + caption + "</answer><img>");
  Var<float> hidden;
  lm::continuation_logprobs(pcfg, p, prompt, cont, static_cast<const lm::PrefixCache<float>*>(nullptr), &hidden);
  return ops::slice(hidden, 0, static_cast<int>(prompt.size()) - 1, static_cast<int>(cont.size())).value();
}

Snapshot run_stage(int stage, const world::Dataset& data, const Snapshot& start, const StageOptions& opt) {
  const RunConfig& cfg = start.config;
  cfg.validate();
  if (data.train.empty()) throw DatasetError("training split is empty");
  const bool resume = start.stage == stage && !start.complete;
  if (!resume) {
    const int pre = prerequisite_stage(cfg, stage);
    if (start.stage != pre || !start.complete) {
      throw TrainingError("stage " + std::to_string(stage) + " starts from a completed stage " + std::to_string(pre) +
                          " (got " + (start.complete ? "completed" : "partial") + " stage " +
                          std::to_string(start.stage) + ")");
    }
  }
  Snapshot snap = start;
  if (stage == 0) {
    if (!resume) {
      snap.stage = 0;
      snap.step = 0;
      snap.complete = false;
      snap.optimizers.clear();
      snap.info = Json::object();
    }
    return run_stage0(data, std::move(snap), opt);
  }
  if (stage == 1) return run_stage1(data, std::move(snap), opt);
  if (stage == 2) return run_stage2(data, std::move(snap), opt);
  if (stage == 3) return run_stage3(data, std::move(snap), opt);
  throw ConfigError("unknown stage " + std::to_string(stage));
}

}  // namespace thinkdraw::pipeline
