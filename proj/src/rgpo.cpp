#include "thinkdraw/rgpo.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "thinkdraw/parallel.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::rgpo {

std::string_view advantage_mode_name(AdvantageMode m) {
  return m == AdvantageMode::paper_var ? "paper_var" : "std";
}

AdvantageMode parse_advantage_mode(std::string_view s) {
  if (s == "paper_var") return AdvantageMode::paper_var;
  if (s == "std") return AdvantageMode::std_dev;
  throw ConfigError("unknown advantage mode '" + std::string(s) + "' (expected paper_var or std)");
}

std::string_view ratio_mode_name(RatioMode m) { return m == RatioMode::per_token ? "per_token" : "per_sequence"; }

RatioMode parse_ratio_mode(std::string_view s) {
  if (s == "per_token") return RatioMode::per_token;
  if (s == "per_sequence") return RatioMode::per_sequence;
  throw ConfigError("unknown ratio mode '" + std::string(s) + "' (expected per_token or per_sequence)");
}

void RgpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("group size must be at least 2");
  if (!(eps_clip > 0 && eps_clip < 1)) throw ConfigError("eps_clip must lie in (0, 1)");
  if (beta_text < 0 || beta_image < 0) throw ConfigError("KL coefficients must be non-negative");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (updates_per_batch < 1) throw ConfigError("updates_per_batch must be at least 1");
  if (generation.image_steps < 1) throw ConfigError("image sampling needs at least one step");
}

RolloutGroup rollout(const agent::InferenceContext& ctx, const world::Task& task, const RgpoConfig& cfg,
                     std::uint64_t seed, int threads) {
  cfg.validate();
  RolloutGroup group;
  group.task = task;
  group.outputs.resize(static_cast<std::size_t>(cfg.group_size));
  parallel_for(
      group.outputs.size(),
      [&](std::size_t i) {
        RolloutOutput& out = group.outputs[i];
        out.image_seed = derive_seed(seed, {i, 0x696d67});
        agent::Generation g =
            agent::generate(ctx, task.instruction, cfg.generation, derive_seed(seed, {i, 0x747874}), out.image_seed);
        out.text = std::move(g.text);
        out.response = std::move(g.response);
        out.image = g.image;
        out.overflow = g.overflow;
        // An output that ran out of context scores nothing.
        if (!out.overflow) out.reward = rewards::total_reward(out.response, out.image, task.gt_prompt, cfg.weights);
      },
      threads);
  return group;
}

std::vector<double> advantages(const std::vector<double>& rewards, AdvantageMode mode) {
  if (rewards.size() < 2) throw ConfigError("advantages need a group of at least 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> out(rewards.size(), 0.0);
  if (var == 0.0) return out;
  const double denom = mode == AdvantageMode::paper_var ? var : std::sqrt(var);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

void fill_advantages(RolloutGroup& group, AdvantageMode mode) {
  std::vector<double> r;
  for (const auto& o : group.outputs) r.push_back(o.reward.total);
  const auto a = advantages(r, mode);
  for (std::size_t i = 0; i < a.size(); ++i) group.outputs[i].advantage = a[i];
}

template <typename T>
Var<T> text_kl(const Var<T>& lp_theta, const std::vector<double>& lp_ref) {
  if (lp_theta.size() != lp_ref.size() || lp_ref.empty()) throw ShapeError("text_kl: token counts differ");
  const Var<T> d = ops::sub(constant(Tensor<T>::vector(std::vector<T>(lp_ref.begin(), lp_ref.end()))), lp_theta);
  return ops::mean(ops::add_scalar(ops::sub(ops::exp(d), d), T(-1)));
}

template <typename T>
Var<T> surrogate(const Var<T>& lp_theta, const std::vector<double>& lp_old, double advantage, double eps_clip,
                 RatioMode mode) {
  if (lp_theta.size() != lp_old.size() || lp_old.empty()) throw ShapeError("surrogate: token counts differ");
  Var<T> diff = ops::sub(lp_theta, constant(Tensor<T>::vector(std::vector<T>(lp_old.begin(), lp_old.end()))));
  if (mode == RatioMode::per_sequence) diff = ops::sum(diff);
  const Var<T> rho = ops::exp(diff);
  const T a = static_cast<T>(advantage);
  const Var<T> unclipped = ops::scale(rho, a);
  const Var<T> clipped = ops::scale(ops::clip(rho, static_cast<T>(1 - eps_clip), static_cast<T>(1 + eps_clip)), a);
  return ops::mean(ops::minimum(unclipped, clipped));
}

template Var<float> text_kl<float>(const Var<float>&, const std::vector<double>&);
template Var<double> text_kl<double>(const Var<double>&, const std::vector<double>&);
template Var<float> surrogate<float>(const Var<float>&, const std::vector<double>&, double, double, RatioMode);
template Var<double> surrogate<double>(const Var<double>&, const std::vector<double>&, double, double, RatioMode);

namespace {

struct ThetaView {
  const agent::SystemConfig* cfg;
  const Binding<float>* policy;
  const Binding<float>* connector;
  const Binding<float>* decoder;
  const lm::PrefixCache<float>* prefix;
};

struct OutputTerms {
  Var<float> loss;  // weighted contribution of this output to the objective
  double surrogate = 0;
  double kl_text = 0;
  double kl_image = 0;
};

std::vector<double> kl_times(const RolloutOutput& out, const RgpoConfig& cfg, std::uint64_t kl_seed) {
  if (cfg.image_kl_full_trajectory) {
    std::vector<double> ts;
    const int n = cfg.generation.image_steps;
    for (int k = 0; k < n; ++k) ts.push_back(static_cast<double>(k) / n);
    return ts;
  }
  Rng rng = make_rng(out.image_seed, {kl_seed, 0x6b6c});
  return {uniform01(rng)};
}

// Builds the per-output objective term; nullopt for outputs without tokens.
std::optional<OutputTerms> output_terms(const ThetaView& th, const agent::InferenceContext& ref,
                                        const RolloutOutput& out, const RgpoConfig& cfg, double weight,
                                        std::uint64_t kl_seed) {
  if (!out.advantage) throw TrainingError("rgpo_loss: advantages have not been filled");
  const std::vector<int> cont = out.text.continuation();
  if (cont.empty()) return std::nullopt;
  if (out.text.logprobs.size() != cont.size()) throw ShapeError("rollout logprobs do not align with its tokens");
  const std::vector<int> prompt(out.text.ids.begin(), out.text.ids.begin() + out.text.prompt_length);
  const int n = static_cast<int>(cont.size());
  const int first = out.text.prompt_length - 1;
  const bool thinking = cfg.generation.thinking;
  const auto& pcfg = th.cfg->policy;
  const auto& dcfg = th.cfg->decoder;

  Var<float> hidden;
  const Var<float> lp = lm::continuation_logprobs(pcfg, *th.policy, prompt, cont, th.prefix, &hidden);
  const Var<float> states = ops::slice(hidden, 0, first, n);

  std::vector<double> lp_ref;
  Tensor<float> ref_cond;
  {
    NoGradGuard guard;
    Var<float> ref_hidden;
    const Var<float> ref_lp = lm::continuation_logprobs(ref.system().config.policy, ref.policy(), prompt, cont,
                                                        &ref.prefix(thinking), &ref_hidden);
    for (float v : ref_lp.value().data()) lp_ref.push_back(v);
    ref_cond = gen::connect(ref.system().config.decoder, ref.connector(), ops::slice(ref_hidden, 0, first, n)).value();
  }

  OutputTerms terms;
  const Var<float> surr = surrogate(lp, out.text.logprobs, *out.advantage, cfg.eps_clip, cfg.ratio);
  const Var<float> klt = text_kl(lp, lp_ref);

  const Var<float> cond = gen::connect(dcfg, *th.connector, states);
  const Tensor<float> x0 = world::image_values(out.image);
  const Tensor<float> eps = gen::flow_noise(out.image_seed).cast<float>();
  const auto times = kl_times(out, cfg, kl_seed);
  Var<float> kli;
  for (double t : times) {
    const Tensor<float> xt = gen::interpolate(x0, eps, t);
    Tensor<float> ref_feat;
    {
      NoGradGuard guard;
      ref_feat = gen::decoder_forward(ref.system().config.decoder, ref.decoder(), constant(ref_cond), constant(xt), t)
                     .features.back()
                     .value();
    }
    const Var<float> feat = gen::decoder_forward(dcfg, *th.decoder, cond, constant(xt), t).features.back();
    const Var<float> k = ops::scale(gen::feature_kl(feat, ref_feat), 1.0f / static_cast<float>(times.size()));
    kli = kli ? ops::add(kli, k) : k;
  }

  const Var<float> objective = ops::sub(surr, ops::add(ops::scale(klt, static_cast<float>(cfg.beta_text)),
                                                       ops::scale(kli, static_cast<float>(cfg.beta_image))));
  terms.loss = ops::scale(objective, static_cast<float>(-weight));
  terms.surrogate = surr.item();
  terms.kl_text = klt.item();
  terms.kl_image = kli.item();
  return terms;
}

std::size_t total_outputs(const std::vector<RolloutGroup>& groups, int group_size) {
  if (groups.empty()) throw TrainingError("no rollout groups");
  for (const auto& g : groups) {
    if (static_cast<int>(g.outputs.size()) != group_size) {
      throw TrainingError("group has " + std::to_string(g.outputs.size()) + " outputs, expected " +
                          std::to_string(group_size));
    }
  }
  return groups.size() * static_cast<std::size_t>(group_size);
}

}  // namespace

LossBreakdown rgpo_loss(const std::vector<RolloutGroup>& groups, const agent::System<float>& theta,
                        const agent::System<float>& ref, const RgpoConfig& cfg, std::uint64_t kl_seed) {
  cfg.validate();
  const std::size_t total = total_outputs(groups, cfg.group_size);
  NoGradGuard guard;
  const agent::InferenceContext th_ctx(theta);
  const agent::InferenceContext ref_ctx(ref);
  const ThetaView view{&theta.config, &th_ctx.policy(), &th_ctx.connector(), &th_ctx.decoder(),
                       &th_ctx.prefix(cfg.generation.thinking)};
  const double weight = 1.0 / static_cast<double>(total);
  LossBreakdown b;
  for (const auto& g : groups) {
    for (const auto& o : g.outputs) {
      const auto terms = output_terms(view, ref_ctx, o, cfg, weight, kl_seed);
      if (!terms) continue;
      b.loss += terms->loss.item();
      b.surrogate += terms->surrogate / static_cast<double>(total);
      b.kl_text += terms->kl_text / static_cast<double>(total);
      b.kl_image += terms->kl_image / static_cast<double>(total);
    }
  }
  return b;
}

std::string UpdateMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["reward_mean"] = reward_mean;
  j["reward_format_mean"] = reward_format_mean;
  j["reward_consistency_mean"] = reward_consistency_mean;
  j["completion_len_mean"] = completion_len_mean;
  j["kl_text"] = kl_text;
  j["kl_image"] = kl_image;
  j["grad_norm"] = grad_norm;
  j["lr"] = lr;
  return j.dump();
}

UpdateMetrics update_step(TrainState& state, const std::vector<RolloutGroup>& groups, const RgpoConfig& cfg,
                          double lr, int threads) {
  cfg.validate();
  const std::size_t total = total_outputs(groups, cfg.group_size);
  std::vector<const RolloutOutput*> outputs;
  for (const auto& g : groups) {
    for (const auto& o : g.outputs) outputs.push_back(&o);
  }

  UpdateMetrics m;
  for (const RolloutOutput* o : outputs) {
    m.reward_mean += o->reward.total;
    m.reward_format_mean += o->reward.format;
    m.reward_consistency_mean += o->reward.consistency;
    m.completion_len_mean += static_cast<double>(o->text.ids.size() - static_cast<std::size_t>(o->text.prompt_length));
  }
  const double inv = 1.0 / static_cast<double>(total);
  m.reward_mean *= inv;
  m.reward_format_mean *= inv;
  m.reward_consistency_mean *= inv;
  m.completion_len_mean *= inv;
  m.lr = lr;

  const agent::InferenceContext ref_ctx(state.ref);
  const auto& scfg = state.theta.config;
  const bool thinking = cfg.generation.thinking;

  for (int u = 0; u < cfg.updates_per_batch; ++u) {
    const std::uint64_t kl_seed = derive_seed(static_cast<std::uint64_t>(state.step), {static_cast<std::uint64_t>(u)});
    Binding<float> shared(state.theta.policy.params, true);
    const lm::PrefixCache<float> source = lm::compute_prefix(scfg.policy, shared, agent::system_prefix(thinking));

    struct Slot {
      std::optional<OutputTerms> terms;
      TensorMap<float> policy, connector, decoder;
      std::vector<Tensor<float>> prefix;
    };
    std::vector<Slot> slots(outputs.size());
    parallel_for(
        outputs.size(),
        [&](std::size_t i) {
          Binding<float> pol(state.theta.policy.params, true);
          Binding<float> conn(state.theta.connector.params, cfg.train_connector);
          Binding<float> dec(state.theta.decoder.params, cfg.train_decoder);
          const lm::PrefixCache<float> leaves = lm::leaf_prefix(source, true);
          const ThetaView view{&scfg, &pol, &conn, &dec, &leaves};
          Slot& s = slots[i];
          s.terms = output_terms(view, ref_ctx, *outputs[i], cfg, inv, kl_seed);
          if (!s.terms) return;
          backward(s.terms->loss);
          s.policy = pol.grads();
          if (cfg.train_connector) s.connector = conn.grads();
          if (cfg.train_decoder) s.decoder = dec.grads();
          s.prefix = lm::prefix_grads(leaves);
        },
        threads);

    TensorMap<float> g_policy, g_connector, g_decoder;
    std::vector<Tensor<float>> g_prefix;
    double loss = 0, klt = 0, kli = 0;
    for (const Slot& s : slots) {
      if (!s.terms) continue;
      loss += s.terms->loss.item();
      klt += s.terms->kl_text * inv;
      kli += s.terms->kl_image * inv;
      accumulate_into(g_policy, s.policy);
      accumulate_into(g_connector, s.connector);
      accumulate_into(g_decoder, s.decoder);
      lm::accumulate_prefix_grads(g_prefix, s.prefix);
    }
    if (!std::isfinite(loss)) throw NonFiniteError("non-finite RGPO loss at step " + std::to_string(state.step));
    if (!g_prefix.empty()) {
      lm::backprop_prefix(source, g_prefix);
      accumulate_into(g_policy, shared.grads());
    }
    m.grad_norm = 0;
    if (!g_policy.empty()) m.grad_norm += std::pow(state.policy_opt.step(state.theta.policy.params, g_policy, lr), 2);
    if (!g_connector.empty()) {
      m.grad_norm += std::pow(state.connector_opt.step(state.theta.connector.params, g_connector, lr), 2);
    }
    if (!g_decoder.empty()) {
      m.grad_norm += std::pow(state.decoder_opt.step(state.theta.decoder.params, g_decoder, lr), 2);
    }
    m.grad_norm = std::sqrt(m.grad_norm);
    if (u == 0) {
      m.loss = loss;
      m.kl_text = klt;
      m.kl_image = kli;
    }
  }
  m.step = state.step;
  ++state.step;
  return m;
}

}  // namespace thinkdraw::rgpo
