#include "thinkdraw/agent.hpp"

#include <algorithm>

namespace thinkdraw::agent {

std::vector<int> system_prefix(bool thinking) {
  std::vector<int> ids = {lm::kBos};
  const auto body = lm::tokenize(thinking ? kThinkingSystemPrompt : kDirectSystemPrompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

std::vector<int> query_ids(const std::string& instruction) { return lm::tokenize(" q: " + instruction + " a: "); }

std::vector<int> prefill_ids(bool thinking) {
  if (thinking) return {};
  return {lm::kThink, lm::kThinkEnd};
}

std::string sft_target(const world::Task& task) {
  const std::string chain = task.mode == world::Mode::reasoning ? task.explanation : std::string();
  return "<think>" + chain + "</think><answer>" + task.gt_prompt + "</answer><img>";
}

template <typename T>
System<T> System<T>::create(const SystemConfig& config, std::uint64_t seed) {
  if (config.decoder.cond_width != config.policy.width) {
    throw ConfigError("connector input width " + std::to_string(config.decoder.cond_width) +
                      " does not match policy width " + std::to_string(config.policy.width));
  }
  return System{config, lm::PolicyModel<T>::create(config.policy, derive_seed(seed, {1})),
                gen::ConnectorModel<T>::create(config.decoder, derive_seed(seed, {2})),
                gen::DecoderModel<T>::create(config.decoder, derive_seed(seed, {3}))};
}

template struct System<float>;
template struct System<double>;

InferenceContext::InferenceContext(const System<float>& sys)
    : sys_(&sys),
      policy_(sys.policy.params, false),
      connector_(sys.connector.params, false),
      decoder_(sys.decoder.params, false) {
  NoGradGuard guard;
  thinking_ = lm::compute_prefix(sys.config.policy, policy_, system_prefix(true));
  direct_ = lm::compute_prefix(sys.config.policy, policy_, system_prefix(false));
}

world::Image image_from_states(const InferenceContext& ctx, const Tensor<float>& states, int steps,
                               std::uint64_t seed) {
  NoGradGuard guard;
  const auto& cfg = ctx.system().config.decoder;
  const Tensor<float> cond = gen::connect(cfg, ctx.connector(), constant(states)).value();
  return gen::sample_image(cfg, ctx.decoder(), cond, steps, seed);
}

Generation generate(const InferenceContext& ctx, const std::string& instruction, const GenerationOptions& opt,
                    std::uint64_t text_seed, std::uint64_t image_seed) {
  NoGradGuard guard;
  const auto& pcfg = ctx.system().config.policy;
  const auto& prefix = ctx.prefix(opt.thinking);
  std::vector<int> prompt = query_ids(instruction);
  const std::vector<int> prefill = prefill_ids(opt.thinking);
  prompt.insert(prompt.end(), prefill.begin(), prefill.end());

  Generation g;
  const int room = pcfg.context - prefix.length - static_cast<int>(prompt.size());
  if (room < 1) {
    g.text.ids = prompt;
    g.text.prompt_length = static_cast<int>(prompt.size());
    g.overflow = true;
    return g;
  }
  lm::SampleOptions sopt = opt.sampling;
  sopt.max_len = std::min(sopt.max_len, room);
  g.text = lm::sample_with_prefix(pcfg, ctx.policy(), prefix, prompt, sopt, text_seed, &g.states);
  const auto cont = g.text.continuation();
  const bool finished = !cont.empty() && (cont.back() == lm::kImg || cont.back() == lm::kEos);
  g.overflow = !finished && sopt.max_len == room && static_cast<int>(cont.size()) == room;
  std::vector<int> response = prefill;
  response.insert(response.end(), cont.begin(), cont.end());
  g.response = lm::detokenize(response);
  g.image = image_from_states(ctx, g.states, opt.image_steps, image_seed);
  return g;
}

}  // namespace thinkdraw::agent
