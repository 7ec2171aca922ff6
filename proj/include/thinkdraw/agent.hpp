#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/gen_decoder.hpp"
#include "thinkdraw/policy_lm.hpp"

// The assembled reasoning-generation system: prompts, the model bundle, and
// end-to-end generation (text, conditioning states, image).
namespace thinkdraw::agent {

// The vocabulary is lowercase, so the system prompts are too.
inline constexpr const char* kThinkingSystemPrompt =
    "you first think step by step inside <think> </think>, then give the final image description inside "
    "<answer> </answer>.";
inline constexpr const char* kDirectSystemPrompt =
    "you leave <think> </think> empty, then give the final image description inside <answer> </answer>.";

// <bos> followed by the system prompt of the mode.
std::vector<int> system_prefix(bool thinking);
// " q: {instruction} a: "
std::vector<int> query_ids(const std::string& instruction);
// Tokens forced at the start of the response: "<think></think>" when not thinking.
std::vector<int> prefill_ids(bool thinking);
// Supervised response: reasoning chain (empty for direct tasks), answer, <img>.
std::string sft_target(const world::Task& task);

struct SystemConfig {
  lm::PolicyConfig policy;
  gen::DecoderConfig decoder;
};

template <typename T>
struct System {
  SystemConfig config;
  lm::PolicyModel<T> policy;
  gen::ConnectorModel<T> connector;
  gen::DecoderModel<T> decoder;

  static System create(const SystemConfig& config, std::uint64_t seed);
};

// Immutable inference view: no-grad bindings plus both cached system prefixes.
class InferenceContext {
 public:
  explicit InferenceContext(const System<float>& sys);
  const System<float>& system() const { return *sys_; }
  const Binding<float>& policy() const { return policy_; }
  const Binding<float>& connector() const { return connector_; }
  const Binding<float>& decoder() const { return decoder_; }
  const lm::PrefixCache<float>& prefix(bool thinking) const { return thinking ? thinking_ : direct_; }

 private:
  const System<float>* sys_;
  Binding<float> policy_, connector_, decoder_;
  lm::PrefixCache<float> thinking_, direct_;
};

struct GenerationOptions {
  bool thinking = true;
  lm::SampleOptions sampling;
  int image_steps = 8;
};

struct Generation {
  // ids = query + prefill + sampled tokens; prompt_length covers query + prefill.
  lm::TokenSequence text;
  std::string response;  // detokenized prefill + sampled tokens
  Tensor<float> states;  // [n, width] states that predicted the sampled tokens
  world::Image image;
  bool overflow = false;  // ran into the context limit before finishing
};

// Samples a response, then decodes an image conditioned on the connector
// output for the response states.
Generation generate(const InferenceContext& ctx, const std::string& instruction, const GenerationOptions& opt,
                    std::uint64_t text_seed, std::uint64_t image_seed);

// Image from given policy states (connector + decoder, Euler sampling).
world::Image image_from_states(const InferenceContext& ctx, const Tensor<float>& states, int steps,
                               std::uint64_t seed);

}  // namespace thinkdraw::agent
