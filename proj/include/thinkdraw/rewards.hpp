#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "thinkdraw/concept_world.hpp"

namespace thinkdraw::rewards {

struct CotParse {
  std::optional<std::string> think;
  std::optional<std::string> answer;
  bool well_formed = false;
};

// Strict grammar: optional whitespace, one <think>...</think>, optional
// whitespace, one <answer>...</answer>, then optional whitespace and any
// trailing <img>/<eos> markers. Spans may not contain '<' or '>'.
// Never throws; spans are still extracted from malformed text when found.
CotParse parse_cot(std::string_view text);

int format_reward(std::string_view text);

// Cosine between the image embedding and the prompt embedding.
double consistency_reward(const world::Image& image, const std::string& gt_prompt,
                          const world::FrozenEmbedder& embedder = world::default_embedder());

struct RewardWeights {
  double format = 1.0;
  double consistency = 1.0;
};

struct RewardScore {
  int format = 0;
  double consistency = 0;
  double total = 0;
};

RewardScore total_reward(std::string_view text, const world::Image& image, const std::string& gt_prompt,
                         const RewardWeights& weights = {},
                         const world::FrozenEmbedder& embedder = world::default_embedder());

}  // namespace thinkdraw::rewards
