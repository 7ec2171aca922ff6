#include "thinkdraw/rewards.hpp"

#include <cctype>

namespace thinkdraw::rewards {

namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

void skip_space(std::string_view s, std::size_t& i) {
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
}

bool take(std::string_view s, std::size_t& i, std::string_view token) {
  if (s.substr(i, token.size()) != token) return false;
  i += token.size();
  return true;
}

// Reads a tag-free span up to `close`; fails on '<' or '>' before it.
std::optional<std::string> span_until(std::string_view s, std::size_t& i, std::string_view close) {
  const std::size_t end = s.find(close, i);
  if (end == std::string_view::npos) return std::nullopt;
  const std::string_view body = s.substr(i, end - i);
  if (body.find_first_of("<>") != std::string_view::npos) return std::nullopt;
  i = end + close.size();
  return std::string(body);
}

std::optional<std::string> loose_span(std::string_view s, std::string_view open, std::string_view close) {
  const std::size_t a = s.find(open);
  if (a == std::string_view::npos) return std::nullopt;
  const std::size_t b = s.find(close, a + open.size());
  if (b == std::string_view::npos) return std::nullopt;
  return std::string(s.substr(a + open.size(), b - a - open.size()));
}

}  // namespace

CotParse parse_cot(std::string_view text) {
  CotParse out;
  std::size_t i = 0;
  skip_space(text, i);
  std::optional<std::string> think, answer;
  bool ok = take(text, i, kThinkOpen) && (think = span_until(text, i, kThinkClose)).has_value();
  if (ok) {
    skip_space(text, i);
    ok = take(text, i, kAnswerOpen) && (answer = span_until(text, i, kAnswerClose)).has_value();
  }
  if (ok) {
    for (;;) {
      skip_space(text, i);
      if (!take(text, i, "<img>") && !take(text, i, "<eos>")) break;
    }
    ok = i == text.size();
  }
  out.well_formed = ok;
  if (ok) {
    out.think = std::move(think);
    out.answer = std::move(answer);
  } else {
    out.think = loose_span(text, kThinkOpen, kThinkClose);
    out.answer = loose_span(text, kAnswerOpen, kAnswerClose);
  }
  return out;
}

int format_reward(std::string_view text) { return parse_cot(text).well_formed ? 1 : 0; }

double consistency_reward(const world::Image& image, const std::string& gt_prompt,
                          const world::FrozenEmbedder& embedder) {
  return world::cosine(embedder.embed_image(image), embedder.embed_prompt(gt_prompt));
}

RewardScore total_reward(std::string_view text, const world::Image& image, const std::string& gt_prompt,
                         const RewardWeights& weights, const world::FrozenEmbedder& embedder) {
  RewardScore r;
  r.format = format_reward(text);
  r.consistency = consistency_reward(image, gt_prompt, embedder);
  r.total = weights.format * r.format + weights.consistency * r.consistency;
  return r;
}

}  // namespace thinkdraw::rewards
