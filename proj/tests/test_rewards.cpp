#include <cmath>

#include "doctest.h"
#include "thinkdraw/rewards.hpp"

using namespace thinkdraw;
using namespace thinkdraw::rewards;

namespace {

struct Case {
  const char* text;
  bool well_formed;
  const char* think;   // expected when well formed
  const char* answer;  // expected when well formed
};

const Case kCorpus[] = {
    {"<think>4+1=5</think><answer>red pentagon</answer>", true, "4+1=5", "red pentagon"},
    {"<answer>x</answer><think>y</think>", false, nullptr, nullptr},
    {"<think>a</think><think>b</think><answer>c</answer>", false, nullptr, nullptr},
    {"", false, nullptr, nullptr},
    {"<think>a</think><answer>b", false, nullptr, nullptr},
    {"<think></think><answer>blue square</answer><img>", true, "", "blue square"},
    {"  <think>x</think>  <answer>y</answer>  ", true, "x", "y"},
    {"<think>x</think><answer>y</answer><eos>", true, "x", "y"},
    {"<think>x</think><answer>y</answer><img><eos>", true, "x", "y"},
    {"<think>x</think><answer>y</answer>tail", false, nullptr, nullptr},
    {"lead<think>x</think><answer>y</answer>", false, nullptr, nullptr},
    {"<think>x</think>mid<answer>y</answer>", false, nullptr, nullptr},
    {"<think>x</think><answer>y</answer><answer>z</answer>", false, nullptr, nullptr},
    {"<think>x<answer>y</answer></think>", false, nullptr, nullptr},
    {"<think>x</think><answer>y</answer><img>more", false, nullptr, nullptr},
    {"<think>a > b</think><answer>y</answer>", false, nullptr, nullptr},
    {"<answer>red triangle</answer>", false, nullptr, nullptr},
    {"<think>x</think>", false, nullptr, nullptr},
    {"<think>x</think><answer></answer>", true, "x", ""},
    {"<img><think>x</think><answer>y</answer>", false, nullptr, nullptr},
};

}  // namespace

TEST_CASE("chain-of-thought parsing corpus") {
  for (const Case& c : kCorpus) {
    const CotParse p = parse_cot(c.text);
    CHECK_MESSAGE(p.well_formed == c.well_formed, c.text);
    CHECK(format_reward(c.text) == (c.well_formed ? 1 : 0));
    if (c.well_formed) {
      REQUIRE(p.think);
      REQUIRE(p.answer);
      CHECK(*p.think == c.think);
      CHECK(*p.answer == c.answer);
    }
  }
}

TEST_CASE("malformed text still exposes spans when present") {
  const CotParse p = parse_cot("<think>4+1=5</think> oops <answer>red pentagon</answer>");
  CHECK_FALSE(p.well_formed);
  REQUIRE(p.answer);
  CHECK(*p.answer == "red pentagon");
  CHECK_FALSE(parse_cot("garbage").answer);
}

TEST_CASE("consistency reward") {
  for (const auto& c : world::all_concepts()) {
    const world::Image img = world::render(c);
    const double self = consistency_reward(img, c.prompt());
    CHECK(self == doctest::Approx(1.0).epsilon(1e-12));
    // The image's own prompt is the unique maximizer over all prompts.
    for (const auto& other : world::all_concepts()) {
      if (other == c) continue;
      CHECK(consistency_reward(img, other.prompt()) < self);
    }
  }
  world::Image zero;
  for (const auto& c : world::all_concepts()) {
    const double r = consistency_reward(zero, c.prompt());
    CHECK(std::isfinite(r));
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
  CHECK_THROWS_AS(consistency_reward(zero, "red blob"), ParseError);
}

TEST_CASE("total reward") {
  const std::string good = "<think>a square has 4 sides; 4+1=5; a pentagon</think><answer>red pentagon</answer>";
  const world::Image perfect = world::render({5, 0});
  const RewardScore a = total_reward(good, perfect, "red pentagon");
  CHECK(a.format == 1);
  CHECK(a.total == doctest::Approx(2.0).epsilon(1e-12));
  const RewardScore b = total_reward("<answer>red pentagon", perfect, "red pentagon");
  CHECK(b.format == 0);
  CHECK(b.total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(b.total == b.format + b.consistency);

  // Search for an image whose embedding is orthogonal to the prompt by
  // bisecting the blend between an aligned and an anti-aligned image.
  world::Image neg;
  double neg_cos = 1;
  for (const auto& c : world::all_concepts()) {
    const double r = consistency_reward(world::render(c), "red pentagon");
    if (r < neg_cos) {
      neg_cos = r;
      neg = world::render(c);
    }
  }
  REQUIRE(neg_cos < 0);
  auto blend = [&](double w) {
    world::Image img;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = w * perfect.pixels[i] + (1 - w) * neg.pixels[i];
    return img;
  };
  double lo = 0, hi = 1;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (consistency_reward(blend(mid), "red pentagon") < 0 ? lo : hi) = mid;
  }
  const world::Image orth = blend(0.5 * (lo + hi));
  const RewardScore c = total_reward(good, orth, "red pentagon");
  CHECK(std::abs(c.consistency) < 1e-6);
  CHECK(c.total == doctest::Approx(1.0).epsilon(1e-6));

  RewardWeights only_format{1.0, 0.0};
  CHECK(total_reward(good, orth, "red pentagon", only_format).total == 1.0);
}
