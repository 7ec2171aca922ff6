#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "thinkdraw/rgpo.hpp"

using namespace thinkdraw;
using namespace thinkdraw::rgpo;

namespace {

agent::SystemConfig tiny_system() {
  agent::SystemConfig c;
  c.policy.width = 16;
  c.policy.layers = 2;
  c.policy.heads = 2;
  c.policy.ff = 32;
  c.decoder.width = 16;
  c.decoder.layers = 2;
  c.decoder.heads = 2;
  c.decoder.ff = 32;
  c.decoder.cond_width = 16;
  c.decoder.time_frequencies = 4;
  return c;
}

RgpoConfig tiny_rgpo() {
  RgpoConfig c;
  c.generation.sampling.max_len = 10;
  c.generation.image_steps = 2;
  return c;
}

world::Task some_task() { return *world::make_task(1, {5, 0}); }

double oracle_mean(const std::vector<double>& r) {
  long double s = 0;
  for (double x : r) s += x;
  return static_cast<double>(s / r.size());
}

}  // namespace

TEST_CASE("advantage examples") {
  CHECK(advantages({1, 1, 1, 1}, AdvantageMode::paper_var) == std::vector<double>{0, 0, 0, 0});
  CHECK(advantages({1, 1, 1, 1}, AdvantageMode::std_dev) == std::vector<double>{0, 0, 0, 0});
  const auto a = advantages({0, 1}, AdvantageMode::paper_var);
  CHECK(a[0] == doctest::Approx(-2.0));
  CHECK(a[1] == doctest::Approx(2.0));
  const auto s = advantages({0, 1}, AdvantageMode::std_dev);
  CHECK(s[0] == doctest::Approx(-1.0));
  CHECK(s[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(advantages({1.0}, AdvantageMode::paper_var), ConfigError);
}

TEST_CASE("advantages against an independent oracle over many groups") {
  Rng rng(99);
  for (int g = 0; g < 1000; ++g) {
    const int n = 2 + static_cast<int>(rng() % 7);
    std::vector<double> r;
    for (int i = 0; i < n; ++i) r.push_back(4.0 * uniform01(rng) - 2.0);
    // Oracle: sample variance rescaled to the population form.
    const double mu = oracle_mean(r);
    long double ss = 0;
    for (double x : r) ss += (x - mu) * (x - mu);
    const double var = static_cast<double>(ss / (n - 1)) * (n - 1) / n;
    const auto pv = advantages(r, AdvantageMode::paper_var);
    const auto sd = advantages(r, AdvantageMode::std_dev);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
      CHECK(pv[i] == doctest::Approx((r[i] - mu) / var).epsilon(1e-9));
      CHECK(sd[i] == doctest::Approx((r[i] - mu) / std::sqrt(var)).epsilon(1e-9));
      sum += pv[i];
    }
    CHECK(std::abs(sum) <= 1e-12 * std::max(1.0, std::abs(pv[0]) * n));

    // Shift invariance and literal scale behaviour.
    const double c = 3.0 * uniform01(rng) - 1.5;
    const double k = 0.5 + 2.0 * uniform01(rng);
    std::vector<double> shifted = r, scaled = r;
    for (auto& x : shifted) x += c;
    for (auto& x : scaled) x *= k;
    const auto ps = advantages(shifted, AdvantageMode::paper_var);
    const auto pk = advantages(scaled, AdvantageMode::paper_var);
    const auto ss2 = advantages(shifted, AdvantageMode::std_dev);
    for (int i = 0; i < n; ++i) {
      CHECK(ps[i] == doctest::Approx(pv[i]).epsilon(1e-6));
      CHECK(ss2[i] == doctest::Approx(sd[i]).epsilon(1e-6));
      CHECK(pk[i] == doctest::Approx(pv[i] / k).epsilon(1e-9));
    }
  }
}

TEST_CASE("text KL") {
  const Var<double> lp = constant(Tensor<double>::vector({-1.0, -2.5, -0.3}));
  CHECK(text_kl(lp, {-1.0, -2.5, -0.3}).item() == 0.0);
  const Var<double> one = constant(Tensor<double>::vector({-1.0}));
  CHECK(text_kl(one, {-1.0 + std::log(2.0)}).item() == doctest::Approx(2.0 - std::log(2.0) - 1.0).epsilon(1e-12));
  CHECK(2.0 - std::log(2.0) - 1.0 == doctest::Approx(0.3069).epsilon(1e-4));
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double a = -5 * uniform01(rng), b = -5 * uniform01(rng);
    CHECK(text_kl(constant(Tensor<double>::vector({a})), {b}).item() >= 0.0);
  }
  CHECK_THROWS_AS(text_kl(lp, {-1.0}), ShapeError);
}

TEST_CASE("clipped surrogate") {
  auto surr = [](double rho, double a) {
    return surrogate(constant(Tensor<double>::vector({std::log(rho)})), {0.0}, a, 0.2, RatioMode::per_token).item();
  };
  CHECK(surr(1.5, 1.0) == doctest::Approx(1.2));
  CHECK(surr(0.5, -1.0) == doctest::Approx(-0.8));
  CHECK(surr(1.1, 1.0) == doctest::Approx(1.1));
  CHECK(surr(0.5, 1.0) == doctest::Approx(0.5));

  // Gradient w.r.t. rho vanishes on the clipped side, matches A inside.
  auto grad_rho = [](double rho, double a) {
    const Var<double> x = leaf(Tensor<double>::vector({std::log(rho)}), true);
    backward(surrogate(x, {0.0}, a, 0.2, RatioMode::per_token));
    return x.grad()[0] / rho;  // d/d rho = d/d log rho / rho
  };
  auto fd_rho = [&](double rho, double a) {
    const double h = 1e-6;
    return (surr(rho + h, a) - surr(rho - h, a)) / (2 * h);
  };
  for (double rho : {0.5, 0.7, 0.9, 1.0, 1.1, 1.3, 1.6}) {
    for (double a : {1.0, -1.0, 0.7}) {
      const double g = grad_rho(rho, a);
      CHECK(g == doctest::Approx(fd_rho(rho, a)).epsilon(1e-5));
      const bool clipped_side = (a > 0 && rho > 1.2) || (a < 0 && rho < 0.8);
      if (clipped_side) CHECK(g == 0.0);
      if (rho > 0.8 && rho < 1.2) CHECK(g == doctest::Approx(a));
    }
  }

  // Sequence-level ratio multiplies per-token ratios.
  const Var<double> lp = constant(Tensor<double>::vector({std::log(1.1), std::log(1.05)}));
  CHECK(surrogate(lp, {0.0, 0.0}, 1.0, 0.2, RatioMode::per_sequence).item() ==
        doctest::Approx(std::min(1.1 * 1.05, 1.2)));
}

TEST_CASE("rollout groups") {
  const auto sys = agent::System<float>::create(tiny_system(), 3);
  const agent::InferenceContext ctx(sys);
  const RgpoConfig cfg = tiny_rgpo();
  const RolloutGroup a = rollout(ctx, some_task(), cfg, 17);
  const RolloutGroup b = rollout(ctx, some_task(), cfg, 17, 3);
  REQUIRE(a.outputs.size() == 4);
  std::set<std::uint64_t> seeds;
  for (std::size_t i = 0; i < 4; ++i) {
    seeds.insert(a.outputs[i].image_seed);
    CHECK(a.outputs[i].text.ids == b.outputs[i].text.ids);
    CHECK(a.outputs[i].text.logprobs == b.outputs[i].text.logprobs);
    CHECK(a.outputs[i].image == b.outputs[i].image);
    CHECK(a.outputs[i].reward.total == b.outputs[i].reward.total);
    CHECK_FALSE(a.outputs[i].advantage);

    // Recorded logprobs equal re-scoring under the rollout snapshot.
    const auto& t = a.outputs[i].text;
    std::vector<int> prompt = agent::system_prefix(true);
    prompt.insert(prompt.end(), t.ids.begin(), t.ids.begin() + t.prompt_length);
    const auto r = lm::sequence_logprob(sys.policy, prompt, t.continuation());
    REQUIRE(r.per_token.size() == t.logprobs.size());
    for (std::size_t k = 0; k < r.per_token.size(); ++k) CHECK(std::abs(r.per_token[k] - t.logprobs[k]) <= 1e-5);
  }
  CHECK(seeds.size() == 4);
}

TEST_CASE("objective at the rollout snapshot") {
  const auto sys = agent::System<float>::create(tiny_system(), 4);
  const agent::InferenceContext ctx(sys);
  RgpoConfig cfg = tiny_rgpo();
  std::vector<RolloutGroup> groups = {rollout(ctx, some_task(), cfg, 1), rollout(ctx, some_task(), cfg, 2)};
  for (auto& g : groups) {
    // Spread rewards so advantages are non-trivial.
    for (std::size_t i = 0; i < g.outputs.size(); ++i) g.outputs[i].reward.total = static_cast<double>(i * i);
    fill_advantages(g, cfg.advantage);
  }
  cfg.beta_text = 0;
  cfg.beta_image = 0;
  const LossBreakdown b = rgpo_loss(groups, sys, sys, cfg, 0);
  CHECK(std::abs(b.loss) <= 1e-6);
  cfg.beta_text = 0.5;
  cfg.beta_image = 0.5;
  const LossBreakdown c = rgpo_loss(groups, sys, sys, cfg, 0);
  CHECK(c.kl_text == 0.0);
  CHECK(c.kl_image == 0.0);

  RolloutGroup missing = groups[0];
  missing.outputs[1].advantage.reset();
  CHECK_THROWS_AS(rgpo_loss({missing}, sys, sys, cfg, 0), TrainingError);
  RolloutGroup small = groups[0];
  small.outputs.pop_back();
  CHECK_THROWS_AS(rgpo_loss({small}, sys, sys, cfg, 0), TrainingError);
}

TEST_CASE("objective matches brute-force enumeration for single-token outputs") {
  const auto theta = agent::System<float>::create(tiny_system(), 5);
  const auto ref = agent::System<float>::create(tiny_system(), 6);
  RgpoConfig cfg = tiny_rgpo();
  cfg.group_size = 2;
  cfg.beta_text = 0;
  cfg.beta_image = 0;
  const world::Task task = some_task();
  const std::vector<int> query = agent::query_ids(task.instruction);
  std::vector<int> full_prompt = agent::system_prefix(true);
  full_prompt.insert(full_prompt.end(), query.begin(), query.end());

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    RolloutGroup g;
    g.task = task;
    const double adv[2] = {2.0 * uniform01(rng) - 1.0, 2.0 * uniform01(rng) - 1.0};
    double brute = 0;
    for (int i = 0; i < 2; ++i) {
      RolloutOutput o;
      const int tok = static_cast<int>(rng() % lm::Vocab::get().size());
      o.text.ids = query;
      o.text.ids.push_back(tok);
      o.text.prompt_length = static_cast<int>(query.size());
      const double lp_theta = lm::sequence_logprob(theta.policy, full_prompt, {tok}).total;
      const double lp_old = lp_theta + (uniform01(rng) - 0.5);
      o.text.logprobs = {lp_old};
      o.advantage = adv[i];
      o.image_seed = static_cast<std::uint64_t>(i);
      g.outputs.push_back(o);
      const double rho = std::exp(lp_theta - lp_old);
      brute += std::min(rho * adv[i], std::clamp(rho, 0.8, 1.2) * adv[i]);
    }
    brute = -brute / 2;
    CHECK(rgpo_loss({g}, theta, ref, cfg, 0).loss == doctest::Approx(brute).epsilon(1e-6));
  }
}

namespace {

struct RunResult {
  ParamStore<float> policy;
  ParamStore<float> connector;
  std::vector<UpdateMetrics> metrics;
};

RunResult run_updates(const RgpoConfig& cfg, int updates, int threads, bool zero_rewards = false) {
  const auto init = agent::System<float>::create(tiny_system(), 9);
  TrainState st{init, init, {}, {}, {}, 0};
  RunResult out;
  for (int u = 0; u < updates; ++u) {
    const agent::InferenceContext ctx(st.theta);
    std::vector<RolloutGroup> groups;
    for (int g = 0; g < 2; ++g) {
      groups.push_back(rollout(ctx, some_task(), cfg, derive_seed(7, {static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(g)}), threads));
      if (zero_rewards) {
        for (auto& o : groups.back().outputs) o.reward = {};
      } else {
        for (std::size_t i = 0; i < groups.back().outputs.size(); ++i) groups.back().outputs[i].reward.total += 0.3 * i;
      }
      fill_advantages(groups.back(), cfg.advantage);
    }
    out.metrics.push_back(update_step(st, groups, cfg, cfg.lr, threads));
  }
  out.policy = st.theta.policy.params;
  out.connector = st.theta.connector.params;
  return out;
}

}  // namespace

TEST_CASE("parallel update is bit-identical to sequential") {
  RgpoConfig cfg = tiny_rgpo();
  const RunResult seq = run_updates(cfg, 2, 1);
  const RunResult par = run_updates(cfg, 2, 3);
  CHECK(seq.policy == par.policy);
  CHECK(seq.connector == par.connector);
  for (std::size_t i = 0; i < seq.metrics.size(); ++i) CHECK(seq.metrics[i].to_json() == par.metrics[i].to_json());
}

TEST_CASE("zero advantages at the reference leave parameters unchanged") {
  RgpoConfig cfg = tiny_rgpo();
  const auto init = agent::System<float>::create(tiny_system(), 9);
  const RunResult r = run_updates(cfg, 1, 1, true);
  CHECK(r.policy == init.policy.params);
  CHECK(r.connector == init.connector.params);
}

TEST_CASE("metrics records carry every field") {
  RgpoConfig cfg = tiny_rgpo();
  const RunResult r = run_updates(cfg, 1, 1);
  const auto j = nlohmann::json::parse(r.metrics[0].to_json());
  for (const char* k : {"step", "loss", "reward_mean", "reward_format_mean", "reward_consistency_mean",
                        "completion_len_mean", "kl_text", "kl_image"}) {
    CHECK_MESSAGE(j.contains(k), k);
  }
  CHECK(std::isfinite(r.metrics[0].completion_len_mean));
}

TEST_CASE("configuration validation") {
  RgpoConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.group_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RgpoConfig{};
  cfg.eps_clip = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RgpoConfig{};
  cfg.beta_image = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_advantage_mode("std") == AdvantageMode::std_dev);
  CHECK_THROWS_AS(parse_ratio_mode("tokens"), ConfigError);
}
