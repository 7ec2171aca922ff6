#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "thinkdraw/agent.hpp"
#include "thinkdraw/rewards.hpp"

namespace thinkdraw::rgpo {

enum class AdvantageMode { paper_var, std_dev };
enum class RatioMode { per_token, per_sequence };

std::string_view advantage_mode_name(AdvantageMode m);
AdvantageMode parse_advantage_mode(std::string_view s);
std::string_view ratio_mode_name(RatioMode m);
RatioMode parse_ratio_mode(std::string_view s);

struct RgpoConfig {
  int group_size = 4;
  double beta_text = 0.01;
  double beta_image = 0.06;
  double eps_clip = 0.2;
  double lr = 3e-5;
  int updates_per_batch = 1;
  AdvantageMode advantage = AdvantageMode::paper_var;
  RatioMode ratio = RatioMode::per_token;
  bool train_connector = true;
  bool train_decoder = false;
  // Image KL over every sampling timestep instead of one random timestep.
  bool image_kl_full_trajectory = false;
  rewards::RewardWeights weights;
  agent::GenerationOptions generation;

  void validate() const;  // throws ConfigError
};

struct RolloutOutput {
  lm::TokenSequence text;  // query + prefill + sampled tokens, with old-policy logprobs
  std::string response;
  world::Image image;
  std::uint64_t image_seed = 0;
  rewards::RewardScore reward;
  std::optional<double> advantage;
  bool overflow = false;
};

struct RolloutGroup {
  world::Task task;
  std::vector<RolloutOutput> outputs;
};

// Per-sample seeds derived from (seed, i); output i is independent of the
// others and of the schedule.
RolloutGroup rollout(const agent::InferenceContext& ctx, const world::Task& task, const RgpoConfig& cfg,
                     std::uint64_t seed, int threads = 1);

// Group-normalized advantages. paper_var divides by the population variance,
// std_dev by its square root; a zero-variance group gets all zeros.
std::vector<double> advantages(const std::vector<double>& rewards, AdvantageMode mode);
void fill_advantages(RolloutGroup& group, AdvantageMode mode);

// Mean over tokens of u - log u - 1 with u = exp(lp_ref - lp_theta).
template <typename T>
Var<T> text_kl(const Var<T>& lp_theta, const std::vector<double>& lp_ref);

// Clipped surrogate min(rho A, clip(rho, 1-eps, 1+eps) A); per_token averages
// over tokens, per_sequence uses the ratio of whole-sequence probabilities.
template <typename T>
Var<T> surrogate(const Var<T>& lp_theta, const std::vector<double>& lp_old, double advantage, double eps_clip,
                 RatioMode mode);

struct TrainState {
  agent::System<float> theta;
  agent::System<float> ref;  // frozen at stage start
  Adam<float> policy_opt;
  Adam<float> connector_opt;
  Adam<float> decoder_opt;
  long step = 0;
};

struct LossBreakdown {
  double loss = 0;
  double surrogate = 0;  // mean over outputs
  double kl_text = 0;    // mean over outputs
  double kl_image = 0;   // mean over outputs
};

// Value of the objective for the given groups (no update). `kl_seed` selects
// the image-KL timesteps. Returns the mean over groups of the group losses.
LossBreakdown rgpo_loss(const std::vector<RolloutGroup>& groups, const agent::System<float>& theta,
                        const agent::System<float>& ref, const RgpoConfig& cfg, std::uint64_t kl_seed);

struct UpdateMetrics {
  long step = 0;
  double loss = 0;
  double reward_mean = 0;
  double reward_format_mean = 0;
  double reward_consistency_mean = 0;
  double completion_len_mean = 0;
  double kl_text = 0;
  double kl_image = 0;
  double grad_norm = 0;
  double lr = 0;

  std::string to_json() const;
};

// One optimizer step per configured update on the policy (and connector,
// and decoder if enabled) from the objective over `groups`. Per-output
// gradients are computed concurrently and reduced in output order.
UpdateMetrics update_step(TrainState& state, const std::vector<RolloutGroup>& groups, const RgpoConfig& cfg,
                          double lr, int threads = 0);

}  // namespace thinkdraw::rgpo
