#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/numerics/ops.hpp"
#include "thinkdraw/numerics/params.hpp"
#include "thinkdraw/transformer.hpp"

namespace thinkdraw::gen {

inline constexpr int kNoiseTokens = 4;
inline constexpr int kTokenValues = 48;
inline constexpr int kLatent = kNoiseTokens * kTokenValues;
static_assert(kLatent == world::kImageValues);

struct DecoderConfig {
  int width = 64;
  int layers = 4;
  int heads = 4;
  int ff = 256;
  int cond_width = 64;  // width of the policy states fed to the connector
  int connector_layers = 2;
  int time_frequencies = 16;
  int sampling_steps = 8;

  BlockDims block() const { return {width, heads, ff}; }
  BlockDims connector_block() const { return {cond_width, heads, 4 * cond_width}; }
};

template <typename T>
struct ConnectorModel {
  DecoderConfig config;
  ParamStore<T> params;
  static ConnectorModel create(const DecoderConfig& config, std::uint64_t seed);
};

// Decoder weights plus the prompt-embedding table the teacher conditions on.
template <typename T>
struct DecoderModel {
  DecoderConfig config;
  ParamStore<T> params;
  static DecoderModel create(const DecoderConfig& config, std::uint64_t seed);
};

// Policy states [n, cond_width] -> condition tokens [n, width].
template <typename T>
Var<T> connect(const DecoderConfig& cfg, const Binding<T>& conn, const Var<T>& states);

// Teacher conditioning: one table row per prompt word plus a word-position row.
template <typename T>
Var<T> prompt_condition(const DecoderConfig& cfg, const Binding<T>& dec, const std::string& gt_prompt);

template <typename T>
struct DecoderOutput {
  Var<T> velocity;               // [192]
  std::vector<Var<T>> features;  // per block, [kNoiseTokens, width] at noise positions
};

// Runs the bidirectional decoder over [cond..., time, noise...].
template <typename T>
DecoderOutput<T> decoder_forward(const DecoderConfig& cfg, const Binding<T>& dec, const Var<T>& cond,
                                 const Var<T>& xt, double t);

// Sinusoidal encoding of t in [0, 1], 2 * frequencies values.
std::vector<double> time_encoding(double t, int frequencies);

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, double t);

// Mean squared error between predicted velocity and x0 - eps.
template <typename T>
Var<T> diffusion_loss(const Var<T>& velocity, const Tensor<T>& x0, const Tensor<T>& eps);

// Sum over layers of the per-position KL(softmax(teacher) || softmax(student)),
// averaged over positions. Teacher features are constants.
template <typename T>
Var<T> distill_loss(const std::vector<Var<T>>& student, const std::vector<Tensor<T>>& teacher);

// Per-position KL(softmax(theta) || softmax(ref)) averaged over positions;
// `ref` is a constant.
template <typename T>
Var<T> feature_kl(const Var<T>& theta, const Tensor<T>& ref);

// Standard normal starting noise for a seed.
Tensor<double> flow_noise(std::uint64_t seed);

using VelocityFn = std::function<Tensor<double>(const Tensor<double>& x, double t)>;

// Euler integration x <- x + v(x, k/N) / N from seeded noise; returns the raw
// final state (unclamped).
Tensor<double> integrate_flow(const VelocityFn& v, int steps, std::uint64_t seed);

// Image sampling with the decoder conditioned on `cond` [n, width].
template <typename T>
world::Image sample_image(const DecoderConfig& cfg, const Binding<T>& dec, const Tensor<T>& cond, int steps,
                          std::uint64_t seed);

}  // namespace thinkdraw::gen
