#include "thinkdraw/gen_decoder.hpp"

#include <algorithm>
#include <cmath>

#include "thinkdraw/error.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::gen {

namespace {

constexpr int kPromptWords = 2;  // color word, shape word
constexpr int kPromptTable = world::kNumColors + (world::kMaxSides - world::kMinSides + 1);

std::string conn_block(int i) { return "conn.block" + std::to_string(i) + "."; }
std::string dec_block(int i) { return "dec.block" + std::to_string(i) + "."; }

}  // namespace

template <typename T>
ConnectorModel<T> ConnectorModel<T>::create(const DecoderConfig& config, std::uint64_t seed) {
  if (config.cond_width % config.heads != 0) throw ConfigError("connector width must be divisible by heads");
  ConnectorModel m;
  m.config = config;
  Rng rng = make_rng(seed, {0x636f6e6e});
  const double residual = 1.0 / std::sqrt(2.0 * std::max(1, config.connector_layers));
  for (int l = 0; l < config.connector_layers; ++l) {
    init_block(m.params, conn_block(l), config.connector_block(), rng, residual);
  }
  m.params.add("conn.ln.g", Tensor<T>::filled({config.cond_width}, T(1)));
  m.params.add("conn.ln.b", Tensor<T>::zeros({config.cond_width}));
  m.params.add("conn.proj.w", init_matrix<T>(rng, config.cond_width, config.width, 1.0 / std::sqrt(config.cond_width)));
  m.params.add("conn.proj.b", Tensor<T>::zeros({config.width}));
  return m;
}

template <typename T>
DecoderModel<T> DecoderModel<T>::create(const DecoderConfig& config, std::uint64_t seed) {
  if (config.width % config.heads != 0) throw ConfigError("decoder width must be divisible by heads");
  DecoderModel m;
  m.config = config;
  Rng rng = make_rng(seed, {0x646563});
  const int w = config.width;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  m.params.add("dec.prompt.emb", init_matrix<T>(rng, kPromptTable, w, 1.0));
  m.params.add("dec.prompt.pos", init_matrix<T>(rng, kPromptWords, w, 0.1));
  m.params.add("dec.time.w", init_matrix<T>(rng, 2 * config.time_frequencies, w, 1.0 / std::sqrt(config.time_frequencies)));
  m.params.add("dec.time.b", Tensor<T>::zeros({w}));
  m.params.add("dec.noise.w", init_matrix<T>(rng, kTokenValues, w, 1.0 / std::sqrt(kTokenValues)));
  m.params.add("dec.noise.b", Tensor<T>::zeros({w}));
  m.params.add("dec.noise.pos", init_matrix<T>(rng, kNoiseTokens, w, 0.1));
  const double residual = 1.0 / std::sqrt(2.0 * config.layers);
  for (int l = 0; l < config.layers; ++l) init_block(m.params, dec_block(l), config.block(), rng, residual);
  m.params.add("dec.out.ln.g", Tensor<T>::filled({w}, T(1)));
  m.params.add("dec.out.ln.b", Tensor<T>::zeros({w}));
  m.params.add("dec.out.w", init_matrix<T>(rng, w, kTokenValues, s));
  m.params.add("dec.out.b", Tensor<T>::zeros({kTokenValues}));
  return m;
}

template <typename T>
Var<T> connect(const DecoderConfig& cfg, const Binding<T>& conn, const Var<T>& states) {
  if (states.value().rank() != 2 || states.dim(0) < 1) throw ShapeError("connector needs a non-empty state sequence");
  if (states.dim(1) != cfg.cond_width) {
    throw ShapeError("connector expects width " + std::to_string(cfg.cond_width) + ", got " +
                     std::to_string(states.dim(1)));
  }
  Var<T> x = states;
  for (int l = 0; l < cfg.connector_layers; ++l) x = block_forward(conn, conn_block(l), x, cfg.heads, false);
  x = ops::layer_norm(x, conn("conn.ln.g"), conn("conn.ln.b"));
  return ops::linear(x, conn("conn.proj.w"), conn("conn.proj.b"));
}

template <typename T>
Var<T> prompt_condition(const DecoderConfig& /*cfg*/, const Binding<T>& dec, const std::string& gt_prompt) {
  const world::Concept c = world::parse_prompt(gt_prompt);
  const std::vector<int> ids = {c.color, world::kNumColors + (c.sides - world::kMinSides)};
  return ops::add(ops::embedding(dec("dec.prompt.emb"), ids), dec("dec.prompt.pos"));
}

std::vector<double> time_encoding(double t, int frequencies) {
  std::vector<double> out(static_cast<std::size_t>(2 * frequencies));
  for (int k = 0; k < frequencies; ++k) {
    // Angular frequencies from 1 to 200, geometrically spaced.
    const double f = frequencies > 1 ? std::exp(std::log(200.0) * k / (frequencies - 1)) : 1.0;
    out[static_cast<std::size_t>(2 * k)] = std::sin(f * t);
    out[static_cast<std::size_t>(2 * k + 1)] = std::cos(f * t);
  }
  return out;
}

template <typename T>
DecoderOutput<T> decoder_forward(const DecoderConfig& cfg, const Binding<T>& dec, const Var<T>& cond,
                                 const Var<T>& xt, double t) {
  if (cond.value().rank() != 2 || cond.dim(1) != cfg.width) {
    throw ShapeError("condition tokens must be [n, " + std::to_string(cfg.width) + "], got " +
                     shape_str(cond.shape()));
  }
  if (static_cast<int>(xt.size()) != kLatent) throw ShapeError("latent must hold 192 values");
  const int n = cond.dim(0);
  const auto enc = time_encoding(t, cfg.time_frequencies);
  std::vector<T> enc_t(enc.begin(), enc.end());
  const Var<T> time_in = constant(Tensor<T>({1, 2 * cfg.time_frequencies}, std::move(enc_t)));
  const Var<T> time_tok = ops::linear(time_in, dec("dec.time.w"), dec("dec.time.b"));
  const Var<T> noise_tok =
      ops::add(ops::linear(ops::reshape(xt, {kNoiseTokens, kTokenValues}), dec("dec.noise.w"), dec("dec.noise.b")),
               dec("dec.noise.pos"));
  Var<T> x = ops::concat<T>({cond, time_tok, noise_tok}, 0);

  DecoderOutput<T> out;
  for (int l = 0; l < cfg.layers; ++l) {
    x = block_forward(dec, dec_block(l), x, cfg.heads, false);
    out.features.push_back(ops::slice(x, 0, n + 1, kNoiseTokens));
  }
  const Var<T> h = ops::layer_norm(out.features.back(), dec("dec.out.ln.g"), dec("dec.out.ln.b"));
  out.velocity = ops::reshape(ops::linear(h, dec("dec.out.w"), dec("dec.out.b")), {kLatent});
  return out;
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolation time " + std::to_string(t) + " is outside [0, 1]");
  if (x0.shape() != eps.shape()) {
    throw ShapeError("interpolate: " + shape_str(x0.shape()) + " vs " + shape_str(eps.shape()));
  }
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((1.0 - t) * eps[i] + t * x0[i]);
  return out;
}

template <typename T>
Var<T> diffusion_loss(const Var<T>& velocity, const Tensor<T>& x0, const Tensor<T>& eps) {
  if (x0.shape() != eps.shape() || velocity.shape() != x0.shape()) {
    throw ShapeError("diffusion_loss: velocity " + shape_str(velocity.shape()) + ", x0 " + shape_str(x0.shape()) +
                     ", eps " + shape_str(eps.shape()));
  }
  Tensor<T> target(x0.shape());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = x0[i] - eps[i];
  return ops::mse(velocity, constant(std::move(target)));
}

template <typename T>
Var<T> distill_loss(const std::vector<Var<T>>& student, const std::vector<Tensor<T>>& teacher) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ShapeError("distill_loss: " + std::to_string(student.size()) + " student layers vs " +
                     std::to_string(teacher.size()) + " teacher layers");
  }
  Var<T> total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].shape() != teacher[i].shape()) {
      throw ShapeError("distill_loss layer " + std::to_string(i) + ": " + shape_str(student[i].shape()) + " vs " +
                       shape_str(teacher[i].shape()));
    }
    const Var<T> kl = ops::kl_rows(constant(teacher[i]), student[i]);
    total = total ? ops::add(total, kl) : kl;
  }
  return total;
}

template <typename T>
Var<T> feature_kl(const Var<T>& theta, const Tensor<T>& ref) {
  if (theta.shape() != ref.shape()) {
    throw ShapeError("feature_kl: " + shape_str(theta.shape()) + " vs " + shape_str(ref.shape()));
  }
  return ops::kl_rows(theta, constant(ref));
}

Tensor<double> flow_noise(std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x6e6f697365});
  return Tensor<double>({kLatent}, normal_vector<double>(rng, kLatent));
}

Tensor<double> integrate_flow(const VelocityFn& v, int steps, std::uint64_t seed) {
  if (steps < 1) throw ConfigError("sampling needs at least one step");
  Tensor<double> x = flow_noise(seed);
  for (int k = 0; k < steps; ++k) {
    const Tensor<double> vel = v(x, static_cast<double>(k) / steps);
    if (vel.shape() != x.shape()) throw ShapeError("velocity field changed the latent shape");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += vel[i] / steps;
    if (!x.all_finite()) throw NonFiniteError("non-finite latent at sampling step " + std::to_string(k));
  }
  return x;
}

template <typename T>
world::Image sample_image(const DecoderConfig& cfg, const Binding<T>& dec, const Tensor<T>& cond, int steps,
                          std::uint64_t seed) {
  NoGradGuard guard;
  const Var<T> c = constant(cond);
  const Tensor<double> x = integrate_flow(
      [&](const Tensor<double>& state, double t) {
        return decoder_forward(cfg, dec, c, constant(state.cast<T>()), t).velocity.value().template cast<double>();
      },
      steps, seed);
  world::Image img;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::clamp(x[i], 0.0, 1.0);
  return img;
}

#define THINKDRAW_GEN_INSTANTIATE(T)                                                                             \
  template struct ConnectorModel<T>;                                                                             \
  template struct DecoderModel<T>;                                                                               \
  template Var<T> connect<T>(const DecoderConfig&, const Binding<T>&, const Var<T>&);                            \
  template Var<T> prompt_condition<T>(const DecoderConfig&, const Binding<T>&, const std::string&);              \
  template DecoderOutput<T> decoder_forward<T>(const DecoderConfig&, const Binding<T>&, const Var<T>&,           \
                                               const Var<T>&, double);                                           \
  template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&, double);                                 \
  template Var<T> diffusion_loss<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template Var<T> distill_loss<T>(const std::vector<Var<T>>&, const std::vector<Tensor<T>>&);                    \
  template Var<T> feature_kl<T>(const Var<T>&, const Tensor<T>&);                                                \
  template world::Image sample_image<T>(const DecoderConfig&, const Binding<T>&, const Tensor<T>&, int,          \
                                        std::uint64_t);

THINKDRAW_GEN_INSTANTIATE(float)
THINKDRAW_GEN_INSTANTIATE(double)

}  // namespace thinkdraw::gen
