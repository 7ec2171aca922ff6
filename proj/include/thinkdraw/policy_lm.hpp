#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "thinkdraw/numerics/ops.hpp"
#include "thinkdraw/numerics/params.hpp"
#include "thinkdraw/transformer.hpp"

namespace thinkdraw::lm {

// Special token ids. Character tokens follow them.
enum Special : int { kPad = 0, kBos, kEos, kThink, kThinkEnd, kAnswer, kAnswerEnd, kImg, kNumSpecial };

class Vocab {
 public:
  static const Vocab& get();
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  // Id of a single token string (a special like "<think>" or one character).
  int id(std::string_view token) const;
  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }

 private:
  Vocab();
  std::vector<std::string> tokens_;
  int char_to_id_[256];
};

inline constexpr int kContextLimit = 256;

std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& ids);

struct TokenSequence {
  std::vector<int> ids;  // prompt followed by the continuation
  int prompt_length = 0;
  // Log-probability of each continuation token under the sampling model.
  std::vector<double> logprobs;

  std::vector<int> continuation() const {
    return std::vector<int>(ids.begin() + prompt_length, ids.end());
  }
};

struct PolicyConfig {
  int vocab = 0;  // 0 selects the full vocabulary size
  int width = 64;
  int layers = 4;
  int heads = 4;
  int ff = 256;
  int context = kContextLimit;

  int vocab_size() const { return vocab > 0 ? vocab : Vocab::get().size(); }
  BlockDims block() const { return {width, heads, ff}; }
};

template <typename T>
struct PolicyModel {
  PolicyConfig config;
  ParamStore<T> params;

  static PolicyModel create(const PolicyConfig& config, std::uint64_t seed);
};

// Per-layer keys/values of a shared prompt prefix.
template <typename T>
struct PrefixCache {
  int length = 0;
  std::vector<KV<T>> layers;
};

template <typename T>
struct PolicyOutput {
  Var<T> hidden;  // [n, width], final normalized block activations
  Var<T> logits;  // [n, vocab]
  std::vector<KV<T>> present;
};

// Runs the model over `ids`, which follow the optional cached prefix.
template <typename T>
PolicyOutput<T> policy_forward(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& ids,
                               const PrefixCache<T>* prefix = nullptr);

// Computes the prefix keys/values as part of the graph over `p`.
template <typename T>
PrefixCache<T> compute_prefix(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& ids);

// Copies a prefix cache into fresh leaves so a per-sample graph can use it
// independently of the graph that produced it.
template <typename T>
PrefixCache<T> leaf_prefix(const PrefixCache<T>& source, bool requires_grad);

// Gradients gathered on leaf prefixes, flattened as [k0, v0, k1, v1, ...].
template <typename T>
std::vector<Tensor<T>> prefix_grads(const PrefixCache<T>& leaves);
template <typename T>
void accumulate_prefix_grads(std::vector<Tensor<T>>& acc, const std::vector<Tensor<T>>& g);

// Pushes accumulated prefix gradients back through the producing graph.
template <typename T>
void backprop_prefix(const PrefixCache<T>& source, const std::vector<Tensor<T>>& grads);

// Per-token log-probabilities [n] of `continuation` given `prompt`, where
// `prompt` follows the optional cached prefix.
template <typename T>
Var<T> continuation_logprobs(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& prompt,
                             const std::vector<int>& continuation, const PrefixCache<T>* prefix = nullptr,
                             Var<T>* hidden = nullptr);

struct LogprobResult {
  std::vector<double> per_token;
  double total = 0;
};

template <typename T>
LogprobResult sequence_logprob(const PolicyModel<T>& model, const std::vector<int>& prompt,
                               const std::vector<int>& continuation);

struct SampleOptions {
  double temperature = 1.0;
  int top_k = 0;  // 0 disables
  int max_len = 96;
};

// Autoregressive sampling with an incremental key/value cache. Stops after
// EOS or <img> (kept in the output) or after max_len tokens. Recorded
// log-probabilities are those of the untempered model distribution.
template <typename T>
TokenSequence sample(const PolicyModel<T>& model, const std::vector<int>& prompt, const SampleOptions& opt,
                     std::uint64_t seed);

// Same, reusing a precomputed prefix cache; `prompt` follows the prefix and
// the returned ids exclude the prefix. With `states`, also returns the
// hidden rows [n, width] of the positions that predicted the n sampled tokens.
template <typename T>
TokenSequence sample_with_prefix(const PolicyConfig& cfg, const Binding<T>& p, const PrefixCache<T>& prefix,
                                 const std::vector<int>& prompt, const SampleOptions& opt, std::uint64_t seed,
                                 Tensor<T>* states = nullptr);

// Final-block activations [ids.size(), width].
template <typename T>
Tensor<T> hidden_states(const PolicyModel<T>& model, const std::vector<int>& ids);

}  // namespace thinkdraw::lm
