#include "thinkdraw/policy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "thinkdraw/error.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw::lm {

namespace {

const char* const kSpecialText[kNumSpecial] = {"<pad>",   "<bos>",    "<eos>",     "<think>",
                                               "</think>", "<answer>", "</answer>", "<img>"};

const char kCharacters[] = "abcdefghijklmnopqrstuvwxyz0123456789 ,;=+-:.'/";

std::string block_name(int i) { return "block" + std::to_string(i) + "."; }

void check_context(const PolicyConfig& cfg, std::size_t total) {
  if (total > static_cast<std::size_t>(cfg.context)) {
    throw ContextOverflowError("sequence of " + std::to_string(total) + " tokens exceeds the context limit of " +
                               std::to_string(cfg.context));
  }
}

}  // namespace

Vocab::Vocab() {
  std::fill(std::begin(char_to_id_), std::end(char_to_id_), -1);
  for (const char* s : kSpecialText) tokens_.emplace_back(s);
  for (const char* c = kCharacters; *c != '\0'; ++c) {
    char_to_id_[static_cast<unsigned char>(*c)] = static_cast<int>(tokens_.size());
    tokens_.emplace_back(1, *c);
  }
}

const Vocab& Vocab::get() {
  static const Vocab vocab;
  return vocab;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " is out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::id(std::string_view token) const {
  if (token.size() == 1) {
    const int id = char_to_id_[static_cast<unsigned char>(token[0])];
    if (id >= 0) return id;
  }
  for (int i = 0; i < kNumSpecial; ++i) {
    if (token == kSpecialText[i]) return i;
  }
  throw VocabError("'" + std::string(token) + "' is not a vocabulary token");
}

std::vector<int> tokenize(std::string_view text) {
  const Vocab& vocab = Vocab::get();
  std::vector<int> ids;
  ids.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {
      bool matched = false;
      for (int s = 0; s < kNumSpecial; ++s) {
        const std::string_view sp = kSpecialText[s];
        if (text.substr(i, sp.size()) == sp) {
          ids.push_back(s);
          i += sp.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (c >= 0x80) {
      // Report the whole UTF-8 sequence rather than a lone lead byte.
      std::size_t j = i + 1;
      while (j < text.size() && (static_cast<unsigned char>(text[j]) & 0xC0) == 0x80) ++j;
      throw VocabError("character '" + std::string(text.substr(i, j - i)) + "' at offset " + std::to_string(i) +
                       " is not in the vocabulary");
    }
    try {
      ids.push_back(vocab.id(text.substr(i, 1)));
    } catch (const VocabError&) {
      throw VocabError("character '" + std::string(1, text[i]) + "' at offset " + std::to_string(i) +
                       " is not in the vocabulary");
    }
    ++i;
  }
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  const Vocab& vocab = Vocab::get();
  std::string out;
  for (int id : ids) out += vocab.token(id);
  return out;
}

template <typename T>
PolicyModel<T> PolicyModel<T>::create(const PolicyConfig& config, std::uint64_t seed) {
  if (config.width % config.heads != 0) throw ConfigError("policy width must be divisible by heads");
  PolicyModel m;
  m.config = config;
  Rng rng = make_rng(seed, {0x706f6c});
  const int w = config.width;
  m.params.add("tok_emb", init_matrix<T>(rng, config.vocab_size(), w, 0.1));
  m.params.add("pos_emb", init_matrix<T>(rng, config.context, w, 0.02));
  const double residual = 1.0 / std::sqrt(2.0 * config.layers);
  for (int l = 0; l < config.layers; ++l) init_block(m.params, block_name(l), config.block(), rng, residual);
  m.params.add("ln_f.g", Tensor<T>::filled({w}, T(1)));
  m.params.add("ln_f.b", Tensor<T>::zeros({w}));
  return m;
}

namespace {

template <typename T>
Var<T> embed(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& ids, int start) {
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), start);
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size()) throw VocabError("token id " + std::to_string(id) + " is out of range");
  }
  return ops::add(ops::embedding(p("tok_emb"), ids), ops::embedding(p("pos_emb"), pos));
}

}  // namespace

template <typename T>
PolicyOutput<T> policy_forward(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& ids,
                               const PrefixCache<T>* prefix) {
  const int start = prefix != nullptr ? prefix->length : 0;
  if (ids.empty()) throw ShapeError("policy forward needs at least one token");
  check_context(cfg, static_cast<std::size_t>(start) + ids.size());
  if (prefix != nullptr && prefix->length > 0 && static_cast<int>(prefix->layers.size()) != cfg.layers) {
    throw ShapeError("prefix cache has " + std::to_string(prefix->layers.size()) + " layers, model has " +
                     std::to_string(cfg.layers));
  }
  PolicyOutput<T> out;
  out.present.resize(static_cast<std::size_t>(cfg.layers));
  Var<T> x = embed(cfg, p, ids, start);
  for (int l = 0; l < cfg.layers; ++l) {
    const KV<T>* past = (prefix != nullptr && prefix->length > 0) ? &prefix->layers[static_cast<std::size_t>(l)]
                                                                  : nullptr;
    x = block_forward(p, block_name(l), x, cfg.heads, true, past, &out.present[static_cast<std::size_t>(l)]);
  }
  out.hidden = ops::layer_norm(x, p("ln_f.g"), p("ln_f.b"));
  out.logits = ops::matmul(out.hidden, ops::transpose(p("tok_emb")));
  return out;
}

template <typename T>
PrefixCache<T> compute_prefix(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& ids) {
  check_context(cfg, ids.size());
  PrefixCache<T> cache;
  cache.length = static_cast<int>(ids.size());
  cache.layers.resize(static_cast<std::size_t>(cfg.layers));
  Var<T> x = embed(cfg, p, ids, 0);
  for (int l = 0; l < cfg.layers; ++l) {
    auto& kv = cache.layers[static_cast<std::size_t>(l)];
    if (l + 1 < cfg.layers) {
      x = block_forward(p, block_name(l), x, cfg.heads, true, static_cast<const KV<T>*>(nullptr), &kv);
    } else {
      // Only the keys and values of the last block are needed.
      const std::string pre = block_name(l);
      const Var<T> h = ops::layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"));
      kv.k = ops::linear(h, p(pre + "attn.wk"), p(pre + "attn.bk"));
      kv.v = ops::linear(h, p(pre + "attn.wv"), p(pre + "attn.bv"));
    }
  }
  return cache;
}

template <typename T>
PrefixCache<T> leaf_prefix(const PrefixCache<T>& source, bool requires_grad) {
  PrefixCache<T> out;
  out.length = source.length;
  for (const auto& kv : source.layers) {
    out.layers.push_back({leaf(kv.k.value(), requires_grad), leaf(kv.v.value(), requires_grad)});
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> prefix_grads(const PrefixCache<T>& leaves) {
  std::vector<Tensor<T>> out;
  for (const auto& kv : leaves.layers) {
    out.push_back(kv.k.grad());
    out.push_back(kv.v.grad());
  }
  return out;
}

template <typename T>
void accumulate_prefix_grads(std::vector<Tensor<T>>& acc, const std::vector<Tensor<T>>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  if (acc.size() != g.size()) throw ShapeError("prefix gradient lists differ in length");
  for (std::size_t i = 0; i < acc.size(); ++i) {
    auto dst = acc[i].data();
    auto src = g[i].data();
    if (dst.size() != src.size()) throw ShapeError("prefix gradient shapes differ");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

template <typename T>
void backprop_prefix(const PrefixCache<T>& source, const std::vector<Tensor<T>>& grads) {
  if (grads.size() != 2 * source.layers.size()) throw ShapeError("prefix gradient count mismatch");
  // d/dθ sum(K ⊙ G) = G · dK/dθ, so this root carries the gathered
  // gradients into the parameters that produced the prefix.
  std::vector<Var<T>> terms;
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    const auto& kv = source.layers[l];
    if (kv.k.requires_grad()) terms.push_back(ops::sum(ops::mul(kv.k, constant(grads[2 * l]))));
    if (kv.v.requires_grad()) terms.push_back(ops::sum(ops::mul(kv.v, constant(grads[2 * l + 1]))));
  }
  if (terms.empty()) return;
  Var<T> root = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) root = ops::add(root, terms[i]);
  backward(root);
}

template <typename T>
Var<T> continuation_logprobs(const PolicyConfig& cfg, const Binding<T>& p, const std::vector<int>& prompt,
                             const std::vector<int>& continuation, const PrefixCache<T>* prefix, Var<T>* hidden) {
  if (continuation.empty()) throw ShapeError("empty continuation");
  // The first continuation token is scored from the last prompt position,
  // whose output a cached prefix does not hold.
  if (prompt.empty()) throw ShapeError("continuation needs a non-empty prompt");
  const int prefix_len = prefix != nullptr ? prefix->length : 0;
  check_context(cfg, static_cast<std::size_t>(prefix_len) + prompt.size() + continuation.size());
  std::vector<int> ids = prompt;
  // The last continuation token predicts nothing that is scored.
  ids.insert(ids.end(), continuation.begin(), continuation.end() - 1);

  const int n = static_cast<int>(continuation.size());
  const PolicyOutput<T> out = policy_forward(cfg, p, ids, prefix);
  const int first = static_cast<int>(prompt.size()) - 1;
  const Var<T> rows = ops::slice(out.logits, 0, first, n);
  if (hidden != nullptr) *hidden = out.hidden;
  return ops::pick(ops::log_softmax(rows), continuation);
}

template <typename T>
LogprobResult sequence_logprob(const PolicyModel<T>& model, const std::vector<int>& prompt,
                               const std::vector<int>& continuation) {
  NoGradGuard guard;
  const Binding<T> p(model.params, false);
  const Var<T> lp = continuation_logprobs(model.config, p, prompt, continuation);
  LogprobResult r;
  for (T v : lp.value().data()) {
    r.per_token.push_back(static_cast<double>(v));
    r.total += static_cast<double>(v);
  }
  return r;
}

namespace {

int choose_token(const std::vector<double>& logits, const SampleOptions& opt, Rng& rng) {
  const int v = static_cast<int>(logits.size());
  if (opt.temperature <= 0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  int keep = v;
  if (opt.top_k > 0 && opt.top_k < v) {
    keep = opt.top_k;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  }
  double mx = -INFINITY;
  for (int i = 0; i < keep; ++i) mx = std::max(mx, logits[order[i]]);
  std::vector<double> w(static_cast<std::size_t>(keep));
  double total = 0;
  for (int i = 0; i < keep; ++i) {
    w[i] = std::exp((logits[order[i]] - mx) / opt.temperature);
    total += w[i];
  }
  double u = uniform01(rng) * total;
  for (int i = 0; i < keep; ++i) {
    u -= w[i];
    if (u < 0) return order[i];
  }
  return order[keep - 1];
}

double log_softmax_at(const std::vector<double>& logits, int id) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double x : logits) s += std::exp(x - mx);
  return logits[id] - mx - std::log(s);
}

template <typename T>
std::vector<double> last_row(const Var<T>& logits) {
  const int rows = logits.dim(0);
  const int cols = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(cols));
  for (int c = 0; c < cols; ++c) out[c] = static_cast<double>(logits.value().at(rows - 1, c));
  return out;
}

template <typename T>
TokenSequence sample_impl(const PolicyConfig& cfg, const Binding<T>& p, const PrefixCache<T>* prefix,
                          const std::vector<int>& prompt, const SampleOptions& opt, std::uint64_t seed,
                          Tensor<T>* states) {
  if (opt.max_len < 1) throw ConfigError("max_len must be at least 1");
  if (opt.temperature < 0) throw ConfigError("temperature must be non-negative");
  if (prompt.empty()) throw ShapeError("sampling needs a non-empty prompt");
  NoGradGuard guard;
  Rng rng(seed);
  TokenSequence seq;
  seq.ids = prompt;
  seq.prompt_length = static_cast<int>(prompt.size());

  PolicyOutput<T> out = policy_forward(cfg, p, prompt, prefix);
  PrefixCache<T> cache;
  cache.length = (prefix != nullptr ? prefix->length : 0) + static_cast<int>(prompt.size());
  cache.layers = std::move(out.present);
  std::vector<double> logits = last_row(out.logits);
  std::vector<T> rows;
  auto keep_state = [&](const Var<T>& hidden) {
    if (states == nullptr) return;
    const auto h = hidden.value().data();
    rows.insert(rows.end(), h.end() - cfg.width, h.end());
  };
  keep_state(out.hidden);

  for (int step = 0; step < opt.max_len; ++step) {
    const int tok = choose_token(logits, opt, rng);
    seq.ids.push_back(tok);
    seq.logprobs.push_back(log_softmax_at(logits, tok));
    if (tok == kEos || tok == kImg || step + 1 == opt.max_len) break;
    if (cache.length + 1 > cfg.context) break;
    PolicyOutput<T> next = policy_forward(cfg, p, std::vector<int>{tok}, &cache);
    cache.length += 1;
    cache.layers = std::move(next.present);
    logits = last_row(next.logits);
    keep_state(next.hidden);
  }
  if (states != nullptr) {
    const int n = static_cast<int>(seq.ids.size()) - seq.prompt_length;
    rows.resize(static_cast<std::size_t>(n) * cfg.width);
    *states = Tensor<T>({n, cfg.width}, std::move(rows));
  }
  return seq;
}

}  // namespace

template <typename T>
TokenSequence sample(const PolicyModel<T>& model, const std::vector<int>& prompt, const SampleOptions& opt,
                     std::uint64_t seed) {
  NoGradGuard guard;
  const Binding<T> p(model.params, false);
  return sample_impl<T>(model.config, p, nullptr, prompt, opt, seed, nullptr);
}

template <typename T>
TokenSequence sample_with_prefix(const PolicyConfig& cfg, const Binding<T>& p, const PrefixCache<T>& prefix,
                                 const std::vector<int>& prompt, const SampleOptions& opt, std::uint64_t seed,
                                 Tensor<T>* states) {
  return sample_impl<T>(cfg, p, &prefix, prompt, opt, seed, states);
}

template <typename T>
Tensor<T> hidden_states(const PolicyModel<T>& model, const std::vector<int>& ids) {
  NoGradGuard guard;
  const Binding<T> p(model.params, false);
  return policy_forward(model.config, p, ids).hidden.value();
}

#define THINKDRAW_LM_INSTANTIATE(T)                                                                           \
  template struct PolicyModel<T>;                                                                             \
  template PolicyOutput<T> policy_forward<T>(const PolicyConfig&, const Binding<T>&, const std::vector<int>&, \
                                             const PrefixCache<T>*);                                          \
  template PrefixCache<T> compute_prefix<T>(const PolicyConfig&, const Binding<T>&, const std::vector<int>&); \
  template PrefixCache<T> leaf_prefix<T>(const PrefixCache<T>&, bool);                                        \
  template std::vector<Tensor<T>> prefix_grads<T>(const PrefixCache<T>&);                                     \
  template void accumulate_prefix_grads<T>(std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&);           \
  template void backprop_prefix<T>(const PrefixCache<T>&, const std::vector<Tensor<T>>&);                     \
  template Var<T> continuation_logprobs<T>(const PolicyConfig&, const Binding<T>&, const std::vector<int>&,   \
                                           const std::vector<int>&, const PrefixCache<T>*, Var<T>*);          \
  template LogprobResult sequence_logprob<T>(const PolicyModel<T>&, const std::vector<int>&,                  \
                                             const std::vector<int>&);                                        \
  template TokenSequence sample<T>(const PolicyModel<T>&, const std::vector<int>&, const SampleOptions&,      \
                                   std::uint64_t);                                                            \
  template TokenSequence sample_with_prefix<T>(const PolicyConfig&, const Binding<T>&, const PrefixCache<T>&, \
                                               const std::vector<int>&, const SampleOptions&, std::uint64_t, \
                                               Tensor<T>*);                                                   \
  template Tensor<T> hidden_states<T>(const PolicyModel<T>&, const std::vector<int>&);

THINKDRAW_LM_INSTANTIATE(float)
THINKDRAW_LM_INSTANTIATE(double)

}  // namespace thinkdraw::lm
