#include <cmath>
#include <set>

#include "doctest.h"
#include "thinkdraw/concept_world.hpp"
#include "thinkdraw/numerics/gradcheck.hpp"
#include "thinkdraw/policy_lm.hpp"

using namespace thinkdraw;
using namespace thinkdraw::lm;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.width = 8;
  c.layers = 2;
  c.heads = 2;
  c.ff = 16;
  c.context = 32;
  return c;
}

const PolicyModel<double>& model64() {
  static const PolicyModel<double> m = PolicyModel<double>::create(PolicyConfig{}, 11);
  return m;
}

}  // namespace

TEST_CASE("vocabulary table") {
  const Vocab& v = Vocab::get();
  CHECK(v.size() <= 64);
  std::set<std::string> seen;
  for (int i = 0; i < v.size(); ++i) {
    seen.insert(v.token(i));
    CHECK(v.id(v.token(i)) == i);
  }
  CHECK(seen.size() == static_cast<std::size_t>(v.size()));
  CHECK_THROWS_AS(v.token(v.size()), VocabError);
}

TEST_CASE("tokenize and detokenize") {
  const auto ids = tokenize("<think>a</think>");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == kThink);
  CHECK(ids[1] == Vocab::get().id("a"));
  CHECK(ids[2] == kThinkEnd);
  CHECK(detokenize(tokenize("red pentagon")) == "red pentagon");
  CHECK_THROWS_AS(tokenize("\xe2\x82\xac"), VocabError);
  CHECK_THROWS_AS(tokenize("Red"), VocabError);
  CHECK(tokenize("<answer>x</answer><img>").size() == 4);
  // A lone '<' that starts no special token is not a vocabulary character.
  CHECK_THROWS_AS(tokenize("a<b"), VocabError);

  for (const auto& t : world::enumerate_tasks(world::Mode::reasoning)) {
    const std::string text = t.instruction + " " + t.explanation + " " + t.gt_prompt;
    CHECK(detokenize(tokenize(text)) == text);
  }
}

TEST_CASE("sequence log-probability factorization") {
  const auto& m = model64();
  const std::vector<int> prompt = tokenize("a red shape");
  const std::vector<int> cont = tokenize(" with");

  const LogprobResult one = sequence_logprob(m, prompt, {cont[0]});
  const Tensor<double> logits = [&] {
    NoGradGuard g;
    Binding<double> p(m.params, false);
    return policy_forward(m.config, p, prompt).logits.value();
  }();
  const int last = static_cast<int>(prompt.size()) - 1;
  double mx = -INFINITY, s = 0;
  for (int c = 0; c < logits.dim(1); ++c) mx = std::max(mx, logits.at(last, c));
  for (int c = 0; c < logits.dim(1); ++c) s += std::exp(logits.at(last, c) - mx);
  CHECK(one.total == doctest::Approx(logits.at(last, cont[0]) - mx - std::log(s)).epsilon(1e-12));

  // Chain rule: the total equals the sum of one-token extensions.
  const LogprobResult all = sequence_logprob(m, prompt, cont);
  double chain = 0;
  std::vector<int> ctx = prompt;
  for (int tok : cont) {
    chain += sequence_logprob(m, ctx, {tok}).total;
    ctx.push_back(tok);
  }
  CHECK(std::abs(all.total - chain) <= 1e-6);
  double sum = 0;
  for (double x : all.per_token) sum += x;
  CHECK(std::abs(sum - all.total) <= 1e-12);
}

TEST_CASE("next-token distributions are normalized") {
  const auto& m = model64();
  NoGradGuard g;
  Binding<double> p(m.params, false);
  const auto out = policy_forward(m.config, p, tokenize("<bos>you first think"));
  const Tensor<double> lsm = ops::log_softmax(out.logits).value();
  for (int r = 0; r < lsm.dim(0); ++r) {
    double s = 0;
    for (int c = 0; c < lsm.dim(1); ++c) s += std::exp(lsm.at(r, c));
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("causality of logits and hidden states") {
  const auto& m = model64();
  const std::vector<int> ids = tokenize("a blue square with one more side");
  const Tensor<double> full = hidden_states(m, ids);
  CHECK(full.shape() == Shape{static_cast<int>(ids.size()), 64});

  const int k = 9;
  const Tensor<double> head = hidden_states(m, std::vector<int>(ids.begin(), ids.begin() + k));
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < 64; ++c) CHECK(std::abs(head.at(r, c) - full.at(r, c)) <= 1e-12);
  }

  std::vector<int> changed = ids;
  changed[k] = Vocab::get().id("z");
  const Tensor<double> other = hidden_states(m, changed);
  int differing_after = 0;
  for (int r = 0; r < static_cast<int>(ids.size()); ++r) {
    bool diff = false;
    for (int c = 0; c < 64; ++c) diff = diff || other.at(r, c) != full.at(r, c);
    if (r < k) CHECK_FALSE(diff);
    if (r >= k && diff) ++differing_after;
  }
  CHECK(differing_after == static_cast<int>(ids.size()) - k);
}

TEST_CASE("context limit") {
  const auto& m = model64();
  const std::vector<int> prompt(200, Vocab::get().id("a"));
  const std::vector<int> cont(57, Vocab::get().id("b"));
  CHECK_THROWS_AS(sequence_logprob(m, prompt, cont), ContextOverflowError);
  CHECK_NOTHROW(sequence_logprob(m, prompt, std::vector<int>(56, Vocab::get().id("b"))));
  CHECK_THROWS_AS(hidden_states(m, std::vector<int>(257, kPad)), ContextOverflowError);
}

TEST_CASE("greedy decoding agrees with rescoring") {
  const auto& m = model64();
  const std::vector<int> prompt = tokenize("<bos> q: a red triangle a:");
  SampleOptions opt;
  opt.temperature = 0;
  opt.max_len = 12;
  const TokenSequence a = sample(m, prompt, opt, 1);
  const TokenSequence b = sample(m, prompt, opt, 2);
  CHECK(a.ids == b.ids);
  const std::vector<int> cont = a.continuation();
  REQUIRE(!cont.empty());

  // Every greedy token is the argmax of the full (non-incremental) forward.
  NoGradGuard g;
  Binding<double> p(m.params, false);
  const auto out = policy_forward(m.config, p, a.ids);
  for (std::size_t i = 0; i < cont.size(); ++i) {
    const int row = a.prompt_length - 1 + static_cast<int>(i);
    int best = 0;
    for (int c = 1; c < out.logits.dim(1); ++c) {
      if (out.logits.value().at(row, c) > out.logits.value().at(row, best)) best = c;
    }
    CHECK(best == cont[i]);
  }

  // Brute force: no single-token substitution scores higher at its position.
  const LogprobResult base = sequence_logprob(m, prompt, cont);
  for (std::size_t j = 0; j < cont.size(); ++j) {
    for (int v = 0; v < Vocab::get().size(); ++v) {
      if (v == cont[j]) continue;
      std::vector<int> alt = cont;
      alt[j] = v;
      const LogprobResult r = sequence_logprob(m, prompt, alt);
      CHECK(base.per_token[j] >= r.per_token[j]);
    }
  }

  // Recorded log-probabilities match rescoring.
  for (std::size_t i = 0; i < cont.size(); ++i) {
    CHECK(a.logprobs[i] == doctest::Approx(base.per_token[i]).epsilon(1e-9));
  }
}

TEST_CASE("seeded sampling") {
  const auto& m = model64();
  const std::vector<int> prompt = tokenize("<bos> q: a green");
  SampleOptions opt;
  opt.temperature = 1.0;
  opt.max_len = 20;
  const TokenSequence a = sample(m, prompt, opt, 42);
  const TokenSequence b = sample(m, prompt, opt, 42);
  CHECK(a.ids == b.ids);
  CHECK(a.logprobs == b.logprobs);
  bool any_diff = false;
  for (std::uint64_t s = 43; s < 48; ++s) any_diff = any_diff || sample(m, prompt, opt, s).ids != a.ids;
  CHECK(any_diff);
  CHECK(static_cast<int>(a.continuation().size()) <= 20);
  CHECK(a.logprobs.size() == a.continuation().size());
  const LogprobResult r = sequence_logprob(m, prompt, a.continuation());
  for (std::size_t i = 0; i < r.per_token.size(); ++i) {
    CHECK(a.logprobs[i] == doctest::Approx(r.per_token[i]).epsilon(1e-9));
  }

  opt.top_k = 1;
  const TokenSequence k1 = sample(m, prompt, opt, 42);
  opt.temperature = 0;
  opt.top_k = 0;
  CHECK(k1.ids == sample(m, prompt, opt, 0).ids);
  opt.max_len = 0;
  CHECK_THROWS_AS(sample(m, prompt, opt, 0), ConfigError);
}

TEST_CASE("cached prefix reproduces the full computation") {
  const auto& m = model64();
  const std::vector<int> prefix_ids = tokenize("<bos>you first think step by step");
  const std::vector<int> prompt = tokenize(" q: a red square a:");
  const std::vector<int> cont = tokenize("<think>x</think>");
  std::vector<int> full_prompt = prefix_ids;
  full_prompt.insert(full_prompt.end(), prompt.begin(), prompt.end());

  // Direct gradient of the summed log-probability.
  Binding<double> direct(m.params, true);
  const Var<double> lp_direct = continuation_logprobs(m.config, direct, full_prompt, cont);
  backward(ops::sum(lp_direct));

  // Same through a shared prefix graph and a per-sample graph.
  Binding<double> shared(m.params, true);
  const PrefixCache<double> source = compute_prefix(m.config, shared, prefix_ids);
  const PrefixCache<double> leaves = leaf_prefix(source, true);
  Binding<double> sample_b(m.params, true);
  const Var<double> lp_cached = continuation_logprobs(m.config, sample_b, prompt, cont, &leaves);
  for (std::size_t i = 0; i < cont.size(); ++i) {
    CHECK(lp_cached.value()[i] == doctest::Approx(lp_direct.value()[i]).epsilon(1e-11));
  }
  backward(ops::sum(lp_cached));
  backprop_prefix(source, prefix_grads(leaves));

  const auto gd = direct.grads();
  const auto gs = sample_b.grads();
  const auto gp = shared.grads();
  double max_err = 0;
  for (const auto& [name, g] : gd) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      max_err = std::max(max_err, std::abs(g[i] - gs.at(name)[i] - gp.at(name)[i]));
    }
  }
  CHECK(max_err <= 1e-10);

  SampleOptions opt;
  opt.temperature = 0;
  opt.max_len = 8;
  NoGradGuard guard;
  Binding<double> p(m.params, false);
  const PrefixCache<double> nograd = compute_prefix(m.config, p, prefix_ids);
  const TokenSequence a = sample_with_prefix(m.config, p, nograd, prompt, opt, 0);
  const TokenSequence b = sample(m, full_prompt, opt, 0);
  CHECK(a.continuation() == b.continuation());
}

TEST_CASE("log-probability gradient matches finite differences") {
  const PolicyConfig cfg = tiny_config();
  const PolicyModel<double> m = PolicyModel<double>::create(cfg, 3);
  std::vector<std::string> names;
  std::vector<Tensor<double>> inputs;
  for (const auto& [k, t] : m.params.all()) {
    names.push_back(k);
    inputs.push_back(t);
  }
  const std::vector<int> prompt = tokenize("<bos>ab");
  const std::vector<int> cont = tokenize("c<eos>");
  const GraphFn f = [&](const std::vector<Var<double>>& vars) {
    std::map<std::string, Var<double>> bound;
    for (std::size_t i = 0; i < vars.size(); ++i) bound.emplace(names[i], vars[i]);
    const Binding<double> p(std::move(bound));
    return ops::sum(continuation_logprobs(cfg, p, prompt, cont));
  };
  const GradCheckReport report = check_gradients(f, inputs, 1e-5);
  CHECK_MESSAGE(report.pass, report.summary());
}
