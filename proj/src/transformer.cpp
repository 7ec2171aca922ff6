#include "thinkdraw/transformer.hpp"

#include <cmath>

namespace thinkdraw {

template <typename T>
Tensor<T> init_matrix(Rng& rng, int rows, int cols, double stddev) {
  return Tensor<T>({rows, cols}, normal_vector<T>(rng, static_cast<std::size_t>(rows) * cols, stddev));
}

template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, const BlockDims& dims, Rng& rng,
                double residual_scale) {
  const int w = dims.width;
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  store.add(prefix + "ln1.g", Tensor<T>::filled({w}, T(1)));
  store.add(prefix + "ln1.b", Tensor<T>::zeros({w}));
  for (const char* name : {"wq", "wk", "wv"}) {
    store.add(prefix + "attn." + name, init_matrix<T>(rng, w, w, s));
    store.add(prefix + "attn.b" + std::string(name + 1), Tensor<T>::zeros({w}));
  }
  store.add(prefix + "attn.wo", init_matrix<T>(rng, w, w, s * residual_scale));
  store.add(prefix + "attn.bo", Tensor<T>::zeros({w}));
  store.add(prefix + "ln2.g", Tensor<T>::filled({w}, T(1)));
  store.add(prefix + "ln2.b", Tensor<T>::zeros({w}));
  store.add(prefix + "mlp.w1", init_matrix<T>(rng, w, dims.ff, s));
  store.add(prefix + "mlp.b1", Tensor<T>::zeros({dims.ff}));
  store.add(prefix + "mlp.w2", init_matrix<T>(rng, dims.ff, w, residual_scale / std::sqrt(dims.ff)));
  store.add(prefix + "mlp.b2", Tensor<T>::zeros({w}));
}

template <typename T>
Var<T> block_forward(const Binding<T>& p, const std::string& prefix, const Var<T>& x, int heads, bool causal,
                     const KV<T>* past, KV<T>* present) {
  using namespace ops;
  auto P = [&](const char* n) -> const Var<T>& { return p(prefix + n); };
  const Var<T> h = layer_norm(x, P("ln1.g"), P("ln1.b"));
  const Var<T> q = linear(h, P("attn.wq"), P("attn.bq"));
  Var<T> k = linear(h, P("attn.wk"), P("attn.bk"));
  Var<T> v = linear(h, P("attn.wv"), P("attn.bv"));
  if (past != nullptr && past->k) {
    k = concat<T>({past->k, k}, 0);
    v = concat<T>({past->v, v}, 0);
  }
  if (present != nullptr) {
    present->k = k;
    present->v = v;
  }
  const Var<T> a = attention(q, k, v, heads, causal);
  const Var<T> x1 = add(x, linear(a, P("attn.wo"), P("attn.bo")));
  const Var<T> h2 = layer_norm(x1, P("ln2.g"), P("ln2.b"));
  const Var<T> m = linear(gelu(linear(h2, P("mlp.w1"), P("mlp.b1"))), P("mlp.w2"), P("mlp.b2"));
  return add(x1, m);
}

template Tensor<float> init_matrix<float>(Rng&, int, int, double);
template Tensor<double> init_matrix<double>(Rng&, int, int, double);
template void init_block<float>(ParamStore<float>&, const std::string&, const BlockDims&, Rng&, double);
template void init_block<double>(ParamStore<double>&, const std::string&, const BlockDims&, Rng&, double);
template Var<float> block_forward<float>(const Binding<float>&, const std::string&, const Var<float>&, int, bool,
                                         const KV<float>*, KV<float>*);
template Var<double> block_forward<double>(const Binding<double>&, const std::string&, const Var<double>&, int,
                                           bool, const KV<double>*, KV<double>*);

}  // namespace thinkdraw
