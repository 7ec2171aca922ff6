#pragma once

#include <string>
#include <vector>

#include "thinkdraw/numerics/ops.hpp"
#include "thinkdraw/numerics/params.hpp"
#include "thinkdraw/rng.hpp"

namespace thinkdraw {

struct BlockDims {
  int width = 64;
  int heads = 4;
  int ff = 256;
};

// Keys and values of one attention layer, rows = positions.
template <typename T>
struct KV {
  Var<T> k;
  Var<T> v;
};

// Adds the parameters of one pre-norm transformer block under `prefix`.
template <typename T>
void init_block(ParamStore<T>& store, const std::string& prefix, const BlockDims& dims, Rng& rng,
                double residual_scale = 1.0);

// x [N, width] -> [N, width]. With `past`, the block's queries attend to the
// cached keys/values followed by the new ones; `present` receives the full
// (past + new) keys/values when non-null.
template <typename T>
Var<T> block_forward(const Binding<T>& p, const std::string& prefix, const Var<T>& x, int heads, bool causal,
                     const KV<T>* past = nullptr, KV<T>* present = nullptr);

template <typename T>
Tensor<T> init_matrix(Rng& rng, int rows, int cols, double stddev);

}  // namespace thinkdraw
