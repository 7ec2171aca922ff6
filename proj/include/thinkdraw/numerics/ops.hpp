#pragma once

#include <vector>

#include "thinkdraw/numerics/autograd.hpp"

// Differentiable kernels. Shapes must match exactly; the only broadcast is a
// size-1 operand against a tensor of any shape. Matrix kernels take rank-2
// inputs laid out row-major as [rows, cols].
namespace thinkdraw::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T c);
template <typename T> Var<T> add_scalar(const Var<T>& a, T c);
template <typename T> Var<T> minimum(const Var<T>& a, const Var<T>& b);
// Identity inside [lo, hi], constant (zero gradient) outside.
template <typename T> Var<T> clip(const Var<T>& a, T lo, T hi);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice(const Var<T>& a, int axis, int start, int length);
template <typename T> Var<T> detach(const Var<T>& a);

template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);

template <typename T> Var<T> softmax(const Var<T>& a);
template <typename T> Var<T> log_softmax(const Var<T>& a);
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                                        T eps = T(1e-5));

// table [V, D], ids in [0, V) -> [ids.size(), D]
template <typename T> Var<T> embedding(const Var<T>& table, const std::vector<int>& ids);
// x [N, In] * w [In, Out] + b [Out] -> [N, Out]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// x [N, C], picks x[i, ids[i]] -> [N]
template <typename T> Var<T> pick(const Var<T>& x, const std::vector<int>& ids);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// Sum over the last axis: [.., C] -> [..]
template <typename T> Var<T> sum_last(const Var<T>& a);

template <typename T> Var<T> mse(const Var<T>& pred, const Var<T>& target);
// Mean over rows of -sum_j p_j log q_j, where q are probabilities.
template <typename T> Var<T> cross_entropy(const Var<T>& probs, const Tensor<T>& target);
// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
template <typename T> Var<T> kl_rows(const Var<T>& p_logits, const Var<T>& q_logits);
template <typename T> Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b);

// Multi-head scaled dot-product attention. q [Tq, D], k/v [Tk, D].
// With `causal`, query i sees keys j <= i + (Tk - Tq), so a query block can
// sit at the tail of a longer key sequence (cached prefix).
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                                       bool causal);

}  // namespace thinkdraw::ops
