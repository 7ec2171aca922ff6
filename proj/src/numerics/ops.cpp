#include "thinkdraw/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace thinkdraw::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_rank2(const Var<T>& a, const char* op) {
  require(a.value().rank() == 2, std::string(op) + ": expected rank-2 input, got " +
                                     shape_str(a.shape()));
}

template <typename T>
int rows_of(const Tensor<T>& t) {
  return static_cast<int>(t.size() / static_cast<std::size_t>(t.shape().back()));
}

// Elementwise binary op with optional scalar broadcast on either side.
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const char* op, const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool a_s = av.size() == 1 && bv.size() != 1;
  const bool b_s = bv.size() == 1 && av.size() != 1;
  require(a_s || b_s || av.shape() == bv.shape(),
          std::string(op) + ": shape mismatch " + shape_str(av.shape()) + " vs " +
              shape_str(bv.shape()));
  const Shape out_shape = a_s ? bv.shape() : av.shape();
  Tensor<T> out(out_shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[a_s ? 0 : i], bv[b_s ? 0 : i]);
  }
  return make_result<T>(op, std::move(out), {a, b}, [a_s, b_s, da, db](Node<T>& self) {
    const auto& g = self.grad;
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    const std::size_t n = g.size();
    if (pa.requires_grad) {
      Tensor<T>& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T av = pa.value[a_s ? 0 : i];
        const T bv = pb.value[b_s ? 0 : i];
        ga[a_s ? 0 : i] += g[i] * da(av, bv);
      }
    }
    if (pb.requires_grad) {
      Tensor<T>& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T av = pa.value[a_s ? 0 : i];
        const T bv = pb.value[b_s ? 0 : i];
        gb[b_s ? 0 : i] += g[i] * db(av, bv);
      }
    }
  });
}

// Elementwise unary op whose derivative is expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const char* op, const Var<T>& a, F f, D d) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(op, std::move(out), {a}, [d](Node<T>& self) {
    Node<T>& p = self.parent(0);
    Tensor<T>& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * d(p.value[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  // Ties route the gradient to the first operand.
  return binary<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? T(1) : T(0); }, [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return unary<T>("scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> clip(const Var<T>& a, T lo, T hi) {
  return unary<T>(
      "clip", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  // tanh approximation; the tanh values are kept for the backward pass.
  static constexpr T c = T(0.7978845608028654);
  static constexpr T k = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const std::size_t n = a.value().size();
  const auto x = Eigen::Map<const Arr>(a.value().ptr(), static_cast<Eigen::Index>(n));
  Arr th = (c * (x + k * x * x * x)).tanh();
  Tensor<T> out(a.shape());
  Eigen::Map<Arr>(out.ptr(), static_cast<Eigen::Index>(n)) = T(0.5) * x * (T(1) + th);
  return make_result<T>("gelu", std::move(out), {a}, [th = std::move(th), n](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    if (!pa.requires_grad) return;
    const auto len = static_cast<Eigen::Index>(n);
    const auto x = Eigen::Map<const Arr>(pa.value.ptr(), len);
    const auto g = Eigen::Map<const Arr>(self.grad.ptr(), len);
    Eigen::Map<Arr>(pa.grad_buffer().ptr(), len) +=
        g * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x));
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  Tensor<T> out({m, n});
  Map<T>(out.ptr(), m, n).noalias() = MapC<T>(a.value().ptr(), m, k) * MapC<T>(b.value().ptr(), k, n);
  return make_result<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    MapC<T> g(self.grad.ptr(), m, n);
    if (pa.requires_grad) {
      Map<T>(pa.grad_buffer().ptr(), m, k).noalias() += g * MapC<T>(pb.value.ptr(), k, n).transpose();
    }
    if (pb.requires_grad) {
      Map<T>(pb.grad_buffer().ptr(), k, n).noalias() += MapC<T>(pa.value.ptr(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  Map<T>(out.ptr(), n, m) = MapC<T>(a.value().ptr(), m, n).transpose();
  return make_result<T>("transpose", std::move(out), {a}, [m, n](Node<T>& self) {
    Node<T>& p = self.parent(0);
    Map<T>(p.grad_buffer().ptr(), m, n) += MapC<T>(self.grad.ptr(), n, m).transpose();
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {a},
                        [](Node<T>& self) { self.parent(0).accumulate(self.grad); });
}

namespace {
// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[i]);
  r.extent = static_cast<std::size_t>(s[axis]);
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}
}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require(static_cast<int>(s.size()) == rank, "concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis) require(s[i] == s0[i], "concat: extent mismatch " + shape_str(s) + " vs " + shape_str(s0));
    }
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape);
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const AxisSplit ps = split_axis(p.shape(), axis);
    offsets.push_back(off);
    for (std::size_t o = 0; o < ps.outer; ++o) {
      std::copy_n(p.value().ptr() + o * ps.extent * ps.inner, ps.extent * ps.inner,
                  out.ptr() + (o * os.extent + off) * os.inner);
    }
    off += ps.extent;
  }
  return make_result<T>("concat", std::move(out), parts, [os, offsets](Node<T>& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node<T>& p = self.parent(pi);
      if (!p.requires_grad) continue;
      Tensor<T>& gp = p.grad_buffer();
      const std::size_t chunk = gp.size() / os.outer;
      for (std::size_t o = 0; o < os.outer; ++o) {
        const T* src = self.grad.ptr() + (o * os.extent + offsets[pi]) * os.inner;
        T* dst = gp.ptr() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int start, int length) {
  const Shape& s = a.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "slice: axis out of range");
  require(start >= 0 && length > 0 && start + length <= s[axis],
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
              ") outside extent " + std::to_string(s[axis]));
  Shape out_shape = s;
  out_shape[axis] = length;
  const AxisSplit is = split_axis(s, axis);
  Tensor<T> out(out_shape);
  const std::size_t chunk = static_cast<std::size_t>(length) * is.inner;
  for (std::size_t o = 0; o < is.outer; ++o) {
    std::copy_n(a.value().ptr() + (o * is.extent + start) * is.inner, chunk, out.ptr() + o * chunk);
  }
  return make_result<T>("slice", std::move(out), {a}, [is, start, chunk](Node<T>& self) {
    Tensor<T>& gp = self.parent(0).grad_buffer();
    for (std::size_t o = 0; o < is.outer; ++o) {
      const T* src = self.grad.ptr() + o * chunk;
      T* dst = gp.ptr() + (o * is.extent + static_cast<std::size_t>(start)) * is.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return constant(a.value());
}

template <typename T>
Var<T> softmax(const Var<T>& a) {
  const auto& av = a.value();
  const int c = av.shape().back();
  const int r = rows_of(av);
  Tensor<T> out(av.shape());
  for (int i = 0; i < r; ++i) {
    const T* x = av.ptr() + static_cast<std::size_t>(i) * c;
    T* y = out.ptr() + static_cast<std::size_t>(i) * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (int j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  return make_result<T>("softmax", std::move(out), {a}, [r, c](Node<T>& self) {
    Tensor<T>& gp = self.parent(0).grad_buffer();
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += self.grad[o + j] * self.value[o + j];
      for (int j = 0; j < c; ++j) gp[o + j] += self.value[o + j] * (self.grad[o + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& a) {
  const auto& av = a.value();
  const int c = av.shape().back();
  const int r = rows_of(av);
  Tensor<T> out(av.shape());
  for (int i = 0; i < r; ++i) {
    const T* x = av.ptr() + static_cast<std::size_t>(i) * c;
    T* y = out.ptr() + static_cast<std::size_t>(i) * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const T lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return make_result<T>("log_softmax", std::move(out), {a}, [r, c](Node<T>& self) {
    Tensor<T>& gp = self.parent(0).grad_buffer();
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      T gsum = 0;
      for (int j = 0; j < c; ++j) gsum += self.grad[o + j];
      for (int j = 0; j < c; ++j) gp[o + j] += self.grad[o + j] - std::exp(self.value[o + j]) * gsum;
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& xv = x.value();
  const int c = xv.shape().back();
  const int r = rows_of(xv);
  require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c),
          "layer_norm: gain/bias must have " + std::to_string(c) + " entries");
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * c;
    T mu = 0;
    for (int j = 0; j < c; ++j) mu += xv[o + j];
    mu /= T(c);
    T var = 0;
    for (int j = 0; j < c; ++j) var += (xv[o + j] - mu) * (xv[o + j] - mu);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      xhat[o + j] = (xv[o + j] - mu) * is;
      out[o + j] = xhat[o + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result<T>(
      "layer_norm", std::move(out), {x, gamma, beta},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& px = self.parent(0);
        Node<T>& pg = self.parent(1);
        Node<T>& pb = self.parent(2);
        const auto& g = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          Tensor<T>& gg = pg.grad_buffer();
          Tensor<T>& gb = pb.grad_buffer();
          for (int i = 0; i < r; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
              gg[j] += g[o + j] * xhat[o + j];
              gb[j] += g[o + j];
            }
          }
        }
        if (px.requires_grad) {
          Tensor<T>& gx = px.grad_buffer();
          for (int i = 0; i < r; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * c;
            T s1 = 0, s2 = 0;
            for (int j = 0; j < c; ++j) {
              const T dxh = g[o + j] * pg.value[j];
              s1 += dxh;
              s2 += dxh * xhat[o + j];
            }
            const T is = inv_std[static_cast<std::size_t>(i)];
            for (int j = 0; j < c; ++j) {
              const T dxh = g[o + j] * pg.value[j];
              gx[o + j] += is * (dxh - s1 / T(c) - xhat[o + j] * s2 / T(c));
            }
          }
        }
      });
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  require_rank2(table, "embedding");
  require(!ids.empty(), "embedding: empty id list");
  const int v = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    require(ids[i] >= 0 && ids[i] < v, "embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(table.value().ptr() + static_cast<std::size_t>(ids[i]) * d, d,
                out.ptr() + static_cast<std::size_t>(i) * d);
  }
  return make_result<T>("embedding", std::move(out), {table}, [ids, d](Node<T>& self) {
    Tensor<T>& gt = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.ptr() + static_cast<std::size_t>(ids[i]) * d;
      const T* src = self.grad.ptr() + i * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  require(w.dim(0) == in, "linear: weight " + shape_str(w.shape()) + " incompatible with input " +
                              shape_str(x.shape()));
  require(b.size() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
  Tensor<T> out({n, out_dim});
  Map<T> o(out.ptr(), n, out_dim);
  o.noalias() = MapC<T>(x.value().ptr(), n, in) * MapC<T>(w.value().ptr(), in, out_dim);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr(), out_dim);
  return make_result<T>("linear", std::move(out), {x, w, b}, [n, in, out_dim](Node<T>& self) {
    Node<T>& px = self.parent(0);
    Node<T>& pw = self.parent(1);
    Node<T>& pb = self.parent(2);
    MapC<T> g(self.grad.ptr(), n, out_dim);
    if (px.requires_grad) {
      Map<T>(px.grad_buffer().ptr(), n, in).noalias() += g * MapC<T>(pw.value.ptr(), in, out_dim).transpose();
    }
    if (pw.requires_grad) {
      Map<T>(pw.grad_buffer().ptr(), in, out_dim).noalias() += MapC<T>(px.value.ptr(), n, in).transpose() * g;
    }
    if (pb.requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb.grad_buffer().ptr(), out_dim) += g.colwise().sum();
    }
  });
}

template <typename T>
Var<T> pick(const Var<T>& x, const std::vector<int>& ids) {
  require_rank2(x, "pick");
  const int n = x.dim(0), c = x.dim(1);
  require(static_cast<int>(ids.size()) == n, "pick: one id per row required");
  Tensor<T> out({n});
  for (int i = 0; i < n; ++i) {
    require(ids[i] >= 0 && ids[i] < c, "pick: id out of range");
    out[i] = x.value().at(i, ids[i]);
  }
  return make_result<T>("pick", std::move(out), {x}, [ids, c](Node<T>& self) {
    Tensor<T>& gx = self.parent(0).grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i) gx[i * c + ids[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return make_result<T>("sum", Tensor<T>::scalar(s), {a}, [](Node<T>& self) {
    Tensor<T>& g = self.parent(0).grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

template <typename T>
Var<T> sum_last(const Var<T>& a) {
  const auto& av = a.value();
  const int c = av.shape().back();
  const int r = rows_of(av);
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (int i = 0; i < r; ++i) {
    T s = 0;
    for (int j = 0; j < c; ++j) s += av[static_cast<std::size_t>(i) * c + j];
    out[i] = s;
  }
  return make_result<T>("sum_last", std::move(out), {a}, [r, c](Node<T>& self) {
    Tensor<T>& g = self.parent(0).grad_buffer();
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(i) * c + j] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  require(pred.shape() == target.shape(), "mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                              shape_str(target.shape()));
  const Var<T> d = sub(pred, target);
  return mean(mul(d, d));
}

template <typename T>
Var<T> cross_entropy(const Var<T>& probs, const Tensor<T>& target) {
  require(probs.shape() == target.shape(), "cross_entropy: shape mismatch");
  const int r = rows_of(probs.value());
  const Var<T> terms = mul(log(probs), constant(target));
  return scale(sum(terms), T(-1) / T(r));
}

template <typename T>
Var<T> kl_rows(const Var<T>& p_logits, const Var<T>& q_logits) {
  require(p_logits.shape() == q_logits.shape(), "kl_rows: shape mismatch " + shape_str(p_logits.shape()) +
                                                    " vs " + shape_str(q_logits.shape()));
  const int cols = p_logits.shape().back();
  const std::size_t rows = p_logits.size() / static_cast<std::size_t>(cols);
  // Row-wise log-softmax of both operands.
  auto log_softmax_rows = [&](const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = x.ptr() + r * cols;
      T* o = out.ptr() + r * cols;
      const T mx = *std::max_element(in, in + cols);
      T z = 0;
      for (int c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
      const T lz = mx + std::log(z);
      for (int c = 0; c < cols; ++c) o[c] = in[c] - lz;
    }
    return out;
  };
  Tensor<T> lp = log_softmax_rows(p_logits.value());
  Tensor<T> lq = log_softmax_rows(q_logits.value());
  std::vector<T> row_kl(rows, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T k = 0;
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      k += std::exp(lp[i]) * (lp[i] - lq[i]);
    }
    row_kl[r] = k;
    total += k;
  }
  const T inv_rows = T(1) / static_cast<T>(rows);
  // Exact gradients: d/dp = p (lp - lq - KL_row), d/dq = q - p. Both vanish
  // exactly when the two rows coincide.
  return make_result<T>("kl_rows", Tensor<T>::scalar(total * inv_rows), {p_logits, q_logits},
                        [lp = std::move(lp), lq = std::move(lq), row_kl = std::move(row_kl), rows, cols,
                         inv_rows](Node<T>& self) {
                          const T up = self.grad[0] * inv_rows;
                          Node<T>& pp = self.parent(0);
                          Node<T>& pq = self.parent(1);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (int c = 0; c < cols; ++c) {
                              const std::size_t i = r * cols + c;
                              const T p = std::exp(lp[i]);
                              if (pp.requires_grad) pp.grad_buffer()[i] += up * p * (lp[i] - lq[i] - row_kl[r]);
                              if (pq.requires_grad) pq.grad_buffer()[i] += up * (std::exp(lq[i]) - p);
                            }
                          }
                        });
}

template <typename T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  require(a.size() == b.size(), "cosine_similarity: size mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  T ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ab += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  if (aa == T(0) || bb == T(0)) throw NonFiniteError("cosine_similarity: zero-length vector");
  const T na = std::sqrt(aa), nb = std::sqrt(bb);
  const T cs = ab / (na * nb);
  return make_result<T>("cosine_similarity", Tensor<T>::scalar(cs), {a, b}, [na, nb, cs](Node<T>& self) {
    Node<T>& pa = self.parent(0);
    Node<T>& pb = self.parent(1);
    const T up = self.grad[0];
    if (pa.requires_grad) {
      Tensor<T>& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += up * (pb.value[i] / (na * nb) - cs * pa.value[i] / (na * na));
      }
    }
    if (pb.requires_grad) {
      Tensor<T>& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += up * (pa.value[i] / (na * nb) - cs * pb.value[i] / (nb * nb));
      }
    }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, bool causal) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const int tq = q.dim(0), d = q.dim(1), tk = k.dim(0);
  require(k.dim(1) == d && v.dim(1) == d && v.dim(0) == tk, "attention: q/k/v shapes disagree");
  require(heads > 0 && d % heads == 0, "attention: width not divisible by head count");
  require(!causal || tk >= tq, "attention: causal block longer than key sequence");
  const int dh = d / heads;
  const int offset = tk - tq;
  const T inv = T(1) / std::sqrt(T(dh));
  using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

  // probs[h] is [tq, tk], masked entries exactly zero.
  std::vector<RowMat<T>> probs(static_cast<std::size_t>(heads));
  Tensor<T> out({tq, d});
  for (int h = 0; h < heads; ++h) {
    Strided qh(q.value().ptr() + h * dh, tq, dh, Eigen::OuterStride<>(d));
    Strided kh(k.value().ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d));
    Strided vh(v.value().ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d));
    RowMat<T> s = (qh * kh.transpose()) * inv;
    for (int i = 0; i < tq; ++i) {
      const int limit = causal ? std::min(tk, i + offset + 1) : tk;
      auto row = s.row(i).head(limit).array();
      const T mx = row.maxCoeff();
      row = (row - mx).exp();
      row /= row.sum();
      s.row(i).tail(tk - limit).setZero();
    }
    StridedMut(out.ptr() + h * dh, tq, dh, Eigen::OuterStride<>(d)).noalias() = s * vh;
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return make_result<T>(
      "attention", std::move(out), {q, k, v},
      [tq, tk, d, dh, heads, inv, probs = std::move(probs)](Node<T>& self) {
        Node<T>& pq = self.parent(0);
        Node<T>& pk = self.parent(1);
        Node<T>& pv = self.parent(2);
        for (int h = 0; h < heads; ++h) {
          const RowMat<T>& p = probs[static_cast<std::size_t>(h)];
          Strided go(self.grad.ptr() + h * dh, tq, dh, Eigen::OuterStride<>(d));
          Strided qh(pq.value.ptr() + h * dh, tq, dh, Eigen::OuterStride<>(d));
          Strided kh(pk.value.ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d));
          Strided vh(pv.value.ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d));
          if (pv.requires_grad) {
            StridedMut(pv.grad_buffer().ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d)).noalias() +=
                p.transpose() * go;
          }
          if (!pq.requires_grad && !pk.requires_grad) continue;
          RowMat<T> dp = go * vh.transpose();
          // dS = P * (dP - rowsum(dP * P)); masked entries have P = 0.
          for (int i = 0; i < tq; ++i) {
            const T dot = (dp.row(i).array() * p.row(i).array()).sum();
            dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
          }
          dp *= inv;
          if (pq.requires_grad) {
            StridedMut(pq.grad_buffer().ptr() + h * dh, tq, dh, Eigen::OuterStride<>(d)).noalias() +=
                dp * kh;
          }
          if (pk.requires_grad) {
            StridedMut(pk.grad_buffer().ptr() + h * dh, tk, dh, Eigen::OuterStride<>(d)).noalias() +=
                dp.transpose() * qh;
          }
        }
      });
}

#define THINKDRAW_INSTANTIATE(T)                                                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> add_scalar(const Var<T>&, T);                                             \
  template Var<T> minimum(const Var<T>&, const Var<T>&);                                    \
  template Var<T> clip(const Var<T>&, T, T);                                                \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> transpose(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                            \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                  \
  template Var<T> slice(const Var<T>&, int, int, int);                                      \
  template Var<T> detach(const Var<T>&);                                                    \
  template Var<T> exp(const Var<T>&);                                                       \
  template Var<T> log(const Var<T>&);                                                       \
  template Var<T> tanh(const Var<T>&);                                                      \
  template Var<T> gelu(const Var<T>&);                                                      \
  template Var<T> softmax(const Var<T>&);                                                   \
  template Var<T> log_softmax(const Var<T>&);                                               \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> embedding(const Var<T>&, const std::vector<int>&);                        \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> pick(const Var<T>&, const std::vector<int>&);                             \
  template Var<T> sum(const Var<T>&);                                                       \
  template Var<T> mean(const Var<T>&);                                                      \
  template Var<T> sum_last(const Var<T>&);                                                  \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                        \
  template Var<T> cross_entropy(const Var<T>&, const Tensor<T>&);                           \
  template Var<T> kl_rows(const Var<T>&, const Var<T>&);                                    \
  template Var<T> cosine_similarity(const Var<T>&, const Var<T>&);                          \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int, bool);

THINKDRAW_INSTANTIATE(float)
THINKDRAW_INSTANTIATE(double)

#undef THINKDRAW_INSTANTIATE

}  // namespace thinkdraw::ops
