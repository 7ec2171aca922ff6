#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "thinkdraw/numerics/autograd.hpp"

namespace thinkdraw {

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

// Named parameter tensors of one sub-model. Iteration order is the key
// order, which fixes every reduction and serialization order.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (!params_.emplace(name, std::move(value)).second) {
      throw ConfigError("duplicate parameter name '" + name + "'");
    }
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const TensorMap<T>& all() const { return params_; }
  TensorMap<T>& all() { return params_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, t] : params_) out.add(k, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  TensorMap<T> params_;
};

// Graph-local leaf variables over a ParamStore. Every graph gets its own
// binding, so concurrent graphs never share gradient buffers.
template <typename T>
class Binding {
 public:
  Binding() = default;
  Binding(const ParamStore<T>& store, bool requires_grad) {
    for (const auto& [k, t] : store.all()) vars_.emplace(k, leaf(t, requires_grad && grad_enabled()));
  }
  explicit Binding(std::map<std::string, Var<T>> vars) : vars_(std::move(vars)) {}
  const Var<T>& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("unbound parameter '" + name + "'");
    return it->second;
  }
  // Gradients of every bound parameter (zeros where no path reached it).
  TensorMap<T> grads() const {
    TensorMap<T> out;
    for (const auto& [k, v] : vars_) out.emplace(k, v.grad());
    return out;
  }

 private:
  std::map<std::string, Var<T>> vars_;
};

template <typename T>
void accumulate_into(TensorMap<T>& acc, const TensorMap<T>& g, T weight = T(1)) {
  for (const auto& [k, t] : g) {
    auto it = acc.find(k);
    if (it == acc.end()) {
      Tensor<T> w = t;
      if (weight != T(1)) {
        for (auto& x : w.data()) x *= weight;
      }
      acc.emplace(k, std::move(w));
    } else {
      auto dst = it->second.data();
      auto src = t.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weight * src[i];
    }
  }
}

template <typename T>
double l2_distance(const ParamStore<T>& a, const ParamStore<T>& b) {
  double s = 0;
  for (const auto& [k, t] : a.all()) {
    const auto& u = b.at(k);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = static_cast<double>(t[i]) - static_cast<double>(u[i]);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

// Adaptive moment estimation with bias correction.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm clip; <= 0 disables
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Applies one update to the parameters named in `grads`; returns the
  // pre-clip global gradient norm.
  double step(ParamStore<T>& params, const TensorMap<T>& grads, double lr) {
    double norm2 = 0;
    for (const auto& [k, g] : grads) {
      for (T x : g.data()) norm2 += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm in optimizer step");
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [k, g] : grads) {
      Tensor<T>& p = params.at(k);
      auto [mit, mnew] = m_.try_emplace(k, Tensor<T>::zeros(p.shape()));
      auto [vit, vnew] = v_.try_emplace(k, Tensor<T>::zeros(p.shape()));
      auto m = mit->second.data();
      auto v = vit->second.data();
      auto pd = p.data();
      auto gd = g.data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double gi = static_cast<double>(gd[i]) * clip;
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi);
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        pd[i] = static_cast<T>(pd[i] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return norm;
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  TensorMap<T>& first_moments() { return m_; }
  TensorMap<T>& second_moments() { return v_; }
  const TensorMap<T>& first_moments() const { return m_; }
  const TensorMap<T>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  TensorMap<T> m_;
  TensorMap<T> v_;
};

}  // namespace thinkdraw
