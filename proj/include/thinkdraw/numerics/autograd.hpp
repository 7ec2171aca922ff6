#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "thinkdraw/numerics/tensor.hpp"

namespace thinkdraw {

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `grad` of this node and accumulates into the parents.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    Tensor<T>& buf = grad_buffer();
    if (g.size() != buf.size()) {
      throw ShapeError(std::string("gradient shape mismatch at ") + op);
    }
    T* dst = buf.ptr();
    const T* src = g.ptr();
    for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += src[i];
  }

  Node& parent(std::size_t i) { return *parents[i]; }
};

// Handle to a node of a single-use differentiation graph.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  // Gradient after backward; zeros if no path reached this variable.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<T>();
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  return Var<T>(std::move(value), requires_grad);
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// Wraps a kernel output. When gradients are disabled or no input requires
// them, the result is a plain constant and the closure is dropped.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("kernel '") + op + "' produced a non-finite value");
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

// Reverse-mode pass from a scalar root. Consumes the graph: interior nodes
// drop their closures and parent links afterwards; leaves keep their grads.
template <typename T>
void backward(const Var<T>& root) {
  Node<T>* r = root.node();
  if (r == nullptr) throw GraphError("backward on empty variable");
  if (!r->value.is_scalar()) {
    throw GraphError("backward requires a scalar root, got shape " + shape_str(r->value.shape()));
  }
  if (r->consumed) throw GraphError("graph already consumed by a previous backward pass");
  if (!r->requires_grad) throw GraphError("root does not depend on any variable requiring grad");

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  std::vector<Node<T>*> visited;
  auto mark = [](Node<T>* n) { n->consumed = true; };
  stack.emplace_back(r, 0);
  mark(r);
  visited.push_back(r);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !p->consumed) {
        mark(p);
        visited.push_back(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Leaves are reusable across graphs; only interior nodes stay consumed.
  for (Node<T>* n : visited) {
    if (!n->backward_fn) n->consumed = false;
  }

  r->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) {
      if (!n->grad.all_finite()) {
        throw NonFiniteError(std::string("non-finite gradient at kernel '") + n->op + "'");
      }
      n->backward_fn(*n);
    }
  }
  // Post-order visits inputs before their consumers, so releasing links in
  // this order never frees a node that is still to be visited.
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
    }
  }
}

}  // namespace thinkdraw
