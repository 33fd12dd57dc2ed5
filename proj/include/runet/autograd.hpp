#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "runet/tensor.hpp"

namespace runet {

// Reverse-mode tape. Each forward op returns a node holding its value; nodes
// that participate in differentiation keep their parents alive and a closure
// that routes the incoming gradient to them. The graph is confined to one
// training thread (grad mode is thread-local).

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode() { return detail::grad_enabled; }

/// RAII guard: disables graph recording (inference / finite differences).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct NodeT {
  TensorT<T> value;
  TensorT<T> grad;  // allocated lazily; always matches value's shape
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;

  void ensure_grad() {
    if (!has_grad) {
      grad = TensorT<T>(value.shape());
      has_grad = true;
    }
  }

  void accumulate(const TensorT<T>& g) {
    expect_same_shape("grad accumulate", value.shape(), g.shape());
    ensure_grad();
    T* dst = grad.data();
    const T* src = g.data();
    const std::size_t n = grad.numel();
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  void zero_grad() {
    if (has_grad) grad.fill(T(0));
  }
};

template <class T>
using VarT = std::shared_ptr<NodeT<T>>;

using Var = VarT<float>;

template <class T>
VarT<T> make_leaf(TensorT<T> value, bool requires_grad = false) {
  auto n = std::make_shared<NodeT<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

/// New leaf sharing the value; gradient flow stops here. This is the
/// truncation boundary used when cell state crosses slice batches.
template <class T>
VarT<T> detach(const VarT<T>& v) {
  return make_leaf<T>(v->value, false);
}

namespace detail {

// Emits nodes in topological order (parents before children).
template <class T>
void topo_sort(const VarT<T>& root, std::vector<NodeT<T>*>& order) {
  std::unordered_set<NodeT<T>*> seen;
  std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

/// Reverse pass from a scalar root; accumulates into every reachable
/// requires_grad node (leaves keep their gradient until zeroed).
template <class T>
void backward(const VarT<T>& root) {
  if (root->value.numel() != 1)
    throw ShapeError("backward requires a scalar root");
  if (!root->requires_grad) return;
  std::vector<NodeT<T>*> order;
  detail::topo_sort(root, order);
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<T>* node = *it;
    if (node->backward_fn && node->has_grad) node->backward_fn(*node);
  }
}

template <class T>
void zero_grads(const std::vector<VarT<T>>& params) {
  for (const auto& p : params) p->zero_grad();
}

/// True when this op application should record the backward closure.
template <class T>
bool recording(std::initializer_list<const VarT<T>*> inputs) {
  if (!grad_mode()) return false;
  for (const auto* v : inputs)
    if ((*v)->requires_grad) return true;
  return false;
}

}  // namespace runet
