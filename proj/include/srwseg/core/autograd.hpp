#pragma once

// Minimal reverse-mode tape. Each operation produces a Var whose node remembers its
// parents and a closure that pushes the output gradient into them.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "srwseg/core/tensor.hpp"

namespace srwseg {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int rank() const { return node_->value.rank(); }
  int dim(int i) const { return node_->value.dim(i); }

  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T{});
  }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  T item() const { return node_->value[0]; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an operation result. The closure receives the output node; its gradient is
/// `self.grad` and its parents are `self.parents` in the order given here.
template <class T, class Backward>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, Backward&& backward) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::forward<Backward>(backward);
  return out;
}

/// Runs reverse accumulation from a scalar root (seeded with d(root)/d(root) = 1).
template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ValidationError("backward() requires a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor<T> seed(root.value().shape(), T{1});
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    // interior gradients are no longer needed once propagated
    node->grad = Tensor<T>();
  }
}

}  // namespace srwseg
