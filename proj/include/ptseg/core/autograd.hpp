#pragma once

#include "ptseg/core/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ptseg {

/// Reverse-mode tape node. A node owns its value, its gradient buffer and the
/// closure that pushes its gradient into its parents.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  /// Gradient buffer of parent i, or nullptr when that parent is constant.
  typename Tensor<Scalar>::Array* parent_grad(std::size_t i) {
    Node& p = *parents[i];
    if (!p.requires_grad) return nullptr;
    if (p.grad.size() != p.value.size()) p.grad = Tensor<Scalar>::zeros_like(p.value);
    return &p.grad.array();
  }
  const Tensor<Scalar>& parent_value(std::size_t i) const { return parents[i]->value; }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  /// Result of an op. Parents and the closure are kept only when some parent
  /// needs a gradient and recording is enabled.
  static Var make(Tensor<Scalar> value, std::vector<Var> parents, std::function<void(Node<Scalar>&)> fn) {
    Var out(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(fn);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient buffer; zero-filled if backward has not reached this node.
  const Tensor<Scalar>& grad() const {
    if (node_->grad.size() != node_->value.size()) node_->grad = Tensor<Scalar>::zeros_like(node_->value);
    return node_->grad;
  }
  Tensor<Scalar>& mutable_grad() {
    if (node_->grad.size() != node_->value.size()) node_->grad = Tensor<Scalar>::zeros_like(node_->value);
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.array().setZero();
  }

  Scalar item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on a non-scalar " + to_string(shape()));
    return node_->value[0];
  }

  /// Backpropagates from this scalar node.
  void backward() const {
    if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar root");
    if (!node_->requires_grad) return;

    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> seen;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<Scalar>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (Node<Scalar>* n : order) {
      if (n->backward_fn) n->grad = Tensor<Scalar>::zeros_like(n->value);
    }
    node_->grad.array().setOnes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
    // Interior buffers are not needed after the sweep.
    for (Node<Scalar>* n : order) {
      if (n->backward_fn && n != node_.get()) n->grad = Tensor<Scalar>();
    }
  }

 private:
  NodePtr node_;
};

}  // namespace ptseg
