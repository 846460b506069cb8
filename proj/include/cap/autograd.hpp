#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cap/tensor.hpp"

namespace cap {

// Reverse-mode differentiation over Tensor-valued nodes.
//
// A Var is a cheap handle to a graph node. Leaves are created explicitly;
// every op in ops.hpp returns a new node that remembers its parents and a
// backward closure. Gradients are accumulated into a map owned by the call
// to gradients(), never into the nodes, so a graph (and the parameter leaves
// it references) can be differentiated from several threads at once.

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Receives dRoot/dSelf and adds the contribution of each parent into the
/// matching slot. A null slot means that parent's gradient is not wanted.
using BackwardFn = std::function<void(const Tensor& grad, std::span<Tensor* const> parent_grads)>;

struct Node {
  Tensor value;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var constant(Tensor value) { return Var(std::move(value), false); }

  /// Records a result node. When grad mode is off or no parent requires a
  /// gradient the closure is dropped and the result is a constant.
  static Var from_op(Tensor value, std::vector<Var> parents, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Only valid on leaves; used by optimizers to update parameters in place.
  Tensor& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr& node() const { return node_; }

  /// A fresh leaf holding a copy of this value.
  Var detached(bool requires_grad = false) const { return Var(value(), requires_grad); }

 private:
  NodePtr node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// d(root)/d(w) for every w in `wrt`. `root` must hold a single element.
/// Leaves that do not influence the root get a zero gradient.
std::vector<Tensor> gradients(const Var& root, std::span<const Var> wrt);

inline Tensor gradient(const Var& root, const Var& wrt) {
  return std::move(gradients(root, std::span<const Var>(&wrt, 1)).front());
}

}  // namespace cap
