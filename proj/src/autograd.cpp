#include "cap/autograd.hpp"

#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace cap {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_op(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward = std::move(backward);
  out.node_->parents.reserve(parents.size());
  for (Var& p : parents) out.node_->parents.push_back(p.node_);
  return out;
}

Tensor& Var::mutable_value() {
  if (!node_->parents.empty()) throw std::logic_error("mutable_value() on a non-leaf Var");
  return node_->value;
}

std::vector<Tensor> gradients(const Var& root, std::span<const Var> wrt) {
  if (!root.defined()) throw std::invalid_argument("gradients(): undefined root");
  if (root.value().size() != 1) {
    throw std::invalid_argument("gradients(): root must be a scalar, got " + shape_str(root.shape()));
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  if (!root.requires_grad()) {
    for (const Var& w : wrt) out.push_back(Tensor::zeros_like(w.value()));
    return out;
  }

  std::unordered_set<const Node*> targets;
  for (const Var& w : wrt) targets.insert(w.node().get());

  // Iterative post-order DFS: parents appear before children in `order`.
  std::vector<Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // A node is needed when some target is reachable through its parents.
  std::unordered_set<const Node*> needed;
  for (Node* n : order) {
    bool need = targets.count(n) > 0;
    for (const NodePtr& p : n->parents) need = need || needed.count(p.get()) > 0;
    if (need) needed.insert(n);
  }

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(root.node().get(), Tensor(root.shape(), 1.0));

  std::vector<Tensor*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || !needed.count(n)) continue;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    const Tensor& upstream = found->second;
    slots.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].get();
      if (!p->requires_grad || !needed.count(p)) continue;
      auto [slot, inserted] = grads.try_emplace(p);
      if (inserted) slot->second = Tensor::zeros_like(p->value);
      slots[i] = &slot->second;
    }
    n->backward(upstream, slots);
    if (!targets.count(n)) grads.erase(n);
  }

  for (const Var& w : wrt) {
    auto g = grads.find(w.node().get());
    out.push_back(g == grads.end() ? Tensor::zeros_like(w.value()) : g->second);
  }
  return out;
}

}  // namespace cap
