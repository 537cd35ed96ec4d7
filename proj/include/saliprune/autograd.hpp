#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "saliprune/tensor.hpp"

namespace saliprune {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

/// One vertex of the dynamic computation graph. `backward` reads
/// `self.grad` and accumulates into the parents' gradients.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  Tensor& ensure_grad();
  bool has_grad() const { return !grad.empty(); }
};

/// Handle onto a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  /// Gradient accumulated by backward(); zeros when none has arrived.
  Tensor grad() const;
  Tensor& grad_storage() { return node_->ensure_grad(); }
  void zero_grad();

  const NodePtr& node() const { return node_; }

  /// Value-only copy with no graph history.
  Var detach() const { return Var(node_->value, false); }

 private:
  explicit Var(NodePtr node) : node_(std::move(node)) {}
  friend Var make_var(Tensor value, std::vector<Var> parents, BackwardFn fn);

  NodePtr node_;
};

/// Builds an op result. When no parent requires a gradient the result is a
/// plain constant and `fn` is dropped.
Var make_var(Tensor value, std::vector<Var> parents, BackwardFn fn);

/// Reverse sweep from a scalar root; seeds d(root)/d(root) = 1. Interior
/// graph structure is released afterwards; leaf gradients accumulate.
void backward(const Var& root);

/// Disables graph construction in its scope.
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

}  // namespace saliprune
