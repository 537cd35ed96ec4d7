#include "saliprune/autograd.hpp"

#include <unordered_set>

#include "saliprune/error.hpp"

namespace saliprune {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Tensor::zeros_like(node_->value);
}

void Var::zero_grad() {
  if (node_->has_grad()) node_->grad.fill(Real(0));
}

Var make_var(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Var& p : parents) {
      if (p.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (Var& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined()) throw InvalidParameter("backward on an undefined variable");
  if (root.value().numel() != 1) {
    throw ShapeMismatch("backward root must be a scalar, got " + root.value().shape_string());
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS yields a topological order.
  // Owning pointers: releasing a node's parent list must not free nodes
  // still waiting in the sweep.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(Real(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (!node->backward) continue;
    if (node->has_grad()) {
      for (auto& parent : node->parents) {
        if (parent->requires_grad) parent->ensure_grad();
      }
      node->backward(*node);
    }
    node->backward = nullptr;
    node->parents.clear();
    node->grad = Tensor();
  }
}

}  // namespace saliprune
