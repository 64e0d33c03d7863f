#include "segkey/autograd.hpp"

#include "segkey/error.hpp"

namespace segkey {

Var GradTape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad && enabled_, {}});
  return Var{nodes_.size() - 1};
}

Var GradTape::record(Tensor value, std::initializer_list<Var> inputs,
                     Backward backward) {
  bool needs = false;
  if (enabled_) {
    for (Var in : inputs) {
      if (in.valid() && nodes_.at(in.id).requires_grad) needs = true;
    }
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs,
                        needs ? std::move(backward) : Backward{}});
  return Var{nodes_.size() - 1};
}

Tensor GradTape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty() && !node.value.empty()) {
    return Tensor(node.value.shape());
  }
  return node.grad;
}

Tensor& GradTape::grad_buffer(Var v) {
  Node& node = nodes_.at(v.id);
  if (node.grad.shape() != node.value.shape()) {
    node.grad = Tensor(node.value.shape());
  }
  return node.grad;
}

void GradTape::accumulate(Var v, const Tensor& g) {
  if (!nodes_.at(v.id).requires_grad) return;
  Tensor& buf = grad_buffer(v);
  if (g.size() != buf.size()) {
    throw ShapeError("gradient shape " + shape_string(g.shape()) +
                     " does not match value shape " + shape_string(buf.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void GradTape::backward(Var loss) {
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must have exactly one element, got " +
                     shape_string(root.value.shape()));
  }
  backward_order_.clear();
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    backward_order_.push_back(i);
    // Closures only write to inputs, which precede this node; nodes_ is not
    // resized during backward, so the reference stays valid.
    node.backward(*this, node.grad);
  }
}

}  // namespace segkey
