#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "segkey/tensor.hpp"

namespace segkey {

// Handle to a value recorded on a GradTape.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
  bool valid() const { return id != kInvalid; }
};

// Linear record of executed ops. backward() replays the recorded closures in
// exact reverse execution order. One tape per thread.
class GradTape {
 public:
  using Backward = std::function<void(GradTape&, const Tensor& out_grad)>;

  // A disabled tape records values only; use it for inference.
  explicit GradTape(bool enabled = true) : enabled_(enabled) {}

  Var leaf(Tensor value, bool requires_grad = true);

  // Records an op output. `inputs` decide whether the output needs a gradient;
  // `backward` receives the gradient of the output and must push gradients to
  // the inputs through accumulate()/grad_buffer().
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient accumulated so far; an all-zero tensor of the value's shape if
  // nothing reached this node.
  Tensor grad(Var v) const;

  // Zero-initialised gradient storage of `v`, allocated on first use.
  Tensor& grad_buffer(Var v);
  void accumulate(Var v, const Tensor& g);

  // Seeds d(loss)/d(loss) = 1 for a single-element `loss` and runs all
  // recorded closures from `loss` back to the first op.
  void backward(Var loss);

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Node ids visited by the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_order() const {
    return backward_order_;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool enabled_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> backward_order_;
};

}  // namespace segkey
