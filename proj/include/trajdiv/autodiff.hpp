#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every op executed on a Var that requires gradients appends a node to a
// dynamic record. Nodes are stamped with a global sequence number; backward()
// walks the nodes reachable from the loss in reverse execution order.
// Independent records can be built concurrently on different threads as long
// as they share no mutable Vars.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "trajdiv/tensor.hpp"

namespace trajdiv::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::uint64_t seq = 0;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false, std::string name = {});

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; only valid on leaves.
  Tensor& mutable_value();
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  const std::string& name() const { return node_->name; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Var make_op(Tensor value, const std::vector<Var>& inputs, const char* op_name,
                     std::function<void(Node&)> backward);
};

/// Creates the result of a custom op. `backward` receives the output node with
/// its gradient populated and must push gradients into the inputs with
/// accumulate_grad(). It is not recorded when no input requires gradients.
/// Throws NumericalError if `value` is not finite.
Var make_op(Tensor value, const std::vector<Var>& inputs, const char* op_name,
            std::function<void(Node&)> backward);

/// Adds `g` into the gradient slot of `v` (no-op if v does not require grad).
void accumulate_grad(const Var& v, const Tensor& g);
void accumulate_grad(const Var& v, Tensor&& g);

struct BackwardOptions {
  double upstream = 1.0;
  bool retain_graph = false;
};

/// Back-propagates from a scalar loss. Gradients accumulate into every
/// reachable leaf requiring grad. Unless retain_graph is set, the record is
/// released and a second backward() on the same loss throws.
void backward(const Var& loss, BackwardOptions options = {});

Var constant(Tensor value);
Var parameter(Tensor value, std::string name = {});

// Elementwise arithmetic. Besides identical shapes, `b` may be a single value
// (scalar broadcast) or, for a 2-D `a` of shape RxC, a row vector of shape C
// or 1xC. add() and mul() also accept a scalar on the left.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);

Var sum(const Var& a);
Var mean(const Var& a);
/// Reduces one axis away.
Var sum_axis(const Var& a, std::size_t axis);
Var mean_axis(const Var& a, std::size_t axis);

Var exp(const Var& a);
/// Throws NumericalError on non-positive input.
Var log(const Var& a);
Var square(const Var& a);
/// Throws NumericalError on negative input.
Var sqrt(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var leaky_relu(const Var& a, double negative_slope = 0.01);
Var softplus(const Var& a);
/// Gradient is zero where the input lies outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);

struct InverseOptions {
  double max_condition = 1e12;
};

/// Inverse of a square matrix via LU; the backward pass uses the analytic
/// adjoint dA = -A^{-T} G A^{-T}. Throws NumericalError when the condition
/// number exceeds the bound.
Var inverse(const Var& a, InverseOptions options = {});
Var trace(const Var& a);

/// 2-D convolution, NCHW input, OIKK weight, O bias.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding);
/// Mean over the spatial axes of an NCHW tensor, giving NxC.
Var spatial_mean(const Var& x);

/// Running statistics for batch normalization. Updated in training mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over axis 0 of a BxF tensor or over (B,H,W) of a
/// BxCxHxW tensor. In eval mode this is a fixed affine map.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training);

}  // namespace trajdiv::ad
