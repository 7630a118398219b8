#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "gaitq/quant.hpp"
#include "gaitq/tensor.hpp"

namespace gaitq::ad {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

class Tape;
using BackwardFn = std::function<void(Tape&, std::size_t self)>;

/// Define-by-run record of primitive ops. Values are appended in execution
/// order; backward walks them in exact reverse.
class Tape {
 public:
  /// When false, no backward closures are kept (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward pass; zeros if the value was not reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  void backward(Var loss);
  /// Node ids whose backward closure ran, in visit order.
  const std::vector<std::size_t>& backward_order() const noexcept { return order_; }

  // Used by op implementations.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);
  Tensor& grad_ref(std::size_t id);
  Tensor& grad_ref(Var v) { return grad_ref(v.id); }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> order_;
};

// Batched ops. Convolutional tensors are [B x C x L]; vectors are [B x N].

Var conv1d(Tape& t, Var x, Var w, Var b);
Var depthwise_conv1d(Tape& t, Var x, Var w, Var b);
Var maxpool1d(Tape& t, Var x);
/// Mean over the last axis: [B x C x L] -> [B x C].
Var mean_last(Tape& t, Var x);
/// y = x W^T + b over the last axis of a rank-2 or rank-3 input.
Var linear(Tape& t, Var x, Var w, Var b);
Var linear_nobias(Tape& t, Var x, Var w);

Var batchnorm_train(Tape& t, Var x, Var gamma, Var beta, ops::BatchNormState& state);
/// y[b,c,...] = x[b,c,...] * a[c] + c0[c].
Var channel_affine(Tape& t, Var x, Var a, Var c0);
/// w'[o,...] = w[o,...] * gamma[o] / sqrt(var[o] + eps) with frozen statistics.
Var bn_fold_weight(Tape& t, Var w, Var gamma, const Tensor& var, double eps);
/// b' = (b - mean) * gamma / sqrt(var + eps) + beta.
Var bn_fold_bias(Tape& t, Var b, Var gamma, Var beta, const Tensor& mean, const Tensor& var,
                 double eps);

Var relu(Tape& t, Var x);
Var hardsigmoid(Tape& t, Var x);
Var hardtanh(Tape& t, Var x);

Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double k);

/// Column t of [B x C x L] -> [B x C].
Var time_step(Tape& t, Var x, std::size_t step);
/// Columns [start, start+len) of [B x N].
Var slice_cols(Tape& t, Var x, std::size_t start, std::size_t len);
/// Batched matrix product [B x n x k] . [B x k x m].
Var bmm(Tape& t, Var a, Var b);
/// Swap the last two axes of a rank-3 tensor.
Var transpose12(Tape& t, Var x);
Var softmax_last(Tape& t, Var x);

/// Quantize-dequantize with a straight-through gradient.
Var fake_quant(Tape& t, Var x, const QuantParams& qp);
/// Same, for wide integer grids such as 32-bit biases.
Var fake_quant(Tape& t, Var x, double scale, std::int64_t qmin, std::int64_t qmax);

/// Mean two-sided softmax cross-entropy of logits [B x K].
Var cross_entropy(Tape& t, Var logits, std::span<const int> labels);
Var sum(Tape& t, Var x);

}  // namespace gaitq::ad
