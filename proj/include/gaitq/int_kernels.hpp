#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "gaitq/quant.hpp"
#include "gaitq/tensor.hpp"

namespace gaitq {

/// Integer tensor with its per-tensor quantization parameters.
struct QTensor {
  Shape shape;
  std::vector<std::int32_t> q;
  QuantParams qp;

  QTensor() = default;
  QTensor(Shape s, const QuantParams& p);

  std::size_t size() const { return q.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  std::int32_t& at(std::size_t i, std::size_t j) { return q[i * shape[1] + j]; }
  std::int32_t at(std::size_t i, std::size_t j) const { return q[i * shape[1] + j]; }
  std::int32_t at(std::size_t i, std::size_t j, std::size_t k) const {
    return q[(i * shape[1] + j) * shape[2] + k];
  }

  static QTensor quantize(const Tensor& x, const QuantParams& qp);
  Tensor dequantize() const;

  friend bool operator==(const QTensor&, const QTensor&) = default;
};

/// Bias stored on the accumulator grid (scale = weight scale x input scale).
struct QBias {
  std::vector<std::int32_t> q;
  double scale = 1.0;

  static QBias quantize(const Tensor& b, double scale);
  friend bool operator==(const QBias&, const QBias&) = default;
};

/// Counts executed multiply-accumulates, including zero-padded taps.
struct MacCounter {
  std::uint64_t macs = 0;
};

namespace iops {

QTensor conv1d(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
               MacCounter* mc = nullptr);
QTensor depthwise_conv1d(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
                         MacCounter* mc = nullptr);
QTensor dense(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
              MacCounter* mc = nullptr);
/// Dense map applied to every row of [rows x N].
QTensor dense_rows(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
                   MacCounter* mc = nullptr);

QTensor maxpool1d(const QTensor& x);
QTensor relu(const QTensor& x);
/// Mean over the last axis of [C x L] -> [C], requantized to `out`.
QTensor global_avg_pool(const QTensor& x, const QuantParams& out);
QTensor transpose(const QTensor& x);

// Elementwise kernels below need power-of-two scales so that every
// intermediate is an exact fixed-point value.
QTensor add(const QTensor& a, const QTensor& b, const QuantParams& out);
QTensor mul(const QTensor& a, const QTensor& b, const QuantParams& out, MacCounter* mc = nullptr);
QTensor hardsigmoid(const QTensor& x, const QuantParams& out);
QTensor hardtanh(const QTensor& x, const QuantParams& out);
/// y[c, t] = x[c, t] * a[c] + c0[c] on a [C x L] tensor.
QTensor channel_affine(const QTensor& x, const QTensor& a, const QBias& c0, const QuantParams& out,
                       MacCounter* mc = nullptr);

struct LstmQuant {
  QTensor w_ih, w_hh;
  QBias bias;  // on the w_ih x input grid
  QuantParams gates, sigmoid, tanh, cell, cell_tanh, hidden;
};

/// One integer LSTM step; gate order (input, forget, cell, output).
std::pair<QTensor, QTensor> lstm_cell(const QTensor& x_t, const QTensor& h_prev,
                                      const QTensor& c_prev, const LstmQuant& p,
                                      MacCounter* mc = nullptr);

/// 2^(-k/256) in Q0.16 for k = 0..255.
const std::array<std::int32_t, 256>& exp2_lut();

/// Row-wise softmax of integer scores: max subtraction, base-2 exponential
/// with a Q8.8 argument looked up in exp2_lut(), normalization in Q16.16.
QTensor softmax_rows(const QTensor& scores, const QuantParams& out);

struct AttentionQuant {
  QTensor wq, wk, wv, wo;
  QBias bq, bk, bv, bo;
  QuantParams q, k, v, scores, probs, ctx, out;
};

/// One-head self-attention on x [n x d]; output [n x d] before the residual.
QTensor attention(const QTensor& x, const AttentionQuant& p, MacCounter* mc = nullptr);

}  // namespace iops
}  // namespace gaitq
