#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gaitq/error.hpp"

namespace gaitq {

using Shape = std::vector<std::size_t>;

/// Dense row-major array of rank 1..3 holding doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(Shape shape) const;
  void fill(double v);
  double max_abs() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::string shape_str(const Shape& s);

/// Throws a Shape error naming `what` unless `got == want`.
void expect_dim(std::size_t got, std::size_t want, const std::string& what);
void expect_rank(const Tensor& t, std::size_t rank, const std::string& what);

// Float kernels, one sample at a time. Channel-first layout [C x L] for
// convolutions; [n x d] (time-major) for attention.
namespace ops {

/// Stride-1 convolution with same zero padding. K must be odd.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b);
/// Kernel 2, stride 2; a trailing odd element is dropped.
Tensor maxpool1d(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

enum class BnMode { Train, Eval };

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t channels);
};

/// Input is a batch [B x C x L] or [B x C]. Train mode normalizes with batch
/// statistics and updates the running estimates in `state`.
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, BnMode mode);

// Slope of the hard sigmoid. 1/4 keeps the integer path shift-only.
inline constexpr double kHardSigmoidSlope = 0.25;

double relu(double x);
double hardsigmoid(double x);
double hardtanh(double x);
Tensor relu(const Tensor& x);
Tensor hardsigmoid(const Tensor& x);
Tensor hardtanh(const Tensor& x);

struct LstmWeights {
  Tensor w_ih;  // [4H x I], gate order (input, forget, cell, output)
  Tensor w_hh;  // [4H x H]
  Tensor bias;  // [4H]
};

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h_prev,
                                    const Tensor& c_prev, const LstmWeights& w);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // [d x d] and [d]
};

/// Row-wise softmax of a [rows x cols] matrix.
Tensor softmax_rows(const Tensor& scores);
/// Scaled dot-product weights softmax(Q K^T / sqrt(d)) for x [n x d].
Tensor attention_weights(const Tensor& x, const AttentionWeights& w);
Tensor one_head_attention(const Tensor& x, const AttentionWeights& w);

/// Applies a dense map to each row of [rows x N].
Tensor dense_rows(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& x);

}  // namespace ops
}  // namespace gaitq
