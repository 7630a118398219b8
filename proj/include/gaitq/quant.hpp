#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>

#include "gaitq/tensor.hpp"

namespace gaitq {

/// Symmetric per-tensor quantization: q = clamp(round(x / scale), qmin, qmax),
/// zero point fixed at 0.
struct QuantParams {
  int bits = 8;
  double scale = 1.0;

  QuantParams() = default;
  QuantParams(int bits, double scale);

  std::int64_t qmin() const { return -(std::int64_t{1} << (bits - 1)); }
  std::int64_t qmax() const { return (std::int64_t{1} << (bits - 1)) - 1; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// Signed two's-complement range for the supported activation/weight widths.
std::pair<std::int64_t, std::int64_t> quant_range(int bits);
bool is_supported_bitwidth(int bits);

/// Nearest integer, ties away from zero. Shared by every path.
double round_half_away(double x);

std::int64_t quantize(double x, const QuantParams& qp);
double dequantize(std::int64_t q, const QuantParams& qp);
double fake_quantize(double x, const QuantParams& qp);
Tensor fake_quantize(const Tensor& x, const QuantParams& qp);
/// Straight-through mask: 1 inside [qmin*scale, qmax*scale], else 0.
bool ste_passes(double x, const QuantParams& qp);

/// Smallest power of two >= scale. Keeps every rescale ratio dyadic.
double snap_pow2(double scale);
/// log2 of a power-of-two scale.
int pow2_exponent(double scale);

/// Scale for a weight tensor: max|w| / qmax snapped to a power of two.
QuantParams weight_params(const Tensor& w, int bits);
QuantParams weight_params(double max_abs, int bits);

/// m / 2^shift approximating a positive rescale ratio. m in [2^30, 2^31).
struct FixedPointMultiplier {
  std::int32_t mantissa = 0;
  int shift = 0;

  static FixedPointMultiplier from_ratio(double ratio);
  double value() const;
};

inline constexpr std::int64_t kAccMin = INT32_MIN;
inline constexpr std::int64_t kAccMax = INT32_MAX;

/// Accumulator range check; throws a Numeric error when outside int32.
std::int64_t checked_acc(std::int64_t acc, const char* where);

/// round(acc * m / 2^shift), ties away from zero, saturated to [qmin, qmax].
std::int64_t requantize(std::int64_t acc, const FixedPointMultiplier& fpm, const QuantParams& out);

/// round(num / den) ties away from zero; den > 0.
std::int64_t rounding_divide(std::int64_t num, std::int64_t den);

/// mantissa * 2^from_exp rounded to a multiple of 2^to_exp (ties away).
std::int64_t shift_round(std::int64_t mantissa, int from_exp, int to_exp);

/// Exponential moving average of observed (min, max) pairs.
class RangeTracker {
 public:
  explicit RangeTracker(double momentum = 0.1) : momentum_(momentum) {}

  void observe(double lo, double hi);
  bool empty() const { return !lo_.has_value(); }
  double lo() const;
  double hi() const;
  double momentum() const { return momentum_; }

  /// Symmetric scale max(|lo|, |hi|) / qmax (not snapped).
  QuantParams params(int bits) const;
  void restore(double lo, double hi) { lo_ = lo; hi_ = hi; }

 private:
  double momentum_;
  std::optional<double> lo_, hi_;
};

QuantParams calibrate(std::span<const std::pair<double, double>> observations, double momentum,
                      int bits);

struct BatchNormParams {
  Tensor gamma, beta, mean, var;
  double eps = 1e-5;
};

/// Per-output-channel multiplier gamma / sqrt(var + eps).
Tensor bn_channel_scale(const Tensor& gamma, const Tensor& var, double eps);

/// Absorbs eval-mode batch norm into a preceding layer whose weight has the
/// output channel as its leading axis.
std::pair<Tensor, Tensor> fold_batchnorm(const Tensor& w, const Tensor& b, const BatchNormParams& bn);

}  // namespace gaitq
