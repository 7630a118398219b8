#include "gaitq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

namespace gaitq {

QuantParams::QuantParams(int b, double s) : bits(b), scale(s) {
  require(is_supported_bitwidth(b), ErrorKind::Validation,
          "unsupported bitwidth " + std::to_string(b) + " (expected 4, 6 or 8)");
  require(std::isfinite(s) && s > 0, ErrorKind::Validation, "quantization scale must be positive");
}

bool is_supported_bitwidth(int bits) { return bits == 4 || bits == 6 || bits == 8; }

std::pair<std::int64_t, std::int64_t> quant_range(int bits) {
  require(is_supported_bitwidth(bits), ErrorKind::Validation,
          "unsupported bitwidth " + std::to_string(bits) + " (expected 4, 6 or 8)");
  return {-(std::int64_t{1} << (bits - 1)), (std::int64_t{1} << (bits - 1)) - 1};
}

double round_half_away(double x) { return std::round(x); }

std::int64_t quantize(double x, const QuantParams& qp) {
  const double r = round_half_away(x / qp.scale);
  const double lo = static_cast<double>(qp.qmin()), hi = static_cast<double>(qp.qmax());
  return static_cast<std::int64_t>(std::clamp(r, lo, hi));
}

double dequantize(std::int64_t q, const QuantParams& qp) {
  return static_cast<double>(q) * qp.scale;
}

double fake_quantize(double x, const QuantParams& qp) { return dequantize(quantize(x, qp), qp); }

Tensor fake_quantize(const Tensor& x, const QuantParams& qp) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fake_quantize(x[i], qp);
  return y;
}

bool ste_passes(double x, const QuantParams& qp) {
  return x >= static_cast<double>(qp.qmin()) * qp.scale &&
         x <= static_cast<double>(qp.qmax()) * qp.scale;
}

double snap_pow2(double scale) {
  require(std::isfinite(scale) && scale > 0, ErrorKind::Validation, "scale must be positive");
  int e = 0;
  const double m = std::frexp(scale, &e);  // scale = m * 2^e, m in [0.5, 1)
  return m == 0.5 ? scale : std::ldexp(1.0, e);
}

int pow2_exponent(double scale) {
  int e = 0;
  const double m = std::frexp(scale, &e);
  require(m == 0.5, ErrorKind::Validation, "scale is not a power of two");
  return e - 1;
}

QuantParams weight_params(double max_abs, int bits) {
  auto [lo, hi] = quant_range(bits);
  (void)lo;
  // All-zero tensors get scale 1 so that biases on the w x input grid stay representable.
  const double m = max_abs > 0 ? max_abs : static_cast<double>(hi);
  return QuantParams(bits, snap_pow2(m / static_cast<double>(hi)));
}

QuantParams weight_params(const Tensor& w, int bits) { return weight_params(w.max_abs(), bits); }

FixedPointMultiplier FixedPointMultiplier::from_ratio(double ratio) {
  require(std::isfinite(ratio) && ratio > 0, ErrorKind::Validation,
          "rescale ratio must be positive and finite");
  require(ratio < 2147483648.0, ErrorKind::Validation, "rescale ratio too large");
  int e = 0;
  const double m = std::frexp(ratio, &e);  // ratio = m * 2^e
  auto mant = static_cast<std::int64_t>(std::llround(std::ldexp(m, 31)));
  int shift = 31 - e;
  if (mant == (std::int64_t{1} << 31)) {
    mant >>= 1;
    --shift;
  }
  // Very small ratios: shift may exceed 62, requantize then yields 0 or +-1.
  FixedPointMultiplier f;
  f.mantissa = static_cast<std::int32_t>(mant);
  f.shift = shift;
  return f;
}

double FixedPointMultiplier::value() const { return std::ldexp(static_cast<double>(mantissa), -shift); }

std::int64_t checked_acc(std::int64_t acc, const char* where) {
  if (acc < kAccMin || acc > kAccMax)
    fail(ErrorKind::Numeric, std::string("32-bit accumulator overflow in ") + where);
  return acc;
}

std::int64_t shift_round(std::int64_t mantissa, int from_exp, int to_exp) {
  if (from_exp >= to_exp) {
    const int k = from_exp - to_exp;
    require(k < 62 && std::llabs(mantissa) < (std::int64_t{1} << (62 - k)), ErrorKind::Numeric,
            "fixed-point alignment overflow");
    return mantissa * (std::int64_t{1} << k);
  }
  const int k = to_exp - from_exp;
  if (k >= 63) return 0;
  const std::int64_t mag = std::llabs(mantissa);
  const std::int64_t r = (mag + (std::int64_t{1} << (k - 1))) >> k;
  return mantissa < 0 ? -r : r;
}

std::int64_t requantize(std::int64_t acc, const FixedPointMultiplier& fpm, const QuantParams& out) {
  checked_acc(acc, "requantize");
  const std::int64_t prod = acc * static_cast<std::int64_t>(fpm.mantissa);
  const std::int64_t r = shift_round(prod, -fpm.shift, 0);
  return std::clamp(r, out.qmin(), out.qmax());
}

std::int64_t rounding_divide(std::int64_t num, std::int64_t den) {
  require(den > 0, ErrorKind::Validation, "rounding_divide needs a positive divisor");
  const std::int64_t mag = std::llabs(num);
  const std::int64_t r = (2 * mag + den) / (2 * den);
  return num < 0 ? -r : r;
}

void RangeTracker::observe(double lo, double hi) {
  require(std::isfinite(lo) && std::isfinite(hi), ErrorKind::Numeric, "non-finite range observation");
  if (!lo_) {
    lo_ = lo;
    hi_ = hi;
    return;
  }
  lo_ = (1 - momentum_) * *lo_ + momentum_ * lo;
  hi_ = (1 - momentum_) * *hi_ + momentum_ * hi;
}

double RangeTracker::lo() const {
  require(lo_.has_value(), ErrorKind::Validation, "range tracker has no observations");
  return *lo_;
}

double RangeTracker::hi() const {
  require(hi_.has_value(), ErrorKind::Validation, "range tracker has no observations");
  return *hi_;
}

QuantParams RangeTracker::params(int bits) const {
  auto [qmin, qmax] = quant_range(bits);
  (void)qmin;
  // A range that never left zero carries no information; use unit range.
  double amax = std::max(std::abs(lo()), std::abs(hi()));
  if (amax == 0.0) amax = 1.0;
  return QuantParams(bits, amax / static_cast<double>(qmax));
}

QuantParams calibrate(std::span<const std::pair<double, double>> observations, double momentum,
                      int bits) {
  require(!observations.empty(), ErrorKind::Validation, "calibrate needs at least one observation");
  RangeTracker tracker(momentum);
  for (auto [lo, hi] : observations) tracker.observe(lo, hi);
  return tracker.params(bits);
}

Tensor bn_channel_scale(const Tensor& gamma, const Tensor& var, double eps) {
  expect_dim(var.size(), gamma.size(), "batchnorm variance length");
  Tensor a({gamma.size()});
  for (std::size_t c = 0; c < gamma.size(); ++c) {
    require(var[c] + eps > 0, ErrorKind::Numeric,
            "batchnorm var + eps must be positive (channel " + std::to_string(c) + ")");
    a[c] = gamma[c] / std::sqrt(var[c] + eps);
  }
  return a;
}

std::pair<Tensor, Tensor> fold_batchnorm(const Tensor& w, const Tensor& b, const BatchNormParams& bn) {
  const std::size_t out = w.dim(0);
  expect_dim(b.size(), out, "folded bias length");
  expect_dim(bn.gamma.size(), out, "batchnorm gamma");
  expect_dim(bn.beta.size(), out, "batchnorm beta");
  expect_dim(bn.mean.size(), out, "batchnorm mean");
  const Tensor a = bn_channel_scale(bn.gamma, bn.var, bn.eps);
  Tensor wf(w.shape()), bf({out});
  const std::size_t per = w.size() / out;
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < per; ++i) wf[o * per + i] = w[o * per + i] * a[o];
    bf[o] = (b[o] - bn.mean[o]) * a[o] + bn.beta[o];
  }
  return {std::move(wf), std::move(bf)};
}

}  // namespace gaitq
