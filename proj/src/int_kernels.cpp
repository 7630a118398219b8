#include "gaitq/int_kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gaitq {

QTensor::QTensor(Shape s, const QuantParams& p) : shape(std::move(s)), qp(p) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  q.assign(n, 0);
}

QTensor QTensor::quantize(const Tensor& x, const QuantParams& qp) {
  QTensor out(x.shape(), qp);
  for (std::size_t i = 0; i < x.size(); ++i)
    out.q[i] = static_cast<std::int32_t>(gaitq::quantize(x[i], qp));
  return out;
}

Tensor QTensor::dequantize() const {
  Tensor t(shape);
  for (std::size_t i = 0; i < q.size(); ++i) t[i] = gaitq::dequantize(q[i], qp);
  return t;
}

QBias QBias::quantize(const Tensor& b, double scale) {
  require(scale > 0 && std::isfinite(scale), ErrorKind::Validation, "bias scale must be positive");
  QBias out;
  out.scale = scale;
  out.q.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double r = std::clamp(round_half_away(b[i] / scale), static_cast<double>(kAccMin),
                                static_cast<double>(kAccMax));
    out.q[i] = static_cast<std::int32_t>(r);
  }
  return out;
}

namespace iops {

namespace {

constexpr std::size_t kSoftmaxFracBits = 8;   // Q8.8 exponent argument
constexpr int kExpBits = 16;                  // Q0.16 table entries
constexpr int kProbBits = 16;                 // Q16.16 probabilities

static_assert(ops::kHardSigmoidSlope == 0.25, "integer hardsigmoid assumes a slope of 1/4");

std::int64_t clamp_q(std::int64_t v, const QuantParams& qp) {
  return std::clamp(v, qp.qmin(), qp.qmax());
}

void check_bias_grid(const QBias& b, double expected, const char* where) {
  require(std::abs(b.scale - expected) <= 1e-12 * expected, ErrorKind::Validation,
          std::string(where) + ": bias scale does not match weight x input scale");
}

/// round(v * m / 2^shift) without saturation.
std::int64_t rescale(std::int64_t v, const FixedPointMultiplier& f) {
  checked_acc(v, "rescale");
  return shift_round(v * static_cast<std::int64_t>(f.mantissa), -f.shift, 0);
}

FixedPointMultiplier ratio_fpm(double in_scale, const QuantParams& out) {
  return FixedPointMultiplier::from_ratio(in_scale / out.scale);
}

}  // namespace

QTensor conv1d(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
               MacCounter* mc) {
  require(x.shape.size() == 2 && w.shape.size() == 3, ErrorKind::Shape, "int conv1d shapes");
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = w.dim(0), k = w.dim(2);
  expect_dim(w.dim(1), cin, "int conv1d weight input channels");
  expect_dim(b.q.size(), cout, "int conv1d bias length");
  check_bias_grid(b, w.qp.scale * x.qp.scale, "int conv1d");
  const auto fpm = ratio_fpm(w.qp.scale * x.qp.scale, out);
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  QTensor y({cout, len}, out);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t t = 0; t < len; ++t) {
      std::int64_t acc = b.q[o];
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          auto src = static_cast<std::ptrdiff_t>(t + j) - half;
          if (mc) ++mc->macs;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          acc += std::int64_t{w.at(o, c, j)} * x.at(c, static_cast<std::size_t>(src));
        }
      y.at(o, t) = static_cast<std::int32_t>(requantize(checked_acc(acc, "conv1d"), fpm, out));
    }
  return y;
}

QTensor depthwise_conv1d(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
                         MacCounter* mc) {
  require(x.shape.size() == 2 && w.shape.size() == 2, ErrorKind::Shape, "int depthwise shapes");
  const std::size_t ch = x.dim(0), len = x.dim(1), k = w.dim(1);
  expect_dim(w.dim(0), ch, "int depthwise channels");
  expect_dim(b.q.size(), ch, "int depthwise bias length");
  check_bias_grid(b, w.qp.scale * x.qp.scale, "int depthwise");
  const auto fpm = ratio_fpm(w.qp.scale * x.qp.scale, out);
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  QTensor y({ch, len}, out);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < len; ++t) {
      std::int64_t acc = b.q[c];
      for (std::size_t j = 0; j < k; ++j) {
        auto src = static_cast<std::ptrdiff_t>(t + j) - half;
        if (mc) ++mc->macs;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        acc += std::int64_t{w.at(c, j)} * x.at(c, static_cast<std::size_t>(src));
      }
      y.at(c, t) = static_cast<std::int32_t>(requantize(checked_acc(acc, "depthwise"), fpm, out));
    }
  return y;
}

QTensor dense_rows(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
                   MacCounter* mc) {
  require(x.shape.size() == 2 && w.shape.size() == 2, ErrorKind::Shape, "int dense_rows shapes");
  const std::size_t rows = x.dim(0), in = x.dim(1), m = w.dim(0);
  expect_dim(w.dim(1), in, "int dense weight columns");
  expect_dim(b.q.size(), m, "int dense bias length");
  check_bias_grid(b, w.qp.scale * x.qp.scale, "int dense");
  const auto fpm = ratio_fpm(w.qp.scale * x.qp.scale, out);
  QTensor y({rows, m}, out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < m; ++o) {
      std::int64_t acc = b.q[o];
      for (std::size_t i = 0; i < in; ++i) acc += std::int64_t{w.at(o, i)} * x.at(r, i);
      if (mc) mc->macs += in;
      y.at(r, o) = static_cast<std::int32_t>(requantize(checked_acc(acc, "dense"), fpm, out));
    }
  return y;
}

QTensor dense(const QTensor& x, const QTensor& w, const QBias& b, const QuantParams& out,
              MacCounter* mc) {
  require(x.shape.size() == 1, ErrorKind::Shape, "int dense input must be a vector");
  QTensor row = x;
  row.shape = {1, x.size()};
  QTensor y = dense_rows(row, w, b, out, mc);
  y.shape = {y.q.size()};
  return y;
}

QTensor maxpool1d(const QTensor& x) {
  require(x.shape.size() == 2 && x.dim(1) >= 2, ErrorKind::Shape, "int maxpool1d needs [C x L>=2]");
  const std::size_t ch = x.dim(0), out = x.dim(1) / 2;
  QTensor y({ch, out}, x.qp);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < out; ++t) y.at(c, t) = std::max(x.at(c, 2 * t), x.at(c, 2 * t + 1));
  return y;
}

QTensor relu(const QTensor& x) {
  QTensor y = x;
  for (auto& v : y.q) v = std::max(v, 0);
  return y;
}

QTensor global_avg_pool(const QTensor& x, const QuantParams& out) {
  require(x.shape.size() == 2, ErrorKind::Shape, "int global_avg_pool needs [C x L]");
  const std::size_t ch = x.dim(0), len = x.dim(1);
  QTensor y({ch}, out);
  const bool pow2 = snap_pow2(x.qp.scale) == x.qp.scale && snap_pow2(out.scale) == out.scale;
  for (std::size_t c = 0; c < ch; ++c) {
    std::int64_t s = 0;
    for (std::size_t t = 0; t < len; ++t) s += x.at(c, t);
    std::int64_t r = 0;
    if (pow2) {
      // Exact rational rounding of s * 2^(ex - ey) / L.
      const int delta = pow2_exponent(x.qp.scale) - pow2_exponent(out.scale);
      const auto l = static_cast<std::int64_t>(len);
      r = delta >= 0 ? rounding_divide(shift_round(s, delta, 0), l)
                     : rounding_divide(s, shift_round(l, -delta, 0));
    } else {
      r = rescale(s, FixedPointMultiplier::from_ratio(x.qp.scale / (static_cast<double>(len) * out.scale)));
    }
    y.q[c] = static_cast<std::int32_t>(clamp_q(r, out));
  }
  return y;
}

QTensor transpose(const QTensor& x) {
  require(x.shape.size() == 2, ErrorKind::Shape, "int transpose needs a matrix");
  QTensor y({x.dim(1), x.dim(0)}, x.qp);
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) y.at(j, i) = x.at(i, j);
  return y;
}

QTensor add(const QTensor& a, const QTensor& b, const QuantParams& out) {
  require(a.shape == b.shape, ErrorKind::Shape, "int add shape mismatch");
  const int ea = pow2_exponent(a.qp.scale), eb = pow2_exponent(b.qp.scale);
  const int eo = pow2_exponent(out.scale), e = std::min(ea, eb);
  QTensor y(a.shape, out);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::int64_t m = shift_round(a.q[i], ea, e) + shift_round(b.q[i], eb, e);
    y.q[i] = static_cast<std::int32_t>(clamp_q(shift_round(m, e, eo), out));
  }
  return y;
}

QTensor mul(const QTensor& a, const QTensor& b, const QuantParams& out, MacCounter* mc) {
  require(a.shape == b.shape, ErrorKind::Shape, "int mul shape mismatch");
  const int e = pow2_exponent(a.qp.scale) + pow2_exponent(b.qp.scale);
  const int eo = pow2_exponent(out.scale);
  QTensor y(a.shape, out);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::int64_t m = std::int64_t{a.q[i]} * b.q[i];
    y.q[i] = static_cast<std::int32_t>(clamp_q(shift_round(m, e, eo), out));
  }
  if (mc) mc->macs += a.size();
  return y;
}

QTensor hardsigmoid(const QTensor& x, const QuantParams& out) {
  // 0.25 * q * 2^ex + 0.5, clamped to [0, 1], all on the grid 2^e.
  const int ex = pow2_exponent(x.qp.scale), eo = pow2_exponent(out.scale);
  const int e = std::min(ex - 2, -1);
  const std::int64_t half = shift_round(1, -1, e), one = shift_round(1, 0, e);
  QTensor y(x.shape, out);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::int64_t m = std::clamp(shift_round(x.q[i], ex - 2, e) + half, std::int64_t{0}, one);
    y.q[i] = static_cast<std::int32_t>(clamp_q(shift_round(m, e, eo), out));
  }
  return y;
}

QTensor hardtanh(const QTensor& x, const QuantParams& out) {
  const int ex = pow2_exponent(x.qp.scale), eo = pow2_exponent(out.scale);
  const int e = std::min(ex, 0);
  const std::int64_t one = shift_round(1, 0, e);
  QTensor y(x.shape, out);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::int64_t m = std::clamp(shift_round(x.q[i], ex, e), -one, one);
    y.q[i] = static_cast<std::int32_t>(clamp_q(shift_round(m, e, eo), out));
  }
  return y;
}

QTensor channel_affine(const QTensor& x, const QTensor& a, const QBias& c0, const QuantParams& out,
                       MacCounter* mc) {
  require(x.shape.size() == 2, ErrorKind::Shape, "int channel_affine needs [C x L]");
  const std::size_t ch = x.dim(0), len = x.dim(1);
  expect_dim(a.size(), ch, "int channel_affine scale");
  expect_dim(c0.q.size(), ch, "int channel_affine shift");
  check_bias_grid(c0, a.qp.scale * x.qp.scale, "int channel_affine");
  const auto fpm = ratio_fpm(a.qp.scale * x.qp.scale, out);
  QTensor y(x.shape, out);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < len; ++t) {
      const std::int64_t acc = std::int64_t{x.at(c, t)} * a.q[c] + c0.q[c];
      y.at(c, t) = static_cast<std::int32_t>(requantize(checked_acc(acc, "channel_affine"), fpm, out));
    }
  if (mc) mc->macs += x.size();
  return y;
}

std::pair<QTensor, QTensor> lstm_cell(const QTensor& x_t, const QTensor& h_prev,
                                      const QTensor& c_prev, const LstmQuant& p, MacCounter* mc) {
  const std::size_t hidden = h_prev.size(), in = x_t.size();
  expect_dim(c_prev.size(), hidden, "int lstm cell state");
  expect_dim(p.w_ih.dim(0), 4 * hidden, "int lstm w_ih rows");
  expect_dim(p.w_ih.dim(1), in, "int lstm w_ih columns");
  expect_dim(p.w_hh.dim(0), 4 * hidden, "int lstm w_hh rows");
  expect_dim(p.w_hh.dim(1), hidden, "int lstm w_hh columns");
  expect_dim(p.bias.q.size(), 4 * hidden, "int lstm bias");
  check_bias_grid(p.bias, p.w_ih.qp.scale * x_t.qp.scale, "int lstm");

  const int e1 = pow2_exponent(p.w_ih.qp.scale) + pow2_exponent(x_t.qp.scale);
  const int e2 = pow2_exponent(p.w_hh.qp.scale) + pow2_exponent(h_prev.qp.scale);
  const int eg = pow2_exponent(p.gates.scale), e = std::min(e1, e2);

  QTensor pre({4 * hidden}, p.gates);
  for (std::size_t r = 0; r < 4 * hidden; ++r) {
    std::int64_t a1 = p.bias.q[r], a2 = 0;
    for (std::size_t i = 0; i < in; ++i) a1 += std::int64_t{p.w_ih.at(r, i)} * x_t.q[i];
    for (std::size_t j = 0; j < hidden; ++j) a2 += std::int64_t{p.w_hh.at(r, j)} * h_prev.q[j];
    const std::int64_t m =
        shift_round(checked_acc(a1, "lstm input"), e1, e) + shift_round(checked_acc(a2, "lstm recurrent"), e2, e);
    pre.q[r] = static_cast<std::int32_t>(clamp_q(shift_round(m, e, eg), p.gates));
  }
  if (mc) mc->macs += 4 * hidden * (in + hidden);

  auto slice = [&](std::size_t gate) {
    QTensor s({hidden}, p.gates);
    std::copy_n(pre.q.begin() + static_cast<std::ptrdiff_t>(gate * hidden), hidden, s.q.begin());
    return s;
  };
  const QTensor ig = hardsigmoid(slice(0), p.sigmoid);
  const QTensor fg = hardsigmoid(slice(1), p.sigmoid);
  const QTensor gg = hardtanh(slice(2), p.tanh);
  const QTensor og = hardsigmoid(slice(3), p.sigmoid);

  // c = f * c_prev + i * g, both products exact before the final rounding.
  const int ef = pow2_exponent(p.sigmoid.scale) + pow2_exponent(c_prev.qp.scale);
  const int ei = pow2_exponent(p.sigmoid.scale) + pow2_exponent(p.tanh.scale);
  const int ec = pow2_exponent(p.cell.scale), emin = std::min(ef, ei);
  QTensor c({hidden}, p.cell);
  for (std::size_t j = 0; j < hidden; ++j) {
    const std::int64_t m = shift_round(std::int64_t{fg.q[j]} * c_prev.q[j], ef, emin) +
                           shift_round(std::int64_t{ig.q[j]} * gg.q[j], ei, emin);
    c.q[j] = static_cast<std::int32_t>(clamp_q(shift_round(m, emin, ec), p.cell));
  }
  if (mc) mc->macs += 2 * hidden;
  const QTensor tc = hardtanh(c, p.cell_tanh);
  QTensor h = mul(og, tc, p.hidden, mc);
  return {std::move(h), std::move(c)};
}

const std::array<std::int32_t, 256>& exp2_lut() {
  static const std::array<std::int32_t, 256> lut = [] {
    std::array<std::int32_t, 256> t{};
    for (std::size_t k = 0; k < t.size(); ++k)
      t[k] = static_cast<std::int32_t>(
          std::lround(std::ldexp(std::exp2(-static_cast<double>(k) / 256.0), kExpBits)));
    return t;
  }();
  return lut;
}

QTensor softmax_rows(const QTensor& s, const QuantParams& out) {
  require(s.shape.size() == 2, ErrorKind::Shape, "int softmax needs a matrix");
  const std::size_t rows = s.dim(0), cols = s.dim(1);
  // Score step expressed in Q8.8 units of log2.
  const auto step = FixedPointMultiplier::from_ratio(s.qp.scale * std::log2(std::exp(1.0)) *
                                                     static_cast<double>(1 << kSoftmaxFracBits));
  const auto& lut = exp2_lut();
  QTensor p(s.shape, out);
  std::vector<std::int64_t> e(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::int32_t mx = s.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, s.at(r, c));
    std::int64_t total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::int64_t arg = rescale(std::int64_t{mx} - s.at(r, c), step);  // >= 0, Q8.8
      const std::int64_t ip = arg >> kSoftmaxFracBits;
      const std::int64_t frac = arg & ((1 << kSoftmaxFracBits) - 1);
      e[c] = ip > kExpBits ? 0 : (std::int64_t{lut[static_cast<std::size_t>(frac)]} >> ip);
      total += e[c];
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const std::int64_t prob = rounding_divide(e[c] << kProbBits, total);  // Q16.16
      std::int64_t q = 0;
      if (snap_pow2(out.scale) == out.scale) {
        q = shift_round(prob, -kProbBits, pow2_exponent(out.scale));
      } else {
        q = rescale(prob, FixedPointMultiplier::from_ratio(std::ldexp(1.0, -kProbBits) / out.scale));
      }
      p.at(r, c) = static_cast<std::int32_t>(clamp_q(q, out));
    }
  }
  return p;
}

QTensor attention(const QTensor& x, const AttentionQuant& p, MacCounter* mc) {
  require(x.shape.size() == 2, ErrorKind::Shape, "int attention needs [n x d]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const QTensor q = dense_rows(x, p.wq, p.bq, p.q, mc);
  const QTensor k = dense_rows(x, p.wk, p.bk, p.k, mc);
  const QTensor v = dense_rows(x, p.wv, p.bv, p.v, mc);

  const auto score_fpm = FixedPointMultiplier::from_ratio(
      q.qp.scale * k.qp.scale / (std::sqrt(static_cast<double>(d)) * p.scores.scale));
  QTensor s({n, n}, p.scores);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::int64_t acc = 0;
      for (std::size_t c = 0; c < d; ++c) acc += std::int64_t{q.at(i, c)} * k.at(j, c);
      s.at(i, j) = static_cast<std::int32_t>(requantize(checked_acc(acc, "attention scores"), score_fpm, p.scores));
    }
  if (mc) mc->macs += n * n * d;

  const QTensor a = softmax_rows(s, p.probs);
  const auto ctx_fpm = ratio_fpm(a.qp.scale * v.qp.scale, p.ctx);
  QTensor ctx({n, d}, p.ctx);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      std::int64_t acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += std::int64_t{a.at(i, j)} * v.at(j, c);
      ctx.at(i, c) = static_cast<std::int32_t>(requantize(checked_acc(acc, "attention context"), ctx_fpm, p.ctx));
    }
  if (mc) mc->macs += n * n * d;
  return dense_rows(ctx, p.wo, p.bo, p.out, mc);
}

}  // namespace iops
}  // namespace gaitq
