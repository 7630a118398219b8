#include "gaitq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace gaitq {

namespace {

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& s) {
  require(!s.empty() && s.size() <= 3, ErrorKind::Shape,
          "tensor rank must be 1..3, got " + std::to_string(s.size()));
  for (std::size_t d : s)
    require(d > 0, ErrorKind::Shape, "tensor dimensions must be positive: " + shape_str(s));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  require(product(shape_) == data_.size(), ErrorKind::Shape,
          "data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_str(shape_));
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    require(r.size() == cols, ErrorKind::Shape, "ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < shape_.size(), ErrorKind::Shape,
          "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void expect_dim(std::size_t got, std::size_t want, const std::string& what) {
  if (got != want)
    fail(ErrorKind::Shape,
         what + ": expected " + std::to_string(want) + ", got " + std::to_string(got));
}

void expect_rank(const Tensor& t, std::size_t rank, const std::string& what) {
  if (t.rank() != rank)
    fail(ErrorKind::Shape, what + ": expected rank " + std::to_string(rank) + ", got shape " +
                               shape_str(t.shape()));
}

namespace ops {

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 2, "conv1d input");
  expect_rank(w, 3, "conv1d weight");
  expect_rank(b, 1, "conv1d bias");
  const std::size_t cin = x.dim(0), len = x.dim(1);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  expect_dim(w.dim(1), cin, "conv1d weight input channels");
  expect_dim(b.dim(0), cout, "conv1d bias length");
  require(k % 2 == 1, ErrorKind::Shape, "conv1d kernel size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor y({cout, len});
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t t = 0; t < len; ++t) {
      double acc = b[o];
      for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
          auto src = static_cast<std::ptrdiff_t>(t + j) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          acc += w.at(o, c, j) * x.at(c, static_cast<std::size_t>(src));
        }
      }
      y.at(o, t) = acc;
    }
  }
  return y;
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 2, "depthwise input");
  expect_rank(w, 2, "depthwise weight");
  const std::size_t ch = x.dim(0), len = x.dim(1), k = w.dim(1);
  expect_dim(w.dim(0), ch, "depthwise weight channels");
  expect_dim(b.size(), ch, "depthwise bias channels");
  require(k % 2 == 1, ErrorKind::Shape, "depthwise kernel size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor y({ch, len});
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t t = 0; t < len; ++t) {
      double acc = b[c];
      for (std::size_t j = 0; j < k; ++j) {
        auto src = static_cast<std::ptrdiff_t>(t + j) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        acc += w.at(c, j) * x.at(c, static_cast<std::size_t>(src));
      }
      y.at(c, t) = acc;
    }
  }
  return y;
}

Tensor maxpool1d(const Tensor& x) {
  expect_rank(x, 2, "maxpool1d input");
  require(x.dim(1) >= 2, ErrorKind::Shape, "maxpool1d needs length >= 2");
  const std::size_t ch = x.dim(0), out = x.dim(1) / 2;
  Tensor y({ch, out});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t < out; ++t) y.at(c, t) = std::max(x.at(c, 2 * t), x.at(c, 2 * t + 1));
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  expect_rank(x, 2, "global_avg_pool input");
  const std::size_t ch = x.dim(0), len = x.dim(1);
  Tensor y({ch});
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += x.at(c, t);
    y[c] = s / static_cast<double>(len);
  }
  return y;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 1, "dense input");
  expect_rank(w, 2, "dense weight");
  expect_dim(w.dim(1), x.dim(0), "dense weight columns");
  expect_dim(b.size(), w.dim(0), "dense bias length");
  Tensor y({w.dim(0)});
  for (std::size_t m = 0; m < w.dim(0); ++m) {
    double acc = b[m];
    for (std::size_t n = 0; n < x.dim(0); ++n) acc += w.at(m, n) * x[n];
    y[m] = acc;
  }
  return y;
}

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.running_mean = Tensor({channels}, 0.0);
  s.running_var = Tensor({channels}, 1.0);
  return s;
}

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, BnMode mode) {
  require(x.rank() == 2 || x.rank() == 3, ErrorKind::Shape,
          "batchnorm1d input must be [B x C] or [B x C x L], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), len = x.rank() == 3 ? x.dim(2) : 1;
  expect_dim(gamma.size(), ch, "batchnorm gamma");
  expect_dim(beta.size(), ch, "batchnorm beta");
  expect_dim(state.running_mean.size(), ch, "batchnorm running mean");
  expect_dim(state.running_var.size(), ch, "batchnorm running var");

  Tensor y(x.shape());
  const double count = static_cast<double>(batch * len);
  for (std::size_t c = 0; c < ch; ++c) {
    double mean = state.running_mean[c], var = state.running_var[c];
    if (mode == BnMode::Train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) s += x[(b * ch + c) * len + t];
      mean = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) {
          double d = x[(b * ch + c) * len + t] - mean;
          ss += d * d;
        }
      var = ss / count;
      double unbiased = count > 1 ? ss / (count - 1) : var;
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * mean;
      state.running_var[c] = (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
    require(var + state.eps > 0, ErrorKind::Numeric,
            "batchnorm variance estimate is not positive in channel " + std::to_string(c));
    const double inv = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = (b * ch + c) * len + t;
        y[i] = (x[i] - mean) * inv * gamma[c] + beta[c];
      }
  }
  return y;
}

double relu(double x) { return x > 0 ? x : 0.0; }
double hardsigmoid(double x) { return std::clamp(kHardSigmoidSlope * x + 0.5, 0.0, 1.0); }
double hardtanh(double x) { return std::clamp(x, -1.0, 1.0); }

namespace {
template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}
}  // namespace

Tensor relu(const Tensor& x) { return map(x, [](double v) { return relu(v); }); }
Tensor hardsigmoid(const Tensor& x) { return map(x, [](double v) { return hardsigmoid(v); }); }
Tensor hardtanh(const Tensor& x) { return map(x, [](double v) { return hardtanh(v); }); }

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h_prev,
                                    const Tensor& c_prev, const LstmWeights& w) {
  expect_rank(x_t, 1, "lstm input");
  const std::size_t hidden = h_prev.size();
  expect_dim(c_prev.size(), hidden, "lstm cell state");
  expect_rank(w.w_ih, 2, "lstm w_ih");
  expect_rank(w.w_hh, 2, "lstm w_hh");
  expect_dim(w.w_ih.dim(0), 4 * hidden, "lstm w_ih rows");
  expect_dim(w.w_ih.dim(1), x_t.size(), "lstm w_ih columns");
  expect_dim(w.w_hh.dim(0), 4 * hidden, "lstm w_hh rows");
  expect_dim(w.w_hh.dim(1), hidden, "lstm w_hh columns");
  expect_dim(w.bias.size(), 4 * hidden, "lstm bias");

  Tensor pre({4 * hidden});
  for (std::size_t r = 0; r < 4 * hidden; ++r) {
    double acc = w.bias[r];
    for (std::size_t i = 0; i < x_t.size(); ++i) acc += w.w_ih.at(r, i) * x_t[i];
    for (std::size_t j = 0; j < hidden; ++j) acc += w.w_hh.at(r, j) * h_prev[j];
    pre[r] = acc;
  }
  Tensor h({hidden}), c({hidden});
  for (std::size_t j = 0; j < hidden; ++j) {
    const double ig = hardsigmoid(pre[j]);
    const double fg = hardsigmoid(pre[hidden + j]);
    const double gg = hardtanh(pre[2 * hidden + j]);
    const double og = hardsigmoid(pre[3 * hidden + j]);
    c[j] = fg * c_prev[j] + ig * gg;
    h[j] = og * hardtanh(c[j]);
  }
  return {std::move(h), std::move(c)};
}

Tensor dense_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
  expect_rank(x, 2, "dense_rows input");
  expect_rank(w, 2, "dense_rows weight");
  expect_dim(w.dim(1), x.dim(1), "dense_rows weight columns");
  expect_dim(b.size(), w.dim(0), "dense_rows bias");
  Tensor y({x.dim(0), w.dim(0)});
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t m = 0; m < w.dim(0); ++m) {
      double acc = b[m];
      for (std::size_t n = 0; n < x.dim(1); ++n) acc += w.at(m, n) * x.at(r, n);
      y.at(r, m) = acc;
    }
  return y;
}

Tensor transpose(const Tensor& x) {
  expect_rank(x, 2, "transpose input");
  Tensor y({x.dim(1), x.dim(0)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) y.at(j, i) = x.at(i, j);
  return y;
}

Tensor softmax_rows(const Tensor& s) {
  expect_rank(s, 2, "softmax input");
  Tensor p(s.shape());
  for (std::size_t r = 0; r < s.dim(0); ++r) {
    double mx = s.at(r, 0);
    for (std::size_t c = 1; c < s.dim(1); ++c) mx = std::max(mx, s.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < s.dim(1); ++c) z += (p.at(r, c) = std::exp(s.at(r, c) - mx));
    for (std::size_t c = 0; c < s.dim(1); ++c) p.at(r, c) /= z;
  }
  return p;
}

Tensor attention_weights(const Tensor& x, const AttentionWeights& w) {
  expect_rank(x, 2, "attention input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor q = dense_rows(x, w.wq, w.bq);
  Tensor k = dense_rows(x, w.wk, w.bk);
  Tensor s({n, n});
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += q.at(i, c) * k.at(j, c);
      s.at(i, j) = acc * scale;
    }
  return softmax_rows(s);
}

Tensor one_head_attention(const Tensor& x, const AttentionWeights& w) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor a = attention_weights(x, w);
  Tensor v = dense_rows(x, w.wv, w.bv);
  Tensor ctx({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += a.at(i, j) * v.at(j, c);
      ctx.at(i, c) = acc;
    }
  return dense_rows(ctx, w.wo, w.bo);
}

}  // namespace ops
}  // namespace gaitq
