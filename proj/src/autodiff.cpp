#include "gaitq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gaitq::ad {

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), grad_enabled_, nullptr});
  return Var{nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_)
    for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
  nodes_.push_back(Node{std::move(value), Tensor(), needs, needs ? std::move(fn) : nullptr});
  return Var{nodes_.size() - 1};
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  require(!nodes_.empty(), ErrorKind::Validation, "backward called on an empty tape");
  require(grad_enabled_, ErrorKind::Validation, "backward called on a no-grad tape");
  require(value(loss).size() == 1, ErrorKind::Shape, "backward needs a scalar loss");
  for (Node& n : nodes_) n.grad = Tensor();
  order_.clear();
  grad_ref(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    order_.push_back(i);
    n.backward(*this, i);
  }
}

namespace {

void accumulate(Tape& t, Var v, std::size_t i, double g) {
  if (t.requires_grad(v)) t.grad_ref(v)[i] += g;
}

}  // namespace

Var conv1d(Tape& t, Var xv, Var wv, Var bv) {
  const Tensor& x = t.value(xv);
  const Tensor& w = t.value(wv);
  const Tensor& b = t.value(bv);
  expect_rank(x, 3, "conv1d batch input");
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  expect_rank(w, 3, "conv1d weight");
  expect_dim(w.dim(1), cin, "conv1d weight input channels");
  const std::size_t cout = w.dim(0), k = w.dim(2);
  expect_dim(b.size(), cout, "conv1d bias length");
  require(k % 2 == 1, ErrorKind::Shape, "conv1d kernel size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto slen = static_cast<std::ptrdiff_t>(len);

  Tensor y({batch, cout, len});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t p = 0; p < len; ++p) {
        double acc = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            auto src = static_cast<std::ptrdiff_t>(p + j) - half;
            if (src < 0 || src >= slen) continue;
            acc += w.at(o, c, j) * x.at(n, c, static_cast<std::size_t>(src));
          }
        y.at(n, o, p) = acc;
      }

  return t.record(std::move(y), {xv, wv, bv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& xx = tp.value(xv);
    const Tensor& ww = tp.value(wv);
    const bool gx = tp.requires_grad(xv), gw = tp.requires_grad(wv), gb = tp.requires_grad(bv);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t p = 0; p < len; ++p) {
          const double g = gy.at(n, o, p);
          if (g == 0.0) continue;
          if (gb) tp.grad_ref(bv)[o] += g;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t j = 0; j < k; ++j) {
              auto src = static_cast<std::ptrdiff_t>(p + j) - half;
              if (src < 0 || src >= slen) continue;
              const auto s = static_cast<std::size_t>(src);
              if (gw) tp.grad_ref(wv).at(o, c, j) += g * xx.at(n, c, s);
              if (gx) tp.grad_ref(xv).at(n, c, s) += g * ww.at(o, c, j);
            }
        }
  });
}

Var depthwise_conv1d(Tape& t, Var xv, Var wv, Var bv) {
  const Tensor& x = t.value(xv);
  const Tensor& w = t.value(wv);
  const Tensor& b = t.value(bv);
  expect_rank(x, 3, "depthwise batch input");
  expect_rank(w, 2, "depthwise weight");
  const std::size_t batch = x.dim(0), ch = x.dim(1), len = x.dim(2), k = w.dim(1);
  expect_dim(w.dim(0), ch, "depthwise weight channels");
  expect_dim(b.size(), ch, "depthwise bias channels");
  require(k % 2 == 1, ErrorKind::Shape, "depthwise kernel size must be odd");
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto slen = static_cast<std::ptrdiff_t>(len);

  Tensor y({batch, ch, len});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < len; ++p) {
        double acc = b[c];
        for (std::size_t j = 0; j < k; ++j) {
          auto src = static_cast<std::ptrdiff_t>(p + j) - half;
          if (src < 0 || src >= slen) continue;
          acc += w.at(c, j) * x.at(n, c, static_cast<std::size_t>(src));
        }
        y.at(n, c, p) = acc;
      }

  return t.record(std::move(y), {xv, wv, bv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& xx = tp.value(xv);
    const Tensor& ww = tp.value(wv);
    const bool gx = tp.requires_grad(xv), gw = tp.requires_grad(wv), gb = tp.requires_grad(bv);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < len; ++p) {
          const double g = gy.at(n, c, p);
          if (g == 0.0) continue;
          if (gb) tp.grad_ref(bv)[c] += g;
          for (std::size_t j = 0; j < k; ++j) {
            auto src = static_cast<std::ptrdiff_t>(p + j) - half;
            if (src < 0 || src >= slen) continue;
            const auto s = static_cast<std::size_t>(src);
            if (gw) tp.grad_ref(wv).at(c, j) += g * xx.at(n, c, s);
            if (gx) tp.grad_ref(xv).at(n, c, s) += g * ww.at(c, j);
          }
        }
  });
}

Var maxpool1d(Tape& t, Var xv) {
  const Tensor& x = t.value(xv);
  expect_rank(x, 3, "maxpool batch input");
  require(x.dim(2) >= 2, ErrorKind::Shape, "maxpool1d needs length >= 2");
  const std::size_t batch = x.dim(0), ch = x.dim(1), out = x.dim(2) / 2;
  Tensor y({batch, ch, out});
  std::vector<std::size_t> arg(y.size());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < out; ++p) {
        const double a = x.at(n, c, 2 * p), b = x.at(n, c, 2 * p + 1);
        const std::size_t oi = (n * ch + c) * out + p;
        const std::size_t base = (n * ch + c) * x.dim(2) + 2 * p;
        // Ties route the gradient to the first element.
        y[oi] = b > a ? b : a;
        arg[oi] = b > a ? base + 1 : base;
      }
  return t.record(std::move(y), {xv}, [xv, arg = std::move(arg)](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += gy[i];
  });
}

Var mean_last(Tape& t, Var xv) {
  const Tensor& x = t.value(xv);
  expect_rank(x, 3, "mean_last input");
  const std::size_t rows = x.dim(0) * x.dim(1), len = x.dim(2);
  Tensor y({x.dim(0), x.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t p = 0; p < len; ++p) s += x[r * len + p];
    // Divide (not multiply by 1/L) so exact ties survive for the integer path.
    y[r] = s / static_cast<double>(len);
  }
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = 0; p < len; ++p) gx[r * len + p] += gy[r] / static_cast<double>(len);
  });
}

namespace {

Var linear_impl(Tape& t, Var xv, Var wv, const Var* bvp) {
  const Tensor& x = t.value(xv);
  const Tensor& w = t.value(wv);
  require(x.rank() == 2 || x.rank() == 3, ErrorKind::Shape,
          "linear input must be rank 2 or 3, got " + shape_str(x.shape()));
  expect_rank(w, 2, "linear weight");
  const std::size_t in = x.shape().back(), out = w.dim(0);
  expect_dim(w.dim(1), in, "linear weight columns");
  if (bvp) expect_dim(t.value(*bvp).size(), out, "linear bias length");
  const std::size_t rows = x.size() / in;
  Shape ys = x.shape();
  ys.back() = out;
  Tensor y(ys);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t m = 0; m < out; ++m) {
      double acc = bvp ? t.value(*bvp)[m] : 0.0;
      for (std::size_t n = 0; n < in; ++n) acc += w.at(m, n) * x[r * in + n];
      y[r * out + m] = acc;
    }
  std::vector<Var> parents{xv, wv};
  const bool has_bias = bvp != nullptr;
  const Var bv = has_bias ? *bvp : Var{};
  if (has_bias) parents.push_back(bv);
  return t.record(std::move(y), std::move(parents), [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& xx = tp.value(xv);
    const Tensor& ww = tp.value(wv);
    const bool gx = tp.requires_grad(xv), gw = tp.requires_grad(wv);
    const bool gb = has_bias && tp.requires_grad(bv);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t m = 0; m < out; ++m) {
        const double g = gy[r * out + m];
        if (g == 0.0) continue;
        if (gb) tp.grad_ref(bv)[m] += g;
        for (std::size_t n = 0; n < in; ++n) {
          if (gw) tp.grad_ref(wv).at(m, n) += g * xx[r * in + n];
          if (gx) tp.grad_ref(xv)[r * in + n] += g * ww.at(m, n);
        }
      }
  });
}

struct ChannelView {
  std::size_t batch, ch, len;
};

ChannelView channel_view(const Tensor& x, const char* what) {
  require(x.rank() == 2 || x.rank() == 3, ErrorKind::Shape,
          std::string(what) + " input must be [B x C] or [B x C x L], got " + shape_str(x.shape()));
  return {x.dim(0), x.dim(1), x.rank() == 3 ? x.dim(2) : 1};
}

}  // namespace

Var linear(Tape& t, Var x, Var w, Var b) { return linear_impl(t, x, w, &b); }
Var linear_nobias(Tape& t, Var x, Var w) { return linear_impl(t, x, w, nullptr); }

Var batchnorm_train(Tape& t, Var xv, Var gv, Var bv, ops::BatchNormState& state) {
  const Tensor& x = t.value(xv);
  const auto [batch, ch, len] = channel_view(x, "batchnorm");
  const Tensor& gamma = t.value(gv);
  expect_dim(gamma.size(), ch, "batchnorm gamma");
  expect_dim(t.value(bv).size(), ch, "batchnorm beta");
  Tensor y = ops::batchnorm1d(x, gamma, t.value(bv), state, ops::BnMode::Train);

  // Normalized values and inverse std per channel for the backward pass.
  const double count = static_cast<double>(batch * len);
  Tensor xhat(x.shape());
  std::vector<double> inv(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < len; ++p) s += x[(n * ch + c) * len + p];
    const double mean = s / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < len; ++p) {
        const double d = x[(n * ch + c) * len + p] - mean;
        ss += d * d;
      }
    inv[c] = 1.0 / std::sqrt(ss / count + state.eps);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < len; ++p) {
        const std::size_t i = (n * ch + c) * len + p;
        xhat[i] = (x[i] - mean) * inv[c];
      }
  }

  return t.record(std::move(y), {xv, gv, bv},
                  [=, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, std::size_t self) {
                    const Tensor& gy = tp.out_grad(self);
                    const Tensor& g = tp.value(gv);
                    for (std::size_t c = 0; c < ch; ++c) {
                      double sum_gy = 0.0, sum_gy_xhat = 0.0;
                      for (std::size_t n = 0; n < batch; ++n)
                        for (std::size_t p = 0; p < len; ++p) {
                          const std::size_t i = (n * ch + c) * len + p;
                          sum_gy += gy[i];
                          sum_gy_xhat += gy[i] * xhat[i];
                        }
                      if (tp.requires_grad(gv)) tp.grad_ref(gv)[c] += sum_gy_xhat;
                      if (tp.requires_grad(bv)) tp.grad_ref(bv)[c] += sum_gy;
                      if (!tp.requires_grad(xv)) continue;
                      Tensor& gx = tp.grad_ref(xv);
                      const double k = g[c] * inv[c] / count;
                      for (std::size_t n = 0; n < batch; ++n)
                        for (std::size_t p = 0; p < len; ++p) {
                          const std::size_t i = (n * ch + c) * len + p;
                          gx[i] += k * (count * gy[i] - sum_gy - xhat[i] * sum_gy_xhat);
                        }
                    }
                  });
}

Var channel_affine(Tape& t, Var xv, Var av, Var cv) {
  const Tensor& x = t.value(xv);
  const auto [batch, ch, len] = channel_view(x, "channel_affine");
  const Tensor& a = t.value(av);
  const Tensor& c0 = t.value(cv);
  expect_dim(a.size(), ch, "channel_affine scale");
  expect_dim(c0.size(), ch, "channel_affine shift");
  Tensor y(x.shape());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < len; ++p) {
        const std::size_t i = (n * ch + c) * len + p;
        y[i] = x[i] * a[c] + c0[c];
      }
  return t.record(std::move(y), {xv, av, cv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& xx = tp.value(xv);
    const Tensor& aa = tp.value(av);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < len; ++p) {
          const std::size_t i = (n * ch + c) * len + p;
          accumulate(tp, xv, i, gy[i] * aa[c]);
          accumulate(tp, av, c, gy[i] * xx[i]);
          accumulate(tp, cv, c, gy[i]);
        }
  });
}

Var bn_fold_weight(Tape& t, Var wv, Var gv, const Tensor& var, double eps) {
  const Tensor& w = t.value(wv);
  const Tensor& gamma = t.value(gv);
  const std::size_t out = w.dim(0);
  expect_dim(gamma.size(), out, "bn_fold_weight gamma");
  // Same expression as fold_batchnorm so the folded weights are bit-identical.
  BatchNormParams bn{gamma, Tensor({out}, 0.0), Tensor({out}, 0.0), var, eps};
  Tensor wf = fold_batchnorm(w, Tensor({out}, 0.0), bn).first;
  const std::size_t per = w.size() / out;
  return t.record(std::move(wf), {wv, gv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& ww = tp.value(wv);
    const Tensor& gg = tp.value(gv);
    for (std::size_t o = 0; o < out; ++o) {
      const double inv = 1.0 / std::sqrt(var[o] + eps);
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t j = o * per + i;
        accumulate(tp, wv, j, gy[j] * gg[o] * inv);
        accumulate(tp, gv, o, gy[j] * ww[j] * inv);
      }
    }
  });
}

Var bn_fold_bias(Tape& t, Var bv, Var gv, Var betav, const Tensor& mean, const Tensor& var,
                 double eps) {
  const Tensor& b = t.value(bv);
  const std::size_t out = b.size();
  const Tensor& gamma = t.value(gv);
  BatchNormParams bn{gamma, t.value(betav), mean, var, eps};
  Tensor bf = fold_batchnorm(Tensor({out, 1}, 0.0), b, bn).second;
  return t.record(std::move(bf), {bv, gv, betav}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& bb = tp.value(bv);
    const Tensor& gg = tp.value(gv);
    for (std::size_t o = 0; o < out; ++o) {
      const double inv = 1.0 / std::sqrt(var[o] + eps);
      accumulate(tp, bv, o, gy[o] * gg[o] * inv);
      accumulate(tp, gv, o, gy[o] * (bb[o] - mean[o]) * inv);
      accumulate(tp, betav, o, gy[o]);
    }
  });
}

namespace {

template <typename F, typename D>
Var unary(Tape& t, Var xv, F f, D df) {
  const Tensor& x = t.value(xv);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& xx = tp.value(xv);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t i = 0; i < xx.size(); ++i) gx[i] += gy[i] * df(xx[i]);
  });
}

}  // namespace

Var relu(Tape& t, Var x) {
  return unary(t, x, [](double v) { return ops::relu(v); },
               [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var hardsigmoid(Tape& t, Var x) {
  return unary(t, x, [](double v) { return ops::hardsigmoid(v); },
               [](double v) {
                 const double u = ops::kHardSigmoidSlope * v + 0.5;
                 return (u > 0.0 && u < 1.0) ? ops::kHardSigmoidSlope : 0.0;
               });
}

Var hardtanh(Tape& t, Var x) {
  return unary(t, x, [](double v) { return ops::hardtanh(v); },
               [](double v) { return (v > -1.0 && v < 1.0) ? 1.0 : 0.0; });
}

Var fake_quant(Tape& t, Var x, const QuantParams& qp) {
  return unary(t, x, [qp](double v) { return fake_quantize(v, qp); },
               [qp](double v) { return ste_passes(v, qp) ? 1.0 : 0.0; });
}

Var fake_quant(Tape& t, Var x, double scale, std::int64_t qmin, std::int64_t qmax) {
  const double lo = static_cast<double>(qmin), hi = static_cast<double>(qmax);
  return unary(t, x,
               [=](double v) { return std::clamp(round_half_away(v / scale), lo, hi) * scale; },
               [=](double v) { return (v >= lo * scale && v <= hi * scale) ? 1.0 : 0.0; });
}

Var scale(Tape& t, Var a, double k) {
  return unary(t, a, [k](double v) { return v * k; }, [k](double) { return k; });
}

Var add(Tape& t, Var av, Var bv) {
  const Tensor& a = t.value(av);
  const Tensor& b = t.value(bv);
  require(a.shape() == b.shape(), ErrorKind::Shape,
          "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return t.record(std::move(y), {av, bv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      accumulate(tp, av, i, gy[i]);
      accumulate(tp, bv, i, gy[i]);
    }
  });
}

Var mul(Tape& t, Var av, Var bv) {
  const Tensor& a = t.value(av);
  const Tensor& b = t.value(bv);
  require(a.shape() == b.shape(), ErrorKind::Shape,
          "mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return t.record(std::move(y), {av, bv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& aa = tp.value(av);
    const Tensor& bb = tp.value(bv);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      accumulate(tp, av, i, gy[i] * bb[i]);
      accumulate(tp, bv, i, gy[i] * aa[i]);
    }
  });
}

Var time_step(Tape& t, Var xv, std::size_t step) {
  const Tensor& x = t.value(xv);
  expect_rank(x, 3, "time_step input");
  require(step < x.dim(2), ErrorKind::Shape, "time_step index out of range");
  const std::size_t batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  Tensor y({batch, ch});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c) y.at(n, c) = x.at(n, c, step);
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c) gx[(n * ch + c) * len + step] += gy.at(n, c);
  });
}

Var slice_cols(Tape& t, Var xv, std::size_t start, std::size_t len) {
  const Tensor& x = t.value(xv);
  expect_rank(x, 2, "slice_cols input");
  require(start + len <= x.dim(1), ErrorKind::Shape, "slice_cols range out of bounds");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor y({rows, len});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) y.at(r, c) = x.at(r, start + c);
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) gx[r * cols + start + c] += gy.at(r, c);
  });
}

Var bmm(Tape& t, Var av, Var bv) {
  const Tensor& a = t.value(av);
  const Tensor& b = t.value(bv);
  expect_rank(a, 3, "bmm lhs");
  expect_rank(b, 3, "bmm rhs");
  expect_dim(b.dim(0), a.dim(0), "bmm batch");
  expect_dim(b.dim(1), a.dim(2), "bmm inner dimension");
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  Tensor y({batch, n, m});
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < k; ++c) acc += a.at(s, i, c) * b.at(s, c, j);
        y.at(s, i, j) = acc;
      }
  return t.record(std::move(y), {av, bv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& aa = tp.value(av);
    const Tensor& bb = tp.value(bv);
    const bool ga = tp.requires_grad(av), gb = tp.requires_grad(bv);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double g = gy.at(s, i, j);
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < k; ++c) {
            if (ga) tp.grad_ref(av).at(s, i, c) += g * bb.at(s, c, j);
            if (gb) tp.grad_ref(bv).at(s, c, j) += g * aa.at(s, i, c);
          }
        }
  });
}

Var transpose12(Tape& t, Var xv) {
  const Tensor& x = t.value(xv);
  expect_rank(x, 3, "transpose12 input");
  const std::size_t batch = x.dim(0), r = x.dim(1), c = x.dim(2);
  Tensor y({batch, c, r});
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y.at(s, j, i) = x.at(s, i, j);
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t s = 0; s < batch; ++s)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx.at(s, i, j) += gy.at(s, j, i);
  });
}

Var softmax_last(Tape& t, Var xv) {
  const Tensor& x = t.value(xv);
  const std::size_t cols = x.shape().back(), rows = x.size() / cols;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = x[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[r * cols + c] = std::exp(x[r * cols + c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= z;
  }
  return t.record(std::move(y), {xv}, [=](Tape& tp, std::size_t self) {
    const Tensor& gy = tp.out_grad(self);
    const Tensor& yy = tp.value(self);
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[r * cols + c] * yy[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gx[r * cols + c] += yy[r * cols + c] * (gy[r * cols + c] - dot);
    }
  });
}

Var cross_entropy(Tape& t, Var lv, std::span<const int> labels) {
  const Tensor& logits = t.value(lv);
  expect_rank(logits, 2, "cross_entropy logits");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  expect_dim(labels.size(), batch, "cross_entropy labels");
  Tensor prob(logits.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const auto label = static_cast<std::size_t>(labels[n]);
    require(label < k, ErrorKind::Validation, "label out of range");
    double mx = logits.at(n, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.at(n, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.at(n, c) - mx);
    for (std::size_t c = 0; c < k; ++c) prob.at(n, c) = std::exp(logits.at(n, c) - mx) / z;
    loss += -(logits.at(n, label) - mx - std::log(z));
  }
  loss /= static_cast<double>(batch);
  std::vector<int> lab(labels.begin(), labels.end());
  return t.record(Tensor::from({loss}), {lv},
                  [=, prob = std::move(prob), lab = std::move(lab)](Tape& tp, std::size_t self) {
                    const double g = tp.out_grad(self)[0] / static_cast<double>(batch);
                    Tensor& gx = tp.grad_ref(lv);
                    for (std::size_t n = 0; n < batch; ++n)
                      for (std::size_t c = 0; c < k; ++c)
                        gx.at(n, c) +=
                            g * (prob.at(n, c) - (static_cast<int>(c) == lab[n] ? 1.0 : 0.0));
                  });
}

Var sum(Tape& t, Var xv) {
  const Tensor& x = t.value(xv);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return t.record(Tensor::from({s}), {xv}, [=](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    Tensor& gx = tp.grad_ref(xv);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

}  // namespace gaitq::ad
