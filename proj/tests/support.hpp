#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <random>
#include <vector>

#include "gaitq/autodiff.hpp"
#include "gaitq/tensor.hpp"

namespace gaitq::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, sigma);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline Tensor positive_tensor(Shape shape, std::mt19937_64& rng, double lo = 0.5, double hi = 2.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Moves entries within `gap` of any kink to kink +- gap.
inline void avoid_kinks(Tensor& t, std::initializer_list<double> kinks, double gap = 1e-2) {
  for (double& v : t.data())
    for (double k : kinks)
      if (std::abs(v - k) < gap) v = v < k ? k - gap : k + gap;
}

using GraphFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Norm-wise relative error between tape gradients and central differences
/// of L = sum(f(inputs) * R) for a fixed random R, worst over all inputs.
inline double gradient_error(std::vector<Tensor> inputs, const GraphFn& f, std::uint64_t seed, double h = 1e-5) {
  Tensor r;
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  auto loss = [&](const std::vector<Tensor>& in, std::vector<Tensor>* grads) {
    ad::Tape t(true);
    std::vector<ad::Var> vs;
    for (const auto& x : in) vs.push_back(t.variable(x));
    const ad::Var y = f(t, vs);
    if (r.empty()) r = random_tensor(t.value(y).shape(), rng);
    const ad::Var l = ad::sum(t, ad::mul(t, y, t.constant(r)));
    if (grads) {
      t.backward(l);
      for (const auto& v : vs) grads->push_back(t.grad(v));
    }
    return t.value(l)[0];
  };
  std::vector<Tensor> analytic;
  loss(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + h;
      const double up = loss(inputs, nullptr);
      inputs[i][j] = keep - h;
      const double down = loss(inputs, nullptr);
      inputs[i][j] = keep;
      const double num = (up - down) / (2 * h);
      const double ana = analytic[i][j];
      diff2 += (num - ana) * (num - ana);
      a2 += ana * ana;
      n2 += num * num;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    if (denom > 1e-12) worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace gaitq::testing
