#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "gaitq/tensor.hpp"
#include "support.hpp"

using namespace gaitq;
using gaitq::testing::random_tensor;

namespace {

void check_close(const Tensor& a, const Tensor& b, double tol = 1e-12) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

// Direct definition of same-padded correlation, used as the oracle.
double conv_ref(const Tensor& x, const Tensor& w, std::size_t o, std::size_t t) {
  const long k = static_cast<long>(w.dim(2)), pad = k / 2, len = static_cast<long>(x.dim(1));
  double acc = 0;
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (long j = 0; j < k; ++j) {
      const long src = static_cast<long>(t) + j - pad;
      if (src >= 0 && src < len) acc += w.at(o, c, j) * x.at(c, src);
    }
  return acc;
}

}  // namespace

TEST_CASE("conv1d examples") {
  Tensor x({1, 4}, {1, 0, 2, 0});
  Tensor w({1, 1, 3}, {1, 1, 1});
  CHECK(ops::conv1d(x, w, Tensor({1})) == Tensor({1, 4}, {1, 3, 2, 2}));

  Tensor id({1, 1, 3}, {0, 1, 0});
  CHECK(ops::conv1d(x, id, Tensor({1})) == x);

  Tensor wb({1, 1, 3}, {1, 1, 1});
  CHECK(ops::conv1d(x, wb, Tensor({1}, {0.5})) == Tensor({1, 4}, {1.5, 3.5, 2.5, 2.5}));
}

TEST_CASE("conv1d matches the direct sum") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({3, 11}, rng), w = random_tensor({4, 3, 5}, rng), b = random_tensor({4}, rng);
  Tensor y = ops::conv1d(x, w, b);
  REQUIRE(y.shape() == Shape{4, 11});
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t t = 0; t < 11; ++t) CHECK(y.at(o, t) == doctest::Approx(conv_ref(x, w, o, t) + b[o]));
}

TEST_CASE("kernel-1 conv equals a dense map per time step") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 6}, rng), w = random_tensor({2, 3, 1}, rng), b = random_tensor({2}, rng);
  Tensor y = ops::conv1d(x, w, b);
  Tensor wd = w.reshaped({2, 3});
  Tensor yt = ops::dense_rows(ops::transpose(x), wd, b);
  check_close(ops::transpose(yt), y);
}

TEST_CASE("conv1d rejects even kernels and channel mismatch") {
  CHECK_THROWS_AS(ops::conv1d(Tensor({1, 4}), Tensor({1, 1, 2}), Tensor({1})), Error);
  CHECK_THROWS_AS(ops::conv1d(Tensor({2, 4}), Tensor({1, 1, 3}), Tensor({1})), Error);
}

TEST_CASE("depthwise conv equals per-channel conv") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 9}, rng), w = random_tensor({3, 3}, rng), b = random_tensor({3}, rng);
  Tensor y = ops::depthwise_conv1d(x, w, b);
  for (std::size_t c = 0; c < 3; ++c) {
    Tensor xc({1, 9}), wc({1, 1, 3}), bc({1}, {b[c]});
    for (std::size_t t = 0; t < 9; ++t) xc[t] = x.at(c, t);
    for (std::size_t j = 0; j < 3; ++j) wc[j] = w.at(c, j);
    Tensor yc = ops::conv1d(xc, wc, bc);
    for (std::size_t t = 0; t < 9; ++t) CHECK(y.at(c, t) == doctest::Approx(yc[t]));
  }
}

TEST_CASE("depthwise then pointwise with one input channel equals conv1d") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({1, 8}, rng), dw = random_tensor({1, 3}, rng), pw = random_tensor({4, 1, 1}, rng);
  Tensor z = ops::conv1d(ops::depthwise_conv1d(x, dw, Tensor({1})), pw, Tensor({4}));
  Tensor full({4, 1, 3});
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t j = 0; j < 3; ++j) full.at(o, 0, j) = pw[o] * dw[j];
  check_close(z, ops::conv1d(x, full, Tensor({4})), 1e-12);
}

TEST_CASE("maxpool1d examples") {
  CHECK(ops::maxpool1d(Tensor({1, 4}, {1, 3, 2, 5})) == Tensor({1, 2}, {3, 5}));
  CHECK(ops::maxpool1d(Tensor({1, 5}, {1, 2, 3, 4, 9})).shape() == Shape{1, 2});
  CHECK(ops::maxpool1d(Tensor({1, 2}, {-1, -3})) == Tensor({1, 1}, {-1}));
}

TEST_CASE("global average pool") {
  CHECK(ops::global_avg_pool(Tensor({2, 3}, {1, 2, 3, -1, -1, 5})) == Tensor({2}, {2, 1}));
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({3, 10}, rng), p = x;
  std::vector<std::size_t> perm(10);
  for (std::size_t i = 0; i < 10; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 10; ++t) p.at(c, t) = x.at(c, perm[t]);
  check_close(ops::global_avg_pool(p), ops::global_avg_pool(x), 1e-12);
}

TEST_CASE("dense example") {
  Tensor y = ops::dense(Tensor::from({1, 1}), Tensor::matrix({{1, 2}, {3, 4}}), Tensor::from({0, 1}));
  CHECK(y == Tensor::from({3, 8}));
  CHECK_THROWS_AS(ops::dense(Tensor::from({1, 1, 1}), Tensor::matrix({{1, 2}}), Tensor::from({0})), Error);
}

TEST_CASE("batchnorm identities") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({4, 3, 5}, rng);
  auto st = ops::BatchNormState::identity(3);
  Tensor y = ops::batchnorm1d(x, Tensor({3}, 1.0), Tensor({3}, 0.0), st, ops::BnMode::Eval);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-5));

  Tensor beta({3}, {0.5, -1, 2});
  Tensor z = ops::batchnorm1d(x, Tensor({3}, 0.0), beta, st, ops::BnMode::Train);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 5; ++t) CHECK(z.at(b, c, t) == doctest::Approx(beta[c]));

  Tensor same({2, 2}, {3, -2, 3, -2});
  auto st2 = ops::BatchNormState::identity(2);
  Tensor s = ops::batchnorm1d(same, Tensor({2}, 1.0), Tensor({2}, 0.0), st2, ops::BnMode::Train);
  for (double v : s.data()) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("batchnorm train updates running statistics") {
  Tensor x({2, 1}, {1, 3});
  auto st = ops::BatchNormState::identity(1);
  ops::batchnorm1d(x, Tensor({1}, 1.0), Tensor({1}, 0.0), st, ops::BnMode::Train);
  CHECK(st.running_mean[0] == doctest::Approx(0.9 * 0 + 0.1 * 2));
  CHECK(st.running_var[0] > 0.9);
}

TEST_CASE("hard activations") {
  CHECK(ops::hardsigmoid(0) == 0.5);
  CHECK(ops::hardsigmoid(2) == 1.0);
  CHECK(ops::hardsigmoid(-2) == 0.0);
  CHECK(ops::hardsigmoid(1) == 0.75);
  CHECK(ops::hardtanh(10) == 1.0);
  CHECK(ops::hardtanh(-10) == -1.0);
  CHECK(ops::hardtanh(0.3) == 0.3);
  CHECK(ops::relu(-1) == 0.0);
  CHECK(ops::relu(2.5) == 2.5);
}

TEST_CASE("lstm cell") {
  SUBCASE("zero weights halve the cell state") {
    ops::LstmWeights w{Tensor({8, 3}), Tensor({8, 2}), Tensor({8})};
    auto [h, c] = ops::lstm_cell(Tensor::from({1, 2, 3}), Tensor({2}), Tensor::from({0.8, -0.4}), w);
    CHECK(c == Tensor::from({0.4, -0.2}));
    CHECK(h == Tensor::from({0.2, -0.1}));
  }
  SUBCASE("saturated gates") {
    ops::LstmWeights w{Tensor({4, 1}), Tensor({4, 1}), Tensor({4}, {10, -10, 10, 10})};
    auto [h, c] = ops::lstm_cell(Tensor::from({0}), Tensor({1}), Tensor::from({5}), w);
    CHECK(c[0] == 1.0);  // forget gate closed, input and candidate at 1
    CHECK(h[0] == 1.0);
  }
  SUBCASE("scalar hand check") {
    // pre = (0.4, 1.0, 0.5, -0.4) with x=1, h=0.5, c=0.2
    ops::LstmWeights w{Tensor({4, 1}, {0.2, 0.5, 0.5, -0.4}), Tensor({4, 1}, {0.4, 1.0, 0, 0}),
                       Tensor({4}, {0, 0, 0, 0})};
    auto [h, c] = ops::lstm_cell(Tensor::from({1}), Tensor::from({0.5}), Tensor::from({0.2}), w);
    const double ig = 0.6, fg = 0.75, gg = 0.5, og = 0.4;
    CHECK(c[0] == doctest::Approx(fg * 0.2 + ig * gg));
    CHECK(h[0] == doctest::Approx(og * (fg * 0.2 + ig * gg)));
  }
}

TEST_CASE("attention") {
  std::mt19937_64 rng(9);
  const std::size_t n = 5, d = 4;
  ops::AttentionWeights w{random_tensor({d, d}, rng), random_tensor({d}, rng), random_tensor({d, d}, rng),
                          random_tensor({d}, rng), random_tensor({d, d}, rng), random_tensor({d}, rng),
                          random_tensor({d, d}, rng), random_tensor({d}, rng)};
  Tensor x = random_tensor({n, d}, rng);

  Tensor a = ops::attention_weights(x, w);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
    CHECK(s == doctest::Approx(1.0));
  }

  SUBCASE("zero keys average the values") {
    w.wk.fill(0);
    w.bk.fill(0);
    Tensor y = ops::one_head_attention(x, w);
    Tensor v = ops::dense_rows(x, w.wv, w.bv);
    Tensor mean({1, d});
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) mean.at(0, c) += v.at(j, c) / n;
    Tensor expect = ops::dense_rows(mean, w.wo, w.bo);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) CHECK(y.at(i, c) == doctest::Approx(expect.at(0, c)));
  }
  SUBCASE("single token attends to itself") {
    Tensor x1 = random_tensor({1, d}, rng);
    CHECK(ops::attention_weights(x1, w)[0] == doctest::Approx(1.0));
    Tensor v = ops::dense_rows(x1, w.wv, w.bv);
    check_close(ops::one_head_attention(x1, w), ops::dense_rows(v, w.wo, w.bo), 1e-12);
  }
}

TEST_CASE("softmax rows are shift invariant") {
  Tensor s = Tensor::matrix({{1, 2, 3}, {0, 0, 0}});
  Tensor t = Tensor::matrix({{101, 102, 103}, {-5, -5, -5}});
  check_close(ops::softmax_rows(s), ops::softmax_rows(t), 1e-12);
  CHECK(ops::softmax_rows(s).at(1, 0) == doctest::Approx(1.0 / 3));
}
