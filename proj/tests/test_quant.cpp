#include "doctest.h"

#include <cmath>
#include <random>

#include "gaitq/quant.hpp"
#include "support.hpp"

using namespace gaitq;

namespace {

// round(num / 2^shift) with ties away from zero, by exact integer division.
std::int64_t exact_round_shift(__int128 num, int shift) {
  if (shift <= 0) return static_cast<std::int64_t>(num * (__int128{1} << -shift));
  const __int128 den = __int128{1} << shift;
  const __int128 mag = num < 0 ? -num : num;
  __int128 q = mag / den;
  if (2 * (mag % den) >= den) ++q;
  return static_cast<std::int64_t>(num < 0 ? -q : q);
}

}  // namespace

TEST_CASE("bitwidth ranges") {
  CHECK(quant_range(4) == std::pair<std::int64_t, std::int64_t>{-8, 7});
  CHECK(quant_range(6) == std::pair<std::int64_t, std::int64_t>{-32, 31});
  CHECK(quant_range(8) == std::pair<std::int64_t, std::int64_t>{-128, 127});
  CHECK_FALSE(is_supported_bitwidth(5));
  CHECK_THROWS_AS(quant_range(5), Error);
  CHECK_THROWS_AS(QuantParams(5, 1.0), Error);
}

TEST_CASE("quantize examples") {
  QuantParams q4(4, 0.5);
  CHECK(quantize(1.0, q4) == 2);
  CHECK(quantize(100.0, q4) == 7);
  CHECK(quantize(-100.0, q4) == -8);
  CHECK(quantize(1.5, QuantParams(8, 1.0)) == 2);
  CHECK(quantize(-1.5, QuantParams(8, 1.0)) == -2);
  CHECK(round_half_away(2.5) == 3.0);
  CHECK(round_half_away(-2.5) == -3.0);
}

TEST_CASE("fake quantization is idempotent") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0, 3);
  for (int bits : {4, 6, 8}) {
    QuantParams qp(bits, 0.125);
    for (int i = 0; i < 500; ++i) {
      const double x = d(rng);
      const double once = fake_quantize(x, qp);
      CHECK(fake_quantize(once, qp) == once);
      CHECK(std::abs(once) <= 128 * 0.125);
    }
  }
}

TEST_CASE("straight-through mask") {
  QuantParams qp(4, 0.5);
  CHECK(ste_passes(0.0, qp));
  CHECK(ste_passes(3.5, qp));
  CHECK(ste_passes(-4.0, qp));
  CHECK_FALSE(ste_passes(3.6, qp));
  CHECK_FALSE(ste_passes(-4.1, qp));
}

TEST_CASE("power-of-two snapping") {
  CHECK(snap_pow2(0.3) == 0.5);
  CHECK(snap_pow2(0.25) == 0.25);
  CHECK(snap_pow2(3.0) == 4.0);
  CHECK(pow2_exponent(0.125) == -3);
  QuantParams w = weight_params(Tensor::from({0.2, -1.0, 0.5}), 8);
  CHECK(w.scale == 1.0 / 64);  // 1/127 snapped up
  CHECK(quantize(-1.0, w) == -64);
}

TEST_CASE("calibration") {
  std::vector<std::pair<double, double>> one{{-1, 1}};
  CHECK(calibrate(one, 0.1, 8).scale == doctest::Approx(1.0 / 127));

  std::vector<std::pair<double, double>> obs{{-2, 2}, {-4, 6}, {0, 1}};
  // lo: -2 -> -3 -> -1.5 ; hi: 2 -> 4 -> 2.5
  RangeTracker t(0.5);
  for (auto [lo, hi] : obs) t.observe(lo, hi);
  CHECK(t.lo() == doctest::Approx(-1.5));
  CHECK(t.hi() == doctest::Approx(2.5));
  CHECK(calibrate(obs, 0.5, 4).scale == doctest::Approx(2.5 / 7));
  CHECK_THROWS_AS(calibrate(std::span<const std::pair<double, double>>{}, 0.1, 8), Error);
  CHECK_THROWS_AS(RangeTracker().lo(), Error);
}

TEST_CASE("fixed-point multiplier") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> e(-20, 10);
  for (int i = 0; i < 1000; ++i) {
    const double r = std::exp2(e(rng));
    auto f = FixedPointMultiplier::from_ratio(r);
    CHECK(f.mantissa >= (1 << 30));
    CHECK(std::abs(f.value() - r) <= r * std::ldexp(1.0, -30));
  }
  CHECK_THROWS_AS(FixedPointMultiplier::from_ratio(0.0), Error);
  CHECK_THROWS_AS(FixedPointMultiplier::from_ratio(-1.0), Error);
}

TEST_CASE("requantize agrees with exact rational rounding") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> acc(-2000000, 2000000);
  std::uniform_real_distribution<double> e(-24, 0);
  QuantParams out(8, 1.0);
  for (int i = 0; i < 20000; ++i) {
    const auto f = FixedPointMultiplier::from_ratio(std::exp2(e(rng)));
    const std::int64_t a = acc(rng);
    const __int128 num = static_cast<__int128>(a) * f.mantissa;
    const std::int64_t want = std::clamp<std::int64_t>(exact_round_shift(num, f.shift), -128, 127);
    CHECK(requantize(a, f, out) == want);
  }
  CHECK_THROWS_AS(requantize(std::int64_t{1} << 40, FixedPointMultiplier::from_ratio(0.5), out), Error);
}

TEST_CASE("rounding_divide brute force") {
  for (std::int64_t den = 1; den <= 12; ++den)
    for (std::int64_t num = -60; num <= 60; ++num) {
      const double q = static_cast<double>(num) / static_cast<double>(den);
      CHECK(rounding_divide(num, den) == static_cast<std::int64_t>(round_half_away(q)));
    }
  CHECK_THROWS_AS(rounding_divide(1, 0), Error);
}

TEST_CASE("shift_round") {
  CHECK(shift_round(3, 0, 1) == 2);   // 1.5 -> 2
  CHECK(shift_round(-3, 0, 1) == -2);
  CHECK(shift_round(5, -2, 0) == 1);  // 1.25 -> 1
  CHECK(shift_round(3, 2, 0) == 12);
}

TEST_CASE("batchnorm folding") {
  std::mt19937_64 rng(4);
  Tensor w = testing::random_tensor({4, 3, 3}, rng), b = testing::random_tensor({4}, rng);

  SUBCASE("identity statistics leave the layer unchanged") {
    BatchNormParams bn{Tensor({4}, 1.0), Tensor({4}), Tensor({4}), Tensor({4}, 1.0), 0.0};
    auto [wf, bf] = fold_batchnorm(w, b, bn);
    CHECK(wf == w);
    CHECK(bf == b);
  }
  SUBCASE("gamma zero leaves beta") {
    Tensor beta = testing::random_tensor({4}, rng);
    BatchNormParams bn{Tensor({4}), beta, testing::random_tensor({4}, rng), testing::positive_tensor({4}, rng)};
    auto [wf, bf] = fold_batchnorm(w, b, bn);
    for (double v : wf.data()) CHECK(v == 0.0);
    CHECK(bf == beta);
  }
  SUBCASE("folded conv equals conv followed by batchnorm") {
    BatchNormParams bn{testing::random_tensor({4}, rng), testing::random_tensor({4}, rng),
                       testing::random_tensor({4}, rng), testing::positive_tensor({4}, rng)};
    Tensor x = testing::random_tensor({3, 10}, rng);
    auto [wf, bf] = fold_batchnorm(w, b, bn);
    Tensor folded = ops::conv1d(x, wf, bf);
    ops::BatchNormState st{bn.mean, bn.var, 0.1, bn.eps};
    Tensor y = ops::conv1d(x, w, b).reshaped({1, 4, 10});
    Tensor ref = ops::batchnorm1d(y, bn.gamma, bn.beta, st, ops::BnMode::Eval);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(folded[i] - ref[i]) < 1e-5);
  }
  SUBCASE("negative variance is rejected") {
    BatchNormParams bn{Tensor({4}, 1.0), Tensor({4}), Tensor({4}), Tensor({4}, -1.0)};
    CHECK_THROWS_AS(fold_batchnorm(w, b, bn), Error);
  }
}
