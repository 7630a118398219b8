#include "doctest.h"

#include <random>

#include "gaitq/models.hpp"
#include "gaitq/search.hpp"
#include "support.hpp"

using namespace gaitq;

namespace {

ModelConfig config(Arch a, int variable, int bits = 8) {
  ModelConfig c;
  c.arch = a;
  c.set_variable(variable);
  c.bits = bits;
  return c;
}

std::vector<Tensor> random_inputs(std::size_t count, std::uint64_t seed, double sigma = 0.7) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < count; ++i) xs.push_back(testing::random_tensor({3, 25}, rng, sigma));
  return xs;
}

std::string final_bias(Arch a) { return a == Arch::Cnn1d || a == Arch::SepCnn1d ? "fc2.b" : "fc.b"; }

}  // namespace

TEST_CASE("channel schedule") {
  CHECK(channel_schedule(1) == std::vector<std::size_t>{3});
  CHECK(channel_schedule(3) == std::vector<std::size_t>{3, 3, 6});
  CHECK(channel_schedule(6) == std::vector<std::size_t>{3, 3, 6, 6, 12, 12});
  CHECK_THROWS_AS(channel_schedule(0), Error);
  CHECK_THROWS_AS(channel_schedule(7), Error);
}

TEST_CASE("reported parameter counts") {
  CHECK(param_count(config(Arch::Cnn1d, 3)) == 173);
  CHECK(param_count(config(Arch::SepCnn1d, 3)) == 137);
  CHECK(param_count(config(Arch::Lstm, 24)) == 2738);
  CHECK(param_count(config(Arch::Transformer, 8)) == 922);
}

TEST_CASE("parameter counts equal the built tensors over the search space") {
  for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer})
    for (int v : SearchSpace::for_arch(a).variables) {
      const ModelConfig c = config(a, v);
      CAPTURE(arch_name(a));
      CAPTURE(v);
      CHECK(Model::build(c, 1).parameter_count() == param_count(c));
    }
}

TEST_CASE("mac counts") {
  std::size_t sum = 0;
  for (const auto& l : describe(config(Arch::Cnn1d, 3))) sum += l.macs;
  CHECK(sum == mac_count(config(Arch::Cnn1d, 3)));

  const auto tr = describe(config(Arch::Transformer, 8));
  const auto attn = std::find_if(tr.begin(), tr.end(), [](const LayerInfo& l) { return l.name == "attn"; });
  REQUIRE(attn != tr.end());
  CHECK(attn->macs - 4 * 25 * 8 * 8 == 10000);

  const auto lstm = describe(config(Arch::Lstm, 24));
  CHECK(lstm.back().macs == 48);  // dense 24 -> 2
}

TEST_CASE("shape traces") {
  const auto cnn = describe(config(Arch::Cnn1d, 3));
  std::vector<std::size_t> lens;
  for (const auto& l : cnn)
    if (l.kind == "maxpool k2") lens.push_back(l.out.back());
  CHECK(lens == std::vector<std::size_t>{12, 6});
  const auto tr = describe(config(Arch::Transformer, 8));
  for (const auto& l : tr)
    if (l.name == "ffn1") CHECK(l.out.back() == 32);
  CHECK(describe(config(Arch::Lstm, 24)).back().in == Shape{24});
}

TEST_CASE("executed integer MACs equal mac_count") {
  for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer}) {
    ModelConfig c = config(a, a == Arch::Lstm ? 16 : a == Arch::Transformer ? 8 : 3);
    Model m = Model::build(c, 2);
    auto xs = random_inputs(8, 3);
    observe_ranges(m, stack_batch(xs));
    m.freeze();
    MacCounter mc;
    m.int_model()->forward(xs[0], &mc);
    CAPTURE(arch_name(a));
    CHECK(mc.macs == mac_count(c));
  }
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(config(Arch::Lstm, 20).validate(), Error);
  CHECK_THROWS_AS(config(Arch::Cnn1d, 3, 5).validate(), Error);
  ModelConfig deep = config(Arch::Cnn1d, 6);
  CHECK_THROWS_AS(deep.validate(), Error);  // 25 samples cannot be pooled five times
  deep.n = 64;
  CHECK_NOTHROW(deep.validate());
  CHECK(parse_arch("SepCNN") == Arch::SepCnn1d);
  CHECK_THROWS_AS(parse_arch("gru"), Error);
}

TEST_CASE("zero weights give the final bias in every mode") {
  for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer}) {
    CAPTURE(arch_name(a));
    Model m = Model::build(config(a, a == Arch::Lstm ? 8 : a == Arch::Transformer ? 8 : 3), 4);
    for (auto& [name, p] : m.params()) p.fill(0.0);
    m.params()[final_bias(a)] = Tensor::from({0.75, -0.5});
    auto xs = random_inputs(4, 5);
    for (Mode mode : {Mode::Float}) {
      Tensor y = m.forward(xs[0], mode);
      CHECK(y[0] == doctest::Approx(0.75));
      CHECK(y[1] == doctest::Approx(-0.5));
    }
    observe_ranges(m, stack_batch(xs));
    m.freeze();
    const double step = m.act_params("logits").scale;
    Tensor fq = m.forward(xs[1], Mode::FakeQuant);
    Tensor iq = m.forward(xs[1], Mode::Int);
    for (const Tensor& y : {fq, iq}) {
      CHECK(std::abs(y[0] - 0.75) <= step);
      CHECK(std::abs(y[1] + 0.5) <= step);
    }
  }
}

TEST_CASE("int mode needs the integer twin") {
  Model m = Model::build(config(Arch::Cnn1d, 3), 1);
  CHECK_THROWS_AS(m.forward(random_inputs(1, 1)[0], Mode::Int), Error);
  CHECK_THROWS_AS(m.forward(Tensor({3, 24}), Mode::Float), Error);
}

TEST_CASE("integer forward equals quantized fake-quant forward") {
  for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm})
    for (int bits : {4, 6, 8}) {
      CAPTURE(arch_name(a));
      CAPTURE(bits);
      Model m = Model::build(config(a, a == Arch::Lstm ? 16 : 3, bits), 100 + bits);
      auto xs = random_inputs(30, bits);
      observe_ranges(m, stack_batch(xs));
      m.freeze();
      const QuantParams& qp = m.act_params("logits");
      for (const auto& x : xs) {
        Tensor fq = m.forward(x, Mode::FakeQuant);
        QTensor iq = m.int_model()->forward(x);
        for (std::size_t k = 0; k < 2; ++k) CHECK(quantize(fq[k], qp) == iq.q[k]);
      }
    }
}

TEST_CASE("transformer depends on time order") {
  Model m = Model::build(config(Arch::Transformer, 8), 6);
  Tensor x = random_inputs(1, 7)[0], r = x;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 25; ++t) r.at(c, t) = x.at(c, 24 - t);
  Tensor a = m.forward(x, Mode::Float), b = m.forward(r, Mode::Float);
  CHECK(std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) > 1e-9);
}

TEST_CASE("serialization round trips") {
  Model m = Model::build(config(Arch::SepCnn1d, 3, 6), 8);
  auto xs = random_inputs(10, 9);
  observe_ranges(m, stack_batch(xs));
  m.freeze();
  Model back = Model::from_json(nlohmann::json::parse(m.to_json().dump()));
  CHECK(back.config() == m.config());
  for (const auto& x : xs) {
    CHECK(back.forward(x, Mode::Float) == m.forward(x, Mode::Float));
    CHECK(back.forward(x, Mode::FakeQuant) == m.forward(x, Mode::FakeQuant));
  }
  REQUIRE(back.int_model().has_value());
  CHECK(*back.int_model() == *m.int_model());
  CHECK(IntModel::from_json(m.int_model()->to_json()) == *m.int_model());
  CHECK(ModelConfig::from_json(m.config().to_json()) == m.config());
}

TEST_CASE("builds are seeded") {
  Model a = Model::build(config(Arch::Lstm, 8), 3), b = Model::build(config(Arch::Lstm, 8), 3);
  Model c = Model::build(config(Arch::Lstm, 8), 4);
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());
}
