#include "doctest.h"

#include <random>

#include "gaitq/models.hpp"
#include "gradcheck_cases.hpp"

using namespace gaitq;
using namespace gaitq::testing;

TEST_CASE("finite-difference checks for every op") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    for (auto& c : gradient_cases(seed)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      CHECK(gradient_error(c.inputs, c.fn, seed) < 1e-4);
    }
}

TEST_CASE("sum has an all-ones gradient") {
  ad::Tape t;
  ad::Var x = t.variable(Tensor({2, 3}, {1, -2, 3, 4, 5, 6}));
  t.backward(ad::sum(t, x));
  const Tensor g = t.grad(x);
  for (double v : g.data()) CHECK(v == 1.0);
}

TEST_CASE("constants receive no gradient") {
  ad::Tape t;
  ad::Var a = t.variable(Tensor::from({1, 2})), b = t.constant(Tensor::from({3, 4}));
  t.backward(ad::sum(t, ad::mul(t, a, b)));
  CHECK(t.grad(a) == Tensor::from({3, 4}));
  CHECK_FALSE(t.requires_grad(b));
}

TEST_CASE("fake_quant passes gradients straight through inside the range") {
  QuantParams qp(4, 0.5);  // representable [-4, 3.5]
  ad::Tape t;
  ad::Var x = t.variable(Tensor::from({0.3, -3.9, 3.5, 3.7, -4.2}));
  ad::Var y = ad::fake_quant(t, x, qp);
  CHECK(t.value(y) == Tensor::from({0.5, -4.0, 3.5, 3.5, -4.0}));
  t.backward(ad::sum(t, y));
  CHECK(t.grad(x) == Tensor::from({1, 1, 1, 0, 0}));
}

TEST_CASE("backward preconditions") {
  ad::Tape empty;
  CHECK_THROWS_AS(empty.backward(ad::Var{0}), Error);
  ad::Tape nograd(false);
  ad::Var x = nograd.variable(Tensor::from({1}));
  CHECK_THROWS_AS(nograd.backward(x), Error);
  ad::Tape t;
  ad::Var v = t.variable(Tensor::from({1, 2}));
  CHECK_THROWS_AS(t.backward(v), Error);
}

TEST_CASE("backward visits nodes in reverse order") {
  ad::Tape t;
  ad::Var x = t.variable(Tensor::from({1, 2}));
  ad::Var y = ad::scale(t, x, 2.0);
  ad::Var z = ad::mul(t, y, y);
  ad::Var l = ad::sum(t, z);
  t.backward(l);
  const auto& order = t.backward_order();
  REQUIRE(order.size() == 3);
  CHECK(order[0] == l.id);
  CHECK(order[1] == z.id);
  CHECK(order[2] == y.id);
  CHECK(t.grad(x) == Tensor::from({8, 16}));  // d/dx 4x^2
}

TEST_CASE("whole-model gradients match finite differences") {
  for (Arch a : {Arch::Cnn1d, Arch::SepCnn1d, Arch::Lstm, Arch::Transformer})
    for (Pass pass : {Pass::FloatTrain, Pass::FloatEval}) {
      CAPTURE(arch_name(a));
      ModelConfig cfg;
      cfg.arch = a;
      if (a == Arch::Lstm) cfg.h_size = 8;
      Model base = Model::build(cfg, 11);
      std::mt19937_64 rng(12);
      Tensor x = random_tensor({4, 3, 25}, rng);
      const std::vector<int> labels{0, 1, 1, 0};

      auto loss = [&](Model m, std::map<std::string, Tensor>* grads) {
        ad::Tape t;
        GraphOut g = build_graph(t, m, x, pass);
        ad::Var l = ad::cross_entropy(t, g.logits, labels);
        if (grads) {
          t.backward(l);
          for (auto& [name, v] : g.params) (*grads)[name] = t.grad(v);
        }
        return t.value(l)[0];
      };
      std::map<std::string, Tensor> grads;
      loss(base, &grads);
      REQUIRE(grads.size() == base.params().size());

      double diff2 = 0, a2 = 0, n2 = 0;
      const double h = 1e-6;
      for (auto& [name, p] : base.params()) {
        for (std::size_t j = 0; j < p.size(); j += 1 + p.size() / 8) {
          Model up = base, down = base;
          up.params()[name][j] += h;
          down.params()[name][j] -= h;
          const double num = (loss(up, nullptr) - loss(down, nullptr)) / (2 * h);
          const double ana = grads[name][j];
          diff2 += (num - ana) * (num - ana);
          a2 += ana * ana;
          n2 += num * num;
        }
      }
      CHECK(std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2)) < 1e-4);
    }
}
