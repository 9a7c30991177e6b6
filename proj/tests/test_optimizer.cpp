#include <catch2/catch_amalgamated.hpp>

#include "cadmil/graph.hpp"
#include "cadmil/nn.hpp"
#include "cadmil/optim.hpp"

using cadmil::AdamOptimizer;
using cadmil::Graph;
using cadmil::ParamRef;
using cadmil::Shape;
using cadmil::Tensor;

TEST_CASE("zero gradient and zero decay leaves parameters unchanged") {
  Tensor<double> w(Shape{3}, 1.25);
  AdamOptimizer<double> opt({{"w", &w, true}}, 1e-2, 0.0);
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    opt.step();
  }
  for (double v : w.data) CHECK(v == 1.25);
}

TEST_CASE("decay-only updates shrink weights monotonically") {
  Tensor<double> w(Shape{1}, 1.0);
  AdamOptimizer<double> opt({{"w", &w, true}}, 1e-3, 0.001);
  double prev = w.data[0];
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    opt.step();
    CHECK(w.data[0] < prev);
    CHECK(w.data[0] > 0.0);
    prev = w.data[0];
  }
}

TEST_CASE("decay never touches biases") {
  Tensor<double> b(Shape{1}, 1.0);
  AdamOptimizer<double> opt({{"b", &b, false}}, 1e-3, 0.5);
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    opt.step();
  }
  CHECK(b.data[0] == 1.0);
}

TEST_CASE("scalar quadratic converges to its optimum") {
  Tensor<double> w(Shape{1}, -4.0);
  AdamOptimizer<double> opt({{"w", &w, true}}, 1e-2, 0.0);
  for (int i = 0; i < 5000; ++i) {
    opt.zero_grad();
    Graph<double> g;
    const int diff = g.sub(g.param(w), g.leaf(Tensor<double>(Shape{1}, 3.0)));
    g.backward(g.mul(diff, diff));
    opt.step();
  }
  CHECK(std::fabs(w.data[0] - 3.0) < 1e-3);
}

TEST_CASE("identical seeds give bitwise-identical training trajectories") {
  auto run = [](uint64_t seed) {
    cadmil::Rng rng(seed);
    cadmil::DenseLayer<float> layer;
    layer.init(4, 6, rng);
    std::vector<ParamRef<float>> refs;
    layer.collect("layer", refs);
    AdamOptimizer<float> opt(refs, 1e-3f, 1e-3f);
    for (int it = 0; it < 25; ++it) {
      opt.zero_grad();
      Tensor<float> x(Shape{6});
      for (auto& v : x.data) v = static_cast<float>(rng.normal());
      Graph<float> g;
      const int y = layer.apply(g, g.leaf(x));
      g.backward(g.mse(y, g.leaf(Tensor<float>(Shape{4}, 0.5f))));
      opt.step();
    }
    return layer.w.data;
  };
  const auto a = run(42), b = run(42), c = run(43);
  REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  REQUIRE(std::memcmp(a.data(), c.data(), a.size() * sizeof(float)) != 0);
}

TEST_CASE("train config validation") {
  cadmil::TrainConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.iteration_count = 20500;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.iteration_count = 20000;
  cfg.dropout_rate = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.dropout_rate = 0.5;
  cfg.l2_coefficient = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}
