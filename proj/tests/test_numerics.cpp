#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "thinkdraw/numerics/gradcheck.hpp"
#include "thinkdraw/numerics/ops.hpp"

using namespace thinkdraw;
using thinkdraw::testing::random_tensor;
using V = Var<double>;
using Vs = std::vector<V>;

TEST_CASE("backward of sum is all ones") {
  auto x = leaf(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  backward(ops::sum(x));
  for (double g : x.grad().data()) CHECK(g == 1.0);
}

TEST_CASE("paths accumulate when an input is used twice") {
  auto x = leaf(Tensor<double>::vector({0.5, -2, 3}), true);
  backward(ops::sum(ops::mul(x, x)));
  CHECK(x.grad() == Tensor<double>::vector({1, -4, 6}));
}

TEST_CASE("cross entropy over softmax has gradient softmax(z) - p") {
  Rng rng(3);
  const auto z = random_tensor(rng, {1, 5}, -2, 2);
  Tensor<double> p({1, 5}, {0.1, 0.2, 0.3, 0.15, 0.25});
  auto zv = leaf(z, true);
  backward(ops::cross_entropy(ops::softmax(zv), p));
  ScalarFn f = [&](const Tensor<double>& x) {
    NoGradGuard g;
    return ops::cross_entropy(ops::softmax(constant(x)), p).item();
  };
  const auto numeric = finite_diff_grad(f, z);
  double mx = *std::max_element(z.data().begin(), z.data().end());
  double zsum = 0;
  for (double v : z.data()) zsum += std::exp(v - mx);
  for (std::size_t i = 0; i < 5; ++i) {
    const double closed = std::exp(z[i] - mx) / zsum - p[i];
    CHECK(zv.grad()[i] == doctest::Approx(closed).epsilon(1e-12));
    CHECK(numeric[i] == doctest::Approx(closed).epsilon(1e-8));
  }
}

TEST_CASE("finite differences of simple functions") {
  ScalarFn sq = [](const Tensor<double>& x) {
    double s = 0;
    for (double v : x.data()) s += v * v;
    return s;
  };
  const auto g = finite_diff_grad(sq, Tensor<double>::vector({1, 2, 3}));
  CHECK(g[0] == doctest::Approx(2).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(4).epsilon(1e-8));
  CHECK(g[2] == doctest::Approx(6).epsilon(1e-8));

  const auto zero = finite_diff_grad([](const Tensor<double>&) { return 4.2; }, Tensor<double>::vector({1, 2}));
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  CHECK_THROWS_AS(finite_diff_grad([](const Tensor<double>&) { return NAN; }, Tensor<double>::vector({1})),
                  NonFiniteError);
}

TEST_CASE("every kernel passes the finite-difference check") {
  Rng rng(11);
  auto r = [&](Shape s, double lo = -1, double hi = 1) { return random_tensor(rng, std::move(s), lo, hi); };
  struct Case {
    const char* name;
    GraphFn f;
    std::vector<Tensor<double>> inputs;
  };
  const Tensor<double> target = r({2, 4});
  Tensor<double> probs_target({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25});
  std::vector<Case> cases = {
      {"add", [](const Vs& v) { return ops::sum(ops::mul(ops::add(v[0], v[1]), v[0])); }, {r({5}), r({5})}},
      {"sub", [](const Vs& v) { return ops::sum(ops::mul(ops::sub(v[0], v[1]), v[1])); }, {r({5}), r({5})}},
      {"mul scalar broadcast", [](const Vs& v) { return ops::sum(ops::mul(v[0], v[1])); }, {r({1}), r({5})}},
      {"scale", [](const Vs& v) { return ops::sum(ops::mul(ops::scale(v[0], 1.7), v[0])); }, {r({5})}},
      {"matmul", [](const Vs& v) { return ops::sum(ops::tanh(ops::matmul(v[0], v[1]))); }, {r({3, 4}), r({4, 2})}},
      {"transpose",
       [](const Vs& v) { return ops::sum(ops::mul(ops::transpose(v[0]), v[1])); },
       {r({2, 3}), r({3, 2})}},
      {"reshape", [](const Vs& v) { return ops::sum(ops::tanh(ops::reshape(v[0], {3, 2}))); }, {r({2, 3})}},
      {"concat axis0",
       [](const Vs& v) { return ops::sum(ops::tanh(ops::matmul(ops::concat<double>({v[0], v[1]}, 0), v[2]))); },
       {r({2, 3}), r({1, 3}), r({3, 2})}},
      {"concat axis1",
       [](const Vs& v) { return ops::sum(ops::exp(ops::concat<double>({v[0], v[1]}, 1))); },
       {r({2, 3}), r({2, 2})}},
      {"slice", [](const Vs& v) { return ops::sum(ops::exp(ops::slice(v[0], 1, 1, 2))); }, {r({3, 4})}},
      {"exp", [](const Vs& v) { return ops::sum(ops::exp(v[0])); }, {r({5})}},
      {"log", [](const Vs& v) { return ops::sum(ops::log(v[0])); }, {r({5}, 0.5, 2.0)}},
      {"tanh", [](const Vs& v) { return ops::sum(ops::tanh(ops::scale(v[0], 2.0))); }, {r({5})}},
      {"gelu", [](const Vs& v) { return ops::sum(ops::gelu(ops::scale(v[0], 2.0))); }, {r({5})}},
      {"softmax",
       [&](const Vs& v) { return ops::sum(ops::mul(ops::softmax(v[0]), constant(target))); },
       {r({2, 4})}},
      {"log_softmax",
       [&](const Vs& v) { return ops::sum(ops::mul(ops::log_softmax(v[0]), constant(target))); },
       {r({2, 4})}},
      {"layer_norm",
       [&](const Vs& v) { return ops::sum(ops::mul(ops::layer_norm(v[0], v[1], v[2]), constant(target))); },
       {r({2, 4}), r({4}), r({4})}},
      {"embedding",
       [](const Vs& v) { return ops::sum(ops::tanh(ops::embedding(v[0], {2, 0, 2}))); },
       {r({3, 2})}},
      {"linear",
       [](const Vs& v) { return ops::sum(ops::tanh(ops::linear(v[0], v[1], v[2]))); },
       {r({3, 2}), r({2, 4}), r({4})}},
      {"pick", [](const Vs& v) { return ops::sum(ops::exp(ops::pick(v[0], {1, 3}))); }, {r({2, 4})}},
      {"sum_last", [](const Vs& v) { return ops::sum(ops::exp(ops::sum_last(v[0]))); }, {r({2, 3})}},
      {"mean", [](const Vs& v) { return ops::mean(ops::exp(v[0])); }, {r({5})}},
      {"mse", [](const Vs& v) { return ops::mse(v[0], v[1]); }, {r({5}), r({5})}},
      {"cross_entropy",
       [&](const Vs& v) { return ops::cross_entropy(ops::softmax(v[0]), probs_target); },
       {r({2, 4})}},
      {"kl_rows", [](const Vs& v) { return ops::kl_rows(v[0], v[1]); }, {r({2, 4}), r({2, 4})}},
      {"cosine", [](const Vs& v) { return ops::cosine_similarity(v[0], v[1]); }, {r({5}), r({5})}},
      {"minimum", [](const Vs& v) { return ops::sum(ops::mul(ops::minimum(v[0], v[1]), v[0])); }, {r({5}), r({5})}},
      {"clip",
       [](const Vs& v) { return ops::sum(ops::mul(ops::clip(v[0], -0.5, 0.5), v[0])); },
       {Tensor<double>::vector({-0.9, -0.2, 0.1, 0.3, 0.8})}},
      {"attention causal",
       [&](const Vs& v) {
         return ops::sum(ops::mul(ops::attention(v[0], v[1], v[2], 2, true), constant(target)));
       },
       {r({2, 4}), r({3, 4}), r({3, 4})}},
      {"attention full",
       [&](const Vs& v) {
         return ops::sum(ops::mul(ops::attention(v[0], v[1], v[2], 1, false), constant(target)));
       },
       {r({2, 4}), r({3, 4}), r({3, 4})}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto report = check_gradients(c.f, c.inputs, 1e-6);
    INFO(report.summary());
    CHECK(report.pass);
  }
}

TEST_CASE("corrupted gradient is reported at the faulty coordinate") {
  Rng rng(5);
  const auto x = random_tensor(rng, {5});
  auto v = leaf(x, true);
  backward(ops::sum(ops::tanh(v)));
  Tensor<double> analytic = v.grad();
  analytic[3] += 1.0;
  ScalarFn f = [](const Tensor<double>& t) {
    NoGradGuard g;
    return ops::sum(ops::tanh(constant(t))).item();
  };
  const auto report = compare_gradients({analytic}, {finite_diff_grad(f, x)}, 1e-6);
  CHECK_FALSE(report.pass);
  const auto fails = report.failures();
  REQUIRE(fails.size() == 1);
  CHECK(fails[0].index == 3);
  CHECK(report.summary().find("coord 3") != std::string::npos);
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = random_tensor(rng, {3, 1 + trial % 8}, -30, 30);
    const auto p = ops::softmax(constant(z)).value();
    for (int i = 0; i < 3; ++i) {
      double s = 0;
      for (int j = 0; j < z.dim(1); ++j) {
        CHECK(p.at(i, j) >= 0.0);
        s += p.at(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("slice and concat gradients partition the whole") {
  Rng rng(9);
  const auto x = random_tensor(rng, {4, 3});
  const auto w = random_tensor(rng, {4, 3});
  auto whole = leaf(x, true);
  backward(ops::sum(ops::mul(ops::exp(whole), constant(w))));

  auto parts_src = leaf(x, true);
  auto top = ops::slice(parts_src, 0, 0, 1);
  auto bottom = ops::slice(parts_src, 0, 1, 3);
  auto rejoined = ops::concat<double>({top, bottom}, 0);
  backward(ops::sum(ops::mul(ops::exp(rejoined), constant(w))));
  CHECK(parts_src.grad() == whole.grad());
}

TEST_CASE("graph errors") {
  auto x = leaf(Tensor<double>::vector({1, 2}), true);
  CHECK_THROWS_AS(backward(ops::exp(x)), GraphError);

  auto root = ops::sum(ops::exp(x));
  backward(root);
  CHECK_THROWS_AS(backward(root), GraphError);

  auto neg = leaf(Tensor<double>::vector({-1.0}), true);
  CHECK_THROWS_AS(ops::log(neg), NonFiniteError);

  CHECK_THROWS_AS(ops::add(x, leaf(Tensor<double>::vector({1, 2, 3}))), ShapeError);
}

TEST_CASE("causal attention ignores later keys") {
  Rng rng(13);
  const auto q = random_tensor(rng, {3, 4});
  auto k = random_tensor(rng, {5, 4});
  auto v = random_tensor(rng, {5, 4});
  const auto base = ops::attention(constant(q), constant(k), constant(v), 2, true).value();
  // Query rows sit at positions 2..4 of the key sequence; change the last key.
  for (int j = 0; j < 4; ++j) {
    k.at(4, j) += 1.0;
    v.at(4, j) -= 2.0;
  }
  const auto moved = ops::attention(constant(q), constant(k), constant(v), 2, true).value();
  for (int j = 0; j < 4; ++j) {
    CHECK(moved.at(0, j) == base.at(0, j));
    CHECK(moved.at(1, j) == base.at(1, j));
  }
  bool last_changed = false;
  for (int j = 0; j < 4; ++j) last_changed = last_changed || moved.at(2, j) != base.at(2, j);
  CHECK(last_changed);
}
