#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mlmlab/tensor.hpp"

using namespace mlmlab;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  return Tensor::randn(std::move(shape), 1.0, rng, requires_grad);
}

}  // namespace

TEST_CASE("softmax symmetry and normalization") {
  auto t = Tensor::from_data({2}, {0.0, 0.0});
  auto y = softmax_lastdim(t);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(11);
  auto x = random_tensor({4, 7}, rng, false);
  auto s = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double total = 0.0;
    for (int c = 0; c < 7; ++c) total += s.values()[r * 7 + c];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax of a fully masked row is zero, not NaN") {
  auto x = Tensor::from_data({1, 3}, {1.0, 2.0, 3.0}, true);
  std::vector<uint8_t> keep = {0, 0, 0};
  auto filled = masked_fill(x, keep, -std::numeric_limits<double>::infinity());
  auto y = softmax_lastdim(filled);
  for (double v : y.values()) CHECK(v == 0.0);
  backward(sum(y));
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("layer_norm of a constant vector is zero") {
  auto x = Tensor::from_data({1, 4}, {3.0, 3.0, 3.0, 3.0});
  auto y = layer_norm(x);
  for (double v : y.values()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("GELU reference values from the erf form") {
  CHECK(gelu_scalar(0.0) == 0.0);
  // x * Phi(x) at x = 1, Phi from the complementary error function
  const double expected = 1.0 * 0.5 * (1.0 + std::erf(1.0 / M_SQRT2));
  CHECK(expected == doctest::Approx(0.841345).epsilon(1e-6));
  auto t = Tensor::from_data({2}, {0.0, 1.0});
  auto y = gelu(t);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == doctest::Approx(0.841345).epsilon(1e-6));
}

TEST_CASE("backward on sum gives all-ones") {
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward accumulates across calls without reset") {
  auto x = Tensor::from_data({3}, {1, 2, 3}, true);
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  for (double g : x.grad()) CHECK(g == 2.0);
  x.zero_grad();
  backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("product rule on scalars") {
  auto x = Tensor::from_data({1}, {3.0}, true);
  auto y = Tensor::from_data({1}, {5.0}, true);
  backward(mul(x, y));
  CHECK(x.grad()[0] == 5.0);
  CHECK(y.grad()[0] == 3.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS(backward(add(x, x)));
}

TEST_CASE("matmul batched against shared weight") {
  // [2,2,3] x [3,2]
  auto a = Tensor::from_data({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  auto w = Tensor::from_data({3, 2}, {1, 0, 0, 1, 1, 1});
  auto c = matmul(a, w);
  CHECK(c.shape() == Shape{2, 2, 2});
  // row [1,2,3] -> [1+3, 2+3]
  CHECK(c.values()[0] == 4.0);
  CHECK(c.values()[1] == 5.0);
  CHECK(c.values()[6] == doctest::Approx(10 + 12));
  CHECK(c.values()[7] == doctest::Approx(11 + 12));
}

TEST_CASE("matmul shape error names the op") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), std::runtime_error);
}

TEST_CASE("dropout identity cases") {
  Rng rng(3);
  auto x = Tensor::from_data({4}, {1, 2, 3, 4});
  auto y = dropout(x, 0.5, /*train=*/false, rng);
  CHECK(y.node() == x.node());
  auto z = dropout(x, 0.0, /*train=*/true, rng);
  CHECK(z.node() == x.node());
  // at train time kept entries are scaled by 1/(1-rate)
  Rng rng2(3);
  auto w = dropout(x, 0.5, /*train=*/true, rng2);
  for (size_t i = 0; i < 4; ++i) {
    const double v = w.values()[i];
    CHECK((v == 0.0 || v == doctest::Approx(x.values()[i] * 2.0)));
  }
}

TEST_CASE("quadratic form gradient is exact to finite differences") {
  Rng rng(17);
  auto x = random_tensor({6}, rng);
  auto q = random_tensor({6, 6}, rng, false);
  auto f = [&](Tensor& t) {
    auto row = reshape(t, {1, 6});
    return sum(matmul(matmul(row, q), transpose(row)));
  };
  CHECK(finite_difference_check(f, x, 1e-5) < 1e-9);
}

TEST_CASE("constant function has zero gradient both ways") {
  Rng rng(4);
  auto x = random_tensor({5}, rng);
  auto c = Tensor::scalar(2.5);
  auto f = [&](Tensor&) { return scale(c, 1.0); };
  CHECK(finite_difference_check(f, x, 1e-5) == 0.0);
}

TEST_CASE("every primitive passes finite differences on random shapes") {
  // 10 seeds per primitive, tolerance 1e-6 (float64, h = 1e-5)
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const int64_t m = 2 + rng.uniform_int(3);
    const int64_t n = 2 + rng.uniform_int(3);
    const int64_t k = 2 + rng.uniform_int(3);

    SUBCASE("") {}  // keep doctest quiet about empty body

    {
      auto x = random_tensor({m, n}, rng);
      auto y = random_tensor({m, n}, rng, false);
      auto f = [&](Tensor& t) { return sum(mul(add(t, y), sub(t, y))); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, k}, rng);
      auto w = random_tensor({k, n}, rng, false);
      auto v = random_tensor({n, m}, rng, false);
      auto f = [&](Tensor& t) { return sum(matmul(t, w)); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
      auto g = [&](Tensor& t) { return sum(matmul(v, t)); };  // t as the right operand
      CHECK(finite_difference_check(g, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({2, m, n}, rng);
      auto f = [&](Tensor& t) { return sum(mul(permute(t, {1, 0, 2}), permute(t, {1, 0, 2}))); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) { return sum(gelu(reshape(t, {n, m}))); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-4);  // gelu curvature near 0
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) { return sum(mul(softmax_lastdim(t), t)); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) { return sum(mul(layer_norm(t), t)); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) { return sum(tanh_op(t)); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m + 2, n}, rng);
      std::vector<int64_t> ids = {0, m, 1, m + 1, 0};
      auto f = [&](Tensor& t) {
        auto rows = gather_rows(t, ids, {static_cast<int64_t>(ids.size())});
        return sum(mul(rows, rows));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, 5}, rng);
      std::vector<int64_t> index;
      Rng ir(seed + 100);
      for (int64_t i = 0; i < m * 3; ++i) index.push_back(ir.uniform_int(5));
      auto f = [&](Tensor& t) {
        auto g = gather_last(t, index, 3);
        return sum(mul(g, g));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) {
        auto parts = concat({slice(t, 0, 0, 1), slice(t, 0, 1, m)}, 0);
        return sum(mul(parts, parts));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({n, k}, rng);
      auto f = [&](Tensor& t) {
        auto e = expand_leading(t, 3);
        return sum(mul(e, e));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, 4}, rng);
      std::vector<int64_t> targets(m);
      Rng tr(seed + 7);
      for (auto& t : targets) t = tr.uniform_int(4);
      targets[0] = -1;  // one ignored row
      if (m < 2) targets[0] = 0;
      auto f = [&](Tensor& t) { return cross_entropy(t, targets, -1); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      std::vector<uint8_t> keep(m * n, 1);
      keep[0] = 0;
      keep[m * n - 1] = 0;
      auto f = [&](Tensor& t) {
        auto y = masked_fill(t, keep, -1e30);
        return sum(mul(softmax_lastdim(y), t));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
    {
      auto x = random_tensor({m, n}, rng);
      auto f = [&](Tensor& t) { return mean(mul(t, t)); };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-6);
    }
  }
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  auto logits = Tensor::zeros({3, 8});
  std::vector<int64_t> targets = {1, 5, 7};
  auto loss = cross_entropy(logits, targets);
  CHECK(loss.item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy rejects all-ignored targets") {
  auto logits = Tensor::zeros({2, 4});
  std::vector<int64_t> targets = {-1, -1};
  CHECK_THROWS(cross_entropy(logits, targets));
}

TEST_CASE("finite_difference_check validates the step size") {
  Rng rng(5);
  auto x = random_tensor({3}, rng);
  auto f = [](Tensor& t) { return sum(t); };
  CHECK_THROWS_AS(finite_difference_check(f, x, 1e-2), UsageError);
}
