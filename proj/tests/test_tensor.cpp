// Copyright 2026 The capdetect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <random>

#include "capdetect/errors.hpp"
#include "capdetect/grad_check.hpp"
#include "capdetect/tensor.hpp"
#include "doctest.h"

using namespace capdetect;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Plain central differences, written out here so the check does not go
// through grad_check().
std::vector<double> numeric_grad(const ScalarFn& f, Tensor p, double step) {
  std::vector<double> out(p.numel());
  auto v = p.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    Graph g1(false);
    const double up = f(g1).item();
    v[i] = orig - step;
    Graph g2(false);
    const double down = f(g2).item();
    v[i] = orig;
    out[i] = (up - down) / (2 * step);
  }
  return out;
}

}  // namespace

TEST_CASE("matmul: identity and worked product") {
  Graph g;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor col({2, 1}, {5, 6});
  auto y = g.matmul(eye, col);
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.at(0) == 5.0);
  CHECK(y.at(1) == 6.0);

  Tensor a({2, 2}, {1, 2, 3, 4});
  auto z = g.matmul(a, col);
  CHECK(z.at(0) == 17.0);
  CHECK(z.at(1) == 39.0);
}

TEST_CASE("matmul: dimension error names both shapes") {
  Graph g;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 1});
  try {
    g.matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x1]") != std::string::npos);
  }
}

TEST_CASE("softmax: worked values, shift invariance, axis error") {
  Graph g;
  auto s = g.softmax(Tensor({2}, {0.0, 0.0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-15));

  auto t = g.softmax(Tensor({2}, {0.0, std::log(2.0)}), 0);
  CHECK(std::abs(t.at(0) - 1.0 / 3.0) < 1e-15);
  CHECK(std::abs(t.at(1) - 2.0 / 3.0) < 1e-15);

  for (double c : {-50.0, -1.5, 3.0, 700.0}) {
    auto u = g.softmax(Tensor({2}, {c, std::log(2.0) + c}), 0);
    CHECK(std::abs(u.at(0) - 1.0 / 3.0) < 1e-12);
    CHECK(std::abs(u.at(1) - 2.0 / 3.0) < 1e-12);
  }

  CHECK_THROWS_AS(g.softmax(Tensor::zeros({2, 2}), 2), IndexError);
}

TEST_CASE("softmax: rows sum to one along any axis") {
  std::mt19937_64 rng(3);
  Graph g(false);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 4, 5}, rng, false);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = g.softmax(g.scale(x, 10.0), axis);
      const auto& s = y.shape();
      std::size_t inner = 1;
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      const std::size_t outer = y.numel() / (s[axis] * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          double sum = 0.0;
          for (std::size_t j = 0; j < s[axis]; ++j) {
            const double v = y.at(o * s[axis] * inner + j * inner + i);
            CHECK(v >= 0.0);
            sum += v;
          }
          CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("backward: sum and square") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 2}, rng);
  Graph g;
  g.backward(g.sum(x));
  REQUIRE(x.has_grad());
  for (double v : x.grad()) CHECK(v == 1.0);

  Tensor three({1}, {3.0}, true);
  Graph h;
  h.backward(h.sum(h.mul(three, three)));
  CHECK(three.grad()[0] == 6.0);
}

TEST_CASE("backward: sum(W x) matches finite differences") {
  std::mt19937_64 rng(11);
  auto w = random_tensor({4, 3}, rng);
  auto x = random_tensor({3, 1}, rng);
  ScalarFn f = [&](Graph& g) { return g.sum(g.matmul(w, x)); };
  Graph g;
  g.backward(f(g));
  for (Tensor* p : {&w, &x}) {
    const auto num = numeric_grad(f, *p, 1e-5);
    const auto ana = p->grad();
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double rel = std::abs(ana[i] - num[i]) / std::max({1.0, std::abs(ana[i]), std::abs(num[i])});
      CHECK(rel < 1e-6);
    }
  }
}

TEST_CASE("backward: reused tensor accumulates both paths") {
  Tensor x({2}, {1.0, -2.0}, true);
  Graph g;
  g.backward(g.sum(g.add(x, g.scale(x, 3.0))));
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("backward: frozen tensors never get a gradient buffer") {
  std::mt19937_64 rng(2);
  auto a = random_tensor({2, 2}, rng, false);
  auto b = random_tensor({2, 2}, rng, false);
  Graph g;
  auto loss = g.sum(g.softmax(g.matmul(a, b), 1));
  g.backward(loss);
  CHECK(g.size() == 0);
  CHECK_FALSE(a.has_grad());
  CHECK_FALSE(b.has_grad());
  CHECK_FALSE(loss.has_grad());

  auto c = random_tensor({2, 2}, rng, true);
  Graph h;
  h.backward(h.sum(h.matmul(a, c)));
  CHECK_FALSE(a.has_grad());
  CHECK(c.has_grad());
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tensor x({2}, {1.0, 2.0}, true);
  Graph g;
  auto y = g.scale(x, 2.0);
  CHECK_THROWS_AS(g.backward(y), ContractError);
}

TEST_CASE("inference graph records nothing") {
  Tensor x({2}, {1.0, 2.0}, true);
  Graph g(false);
  auto y = g.sum(g.mul(x, x));
  CHECK(g.size() == 0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.item() == 5.0);
}

TEST_CASE("grad_check: trivial objectives") {
  Tensor x({1}, {3.0});
  CHECK(grad_check([&](Graph& g) { return g.sum(g.mul(x, x)); }, {x}, 1e-5) < 1e-9);

  Tensor y({3}, {1.0, 2.0, 3.0});
  CHECK(grad_check([](Graph&) { return Tensor::scalar(4.2); }, {y}, 1e-5) == 0.0);

  CHECK_THROWS_AS(grad_check([&](Graph& g) { return g.sum(x); }, {x}, 0.0), ContractError);
  CHECK_THROWS_AS(
      grad_check([](Graph&) { return Tensor::scalar(std::nan("")); }, {y}, 1e-5), NumericError);
  CHECK_FALSE(x.requires_grad());
}

TEST_CASE("every primitive agrees with central differences") {
  std::mt19937_64 rng(2026);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    auto c = random_tensor({3, 4}, rng);
    auto v = random_tensor({4}, rng);
    auto gamma = random_tensor({4}, rng);
    auto beta = random_tensor({4}, rng);
    auto w5 = random_tensor({3, 5}, rng);
    auto bat1 = random_tensor({2, 3, 4}, rng);
    auto bat2 = random_tensor({2, 4, 2}, rng);
    auto table = random_tensor({6, 4}, rng);
    const std::vector<int> ids = {5, 0, 5, 2};
    const std::vector<int> targets = {1, 4, 2};
    const std::vector<int> targets_pad = {1, -1, 2};

    // A random weighting turns each op's output into a generic scalar.
    auto weighted = [](Graph& g, const Tensor& t, const Tensor& w) { return g.sum(g.mul(t, w)); };
    auto weights_for = [&](Shape s) { return random_tensor(std::move(s), rng, false); };
    auto w_ab = weights_for({3, 5});
    auto w_34 = weights_for({3, 4});
    auto w_bat = weights_for({2, 3, 2});
    auto w_t = weights_for({4, 3});
    auto w_sl = weights_for({3, 2});
    auto w_cat = weights_for({6, 4});
    auto w_emb = weights_for({4, 4});
    auto w_heads = weights_for({2, 3, 2});
    auto w_merge = weights_for({3, 8});

    const double tol = 1e-4;
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.matmul(a, b), w_ab); }, {a, b}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.matmul(bat1, bat2), w_bat); }, {bat1, bat2}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.add(a, c), w_34); }, {a, c}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.add_bias(a, v), w_34); }, {a, v}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.scale(a, -1.7), w_34); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.mul(a, c), w_34); }, {a, c}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.gelu(a), w_34); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.layer_norm(a, gamma, beta), w_34); },
                     {a, gamma, beta}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.softmax(a, 1), w_34); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.softmax(a, 0), w_34); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.embedding(table, ids), w_emb); }, {table}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.concat(a, c, 0), w_cat); }, {a, c}) < tol);
    CHECK(grad_check([&](Graph& g) { return g.cross_entropy(w5, targets); }, {w5}) < tol);
    CHECK(grad_check([&](Graph& g) { return g.cross_entropy(w5, targets_pad, -1); }, {w5}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.transpose(a), w_t); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.slice(a, 1, 1, 2), w_sl); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.reshape(a, {4, 3}), w_t); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.split_heads(a, 1, 3, 2), w_heads); }, {a}) < tol);
    CHECK(grad_check([&](Graph& g) { return weighted(g, g.merge_heads(bat1, 1, 3, 2), w_merge); }, {bat1}) < tol);
  }
}

TEST_CASE("split_heads / merge_heads are inverse permutations") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({6, 8}, rng, false);
  Graph g(false);
  auto s = g.split_heads(x, 2, 3, 4);
  CHECK(s.shape() == Shape{8, 3, 2});
  // batch 1, seq 2, head 3, element 1 -> merged row 1*3+2, column 3*2+1
  CHECK(s.at(((1 * 4 + 3) * 3 + 2) * 2 + 1) == x.at(5, 7));
  auto m = g.merge_heads(s, 2, 3, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(m.at(i) == x.at(i));
}

TEST_CASE("shape invariants are enforced at construction") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 2}, {}), DimensionError);
  Graph g;
  CHECK_THROWS_AS(g.add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  CHECK_THROWS_AS(g.add_bias(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  CHECK_THROWS_AS(g.embedding(Tensor::zeros({3, 2}), std::vector<int>{3}), IndexError);
}
