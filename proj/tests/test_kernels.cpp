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

// Parallel kernels against their serial references.

#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "capdetect/kernels.hpp"
#include "doctest.h"

using namespace capdetect::kernels;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("gemm matches the reference for every transpose combination") {
  std::mt19937_64 rng(17);
  for (auto [m, n, k] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{{1, 1, 1}, {3, 5, 7}, {64, 64, 64}, {96, 33, 130}}) {
    for (Trans ta : {Trans::kNo, Trans::kYes}) {
      for (Trans tb : {Trans::kNo, Trans::kYes}) {
        for (bool acc : {false, true}) {
          const auto a = randn(m * k, rng);
          const auto b = randn(k * n, rng);
          auto c0 = randn(m * n, rng);
          auto c1 = c0;
          gemm(ta, tb, m, n, k, a.data(), b.data(), c0.data(), acc);
          gemm_reference(ta, tb, m, n, k, a.data(), b.data(), c1.data(), acc);
          CHECK(max_abs_diff(c0, c1) < 1e-11);
        }
      }
    }
  }
}

TEST_CASE("gemm is bit-identical across thread counts") {
  std::mt19937_64 rng(5);
  const std::size_t m = 128, n = 64, k = 96;
  const auto a = randn(m * k, rng);
  const auto b = randn(k * n, rng);
  std::vector<double> c1(m * n), c4(m * n);
  const int saved = max_threads();
  set_max_threads(1);
  gemm(Trans::kNo, Trans::kYes, m, n, k, a.data(), b.data(), c1.data(), false);
  set_max_threads(4);
  gemm(Trans::kNo, Trans::kYes, m, n, k, a.data(), b.data(), c4.data(), false);
  set_max_threads(saved);
  CHECK(c1 == c4);
}

TEST_CASE("softmax_rows matches the reference") {
  std::mt19937_64 rng(9);
  const auto x = randn(4096 * 16, rng);
  std::vector<double> y0(x.size()), y1(x.size());
  softmax_rows(x, y0, 16);
  softmax_rows_reference(x, y1, 16);
  CHECK(y0 == y1);
}

TEST_CASE("separable convolution passes match the reference") {
  std::mt19937_64 rng(21);
  const std::size_t h = 32, w = 40, c = 3;
  const auto img = randn(h * w * c, rng);
  const std::vector<double> kernel = {0.1, 0.2, 0.4, 0.2, 0.1};
  std::vector<double> a(img.size()), b(img.size());
  convolve_rows(img, a, h, w, c, kernel);
  convolve_rows_reference(img, b, h, w, c, kernel);
  CHECK(a == b);
  convolve_cols(img, a, h, w, c, kernel);
  convolve_cols_reference(img, b, h, w, c, kernel);
  CHECK(a == b);
}
