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

// OpenMP kernels against their serial references. Thread count follows
// BILORA_THREADS. Sizes are the shapes the captioner actually hits, plus one
// larger gemm.

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "capdetect/kernels.hpp"

namespace k = capdetect::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<double> blur_kernel() {
  std::vector<double> w(19);
  double s = 0.0;
  for (int i = -9; i <= 9; ++i) s += w[i + 9] = std::exp(-i * i / 18.0);
  for (auto& x : w) x /= s;
  return w;
}

template <bool kRef>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto kk = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * kk, 1), b = random_vec(n * kk, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (kRef) {
      k::gemm_reference(k::Trans::kNo, k::Trans::kYes, m, n, kk, a.data(), b.data(), c.data(), false);
    } else {
      k::gemm(k::Trans::kNo, k::Trans::kYes, m, n, kk, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * m * n * kk));
}

template <bool kRef>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  const auto in = random_vec(rows * cols, 3);
  std::vector<double> out(in.size());
  for (auto _ : state) {
    if constexpr (kRef) {
      k::softmax_rows_reference(in, out, cols);
    } else {
      k::softmax_rows(in, out, cols);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool kRef, bool kCols>
void BM_Convolve(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  const auto in = random_vec(size * size * 3, 4);
  const auto w = blur_kernel();
  std::vector<double> out(in.size());
  for (auto _ : state) {
    if constexpr (kCols) {
      kRef ? k::convolve_cols_reference(in, out, size, size, 3, w) : k::convolve_cols(in, out, size, size, 3, w);
    } else {
      kRef ? k::convolve_rows_reference(in, out, size, size, 3, w) : k::convolve_rows(in, out, size, size, 3, w);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

void GemmArgs(benchmark::internal::Benchmark* b) {
  b->Args({8, 64, 64})->Args({64, 64, 192})->Args({128, 128, 64})->Args({256, 256, 256});
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/reference")->Apply(GemmArgs);
BENCHMARK(BM_Gemm<false>)->Name("gemm/openmp")->Apply(GemmArgs);
BENCHMARK(BM_Softmax<true>)->Name("softmax_rows/reference")->Args({64, 8})->Args({512, 64});
BENCHMARK(BM_Softmax<false>)->Name("softmax_rows/openmp")->Args({64, 8})->Args({512, 64});
BENCHMARK(BM_Convolve<true, false>)->Name("convolve_rows/reference")->Arg(32)->Arg(256);
BENCHMARK(BM_Convolve<false, false>)->Name("convolve_rows/openmp")->Arg(32)->Arg(256);
BENCHMARK(BM_Convolve<true, true>)->Name("convolve_cols/reference")->Arg(32)->Arg(256);
BENCHMARK(BM_Convolve<false, true>)->Name("convolve_cols/openmp")->Arg(32)->Arg(256);

int main(int argc, char** argv) {
  k::configure_threads_from_env();
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
