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

#include "capdetect/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

namespace capdetect::kernels {
namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
  if (i < 0) return 0;
  if (static_cast<std::size_t>(i) >= n) return n - 1;
  return static_cast<std::size_t>(i);
}

}  // namespace

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
  const bool par = m * n * k >= kParallelWork && m > 1;
  if (trans_b == Trans::kNo) {
    // i-p-j order: contiguous streams over B and C rows.
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a == Trans::kNo ? a[i * k + p] : a[p * m + i];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  // B stored n x k: each output is a dot product of two rows.
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      if (trans_a == Trans::kNo) {
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      } else {
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * brow[p];
      }
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void gemm_reference(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n,
                    std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a == Trans::kNo ? a[i * k + p] : a[p * m + i];
        const double bv = trans_b == Trans::kNo ? b[p * n + j] : b[j * k + p];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

namespace {

inline void softmax_one(const double* in, double* out, std::size_t cols) {
  double mx = in[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
}

}  // namespace

void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t cols) {
  const auto rows = static_cast<std::ptrdiff_t>(in.size() / cols);
#pragma omp parallel for schedule(static) if (in.size() >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    softmax_one(in.data() + r * cols, out.data() + r * cols, cols);
  }
}

void softmax_rows_reference(std::span<const double> in, std::span<double> out,
                            std::size_t cols) {
  const std::size_t rows = in.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_one(in.data() + r * cols, out.data() + r * cols, cols);
  }
}

void convolve_rows(std::span<const double> in, std::span<double> out, std::size_t height,
                   std::size_t width, std::size_t channels, std::span<const double> kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(height);
#pragma omp parallel for schedule(static) if (height * width * kernel.size() >= kParallelWork)
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    const double* src = in.data() + y * width * channels;
    double* dst = out.data() + y * width * channels;
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double s = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) {
          const auto sx = clamp_index(static_cast<std::ptrdiff_t>(x + t) - radius, width);
          s += kernel[t] * src[sx * channels + ch];
        }
        dst[x * channels + ch] = s;
      }
    }
  }
}

void convolve_rows_reference(std::span<const double> in, std::span<double> out,
                             std::size_t height, std::size_t width, std::size_t channels,
                             std::span<const double> kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double s = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) {
          const auto sx = clamp_index(static_cast<std::ptrdiff_t>(x + t) - radius, width);
          s += kernel[t] * in[(y * width + sx) * channels + ch];
        }
        out[(y * width + x) * channels + ch] = s;
      }
    }
  }
}

void convolve_cols(std::span<const double> in, std::span<double> out, std::size_t height,
                   std::size_t width, std::size_t channels, std::span<const double> kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(height);
  const std::size_t stride = width * channels;
#pragma omp parallel for schedule(static) if (height * width * kernel.size() >= kParallelWork)
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    double* dst = out.data() + y * stride;
    for (std::size_t i = 0; i < stride; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < kernel.size(); ++t) {
        const auto sy = clamp_index(y + static_cast<std::ptrdiff_t>(t) - radius, height);
        s += kernel[t] * in[sy * stride + i];
      }
      dst[i] = s;
    }
  }
}

void convolve_cols_reference(std::span<const double> in, std::span<double> out,
                             std::size_t height, std::size_t width, std::size_t channels,
                             std::span<const double> kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double s = 0.0;
        for (std::size_t t = 0; t < kernel.size(); ++t) {
          const auto sy = clamp_index(
              static_cast<std::ptrdiff_t>(y + t) - radius, height);
          s += kernel[t] * in[(sy * width + x) * channels + ch];
        }
        out[(y * width + x) * channels + ch] = s;
      }
    }
  }
}

int max_threads() { return omp_get_max_threads(); }

void set_max_threads(int n) {
  if (n >= 1) omp_set_num_threads(n);
}

void configure_threads_from_env() {
  const char* env = std::getenv("BILORA_THREADS");
  if (env == nullptr) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end != env && *end == '\0' && n >= 1) {
    set_max_threads(static_cast<int>(std::min<long>(n, omp_get_num_procs())));
  }
}

}  // namespace capdetect::kernels
