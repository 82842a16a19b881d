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

#pragma once

// Dense inner loops shared by the autodiff primitives and image transforms.
//
// Every kernel comes in two flavours: an OpenMP version used on the hot path
// and a plain serial `*_reference` version kept for tests and benchmarks.
// The parallel versions split work over output rows only, so each output
// element is reduced in the same order regardless of thread count and the
// results are bit-identical for any BILORA_THREADS setting.

#include <cstddef>
#include <span>

namespace capdetect::kernels {

enum class Trans { kNo, kYes };

/// C[m x n] = op(A) * op(B)  (or C += ... when `accumulate`).
/// op(A) is m x k, op(B) is k x n; A and B are row-major as stored, so
/// Trans::kYes means the stored matrix is k x m (resp. n x k).
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

void gemm_reference(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n,
                    std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate);

/// Row-wise softmax over contiguous rows of length `cols`.
void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t cols);
void softmax_rows_reference(std::span<const double> in, std::span<double> out,
                            std::size_t cols);

/// One separable convolution pass along rows (horizontal) of an interleaved
/// HWC image with clamp-to-edge borders. `kernel` has odd length 2r+1.
void convolve_rows(std::span<const double> in, std::span<double> out, std::size_t height,
                   std::size_t width, std::size_t channels, std::span<const double> kernel);
void convolve_rows_reference(std::span<const double> in, std::span<double> out,
                             std::size_t height, std::size_t width, std::size_t channels,
                             std::span<const double> kernel);

/// Same as convolve_rows along columns (vertical).
void convolve_cols(std::span<const double> in, std::span<double> out, std::size_t height,
                   std::size_t width, std::size_t channels, std::span<const double> kernel);
void convolve_cols_reference(std::span<const double> in, std::span<double> out,
                             std::size_t height, std::size_t width, std::size_t channels,
                             std::span<const double> kernel);

/// Worker count currently used by the parallel kernels.
int max_threads();

/// Caps the worker count. Values < 1 are ignored.
void set_max_threads(int n);

/// Applies the BILORA_THREADS environment variable, if set and valid.
void configure_threads_from_env();

}  // namespace capdetect::kernels
