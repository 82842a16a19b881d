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

// Test-time image degradations: 2x downscale, JPEG round trip, Gaussian blur.

#include <string>
#include <string_view>
#include <vector>

#include "capdetect/image.hpp"

namespace capdetect::degrade {

enum class Kind { kNone, kLowRes, kJpeg, kBlur };

struct DegradeSpec {
  Kind kind = Kind::kNone;
  int scale_factor = 0;  // low_res only
  int quality = 0;       // jpeg only
  double sigma = 0.0;    // blur only

  static DegradeSpec none() { return {}; }
  static DegradeSpec low_res(int factor = 2) { return {Kind::kLowRes, factor, 0, 0.0}; }
  static DegradeSpec jpeg(int q = 65) { return {Kind::kJpeg, 0, q, 0.0}; }
  static DegradeSpec blur(double s = 3.0) { return {Kind::kBlur, 0, 0, s}; }

  /// Throws ConfigError when a parameter is out of range or set for the
  /// wrong kind.
  void validate() const;
  /// Report identifier: none, lr112, jpeg65, blur3 for the defaults; other
  /// parameters render as e.g. jpeg80 or blur1.5.
  std::string name() const;

  bool operator==(const DegradeSpec&) const = default;
};

/// Parses none|lr112|jpeg65|blur3. `param`, when non-empty, overrides the
/// numeric parameter (factor, quality or sigma). Throws ConfigError.
DegradeSpec parse_degrade(std::string_view name, std::string_view param = {});
std::vector<DegradeSpec> parse_degrade_list(std::string_view csv);

/// 2x2 mean pooling. Throws ContractError on odd extents.
Image downscale2x(const Image& img);

/// Centers `img` on a size x size canvas filled with the image's per-channel
/// mean. Throws ContractError if img is larger than the canvas.
Image center_embed(const Image& img, std::size_t size);

/// Normalized 1-D Gaussian of radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable blur with clamp-to-edge borders. Throws ContractError if
/// sigma <= 0.
Image gaussian_blur(const Image& img, double sigma);

/// Quality-scaled quantization table entry: scale = 5000/q below 50, else
/// 200 - 2q; result clamp(floor((t * scale + 50) / 100), 1, 255).
int scale_quant_entry(int t, int quality);
/// Standard luminance / chrominance base tables, natural (row-major) order.
const int* luminance_table();
const int* chrominance_table();

/// Baseline JPEG encode at `quality` (4:2:0, tables scaled as above) and
/// decode. Input is quantized to 8 bits first. Throws ContractError if
/// quality is outside [1, 100], ContractError if channels != 3.
Image jpeg_roundtrip(const Image& img, int quality);

/// Applies `spec` to a model-sized image. low_res halves the image and
/// center-embeds it back onto the original canvas size.
Image apply(const Image& img, const DegradeSpec& spec);

}  // namespace capdetect::degrade
