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

#include "capdetect/degrade.hpp"
#include "capdetect/errors.hpp"
#include "capdetect/synth.hpp"
#include "doctest.h"

using namespace capdetect;
using namespace capdetect::degrade;

namespace {

Image smooth_image(std::size_t n = 32) {
  Image img(n, n, 3);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = 0.5 + 0.2 * std::sin(0.2 * x + 0.1 * c) * std::cos(0.15 * y);
  return img;
}

Image mirror(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

}  // namespace

TEST_CASE("downscale2x: means of 2x2 blocks") {
  const Image flat(4, 4, 3, 0.7);
  const Image half = downscale2x(flat);
  CHECK(half.height == 2);
  CHECK(half.width == 2);
  for (double v : half.pixels) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  Image block(2, 2, 1);
  block.pixels = {1, 2, 3, 4};
  CHECK(downscale2x(block).pixels == std::vector<double>{2.5});

  CHECK_THROWS_AS(downscale2x(Image(5, 4, 3)), ContractError);
  CHECK_THROWS_AS(downscale2x(Image(4, 3, 3)), ContractError);
}

TEST_CASE("center_embed pads with the per-channel mean") {
  Image small(2, 2, 1);
  small.pixels = {0, 1, 1, 0};
  const Image out = center_embed(small, 4);
  CHECK(out.at(0, 0, 0) == 0.5);
  CHECK(out.at(1, 1, 0) == 0.0);
  CHECK(out.at(1, 2, 0) == 1.0);
  const Image lr = apply(smooth_image(), DegradeSpec::low_res());
  CHECK(lr.height == 32);
  CHECK(lr.width == 32);
}

TEST_CASE("gaussian_kernel: radius, normalisation, sigma=1 centre weight") {
  const auto k1 = gaussian_kernel(1.0);
  CHECK(k1.size() == 7);
  double denom = 0.0;
  for (int i = -3; i <= 3; ++i) denom += std::exp(-i * i / 2.0);
  CHECK(k1[3] == doctest::Approx(1.0 / denom).epsilon(1e-14));
  CHECK(k1[3] == doctest::Approx(0.39905).epsilon(1e-4));
  const auto k3 = gaussian_kernel(3.0);
  CHECK(k3.size() == 19);
  double s = 0.0;
  for (double w : k3) s += w;
  CHECK(std::abs(s - 1.0) < 1e-12);
  CHECK_THROWS_AS(gaussian_kernel(0.0), ContractError);
  CHECK_THROWS_AS(gaussian_blur(Image(4, 4, 3), -1.0), ContractError);
}

TEST_CASE("gaussian_blur: constant fixed point, impulse response, mirror symmetry") {
  const Image flat(16, 16, 3, 0.42);
  for (double v : gaussian_blur(flat, 3.0).pixels) CHECK(v == doctest::Approx(0.42).epsilon(1e-13));

  // Impulse far from the border: the response is the 2-D outer product.
  Image impulse(21, 21, 1, 0.0);
  impulse.at(10, 10, 0) = 1.0;
  const auto k = gaussian_kernel(1.5);
  const int r = static_cast<int>(k.size() / 2);
  const Image out = gaussian_blur(impulse, 1.5);
  double worst = 0.0;
  for (int y = 0; y < 21; ++y) {
    for (int x = 0; x < 21; ++x) {
      double expect = 0.0;
      const int dy = y - 10, dx = x - 10;
      if (std::abs(dy) <= r && std::abs(dx) <= r) expect = k[dy + r] * k[dx + r];
      worst = std::max(worst, std::abs(out.at(y, x, 0) - expect));
    }
  }
  CHECK(worst < 1e-12);

  const Image img = smooth_image();
  const Image a = mirror(gaussian_blur(img, 3.0));
  const Image b = gaussian_blur(mirror(img), 3.0);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) CHECK(a.pixels[i] == doctest::Approx(b.pixels[i]).epsilon(1e-12));
}

TEST_CASE("jpeg quantization table scaling") {
  CHECK(scale_quant_entry(16, 65) == 11);
  for (int i = 0; i < 64; ++i) {
    CHECK(scale_quant_entry(luminance_table()[i], 50) == luminance_table()[i]);
    CHECK(scale_quant_entry(chrominance_table()[i], 50) == chrominance_table()[i]);
  }
  CHECK(scale_quant_entry(16, 100) == 1);
  CHECK(scale_quant_entry(99, 1) == 255);
  CHECK_THROWS_AS(scale_quant_entry(16, 0), ContractError);
  CHECK_THROWS_AS(jpeg_roundtrip(smooth_image(), 101), ContractError);
}

TEST_CASE("jpeg_roundtrip: lossy at 65, near lossless at 100") {
  const Image fake = synth::fake_image(synth::default_families()[2], 3, "test", 0);
  const Image out = jpeg_roundtrip(fake, 65);
  CHECK(out.same_shape(fake));
  CHECK(out != quantize8(fake));
  for (double v : out.pixels) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(jpeg_roundtrip(fake, 65) == out);

  const Image smooth = smooth_image();
  const Image hq = jpeg_roundtrip(smooth, 100);
  double worst = 0.0;
  for (std::size_t i = 0; i < hq.pixels.size(); ++i) worst = std::max(worst, std::abs(hq.pixels[i] - smooth.pixels[i]));
  CHECK(worst <= 0.04);
}

TEST_CASE("degrade names and parsing") {
  CHECK(parse_degrade("none") == DegradeSpec::none());
  CHECK(parse_degrade("lr112") == DegradeSpec::low_res(2));
  CHECK(parse_degrade("jpeg65") == DegradeSpec::jpeg(65));
  CHECK(parse_degrade("blur3") == DegradeSpec::blur(3.0));
  CHECK(parse_degrade("jpeg65", "80").quality == 80);
  CHECK(parse_degrade("blur3", "1.5").name() == "blur1.5");
  CHECK(DegradeSpec::blur(3.0).name() == "blur3");
  CHECK(DegradeSpec::low_res().name() == "lr112");
  CHECK(parse_degrade_list("none,jpeg65").size() == 2);
  CHECK_THROWS_AS(parse_degrade("sharpen"), ConfigError);
  CHECK_THROWS_AS(parse_degrade("jpeg65", "0"), ConfigError);
  CHECK_THROWS_AS(parse_degrade("blur3", "-2"), ConfigError);
  CHECK_THROWS_AS(parse_degrade("none", "3"), ConfigError);
  CHECK_THROWS_AS(parse_degrade_list(""), ConfigError);
}

TEST_CASE("apply preserves shape and range, none is identity") {
  const Image img = synth::real_image(1, "test", 4);
  CHECK(apply(img, DegradeSpec::none()) == img);
  CHECK(apply(apply(img, DegradeSpec::none()), DegradeSpec::none()) == img);
  for (const auto& spec : {DegradeSpec::low_res(), DegradeSpec::jpeg(), DegradeSpec::blur()}) {
    const Image out = apply(img, spec);
    CHECK(out.same_shape(img));
    for (double v : out.pixels) CHECK((v >= 0.0 && v <= 1.0));
    CHECK(apply(img, spec) == out);
  }
}
