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

#include "capdetect/degrade.hpp"

// clang-format off
#include <cstdio>
#include <csetjmp>
#include <jpeglib.h>
// clang-format on

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cmath>
#include <sstream>

#include "capdetect/errors.hpp"
#include "capdetect/kernels.hpp"

namespace capdetect::degrade {
namespace {

constexpr int kLuminance[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

constexpr int kChrominance[64] = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

double parse_number(std::string_view s, std::string_view what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("bad " + std::string(what) + " '" + std::string(s) + "'");
  }
  return v;
}

int parse_int(std::string_view s, std::string_view what) {
  const double v = parse_number(s, what);
  if (v != std::floor(v)) throw ConfigError(std::string(what) + " must be an integer");
  return static_cast<int>(v);
}

std::string format_sigma(double s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

// libjpeg reports fatal errors through error_exit; jump back and throw.
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void on_jpeg_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

// The two libjpeg drivers below keep only trivially destructible locals so
// that longjmp out of the error handler is safe.
bool encode_jpeg(const unsigned char* rgb, std::size_t width, std::size_t height, const unsigned int* lum,
                 const unsigned int* chr, unsigned char** buffer, unsigned long* size) {
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buffer, size);
  cinfo.image_width = static_cast<JDIMENSION>(width);
  cinfo.image_height = static_cast<JDIMENSION>(height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  cinfo.dct_method = JDCT_ISLOW;
  cinfo.optimize_coding = FALSE;
  // Tables arrive pre-scaled; scale 100 makes the library keep them as is.
  jpeg_add_quant_table(&cinfo, 0, lum, 100, TRUE);
  jpeg_add_quant_table(&cinfo, 1, chr, 100, TRUE);
  // 4:2:0
  cinfo.comp_info[0].h_samp_factor = 2;
  cinfo.comp_info[0].v_samp_factor = 2;
  cinfo.comp_info[1].h_samp_factor = 1;
  cinfo.comp_info[1].v_samp_factor = 1;
  cinfo.comp_info[2].h_samp_factor = 1;
  cinfo.comp_info[2].v_samp_factor = 1;
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(rgb) + static_cast<std::size_t>(cinfo.next_scanline) * width * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

bool decode_jpeg(const unsigned char* buffer, unsigned long size, std::size_t width, std::size_t height,
                 unsigned char* rgb) {
  jpeg_decompress_struct dinfo{};
  JpegError err{};
  dinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&dinfo);
    return false;
  }
  jpeg_create_decompress(&dinfo);
  jpeg_mem_src(&dinfo, buffer, size);
  jpeg_read_header(&dinfo, TRUE);
  dinfo.out_color_space = JCS_RGB;
  dinfo.dct_method = JDCT_ISLOW;
  jpeg_start_decompress(&dinfo);
  if (dinfo.output_width != width || dinfo.output_height != height || dinfo.output_components != 3) {
    jpeg_destroy_decompress(&dinfo);
    return false;
  }
  while (dinfo.output_scanline < dinfo.output_height) {
    JSAMPROW row = rgb + static_cast<std::size_t>(dinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&dinfo, &row, 1);
  }
  jpeg_finish_decompress(&dinfo);
  jpeg_destroy_decompress(&dinfo);
  return true;
}

}  // namespace

void DegradeSpec::validate() const {
  switch (kind) {
    case Kind::kNone:
      if (scale_factor != 0 || quality != 0 || sigma != 0.0) throw ConfigError("degrade none takes no parameters");
      return;
    case Kind::kLowRes:
      if (scale_factor != 2) throw ConfigError("low_res supports a scale factor of 2 only");
      if (quality != 0 || sigma != 0.0) throw ConfigError("low_res takes only a scale factor");
      return;
    case Kind::kJpeg:
      if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
      if (scale_factor != 0 || sigma != 0.0) throw ConfigError("jpeg takes only a quality");
      return;
    case Kind::kBlur:
      if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("blur sigma must be positive");
      if (scale_factor != 0 || quality != 0) throw ConfigError("blur takes only a sigma");
      return;
  }
}

std::string DegradeSpec::name() const {
  switch (kind) {
    case Kind::kNone: return "none";
    case Kind::kLowRes: return scale_factor == 2 ? "lr112" : "lr" + std::to_string(scale_factor) + "x";
    case Kind::kJpeg: return "jpeg" + std::to_string(quality);
    case Kind::kBlur: return "blur" + format_sigma(sigma);
  }
  return "?";
}

DegradeSpec parse_degrade(std::string_view name, std::string_view param) {
  DegradeSpec spec;
  if (name == "none") {
    if (!param.empty()) throw ConfigError("degrade none takes no parameter");
    return spec;
  }
  if (name == "lr112") {
    spec = DegradeSpec::low_res();
    if (!param.empty()) spec.scale_factor = parse_int(param, "scale factor");
  } else if (name == "jpeg65") {
    spec = DegradeSpec::jpeg();
    if (!param.empty()) spec.quality = parse_int(param, "jpeg quality");
  } else if (name == "blur3") {
    spec = DegradeSpec::blur();
    if (!param.empty()) spec.sigma = parse_number(param, "blur sigma");
  } else {
    throw ConfigError("unknown degradation '" + std::string(name) + "' (expected none, lr112, jpeg65 or blur3)");
  }
  spec.validate();
  return spec;
}

std::vector<DegradeSpec> parse_degrade_list(std::string_view csv) {
  std::vector<DegradeSpec> out;
  while (true) {
    const auto comma = csv.find(',');
    const auto item = csv.substr(0, comma);
    if (!item.empty()) out.push_back(parse_degrade(item));
    if (comma == std::string_view::npos) break;
    csv.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("empty degradation list");
  return out;
}

Image downscale2x(const Image& img) {
  if (img.height % 2 != 0 || img.width % 2 != 0) {
    throw ContractError("downscale2x: extents " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " are not both even");
  }
  Image out(img.height / 2, img.width / 2, img.channels);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double s = img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c) + img.at(2 * y + 1, 2 * x, c) +
                         img.at(2 * y + 1, 2 * x + 1, c);
        out.at(y, x, c) = s / 4.0;
      }
    }
  }
  return out;
}

Image center_embed(const Image& img, std::size_t size) {
  if (img.height > size || img.width > size) throw ContractError("center_embed: image larger than canvas");
  std::vector<double> mean(img.channels, 0.0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) mean[i % img.channels] += img.pixels[i];
  for (auto& m : mean) m /= static_cast<double>(img.height * img.width);
  Image out(size, size, img.channels);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = mean[i % img.channels];
  const std::size_t oy = (size - img.height) / 2, ox = (size - img.width) / 2;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) out.at(oy + y, ox + x, c) = img.at(y, x, c);
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ContractError("gaussian blur: sigma must be positive");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double w = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

Image gaussian_blur(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  Image tmp(img.height, img.width, img.channels);
  Image out(img.height, img.width, img.channels);
  kernels::convolve_rows(img.pixels, tmp.pixels, img.height, img.width, img.channels, k);
  kernels::convolve_cols(tmp.pixels, out.pixels, img.height, img.width, img.channels, k);
  return out;
}

int scale_quant_entry(int t, int quality) {
  if (quality < 1 || quality > 100) throw ContractError("jpeg quality must lie in [1, 100]");
  const long scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  const long v = (static_cast<long>(t) * scale + 50) / 100;
  return static_cast<int>(std::clamp(v, 1L, 255L));
}

const int* luminance_table() { return kLuminance; }
const int* chrominance_table() { return kChrominance; }

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw ContractError("jpeg quality must lie in [1, 100]");
  if (img.channels != 3) throw ContractError("jpeg_roundtrip: expected 3 channels");

  std::vector<unsigned char> rgb(img.pixels.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    rgb[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  unsigned int lum[64], chr[64];
  for (int i = 0; i < 64; ++i) {
    lum[i] = static_cast<unsigned int>(scale_quant_entry(kLuminance[i], quality));
    chr[i] = static_cast<unsigned int>(scale_quant_entry(kChrominance[i], quality));
  }
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  const bool encoded = encode_jpeg(rgb.data(), img.width, img.height, lum, chr, &buffer, &size);
  const bool decoded = encoded && decode_jpeg(buffer, size, img.width, img.height, rgb.data());
  std::free(buffer);
  if (!encoded) throw IoError("jpeg encode failed");
  if (!decoded) throw IoError("jpeg decode failed");

  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) out.pixels[i] = rgb[i] / 255.0;
  return out;
}

Image apply(const Image& img, const DegradeSpec& spec) {
  spec.validate();
  Image out;
  switch (spec.kind) {
    case Kind::kNone: return img;
    case Kind::kLowRes: out = center_embed(downscale2x(img), img.height); break;
    case Kind::kJpeg: out = jpeg_roundtrip(img, spec.quality); break;
    case Kind::kBlur: out = gaussian_blur(img, spec.sigma); break;
  }
  clamp_unit(out);
  return out;
}

}  // namespace capdetect::degrade
