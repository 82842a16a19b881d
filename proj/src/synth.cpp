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

#include "capdetect/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "capdetect/degrade.hpp"
#include "capdetect/errors.hpp"
#include "json.hpp"

namespace capdetect::synth {
namespace {

using nlohmann::json;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::mt19937_64 image_rng(std::uint64_t seed, std::string_view split, std::string_view family,
                          std::size_t index) {
  const std::string key = std::to_string(seed) + "/" + std::string(split) + "/" + std::string(family) + "/" +
                          std::to_string(index);
  return std::mt19937_64(fnv1a(key));
}

// Smooth texture: per-channel base colour, a few low-frequency waves and
// lightly blurred noise.
Image smooth_texture(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = kImageSize;
  Image img(n, n, 3);
  double base[3];
  for (double& b : base) b = 0.35 + 0.3 * u(rng);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = base[i % 3];

  for (int w = 0; w < 3; ++w) {
    const double freq = 0.5 + 1.5 * u(rng);
    const double theta = kTwoPi * u(rng);
    const double phase = kTwoPi * u(rng);
    const double amp = 0.03 + 0.05 * u(rng);
    double tint[3];
    for (double& t : tint) t = 0.5 + 0.5 * u(rng);
    const double fx = freq * std::cos(theta) / n, fy = freq * std::sin(theta) / n;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double s = amp * std::sin(kTwoPi * (fx * x + fy * y) + phase);
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) += tint[c] * s;
      }
    }
  }

  std::normal_distribution<double> noise(0.0, 0.06);
  Image grain(n, n, 3);
  for (auto& v : grain.pixels) v = noise(rng);
  grain = degrade::gaussian_blur(grain, 1.0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] += grain.pixels[i];
  return img;
}

void add_artifact(Image& img, const FamilySpec& spec, double phase_x, double phase_y) {
  const Image pattern = artifact_pattern(spec, phase_x, phase_y);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] += pattern.pixels[i];
}

json spec_to_json(const FamilySpec& s) {
  return {{"name", s.name},           {"kind", std::string(to_string(s.kind))},
          {"frequency", s.frequency}, {"orientation", s.orientation},
          {"amplitude", s.amplitude}, {"role", std::string(to_string(s.role))}};
}

FamilySpec spec_from_json(const json& j) {
  FamilySpec s;
  s.name = j.at("name").get<std::string>();
  s.kind = parse_artifact_kind(j.at("kind").get<std::string>());
  s.frequency = j.at("frequency").get<double>();
  s.orientation = j.at("orientation").get<double>();
  s.amplitude = j.at("amplitude").get<double>();
  s.role = parse_family_role(j.value("role", std::string("train")));
  return s;
}

std::string image_name(std::string_view family, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%05zu.png", index);
  return std::string(family) + buf;
}

double pixel_mean(const Image& img) {
  double s = 0.0;
  for (double v : img.pixels) s += v;
  return s / static_cast<double>(img.pixels.size());
}

void validate_record(const Record& r, std::size_t index, const std::set<std::string>* known_families) {
  if (!is_split(r.split)) throw InvariantError("unknown split '" + r.split + "'", index);
  if (r.label != 0 && r.label != 1) throw InvariantError("label must be 0 or 1", index);
  if (r.family.empty()) throw InvariantError("empty family", index);
  const bool real = r.family == kRealFamily;
  if (r.label != (real ? 0 : 1)) {
    throw InvariantError("label " + std::to_string(r.label) + " inconsistent with family '" + r.family + "'", index);
  }
  if (!real && known_families && !known_families->contains(r.family)) {
    throw InvariantError("family '" + r.family + "' not declared in dataset.json", index);
  }
  if (r.path.empty()) throw InvariantError("empty path", index);
}

}  // namespace

std::string_view to_string(ArtifactKind kind) {
  return kind == ArtifactKind::kPeriodic ? "periodic" : "checkerboard";
}

ArtifactKind parse_artifact_kind(std::string_view name) {
  if (name == "periodic") return ArtifactKind::kPeriodic;
  if (name == "checkerboard") return ArtifactKind::kCheckerboard;
  throw ConfigError("unknown artifact kind '" + std::string(name) + "'");
}

std::string_view to_string(FamilyRole role) {
  switch (role) {
    case FamilyRole::kTrain: return "train";
    case FamilyRole::kTransfer: return "transfer";
    case FamilyRole::kPretrain: return "pretrain";
  }
  return "train";
}

FamilyRole parse_family_role(std::string_view name) {
  if (name == "train") return FamilyRole::kTrain;
  if (name == "transfer") return FamilyRole::kTransfer;
  if (name == "pretrain") return FamilyRole::kPretrain;
  throw ConfigError("unknown family role '" + std::string(name) + "'");
}

std::vector<FamilySpec> default_families() {
  const double pi = std::numbers::pi;
  return {
      {"fam_a", ArtifactKind::kPeriodic, 4.0, 0.0, 0.06, FamilyRole::kTrain},
      {"fam_b", ArtifactKind::kPeriodic, 6.0, pi / 2, 0.06, FamilyRole::kTrain},
      {"fam_c", ArtifactKind::kPeriodic, 8.0, pi / 4, 0.06, FamilyRole::kTrain},
      {"fam_d", ArtifactKind::kPeriodic, 10.0, 3 * pi / 4, 0.06, FamilyRole::kTrain},
      {"fam_e", ArtifactKind::kPeriodic, 12.0, pi / 3, 0.06, FamilyRole::kTrain},
      {"xfer_a", ArtifactKind::kCheckerboard, 8.0, 0.0, 0.06, FamilyRole::kTransfer},
      {"xfer_b", ArtifactKind::kCheckerboard, 4.0, 0.0, 0.06, FamilyRole::kTransfer},
      {"aux_a", ArtifactKind::kPeriodic, 14.0, pi / 6, 0.06, FamilyRole::kPretrain},
      {"aux_b", ArtifactKind::kPeriodic, 5.0, 2 * pi / 3, 0.06, FamilyRole::kPretrain},
  };
}

std::size_t SplitCounts::of(std::string_view split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw ConfigError("unknown split '" + std::string(split) + "'");
}

bool is_split(std::string_view s) { return s == "train" || s == "val" || s == "test"; }

std::vector<std::string> Manifest::fake_families() const {
  std::vector<std::string> out;
  if (!families.empty()) {
    for (const auto& f : families) out.push_back(f.name);
    return out;
  }
  for (const auto& r : records) {
    if (r.family != kRealFamily && std::find(out.begin(), out.end(), r.family) == out.end()) out.push_back(r.family);
  }
  return out;
}

std::vector<std::string> Manifest::families_with_role(FamilyRole role) const {
  std::vector<std::string> out;
  for (const auto& f : families) {
    if (f.role == role) out.push_back(f.name);
  }
  return out;
}

std::vector<std::string> Manifest::eval_families() const {
  std::vector<std::string> out;
  for (const auto& name : fake_families()) {
    const auto* f = family(name);
    if (!f || f->role != FamilyRole::kPretrain) out.push_back(name);
  }
  return out;
}

const FamilySpec* Manifest::family(std::string_view name) const {
  for (const auto& f : families) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

std::vector<const Record*> Manifest::select(std::string_view split, std::string_view family) const {
  std::vector<const Record*> out;
  for (const auto& r : records) {
    if (r.split != split) continue;
    if (family.empty() || r.family == kRealFamily || r.family == family) out.push_back(&r);
  }
  return out;
}

Image artifact_pattern(const FamilySpec& spec, double phase_x, double phase_y) {
  const std::size_t n = kImageSize;
  Image p(n, n, 3);
  if (spec.kind == ArtifactKind::kPeriodic) {
    const double fx = spec.frequency * std::cos(spec.orientation) / n;
    const double fy = spec.frequency * std::sin(spec.orientation) / n;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double v = spec.amplitude * std::sin(kTwoPi * (fx * x + fy * y) + phase_x);
        for (std::size_t c = 0; c < 3; ++c) p.at(y, x, c) = v;
      }
    }
  } else {
    // Square cells of n / (2 f) pixels; phases shift the grid in pixels.
    const double cell = static_cast<double>(n) / (2.0 * spec.frequency);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const auto cx = static_cast<long>(std::floor((x + phase_x) / cell));
        const auto cy = static_cast<long>(std::floor((y + phase_y) / cell));
        const double v = ((cx + cy) % 2 == 0) ? spec.amplitude : -spec.amplitude;
        for (std::size_t c = 0; c < 3; ++c) p.at(y, x, c) = v;
      }
    }
  }
  return p;
}

void validate_specs(const std::vector<FamilySpec>& specs) {
  std::set<std::string> names;
  for (const auto& s : specs) {
    if (s.name.empty() || s.name == kRealFamily || s.name.find_first_of(" /\\,=") != std::string::npos) {
      throw ConfigError("invalid family name '" + s.name + "'");
    }
    if (!names.insert(s.name).second) throw ConfigError("duplicate family name '" + s.name + "'");
    if (!(s.amplitude > 0.0) || s.amplitude > 0.5) {
      throw ConfigError("family '" + s.name + "': amplitude must lie in (0, 0.5]");
    }
    if (!(s.frequency > 0.0) || !std::isfinite(s.frequency) || !std::isfinite(s.orientation)) {
      throw ConfigError("family '" + s.name + "': frequency must be positive and finite");
    }
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Image pi = artifact_pattern(specs[i]);
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      const Image pj = artifact_pattern(specs[j]);
      double diff = 0.0;
      for (std::size_t k = 0; k < pi.pixels.size(); ++k) diff += std::abs(pi.pixels[k] - pj.pixels[k]);
      diff /= static_cast<double>(pi.pixels.size());
      if (diff <= 0.01) {
        throw ConfigError("families '" + specs[i].name + "' and '" + specs[j].name + "' are not distinct");
      }
    }
  }
}

Image real_image(std::uint64_t seed, std::string_view split, std::size_t index) {
  auto rng = image_rng(seed, split, kRealFamily, index);
  Image img = smooth_texture(rng);
  clamp_unit(img);
  return img;
}

Image fake_image(const FamilySpec& spec, std::uint64_t seed, std::string_view split, std::size_t index) {
  auto rng = image_rng(seed, split, spec.name, index);
  Image img = smooth_texture(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (spec.kind == ArtifactKind::kPeriodic) {
    add_artifact(img, spec, kTwoPi * u(rng), 0.0);
  } else {
    const double period = 2.0 * kImageSize / (2.0 * spec.frequency);
    add_artifact(img, spec, std::floor(u(rng) * period), std::floor(u(rng) * period));
  }
  clamp_unit(img);
  return img;
}

double mean_threshold_accuracy(const std::vector<double>& real_means, const std::vector<double>& fake_means) {
  if (real_means.empty() || fake_means.empty()) return 0.5;
  std::vector<std::pair<double, int>> all;
  for (double v : real_means) all.emplace_back(v, 0);
  for (double v : fake_means) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end());
  const double nr = static_cast<double>(real_means.size()), nf = static_cast<double>(fake_means.size());
  // Threshold between positions i-1 and i: everything below predicted one
  // class. Sweep and keep the better polarity.
  double best = 0.5, real_below = 0, fake_below = 0;
  for (std::size_t i = 0; i <= all.size(); ++i) {
    if (i == 0 || i == all.size() || all[i].first != all[i - 1].first) {
      const double below_real = 0.5 * (real_below / nr + (nf - fake_below) / nf);
      best = std::max({best, below_real, 1.0 - below_real});
    }
    if (i < all.size()) (all[i].second == 0 ? real_below : fake_below) += 1;
  }
  return best;
}

Manifest gen_dataset(const GenOptions& options, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  validate_specs(options.families);
  for (auto split : kSplits) {
    if (options.counts.of(split) == 0) throw ConfigError("split '" + std::string(split) + "' count must be positive");
  }
  std::error_code ec;
  if (fs::exists(out, ec) && !fs::is_empty(out, ec)) {
    throw IoError("output directory " + out.string() + " is not empty");
  }

  Manifest m;
  m.seed = options.seed;
  m.counts = options.counts;
  m.families = options.families;
  m.root = out;

  // Record order: split, then real pool, then families in spec order.
  std::vector<std::size_t> indices;
  for (auto split : kSplits) {
    const std::size_t n = options.counts.of(split);
    for (std::size_t i = 0; i < n; ++i) {
      m.records.push_back({"images/" + std::string(split) + "/" + image_name(kRealFamily, i), 0,
                           std::string(kRealFamily), std::string(split)});
      indices.push_back(i);
    }
    for (const auto& f : options.families) {
      for (std::size_t i = 0; i < n; ++i) {
        m.records.push_back({"images/" + std::string(split) + "/" + image_name(f.name, i), 1, f.name,
                             std::string(split)});
        indices.push_back(i);
      }
    }
  }

  for (auto split : kSplits) {
    fs::create_directories(out / "images" / split, ec);
    if (ec) throw IoError("cannot create " + (out / "images" / split).string() + ": " + ec.message());
  }

  std::vector<double> means(m.records.size());
  const auto count = static_cast<std::ptrdiff_t>(m.records.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t k = 0; k < count; ++k) {
    const Record& r = m.records[static_cast<std::size_t>(k)];
    const std::size_t index = indices[static_cast<std::size_t>(k)];
    const Image img = r.label == 0 ? real_image(options.seed, r.split, index)
                                   : fake_image(*m.family(r.family), options.seed, r.split, index);
    means[static_cast<std::size_t>(k)] = pixel_mean(quantize8(img));
    try {
      write_png(img, out / r.path);
    } catch (const Error& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw IoError(failure);

  // Brightness alone must not separate real from fake.
  if (options.counts.train >= options.separability_min_count) {
    std::vector<double> real_means;
    for (std::size_t k = 0; k < m.records.size(); ++k) {
      if (m.records[k].split == "train" && m.records[k].label == 0) real_means.push_back(means[k]);
    }
    for (const auto& f : options.families) {
      std::vector<double> fake_means;
      for (std::size_t k = 0; k < m.records.size(); ++k) {
        if (m.records[k].split == "train" && m.records[k].family == f.name) fake_means.push_back(means[k]);
      }
      const double acc = mean_threshold_accuracy(real_means, fake_means);
      if (acc > options.separability_limit) {
        throw InvariantError("family '" + f.name + "' is separable by pixel mean alone (accuracy " +
                             std::to_string(acc) + ")");
      }
    }
  }

  save_manifest(m, out / "manifest.jsonl");
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    for (const auto& r : m.records) {
      os << json{{"path", r.path}, {"label", r.label}, {"family", r.family}, {"split", r.split}}.dump() << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
  }
  json meta = {{"seed", m.seed},
               {"counts", {{"train", m.counts.train}, {"val", m.counts.val}, {"test", m.counts.test}}},
               {"families", json::array()}};
  for (const auto& f : m.families) meta["families"].push_back(spec_to_json(f));
  const auto sidecar = path.parent_path() / "dataset.json";
  std::ofstream os(sidecar, std::ios::binary);
  if (!os) throw IoError("cannot write " + sidecar.string());
  os << meta.dump(2) << '\n';
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();

  const auto sidecar = m.root / "dataset.json";
  std::set<std::string> known;
  const bool has_sidecar = std::filesystem::exists(sidecar);
  if (has_sidecar) {
    std::ifstream ss(sidecar, std::ios::binary);
    try {
      const json meta = json::parse(ss);
      m.seed = meta.at("seed").get<std::uint64_t>();
      const auto& c = meta.at("counts");
      m.counts = {c.at("train").get<std::size_t>(), c.at("val").get<std::size_t>(), c.at("test").get<std::size_t>()};
      for (const auto& f : meta.at("families")) m.families.push_back(spec_from_json(f));
    } catch (const json::exception& e) {
      throw ParseError(sidecar.string() + ": " + e.what());
    }
    validate_specs(m.families);
    for (const auto& f : m.families) known.insert(f.name);
  }

  std::string line;
  std::size_t index = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    Record r;
    try {
      const json j = json::parse(line);
      r.path = j.at("path").get<std::string>();
      r.label = j.at("label").get<int>();
      r.family = j.at("family").get<std::string>();
      r.split = j.at("split").get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), index);
    }
    validate_record(r, index, has_sidecar ? &known : nullptr);
    if (!std::filesystem::exists(m.root / r.path)) {
      throw InvariantError("missing image file " + r.path, index);
    }
    m.records.push_back(std::move(r));
    ++index;
  }
  return m;
}

std::vector<Image> load_images(const Manifest& manifest, const std::vector<const Record*>& records) {
  std::vector<Image> out(records.size());
  const auto n = static_cast<std::ptrdiff_t>(records.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = read_png(manifest.image_path(*records[static_cast<std::size_t>(i)]));
    } catch (const Error& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw IoError(failure);
  return out;
}

}  // namespace capdetect::synth
