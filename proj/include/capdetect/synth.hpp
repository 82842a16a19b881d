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

// Procedural real/fake corpus. Real images are smooth textures; a fake image
// is an independently drawn smooth texture plus its family's fingerprint.
//
// On disk:
//   <out>/manifest.jsonl          one record per image
//   <out>/dataset.json            seed, counts, family specs
//   <out>/images/<split>/<family>_<index>.png

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capdetect/image.hpp"

namespace capdetect::synth {

inline constexpr std::string_view kRealFamily = "real";
inline constexpr std::size_t kImageSize = 32;

enum class ArtifactKind { kPeriodic, kCheckerboard };

std::string_view to_string(ArtifactKind kind);
ArtifactKind parse_artifact_kind(std::string_view name);

// kPretrain families only feed the base pretraining stage, where they are
// captioned "fake"; they are never fine-tuned on or evaluated by default.
enum class FamilyRole { kTrain, kTransfer, kPretrain };

std::string_view to_string(FamilyRole role);
FamilyRole parse_family_role(std::string_view name);

struct FamilySpec {
  std::string name;
  ArtifactKind kind = ArtifactKind::kPeriodic;
  double frequency = 4.0;    // cycles per image
  double orientation = 0.0;  // radians; periodic only
  double amplitude = 0.06;
  FamilyRole role = FamilyRole::kTrain;

  bool operator==(const FamilySpec&) const = default;
};

/// fam_a..fam_e (periodic, role train), xfer_a, xfer_b (checkerboard, role
/// transfer), then aux_a, aux_b (periodic, role pretrain).
std::vector<FamilySpec> default_families();

struct SplitCounts {
  std::size_t train = 400;
  std::size_t val = 10;
  std::size_t test = 100;

  std::size_t of(std::string_view split) const;
  bool operator==(const SplitCounts&) const = default;
};

inline constexpr std::string_view kSplits[] = {"train", "val", "test"};
bool is_split(std::string_view s);

struct Record {
  std::string path;  // relative to the manifest's directory
  int label = 0;     // 1 = fake
  std::string family;
  std::string split;

  bool operator==(const Record&) const = default;
};

struct Manifest {
  std::vector<Record> records;
  std::uint64_t seed = 0;
  SplitCounts counts;
  std::vector<FamilySpec> families;
  /// Directory the record paths are relative to. Not serialized.
  std::filesystem::path root;

  bool operator==(const Manifest& o) const {
    return records == o.records && seed == o.seed && counts == o.counts && families == o.families;
  }

  std::filesystem::path image_path(const Record& r) const { return root / r.path; }
  /// Fake family names in spec order (record order if there is no sidecar).
  std::vector<std::string> fake_families() const;
  std::vector<std::string> families_with_role(FamilyRole role) const;
  /// Fake families minus the pretrain-only ones.
  std::vector<std::string> eval_families() const;
  const FamilySpec* family(std::string_view name) const;
  /// Records of `split` that are real or belong to `family`, in manifest order.
  /// An empty family selects every record in the split.
  std::vector<const Record*> select(std::string_view split, std::string_view family = {}) const;
};

/// Throws ConfigError: duplicate or reserved names, zero amplitude or
/// amplitude above 0.5, non-positive frequency, identical parameters, or
/// families whose artifact patterns are closer than 0.01 in mean absolute
/// difference.
void validate_specs(const std::vector<FamilySpec>& specs);

/// Deterministic images (also used directly by tests).
Image real_image(std::uint64_t seed, std::string_view split, std::size_t index);
Image fake_image(const FamilySpec& spec, std::uint64_t seed, std::string_view split, std::size_t index);
/// The family's fingerprint at zero phase, values in [-amplitude, amplitude].
Image artifact_pattern(const FamilySpec& spec, double phase_x = 0.0, double phase_y = 0.0);

/// Balanced accuracy of the best single threshold on the per-image pixel mean
/// (either polarity), real vs fake.
double mean_threshold_accuracy(const std::vector<double>& real_means, const std::vector<double>& fake_means);

struct GenOptions {
  std::vector<FamilySpec> families = default_families();
  SplitCounts counts;
  std::uint64_t seed = 0;
  /// Upper bound for the brightness-only classifier, checked on the train
  /// split when every class has at least `separability_min_count` images.
  double separability_limit = 0.6;
  std::size_t separability_min_count = 100;
};

/// Writes images, manifest.jsonl and dataset.json under `out`, which must
/// not exist or be empty. Returns the manifest (root = out).
Manifest gen_dataset(const GenOptions& options, const std::filesystem::path& out);

/// Reads manifest.jsonl (and dataset.json next to it, if present) and
/// re-validates every record. Errors carry the record index.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Loads the images behind `records`, in order.
std::vector<Image> load_images(const Manifest& manifest, const std::vector<const Record*>& records);

}  // namespace capdetect::synth
