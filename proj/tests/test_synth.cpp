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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "capdetect/errors.hpp"
#include "capdetect/synth.hpp"
#include "doctest.h"

using namespace capdetect;
using namespace capdetect::synth;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("capdetect_synth_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

GenOptions small_options() {
  GenOptions o;
  o.families = {default_families()[0], default_families()[5]};
  o.counts = {8, 2, 4};
  o.seed = 7;
  return o;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << '\n';
}

}  // namespace

TEST_CASE("gen_dataset: record counts and shared real pool") {
  TempDir dir("counts");
  const Manifest m = gen_dataset(small_options(), dir.path);
  CHECK(m.records.size() == 42);
  std::size_t fake_train = 0, real_train = 0;
  for (const auto& r : m.records) {
    fake_train += r.split == "train" && r.label == 1;
    real_train += r.split == "train" && r.label == 0;
  }
  CHECK(fake_train == 16);
  CHECK(real_train == 8);

  const auto a = m.select("test", "fam_a");
  const auto b = m.select("test", "xfer_a");
  CHECK(a.size() == 8);
  std::vector<std::string> real_a, real_b;
  for (auto* r : a) if (r->label == 0) real_a.push_back(slurp(m.image_path(*r)));
  for (auto* r : b) if (r->label == 0) real_b.push_back(slurp(m.image_path(*r)));
  CHECK(real_a.size() == 4);
  CHECK(real_a == real_b);
  CHECK(m.families_with_role(FamilyRole::kTransfer) == std::vector<std::string>{"xfer_a"});
}

TEST_CASE("gen_dataset: deterministic bytes and refuses a non-empty directory") {
  TempDir d1("det1"), d2("det2");
  const Manifest m1 = gen_dataset(small_options(), d1.path);
  gen_dataset(small_options(), d2.path);
  CHECK(slurp(d1.path / "manifest.jsonl") == slurp(d2.path / "manifest.jsonl"));
  CHECK(slurp(d1.path / "dataset.json") == slurp(d2.path / "dataset.json"));
  for (const auto& r : m1.records) CHECK(slurp(d1.path / r.path) == slurp(d2.path / r.path));
  CHECK_THROWS_AS(gen_dataset(small_options(), d1.path), IoError);

  auto other = small_options();
  other.seed = 8;
  TempDir d3("det3");
  gen_dataset(other, d3.path);
  CHECK(slurp(d1.path / m1.records[0].path) != slurp(d3.path / m1.records[0].path));
}

TEST_CASE("spec validation") {
  auto specs = default_families();
  CHECK_NOTHROW(validate_specs(specs));
  specs[1].amplitude = 0.0;
  CHECK_THROWS_AS(validate_specs(specs), ConfigError);
  specs = default_families();
  specs[1].name = specs[0].name;
  CHECK_THROWS_AS(validate_specs(specs), ConfigError);
  specs = default_families();
  specs[1] = specs[0];
  specs[1].name = "copy";
  CHECK_THROWS_AS(validate_specs(specs), ConfigError);
  specs = default_families();
  specs[0].name = "real";
  CHECK_THROWS_AS(validate_specs(specs), ConfigError);
}

TEST_CASE("default roles and eval families") {
  Manifest m;
  m.families = default_families();
  CHECK(m.families_with_role(FamilyRole::kTrain).size() == 5);
  CHECK(m.families_with_role(FamilyRole::kTransfer) == std::vector<std::string>{"xfer_a", "xfer_b"});
  CHECK(m.families_with_role(FamilyRole::kPretrain) == std::vector<std::string>{"aux_a", "aux_b"});
  const auto eval = m.eval_families();
  CHECK(eval.size() == 7);
  CHECK(std::find(eval.begin(), eval.end(), "aux_a") == eval.end());
  CHECK(parse_family_role(to_string(FamilyRole::kPretrain)) == FamilyRole::kPretrain);
  CHECK_THROWS_AS(parse_family_role("held"), ConfigError);
}

TEST_CASE("default families are pairwise distinct by more than 0.01") {
  const auto specs = default_families();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      const Image a = artifact_pattern(specs[i]), b = artifact_pattern(specs[j]);
      double d = 0.0;
      for (std::size_t k = 0; k < a.pixels.size(); ++k) d += std::abs(a.pixels[k] - b.pixels[k]);
      CHECK(d / a.pixels.size() > 0.01);
    }
  }
}

TEST_CASE("mean_threshold_accuracy against a brute-force sweep") {
  const std::vector<double> real = {0.1, 0.4, 0.35, 0.8}, fake = {0.5, 0.45, 0.2};
  double best = 0.0;
  std::vector<double> cuts = {-1.0, 2.0};
  for (double v : real) cuts.push_back(v + 1e-9);
  for (double v : fake) cuts.push_back(v + 1e-9);
  for (double t : cuts) {
    double r_below = 0, f_below = 0;
    for (double v : real) r_below += v < t;
    for (double v : fake) f_below += v < t;
    const double acc = 0.5 * (r_below / real.size() + (fake.size() - f_below) / fake.size());
    best = std::max({best, acc, 1.0 - acc});
  }
  CHECK(mean_threshold_accuracy(real, fake) == doctest::Approx(best).epsilon(1e-12));
  CHECK(mean_threshold_accuracy({0.1, 0.2}, {0.8, 0.9}) == 1.0);
}

TEST_CASE("default corpus is not separable by brightness") {
  TempDir dir("sep");
  GenOptions o;
  o.counts = {100, 1, 1};
  o.seed = 3;
  CHECK_NOTHROW(gen_dataset(o, dir.path));
}

TEST_CASE("load_manifest: round trip and record-level errors") {
  TempDir dir("load");
  const Manifest m = gen_dataset(small_options(), dir.path);
  const Manifest loaded = load_manifest(dir.path / "manifest.jsonl");
  CHECK(loaded == m);
  CHECK(load_images(loaded, loaded.select("val")).size() == 6);

  const auto bad = dir.path / "bad.jsonl";
  write_lines(bad, {R"({"path":"images/train/real_00000.png","label":0,"family":"real","split":"train"})",
                    R"({"path":"images/train/fam_a_00000.png","label":0,"family":"fam_a","split":"train"})"});
  try {
    load_manifest(bad);
    FAIL("expected an invariant error");
  } catch (const InvariantError& e) {
    CHECK(e.record() == 1);
  }

  write_lines(bad, {R"({"path":"images/train/nope.png","label":0,"family":"real","split":"train"})"});
  CHECK_THROWS_WITH_AS(load_manifest(bad), doctest::Contains("record 0"), InvariantError);

  write_lines(bad, {R"({"path":"images/train/real_00000.png","label":0,"family":"real","split":"train"})",
                    "{not json"});
  try {
    load_manifest(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.record() == 1);
  }

  write_lines(bad, {R"({"path":"images/train/real_00000.png","label":0,"family":"real","split":"dev"})"});
  CHECK_THROWS_AS(load_manifest(bad), InvariantError);
  write_lines(bad, {R"({"path":"images/train/real_00000.png","label":1,"family":"ghost","split":"train"})"});
  CHECK_THROWS_AS(load_manifest(bad), InvariantError);

  write_lines(bad, {});
  CHECK(load_manifest(bad).records.empty());
  CHECK_THROWS_AS(load_manifest(dir.path / "absent.jsonl"), IoError);
}

TEST_CASE("images are valid and fakes carry the artifact") {
  const auto specs = default_families();
  const Image r = real_image(1, "train", 0);
  CHECK(r.height == 32);
  for (double v : r.pixels) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(real_image(1, "train", 0) == r);
  CHECK(real_image(1, "train", 1) != r);
  const Image f = fake_image(specs[0], 1, "train", 0);
  CHECK(fake_image(specs[0], 1, "train", 0) == f);
  CHECK(f != fake_image(specs[1], 1, "train", 0));
}
