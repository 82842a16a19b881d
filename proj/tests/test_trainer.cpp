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
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "capdetect/checkpoint.hpp"
#include "capdetect/errors.hpp"
#include "capdetect/eval.hpp"
#include "capdetect/inject.hpp"
#include "capdetect/synth.hpp"
#include "capdetect/trainer.hpp"
#include "doctest.h"

using namespace capdetect;
using namespace capdetect::train;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("capdetect_trainer_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Gives `t` the gradient `g` (elementwise) through a recorded tape.
void set_grad(Tensor& t, double g) {
  Graph graph;
  graph.backward(graph.sum(graph.scale(t, g)));
}

// Four reals and four fam_a fakes with verdict captions.
std::vector<Example> tiny_set(const model::ModelConfig& cfg) {
  const auto fam = synth::default_families()[0];
  std::vector<Example> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out.push_back({synth::real_image(5, "train", i), {cfg.token_id(model::kReal)}, 0, "real"});
    out.push_back({synth::fake_image(fam, 5, "train", i), {cfg.token_id(model::kFake)}, 1, fam.name});
  }
  return out;
}

const std::set<lora::ProjectionKind> kAllKinds = {lora::ProjectionKind::kQuery, lora::ProjectionKind::kKey,
                                                  lora::ProjectionKind::kValue, lora::ProjectionKind::kOutput};

model::CaptionModel adapted_model(std::uint64_t seed, std::set<lora::ProjectionKind> targets = {
                                                          lora::ProjectionKind::kQuery, lora::ProjectionKind::kKey}) {
  model::ModelConfig cfg;
  cfg.seed = seed;
  model::CaptionModel m(cfg);
  lora::InjectOptions opts;
  opts.seed = seed + 1;
  opts.targets = std::move(targets);
  lora::inject(m, opts);
  return m;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 8;
  c.seed = 11;
  c.early_exit = false;
  c.learning_rate = 1e-2;
  return c;
}

}  // namespace

TEST_CASE("adam worked example on a scalar") {
  Tensor theta = Tensor::scalar(1.0, true);
  set_grad(theta, 2.0);
  AdamState st;
  adam_step(st, {{"theta", theta}}, 1e-3);
  CHECK(st.t == 1);
  CHECK(st.slots["theta"].m[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(st.slots["theta"].v[0] == doctest::Approx(0.004).epsilon(1e-15));
  // Oracle: m_hat = 0.2 / 0.1 = 2, v_hat = 0.004 / 0.001 = 4.
  const double expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
  CHECK(std::abs(theta.item() - expected) < 1e-15);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Tensor w({2, 2}, {0.5, -1.0, 2.0, 3.0}, true);
  const auto before = std::vector<double>(w.data().begin(), w.data().end());
  set_grad(w, 0.0);
  AdamState st;
  adam_step(st, {{"w", w}}, 1e-3);
  CHECK(std::vector<double>(w.data().begin(), w.data().end()) == before);
}

TEST_CASE("adam skips frozen parameters and parameters without gradients") {
  Tensor frozen = Tensor::scalar(3.0, false);
  Tensor no_grad = Tensor::scalar(4.0, true);
  AdamState st;
  adam_step(st, {{"frozen", frozen}, {"no_grad", no_grad}}, 1e-1);
  CHECK(frozen.item() == 3.0);
  CHECK(no_grad.item() == 4.0);
  CHECK(st.slots.empty());
}

TEST_CASE("adam rejects non-finite gradients by name without updating") {
  Tensor a = Tensor::scalar(1.0, true);
  Tensor b = Tensor::scalar(1.0, true);
  set_grad(a, 1.0);
  set_grad(b, std::numeric_limits<double>::quiet_NaN());
  AdamState st;
  try {
    adam_step(st, {{"a", a}, {"b", b}}, 1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  CHECK(a.item() == 1.0);
  CHECK(st.t == 0);
}

TEST_CASE("train config validation and json round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(TrainConfig::paper_preset().learning_rate == 5e-5);
  auto bad = c;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.lora.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  c.seed = 9;
  c.families = {"fam_b"};
  c.lora.targets = {lora::ProjectionKind::kValue};
  CHECK(train_config_from_json(train_config_to_json(c)) == c);
  auto j = train_config_to_json(c);
  j["warmup"] = 3;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("finetune without adapters is a contract error") {
  model::ModelConfig cfg;
  model::CaptionModel m(cfg);
  const auto set = tiny_set(cfg);
  CHECK_THROWS_AS(train::train(m, set, set, tiny_config()), ContractError);
}

TEST_CASE("finetune on an empty split is rejected") {
  auto m = adapted_model(3);
  CHECK_THROWS_AS(train::train(m, {}, {}, tiny_config()), ContractError);
}

TEST_CASE("loss on a fixed batch strictly decreases over the first 5 steps") {
  auto m = adapted_model(3);
  const auto set = tiny_set(m.config());
  auto cfg = tiny_config();
  cfg.epochs = 5;
  cfg.lora.dropout = 0.0;
  const auto r = train::train(m, set, {}, cfg);
  REQUIRE(r.history.size() == 5);
  // One batch per epoch, so each history entry is the loss of the same batch.
  for (std::size_t i = 1; i < 5; ++i) CHECK(r.history[i].train_loss < r.history[i - 1].train_loss);
  CHECK(r.base_hash_before == r.base_hash_after);
  CHECK(r.trainable_params == lora::count_params(2, 64, 2, 16, 0).trainable);
}

// Query/key adapters alone only re-weight attention over a frozen value
// path and stall near chance on this set, so the memorisation check adapts
// every projection.
TEST_CASE("overfit eight samples: accuracy reaches 100%, base untouched") {
  auto m = adapted_model(3, kAllKinds);
  const auto set = tiny_set(m.config());
  auto cfg = tiny_config();
  cfg.lora.targets = kAllKinds;
  const auto r = train::train(m, set, set, cfg);
  CHECK(caption_accuracy(m, set, Stage::kFinetune) == 1.0);
  CHECK(r.best_val_accuracy == 1.0);
  CHECK(r.base_hash_before == r.base_hash_after);
  CHECK(base_hash(m) == r.base_hash_before);
  CHECK(r.trainable_params == lora::count_params(2, 64, 4, 16, 0).trainable);
}

TEST_CASE("same seed gives byte-identical checkpoints") {
  TempDir d("det");
  std::vector<std::string> files;
  for (int run = 0; run < 2; ++run) {
    auto m = adapted_model(3);
    const auto set = tiny_set(m.config());
    auto cfg = tiny_config();
    cfg.epochs = 3;
    train::train(m, set, set, cfg);
    const auto p = d.path / ("run" + std::to_string(run) + ".blra");
    save_checkpoint(make_checkpoint(m, cfg, Stage::kFinetune), p);
    files.push_back(slurp(p));
  }
  CHECK(files[0] == files[1]);
}

TEST_CASE("pretraining caption words") {
  synth::Manifest man;
  man.families = synth::default_families();
  const auto words = pretrain_caption_words(man, model::ModelConfig{});
  CHECK(words.at("real") == "real");
  CHECK(words.at("fam_a") == "grid-a");
  CHECK(words.at("fam_e") == "grid-e");
  CHECK(words.at("xfer_a") == "check-a");
  CHECK(words.at("xfer_b") == "check-b");
  CHECK(words.at("aux_a") == "fake");
  CHECK(words.at("aux_b") == "fake");
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir d("rt");
  auto m = adapted_model(4);
  // Give the B factors non-zero values so the adapter path is exercised.
  for (auto& [name, t] : m.adapter_parameters()) {
    auto w = Tensor(t).mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.01 * static_cast<double>(i % 7);
  }
  TrainConfig cfg;
  cfg.families = {"fam_a"};
  auto ck = make_checkpoint(m, cfg, Stage::kFinetune);
  ck.extras["family"] = "fam_a";
  save_checkpoint(ck, d.path / "a.blra");
  const auto back = load_checkpoint(d.path / "a.blra");
  CHECK(back.model == ck.model);
  CHECK(back.train == ck.train);
  CHECK(back.stage == Stage::kFinetune);
  CHECK(back.adapters == ck.adapters);
  CHECK(back.extras == ck.extras);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == ck.tensors[i].first);
    CHECK(back.tensors[i].second.shape() == ck.tensors[i].second.shape());
    const auto a = ck.tensors[i].second.data(), b = back.tensors[i].second.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  // Saving the reloaded checkpoint reproduces the file.
  save_checkpoint(back, d.path / "b.blra");
  CHECK(slurp(d.path / "a.blra") == slurp(d.path / "b.blra"));
}

TEST_CASE("load then eval matches pre-save eval") {
  TempDir d("eval");
  synth::GenOptions g;
  g.families = {synth::default_families()[0]};
  g.counts = {4, 2, 6};
  g.seed = 2;
  const auto man = synth::gen_dataset(g, d.path / "data");
  auto m = adapted_model(6);
  for (auto& [name, t] : m.adapter_parameters()) {
    auto w = Tensor(t).mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.05 * std::sin(static_cast<double>(i));
  }
  const auto before = eval::eval_subset(m, man, "fam_a", degrade::DegradeSpec::none());
  save_checkpoint(make_checkpoint(m, TrainConfig{}, Stage::kFinetune), d.path / "m.blra");
  const auto restored = restore_model(load_checkpoint(d.path / "m.blra"));
  const auto after = eval::eval_subset(restored, man, "fam_a", degrade::DegradeSpec::none());
  CHECK(after.counts == before.counts);
  CHECK(after.predictions == before.predictions);
  CHECK(after.acc == before.acc);
}

TEST_CASE("checkpoint format errors are distinct") {
  TempDir d("err");
  const auto m = adapted_model(1);
  const auto path = d.path / "m.blra";
  save_checkpoint(make_checkpoint(m, TrainConfig{}, Stage::kFinetune), path);
  const std::string good = slurp(path);
  auto write = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  };

  std::string bad = good;
  bad[0] = 'X';
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path), BadMagicError);

  bad = good;
  bad[4] = 2;
  write(bad);
  CHECK_THROWS_AS(load_checkpoint(path), VersionMismatchError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    write(good.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(path), TruncatedFileError);
  }

  write(good + "x");
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  CHECK_THROWS_AS(load_checkpoint(d.path / "missing.blra"), IoError);
}

TEST_CASE("restore rejects missing and mis-shaped tensors") {
  const auto m = adapted_model(1);
  auto ck = make_checkpoint(m, TrainConfig{}, Stage::kFinetune);
  auto missing = ck;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(restore_model(missing), InvariantError);
  auto dup = ck;
  dup.tensors.push_back(dup.tensors.front());
  CHECK_THROWS_AS(restore_model(dup), InvariantError);
  auto shaped = ck;
  shaped.tensors[0].second = Tensor::zeros({1});
  CHECK_THROWS_AS(restore_model(shaped), InvariantError);
}
