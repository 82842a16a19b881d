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

// Two training stages over the same loop:
//   pretrain  every base tensor trainable; captions name the artifact
//             attribute ("grid-a", ...), "real" for reals and "fake" for
//             pretrain-role families.
//   finetune  base frozen, adapters only; captions are "real" / "fake".

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "capdetect/lora.hpp"
#include "capdetect/model.hpp"
#include "capdetect/synth.hpp"
#include "json.hpp"

namespace capdetect::train {

enum class Stage { kPretrain, kFinetune };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamHyper&) const = default;
};

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;
  std::set<lora::ProjectionKind> targets = {lora::ProjectionKind::kQuery, lora::ProjectionKind::kKey};
  bool operator==(const LoraConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  AdamHyper adam;
  LoraConfig lora;
  std::uint64_t seed = 0;
  Stage stage = Stage::kFinetune;
  /// Stop once validation accuracy reaches 1.0, but not before min_epochs.
  bool early_exit = true;
  std::size_t min_epochs = 1;
  /// Fake families to train on. Finetune: exactly one. Pretrain: empty
  /// means every family with the train or pretrain role.
  std::vector<std::string> families;

  /// Learning rate of the original large-model recipe.
  static TrainConfig paper_preset();

  /// Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Unknown keys are rejected (ConfigError); missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---------------------------------------------------------------------------
// Adam

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamState {
  std::map<std::string, AdamSlot> slots;
  std::uint64_t t = 0;
};

/// One Adam update of every requires_grad parameter that holds a gradient.
/// Throws NumericError naming the parameter on a non-finite gradient (no
/// parameter is modified in that case).
void adam_step(AdamState& state, const std::vector<model::NamedTensor>& params, double lr,
               const AdamHyper& hyper = {});

// ---------------------------------------------------------------------------
// Data

struct Example {
  Image image;
  std::vector<int> caption;  // word ids, without BOS/EOS
  int label = 0;
  std::string family;
};

/// Caption word used for `family` during pretraining: "real" for real,
/// "fake" for pretrain-role families, otherwise the i-th periodic family gets
/// grid-<a+i> and the i-th checkerboard family check-<a+i>. Words missing
/// from the vocabulary become "other".
std::map<std::string, std::string> pretrain_caption_words(const synth::Manifest& manifest,
                                                          const model::ModelConfig& cfg);

/// Loads the examples of one split for the configured stage and families.
std::vector<Example> load_examples(const synth::Manifest& manifest, const std::string& split,
                                   const model::ModelConfig& model_cfg, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  std::uint64_t base_hash_before = 0;
  std::uint64_t base_hash_after = 0;
  std::size_t trainable_params = 0;
};

using Logger = std::function<void(const std::string&)>;

/// FNV-1a over the bytes of every base tensor, in base_parameters() order.
std::uint64_t base_hash(const model::CaptionModel& m);

/// Number of scalars in requires_grad tensors.
std::size_t trainable_count(const model::CaptionModel& m);

/// Trains `m` in place and leaves it at the best-validation state.
/// Finetune requires adapters on the model (ContractError otherwise) and
/// verifies the base is untouched (InvariantError otherwise).
TrainResult train(model::CaptionModel& m, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainConfig& cfg, const Logger& log = {});

/// Fraction of examples whose generated caption equals the target caption
/// (pretrain) or whose verdict matches the label (finetune).
double caption_accuracy(const model::CaptionModel& m, const std::vector<Example>& set, Stage stage);

}  // namespace capdetect::train
