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

// Binary checkpoint:
//
//   "BLRA"  u32 version  u32 count
//   count x { u16 name_len, name, u8 rank, u64 extents[rank], f64 data[] }
//   u32 json_len, json   (model config, train config, stage, adapters, extras)
//
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "capdetect/model.hpp"
#include "capdetect/trainer.hpp"
#include "json.hpp"

namespace capdetect::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AdapterMeta {
  std::size_t layer = 0;
  lora::ProjectionKind kind = lora::ProjectionKind::kQuery;
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout_p = 0.0;

  bool operator==(const AdapterMeta&) const = default;
};

struct Checkpoint {
  std::vector<model::NamedTensor> tensors;
  model::ModelConfig model;
  TrainConfig train;
  Stage stage = Stage::kPretrain;
  std::uint32_t version = kCheckpointVersion;
  std::vector<AdapterMeta> adapters;
  /// Free-form run information (family, best epoch, val accuracy).
  nlohmann::json extras = nlohmann::json::object();
};

/// Deep copy of every model tensor plus configs.
Checkpoint make_checkpoint(const model::CaptionModel& m, const TrainConfig& cfg, Stage stage);

/// Rebuilds a model. Throws InvariantError when a parameter is missing,
/// duplicated, unknown or mis-shaped.
model::CaptionModel restore_model(const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws BadMagicError, VersionMismatchError, TruncatedFileError, or
/// IoError when the file cannot be opened.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace capdetect::train
