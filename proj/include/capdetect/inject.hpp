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

#include <cstdint>
#include <set>

#include "capdetect/lora.hpp"
#include "capdetect/model.hpp"

namespace capdetect::lora {

struct InjectOptions {
  std::set<ProjectionKind> targets = {ProjectionKind::kQuery, ProjectionKind::kKey};
  std::size_t rank = 16;
  double alpha = 32.0;
  double dropout_p = 0.05;
  std::uint64_t seed = 0;
};

/// Replaces any existing adapters with one fresh adapter per targeted
/// projection in every decoder self-attention layer, then freezes the whole
/// base so that the trainable set is exactly the adapter factors.
/// Adapter seeds are derived from options.seed and the adapter position.
void inject(model::CaptionModel& model, const InjectOptions& options);

}  // namespace capdetect::lora
