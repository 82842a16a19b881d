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

#include "capdetect/inject.hpp"

namespace capdetect::lora {

void inject(model::CaptionModel& model, const InjectOptions& options) {
  model.clear_adapters();
  model.set_base_trainable(false);
  const auto& cfg = model.config();
  for (std::size_t layer = 0; layer < cfg.decoder_layers; ++layer) {
    for (ProjectionKind kind : options.targets) {
      const std::uint64_t seed =
          options.seed * 1000003ULL + layer * 16ULL + static_cast<std::uint64_t>(kind);
      model.attach_adapter(layer, kind,
                           init_adapter(cfg.d_model, cfg.d_model, options.rank, options.alpha,
                                        options.dropout_p, seed));
    }
  }
}

}  // namespace capdetect::lora
