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

// Toy vision-language captioner:
//
//   image --patchify--> patch encoder --> query bridge --> causal decoder
//                        (ViT blocks)     (cross-attn)     [prefix | BOS w1 w2 ...]
//
// The bridge hands `query_tokens` vectors to the decoder as a visual prefix.
// The decoder emits a short caption; caption_to_label() reads "real"/"fake"
// off its first word. Low-rank adapters can be attached to the decoder's
// self-attention projections (see inject.hpp).

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capdetect/image.hpp"
#include "capdetect/lora.hpp"
#include "capdetect/tensor.hpp"

namespace capdetect::model {

inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kReal = "real";
inline constexpr std::string_view kFake = "fake";

/// 16 tokens: specials, the two verdict words, then attribute words that
/// only appear in base pretraining captions.
std::vector<std::string> default_vocab();

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t d_model = 64;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t query_tokens = 4;
  std::size_t mlp_hidden = 128;
  std::size_t max_caption_len = 4;
  std::vector<std::string> vocab = default_vocab();
  std::uint64_t seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  std::size_t num_patches() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  /// Prefix + BOS + longest caption + its EOS slot.
  std::size_t decoder_positions() const { return query_tokens + 1 + max_caption_len; }

  /// Index of `word` in the vocabulary; ConfigError if absent.
  int token_id(std::string_view word) const;
  int bos() const { return token_id(kBos); }
  int eos() const { return token_id(kEos); }
  int pad() const { return token_id(kPad); }

  bool operator==(const ModelConfig&) const = default;
};

/// Generated words, without BOS/EOS.
struct Caption {
  std::vector<int> tokens;
  std::string text;

  bool operator==(const Caption&) const = default;
};

enum class Verdict { kReal = 0, kFake = 1, kAbstain = 2 };

/// "real..." -> kReal, "fake..." -> kFake, anything else -> kAbstain.
Verdict caption_to_label(const Caption& caption);

/// Renders token ids as space-separated words.
Caption make_caption(const ModelConfig& config, std::vector<int> tokens);

struct Linear {
  Tensor w;  // [out x in]
  Tensor b;  // [out]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  Linear q, k, v, o;
};

struct Block {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  Linear fc1, fc2;
};

/// Training-mode switches for one forward pass. Only adapter dropout is
/// stochastic; with training == false every forward is deterministic.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

using NamedTensor = std::pair<std::string, Tensor>;
using AdapterKey = std::pair<std::size_t, lora::ProjectionKind>;

class CaptionModel {
 public:
  /// Random initialisation from config.seed.
  explicit CaptionModel(ModelConfig config);

  CaptionModel(CaptionModel&&) noexcept = default;
  CaptionModel& operator=(CaptionModel&&) noexcept = default;
  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  /// Deep copy (parameters and adapters).
  CaptionModel clone() const;

  const ModelConfig& config() const { return config_; }

  /// Every frozen-base tensor in a fixed order. Handles share storage with
  /// the model.
  std::vector<NamedTensor> base_parameters() const;
  /// Adapter factors ("<target>.lora_a", "<target>.lora_b") in layer/kind order.
  std::vector<NamedTensor> adapter_parameters() const;
  std::vector<NamedTensor> all_parameters() const;

  /// Sets requires_grad on every base tensor.
  void set_base_trainable(bool on);

  // Adapters on decoder self-attention projections.
  void attach_adapter(std::size_t layer, lora::ProjectionKind kind, lora::LoraAdapter adapter);
  const lora::LoraAdapter* adapter(std::size_t layer, lora::ProjectionKind kind) const;
  const std::map<AdapterKey, lora::LoraAdapter>& adapters() const { return adapters_; }
  void clear_adapters() { adapters_.clear(); }
  /// Name of the weight an adapter at (layer, kind) targets.
  static std::string adapter_target(std::size_t layer, lora::ProjectionKind kind);

  /// Images -> normalised patch rows [batch * num_patches x patch_dim].
  Tensor patchify(std::span<const Image* const> images) const;

  /// Patch rows -> image tokens [batch * num_patches x d_model].
  Tensor encode(Graph& g, const Tensor& patches, std::size_t batch) const;
  /// Single-image convenience: [num_patches x d_model].
  Tensor encode_image(Graph& g, const Image& image) const;

  /// Image tokens [batch * n x d_model] -> visual prefix
  /// [batch * query_tokens x d_model]. Works for any n >= 1.
  Tensor bridge(Graph& g, const Tensor& image_tokens, std::size_t batch, std::size_t n) const;

  /// Frozen encoder + bridge for a batch of images, no graph recorded.
  Tensor visual_prefix(std::span<const Image* const> images) const;

  /// Teacher-forced decoder pass. `tokens` holds batch rows of `steps` ids,
  /// each row starting with BOS. Returns next-token logits for the text
  /// positions, [batch * steps x vocab].
  Tensor decode(Graph& g, const Tensor& prefix, std::size_t batch, std::span<const int> tokens,
                std::size_t steps, ForwardMode mode = {}) const;

  /// Greedy captions for a batch of visual prefixes (eval mode).
  std::vector<Caption> generate_from_prefix(const Tensor& prefix, std::size_t batch,
                                            std::size_t max_len) const;
  std::vector<Caption> generate_captions(std::span<const Image* const> images,
                                         std::size_t max_len) const;
  Caption generate_caption(const Image& image, std::size_t max_len) const;

 private:
  struct Encoder {
    Linear patch_embed;
    Tensor pos;
    std::vector<Block> blocks;
    LayerNormParams ln_f;
  };
  struct Bridge {
    Tensor queries;
    LayerNormParams ln_q, ln_kv;
    AttentionParams attn;
    LayerNormParams ln2;
    Linear fc1, fc2;
    LayerNormParams ln_f;
  };
  struct Decoder {
    Tensor tok_embed;
    Tensor pos;
    std::vector<Block> blocks;
    LayerNormParams ln_f;
    Linear head;
  };

  struct Uninitialized {};
  CaptionModel(Uninitialized, ModelConfig config) : config_(std::move(config)) {}

  void for_each_base(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  ModelConfig config_;
  Encoder encoder_;
  Bridge bridge_;
  Decoder decoder_;
  std::map<AdapterKey, lora::LoraAdapter> adapters_;
};

/// Greedy decoding driver: repeatedly asks `next_logits` for the scores of
/// the next token given the tokens so far (starting with just BOS), appends
/// the argmax (lowest index on ties; BOS and PAD are never emitted), and
/// stops at EOS or after `max_len` words. Throws ContractError if max_len < 1.
using NextLogitsFn = std::function<std::vector<double>(std::span<const int> tokens)>;
Caption greedy_decode(const ModelConfig& config, const NextLogitsFn& next_logits, std::size_t max_len);

/// Mean token cross-entropy of logits [steps x vocab] against `target`
/// (the caption's ids followed by EOS); PAD targets are skipped. Throws
/// ContractError when steps != target.size().
Tensor seq_loss(Graph& g, const Tensor& logits, std::span<const int> target, int pad_id);

}  // namespace capdetect::model
