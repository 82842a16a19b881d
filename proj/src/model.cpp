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

#include "capdetect/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "capdetect/errors.hpp"

namespace capdetect::model {

using lora::ProjectionKind;

std::vector<std::string> default_vocab() {
  return {std::string(kBos), std::string(kEos), std::string(kPad), std::string(kReal),
          std::string(kFake), "plain", "grid-a", "grid-b", "grid-c", "grid-d",
          "grid-e", "grid-f", "grid-g", "check-a", "check-b", "other"};
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(channels, "channels");
  positive(patch, "patch");
  positive(d_model, "d_model");
  positive(encoder_layers, "encoder_layers");
  positive(decoder_layers, "decoder_layers");
  positive(heads, "heads");
  positive(query_tokens, "query_tokens");
  positive(mlp_hidden, "mlp_hidden");
  positive(max_caption_len, "max_caption_len");
  if (image_size % patch != 0) throw ConfigError("model config: image_size not divisible by patch");
  if (d_model % heads != 0) throw ConfigError("model config: d_model not divisible by heads");
  std::set<std::string> seen;
  for (const auto& w : vocab) {
    if (w.empty() || w.find(' ') != std::string::npos) {
      throw ConfigError("model config: vocabulary word '" + w + "' is empty or contains a space");
    }
    if (!seen.insert(w).second) throw ConfigError("model config: duplicate vocabulary word '" + w + "'");
  }
  for (auto w : {kBos, kEos, kPad, kReal, kFake}) {
    if (!seen.contains(std::string(w))) {
      throw ConfigError("model config: vocabulary lacks '" + std::string(w) + "'");
    }
  }
}

int ModelConfig::token_id(std::string_view word) const {
  const auto it = std::find(vocab.begin(), vocab.end(), word);
  if (it == vocab.end()) throw ConfigError("word '" + std::string(word) + "' not in vocabulary");
  return static_cast<int>(it - vocab.begin());
}

Verdict caption_to_label(const Caption& caption) {
  const auto first = caption.text.substr(0, caption.text.find(' '));
  if (first == kReal) return Verdict::kReal;
  if (first == kFake) return Verdict::kFake;
  return Verdict::kAbstain;
}

Caption make_caption(const ModelConfig& config, std::vector<int> tokens) {
  Caption c;
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab.size()) {
      throw IndexError("caption token " + std::to_string(t) + " outside vocabulary");
    }
    if (!c.text.empty()) c.text += ' ';
    c.text += config.vocab[static_cast<std::size_t>(t)];
  }
  c.tokens = std::move(tokens);
  return c;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

constexpr double kPixelMean = 0.5;
constexpr double kPixelInvStd = 4.0;
constexpr double kMaskedScore = -1e9;

Tensor randn(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Linear make_linear(std::size_t out, std::size_t in, std::mt19937_64& rng, double gain = 1.0) {
  return {randn({out, in}, gain / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out}, true)};
}

LayerNormParams make_ln(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionParams make_attention(std::size_t d, std::mt19937_64& rng) {
  return {make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng, 0.5)};
}

Block make_block(const ModelConfig& c, std::mt19937_64& rng) {
  Block b;
  b.ln1 = make_ln(c.d_model);
  b.attn = make_attention(c.d_model, rng);
  b.ln2 = make_ln(c.d_model);
  b.fc1 = make_linear(c.mlp_hidden, c.d_model, rng);
  b.fc2 = make_linear(c.d_model, c.mlp_hidden, rng, 0.5);
  return b;
}

Tensor linear(Graph& g, const Linear& l, const Tensor& x) {
  return g.add_bias(g.matmul(x, g.transpose(l.w)), l.b);
}

Tensor project(Graph& g, const Linear& l, const Tensor& x, const lora::LoraAdapter* adapter,
               ForwardMode mode) {
  if (adapter == nullptr) return linear(g, l, x);
  return g.add_bias(lora::apply(g, *adapter, l.w, x, mode.training, mode.rng), l.b);
}

Tensor norm(Graph& g, const LayerNormParams& p, const Tensor& x) {
  return g.layer_norm(x, p.gamma, p.beta, 1e-5);
}

struct AttentionAdapters {
  const lora::LoraAdapter* q = nullptr;
  const lora::LoraAdapter* k = nullptr;
  const lora::LoraAdapter* v = nullptr;
  const lora::LoraAdapter* o = nullptr;
};

// Multi-head attention of q_rows [batch*tq x d] over kv_rows [batch*tk x d].
// `mask` is an optional [tq x tk] additive score bias.
Tensor attention(Graph& g, const AttentionParams& p, const Tensor& q_rows, const Tensor& kv_rows,
                 std::size_t batch, std::size_t tq, std::size_t tk, std::size_t heads,
                 const Tensor& mask, const AttentionAdapters& ad, ForwardMode mode) {
  const std::size_t d = q_rows.dim(1);
  const std::size_t dh = d / heads;
  const Tensor q = g.split_heads(project(g, p.q, q_rows, ad.q, mode), batch, tq, heads);
  const Tensor k = g.split_heads(project(g, p.k, kv_rows, ad.k, mode), batch, tk, heads);
  const Tensor v = g.split_heads(project(g, p.v, kv_rows, ad.v, mode), batch, tk, heads);
  Tensor scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = g.add_bias(scores, mask);
  const Tensor probs = g.softmax(scores, 2);
  const Tensor ctx = g.merge_heads(g.matmul(probs, v), batch, tq, heads);
  return project(g, p.o, ctx, ad.o, mode);
}

Tensor block_forward(Graph& g, const Block& b, const Tensor& x, std::size_t batch, std::size_t t,
                     std::size_t heads, const Tensor& mask, const AttentionAdapters& ad,
                     ForwardMode mode) {
  const Tensor h = norm(g, b.ln1, x);
  const Tensor x1 = g.add(x, attention(g, b.attn, h, h, batch, t, t, heads, mask, ad, mode));
  const Tensor m = linear(g, b.fc2, g.gelu(linear(g, b.fc1, norm(g, b.ln2, x1))));
  return g.add(x1, m);
}

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMaskedScore;
  }
  return Tensor({t, t}, std::move(m));
}

const char* kind_suffix(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::kQuery: return "q";
    case ProjectionKind::kKey: return "k";
    case ProjectionKind::kValue: return "v";
    case ProjectionKind::kOutput: return "o";
  }
  return "?";
}

int pick_token(std::span<const double> logits, int bos, int pad) {
  int best = -1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const int id = static_cast<int>(i);
    if (id == bos || id == pad) continue;
    if (best < 0 || logits[i] > logits[static_cast<std::size_t>(best)]) best = id;
  }
  return best;
}

// Visits every base tensor in a fixed order with its name. Works for both
// const and mutable access through the Self template parameter.
template <typename EncoderT, typename BridgeT, typename DecoderT, typename F>
void visit_base(EncoderT& enc, BridgeT& br, DecoderT& dec, F&& f) {
  auto lin = [&](const std::string& n, auto& l) {
    f(n + ".w", l.w);
    f(n + ".b", l.b);
  };
  auto ln = [&](const std::string& n, auto& l) {
    f(n + ".g", l.gamma);
    f(n + ".b", l.beta);
  };
  auto attn = [&](const std::string& n, auto& a) {
    lin(n + ".q", a.q);
    lin(n + ".k", a.k);
    lin(n + ".v", a.v);
    lin(n + ".o", a.o);
  };
  auto block = [&](const std::string& n, auto& b) {
    ln(n + ".ln1", b.ln1);
    attn(n + ".attn", b.attn);
    ln(n + ".ln2", b.ln2);
    lin(n + ".fc1", b.fc1);
    lin(n + ".fc2", b.fc2);
  };
  lin("enc.patch", enc.patch_embed);
  f("enc.pos", enc.pos);
  for (std::size_t i = 0; i < enc.blocks.size(); ++i) block("enc.L" + std::to_string(i), enc.blocks[i]);
  ln("enc.ln_f", enc.ln_f);

  f("bridge.queries", br.queries);
  ln("bridge.ln_q", br.ln_q);
  ln("bridge.ln_kv", br.ln_kv);
  attn("bridge.attn", br.attn);
  ln("bridge.ln2", br.ln2);
  lin("bridge.fc1", br.fc1);
  lin("bridge.fc2", br.fc2);
  ln("bridge.ln_f", br.ln_f);

  f("dec.tok_embed", dec.tok_embed);
  f("dec.pos", dec.pos);
  for (std::size_t i = 0; i < dec.blocks.size(); ++i) block("dec.L" + std::to_string(i), dec.blocks[i]);
  ln("dec.ln_f", dec.ln_f);
  lin("dec.head", dec.head);
}

}  // namespace

// ---------------------------------------------------------------------------
// CaptionModel

CaptionModel::CaptionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto d = config_.d_model;

  encoder_.patch_embed = make_linear(d, config_.patch_dim(), rng);
  encoder_.pos = randn({config_.num_patches(), d}, 0.1, rng);
  for (std::size_t i = 0; i < config_.encoder_layers; ++i) encoder_.blocks.push_back(make_block(config_, rng));
  encoder_.ln_f = make_ln(d);

  bridge_.queries = randn({config_.query_tokens, d}, 0.5, rng);
  bridge_.ln_q = make_ln(d);
  bridge_.ln_kv = make_ln(d);
  bridge_.attn = make_attention(d, rng);
  bridge_.ln2 = make_ln(d);
  bridge_.fc1 = make_linear(config_.mlp_hidden, d, rng);
  bridge_.fc2 = make_linear(d, config_.mlp_hidden, rng, 0.5);
  bridge_.ln_f = make_ln(d);

  decoder_.tok_embed = randn({config_.vocab.size(), d}, 0.5, rng);
  decoder_.pos = randn({config_.decoder_positions(), d}, 0.1, rng);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) decoder_.blocks.push_back(make_block(config_, rng));
  decoder_.ln_f = make_ln(d);
  decoder_.head = make_linear(config_.vocab.size(), d, rng);
}

CaptionModel CaptionModel::clone() const {
  CaptionModel copy(Uninitialized{}, config_);
  copy.encoder_ = encoder_;
  copy.bridge_ = bridge_;
  copy.decoder_ = decoder_;
  visit_base(copy.encoder_, copy.bridge_, copy.decoder_, [](const std::string&, Tensor& t) { t = t.clone(); });
  for (const auto& [key, ad] : adapters_) {
    auto c = ad;
    c.a = ad.a.clone();
    c.b = ad.b.clone();
    copy.adapters_.emplace(key, std::move(c));
  }
  return copy;
}

void CaptionModel::for_each_base(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_base(encoder_, bridge_, decoder_, [&](const std::string& n, const Tensor& t) { fn(n, t); });
}

std::vector<NamedTensor> CaptionModel::base_parameters() const {
  std::vector<NamedTensor> out;
  for_each_base([&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
  return out;
}

std::vector<NamedTensor> CaptionModel::adapter_parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& [key, ad] : adapters_) {
    const auto target = adapter_target(key.first, key.second);
    out.emplace_back(target + ".lora_a", ad.a);
    out.emplace_back(target + ".lora_b", ad.b);
  }
  return out;
}

std::vector<NamedTensor> CaptionModel::all_parameters() const {
  auto out = base_parameters();
  auto ad = adapter_parameters();
  out.insert(out.end(), ad.begin(), ad.end());
  return out;
}

void CaptionModel::set_base_trainable(bool on) {
  for (auto& [name, t] : base_parameters()) t.set_requires_grad(on);
}

std::string CaptionModel::adapter_target(std::size_t layer, ProjectionKind kind) {
  return "dec.L" + std::to_string(layer) + ".attn." + kind_suffix(kind) + ".w";
}

void CaptionModel::attach_adapter(std::size_t layer, ProjectionKind kind, lora::LoraAdapter adapter) {
  if (layer >= decoder_.blocks.size()) {
    throw IndexError("adapter layer " + std::to_string(layer) + " outside decoder of " +
                     std::to_string(decoder_.blocks.size()) + " layers");
  }
  if (adapter.d_in() != config_.d_model || adapter.d_out() != config_.d_model) {
    throw DimensionError("adapter shape does not match d_model " + std::to_string(config_.d_model));
  }
  adapter.target_id = adapter_target(layer, kind);
  adapters_[{layer, kind}] = std::move(adapter);
}

const lora::LoraAdapter* CaptionModel::adapter(std::size_t layer, ProjectionKind kind) const {
  const auto it = adapters_.find({layer, kind});
  return it == adapters_.end() ? nullptr : &it->second;
}

Tensor CaptionModel::patchify(std::span<const Image* const> images) const {
  const std::size_t p = config_.patch, side = config_.image_size / p, c = config_.channels;
  const std::size_t rows = images.size() * config_.num_patches();
  std::vector<double> out(rows * config_.patch_dim());
  std::size_t at = 0;
  for (const Image* img : images) {
    if (img->height != config_.image_size || img->width != config_.image_size || img->channels != c) {
      throw ContractError("image is " + std::to_string(img->height) + "x" + std::to_string(img->width) + "x" +
                          std::to_string(img->channels) + ", model expects " +
                          std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size) +
                          "x" + std::to_string(c));
    }
    for (std::size_t py = 0; py < side; ++py) {
      for (std::size_t px = 0; px < side; ++px) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              out[at++] = (img->at(py * p + dy, px * p + dx, ch) - kPixelMean) * kPixelInvStd;
            }
          }
        }
      }
    }
  }
  if (rows == 0) throw ContractError("patchify: empty batch");
  return Tensor({rows, config_.patch_dim()}, std::move(out));
}

Tensor CaptionModel::encode(Graph& g, const Tensor& patches, std::size_t batch) const {
  const std::size_t n = config_.num_patches(), d = config_.d_model;
  Tensor x = linear(g, encoder_.patch_embed, patches);
  x = g.reshape(g.add_bias(g.reshape(x, {batch, n, d}), encoder_.pos), {batch * n, d});
  for (const auto& b : encoder_.blocks) x = block_forward(g, b, x, batch, n, config_.heads, {}, {}, {});
  return norm(g, encoder_.ln_f, x);
}

Tensor CaptionModel::encode_image(Graph& g, const Image& image) const {
  const Image* one[] = {&image};
  return encode(g, patchify(one), 1);
}

Tensor CaptionModel::bridge(Graph& g, const Tensor& image_tokens, std::size_t batch, std::size_t n) const {
  const std::size_t q = config_.query_tokens, d = config_.d_model;
  if (image_tokens.rank() != 2 || image_tokens.dim(0) != batch * n || image_tokens.dim(1) != d) {
    throw DimensionError("bridge: image tokens " + shape_to_string(image_tokens.shape()) + " vs batch " +
                         std::to_string(batch) + " x " + std::to_string(n));
  }
  const Tensor kv = norm(g, bridge_.ln_kv, image_tokens);
  const Tensor queries = g.reshape(g.add_bias(Tensor::zeros({batch, q, d}), bridge_.queries), {batch * q, d});
  const Tensor attn = attention(g, bridge_.attn, norm(g, bridge_.ln_q, queries), kv, batch, q, n,
                                config_.heads, {}, {}, {});
  Tensor x = g.add(queries, attn);
  x = g.add(x, linear(g, bridge_.fc2, g.gelu(linear(g, bridge_.fc1, norm(g, bridge_.ln2, x)))));
  return norm(g, bridge_.ln_f, x);
}

Tensor CaptionModel::visual_prefix(std::span<const Image* const> images) const {
  Graph g(false);
  const Tensor tokens = encode(g, patchify(images), images.size());
  return bridge(g, tokens, images.size(), config_.num_patches());
}

Tensor CaptionModel::decode(Graph& g, const Tensor& prefix, std::size_t batch, std::span<const int> tokens,
                            std::size_t steps, ForwardMode mode) const {
  const std::size_t q = config_.query_tokens, d = config_.d_model, t = q + steps;
  if (steps == 0 || tokens.size() != batch * steps) {
    throw ContractError("decode: " + std::to_string(tokens.size()) + " tokens for batch " +
                        std::to_string(batch) + " x " + std::to_string(steps) + " steps");
  }
  if (t > config_.decoder_positions()) {
    throw ContractError("decode: sequence of " + std::to_string(t) + " exceeds " +
                        std::to_string(config_.decoder_positions()) + " positions");
  }
  if (prefix.rank() != 2 || prefix.dim(0) != batch * q || prefix.dim(1) != d) {
    throw DimensionError("decode: prefix " + shape_to_string(prefix.shape()) + " vs batch " + std::to_string(batch));
  }
  const Tensor emb = g.reshape(g.embedding(decoder_.tok_embed, tokens), {batch, steps, d});
  Tensor x = g.concat(g.reshape(prefix, {batch, q, d}), emb, 1);
  x = g.add_bias(x, g.slice(decoder_.pos, 0, 0, t));
  x = g.reshape(x, {batch * t, d});
  const Tensor mask = causal_mask(t);
  for (std::size_t l = 0; l < decoder_.blocks.size(); ++l) {
    const AttentionAdapters ad{adapter(l, ProjectionKind::kQuery), adapter(l, ProjectionKind::kKey),
                               adapter(l, ProjectionKind::kValue), adapter(l, ProjectionKind::kOutput)};
    x = block_forward(g, decoder_.blocks[l], x, batch, t, config_.heads, mask, ad, mode);
  }
  x = g.slice(g.reshape(x, {batch, t, d}), 1, q, steps);
  x = norm(g, decoder_.ln_f, g.reshape(x, {batch * steps, d}));
  return linear(g, decoder_.head, x);
}

std::vector<Caption> CaptionModel::generate_from_prefix(const Tensor& prefix, std::size_t batch,
                                                        std::size_t max_len) const {
  if (max_len < 1) throw ContractError("generate: max_len must be >= 1");
  if (max_len > config_.max_caption_len) {
    throw ContractError("generate: max_len " + std::to_string(max_len) + " exceeds max_caption_len " +
                        std::to_string(config_.max_caption_len));
  }
  const int bos = config_.bos(), eos = config_.eos(), pad = config_.pad();
  const std::size_t v = config_.vocab.size();
  std::vector<std::vector<int>> words(batch);
  std::vector<bool> done(batch, false);
  std::vector<int> tokens(batch, bos);  // row-major batch x steps
  for (std::size_t step = 1; step <= max_len; ++step) {
    Graph g(false);
    const Tensor logits = decode(g, prefix, batch, tokens, step);
    std::vector<int> next(batch * (step + 1));
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(b * step), step,
                  next.begin() + static_cast<std::ptrdiff_t>(b * (step + 1)));
      int chosen = pad;
      if (!done[b]) {
        const auto row = logits.data().subspan((b * step + step - 1) * v, v);
        chosen = pick_token(row, bos, pad);
        if (chosen == eos) {
          done[b] = true;
        } else {
          words[b].push_back(chosen);
        }
      }
      next[b * (step + 1) + step] = chosen;
      all_done = all_done && done[b];
    }
    tokens = std::move(next);
    if (all_done) break;
  }
  std::vector<Caption> out;
  out.reserve(batch);
  for (auto& w : words) out.push_back(make_caption(config_, std::move(w)));
  return out;
}

std::vector<Caption> CaptionModel::generate_captions(std::span<const Image* const> images,
                                                     std::size_t max_len) const {
  return generate_from_prefix(visual_prefix(images), images.size(), max_len);
}

Caption CaptionModel::generate_caption(const Image& image, std::size_t max_len) const {
  const Image* one[] = {&image};
  return generate_captions(one, max_len).front();
}

Caption greedy_decode(const ModelConfig& config, const NextLogitsFn& next_logits, std::size_t max_len) {
  if (max_len < 1) throw ContractError("greedy_decode: max_len must be >= 1");
  const int bos = config.bos(), eos = config.eos(), pad = config.pad();
  std::vector<int> seq = {bos};
  std::vector<int> words;
  while (words.size() < max_len) {
    const auto logits = next_logits(seq);
    if (logits.size() != config.vocab.size()) {
      throw DimensionError("greedy_decode: " + std::to_string(logits.size()) + " logits for a vocabulary of " +
                           std::to_string(config.vocab.size()));
    }
    const int t = pick_token(logits, bos, pad);
    if (t == eos) break;
    words.push_back(t);
    seq.push_back(t);
  }
  return make_caption(config, std::move(words));
}

Tensor seq_loss(Graph& g, const Tensor& logits, std::span<const int> target, int pad_id) {
  if (logits.rank() != 2 || logits.dim(0) != target.size()) {
    throw ContractError("seq_loss: " + std::to_string(logits.rank() == 2 ? logits.dim(0) : 0) +
                        " logit steps for a target of length " + std::to_string(target.size()));
  }
  return g.cross_entropy(logits, target, pad_id);
}

}  // namespace capdetect::model
