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

#include "capdetect/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "capdetect/errors.hpp"

namespace capdetect::train {
namespace {

using nlohmann::json;
using model::CaptionModel;
using model::NamedTensor;

// Rows of visual prefix per inference chunk.
constexpr std::size_t kChunk = 64;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) == keys.end()) {
      throw ConfigError(where + ": unknown key '" + k + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": bad value for '" + key + "'");
  }
}

std::vector<const Image*> image_ptrs(const std::vector<Example>& set, std::size_t begin, std::size_t end) {
  std::vector<const Image*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&set[i].image);
  return out;
}

// Visual prefixes for every example, stacked [N * Q x d].
std::vector<double> prefix_cache(const CaptionModel& m, const std::vector<Example>& set) {
  const std::size_t rows = m.config().query_tokens * m.config().d_model;
  std::vector<double> out(set.size() * rows);
  for (std::size_t b = 0; b < set.size(); b += kChunk) {
    const std::size_t e = std::min(set.size(), b + kChunk);
    const Tensor p = m.visual_prefix(image_ptrs(set, b, e));
    std::copy(p.data().begin(), p.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * rows));
  }
  return out;
}

Tensor gather_prefix(const std::vector<double>& cache, const std::vector<std::size_t>& idx, std::size_t q,
                     std::size_t d) {
  std::vector<double> out(idx.size() * q * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(cache.begin() + static_cast<std::ptrdiff_t>(idx[i] * q * d), q * d,
                out.begin() + static_cast<std::ptrdiff_t>(i * q * d));
  }
  return Tensor({idx.size() * q, d}, std::move(out));
}

bool caption_correct(const model::Caption& c, const Example& ex, Stage stage) {
  if (stage == Stage::kPretrain) return c.tokens == ex.caption;
  const auto v = model::caption_to_label(c);
  return v != model::Verdict::kAbstain && static_cast<int>(v) == ex.label;
}

double accuracy_from_cache(const CaptionModel& m, const std::vector<Example>& set, const std::vector<double>& cache,
                           Stage stage) {
  const std::size_t q = m.config().query_tokens, d = m.config().d_model;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < set.size(); b += kChunk) {
    const std::size_t e = std::min(set.size(), b + kChunk);
    std::vector<std::size_t> idx(e - b);
    std::iota(idx.begin(), idx.end(), b);
    const auto caps = m.generate_from_prefix(gather_prefix(cache, idx, q, d), idx.size(), m.config().max_caption_len);
    for (std::size_t i = 0; i < caps.size(); ++i) correct += caption_correct(caps[i], set[b + i], stage);
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

}  // namespace

std::string_view to_string(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

Stage parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "finetune") return Stage::kFinetune;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

TrainConfig TrainConfig::paper_preset() {
  TrainConfig c;
  c.learning_rate = 5e-5;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam eps must be positive");
  if (lora.rank == 0) throw ConfigError("lora rank must be positive");
  if (!(lora.alpha > 0.0)) throw ConfigError("lora alpha must be positive");
  if (!(lora.dropout >= 0.0 && lora.dropout < 1.0)) throw ConfigError("lora dropout must lie in [0, 1)");
}

json train_config_to_json(const TrainConfig& c) {
  json targets = json::array();
  for (auto k : c.lora.targets) targets.push_back(std::string(lora::to_string(k)));
  return {{"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}, {"targets", targets}}},
          {"seed", c.seed},
          {"stage", std::string(to_string(c.stage))},
          {"early_exit", c.early_exit},
          {"min_epochs", c.min_epochs},
          {"families", c.families}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  const std::string where = "train config";
  reject_unknown(j, {"learning_rate", "epochs", "batch_size", "adam", "lora", "seed", "stage", "early_exit",
                     "min_epochs", "families"},
                 where);
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "seed", c.seed, where);
  read(j, "early_exit", c.early_exit, where);
  read(j, "min_epochs", c.min_epochs, where);
  read(j, "families", c.families, where);
  if (j.contains("stage")) {
    std::string s;
    read(j, "stage", s, where);
    c.stage = parse_stage(s);
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps"}, where + ".adam");
    read(a, "beta1", c.adam.beta1, where);
    read(a, "beta2", c.adam.beta2, where);
    read(a, "eps", c.adam.eps, where);
  }
  if (j.contains("lora")) {
    const auto& l = j.at("lora");
    reject_unknown(l, {"rank", "alpha", "dropout", "targets"}, where + ".lora");
    read(l, "rank", c.lora.rank, where);
    read(l, "alpha", c.lora.alpha, where);
    read(l, "dropout", c.lora.dropout, where);
    if (l.contains("targets")) {
      std::vector<std::string> names;
      read(l, "targets", names, where);
      c.lora.targets.clear();
      for (const auto& n : names) c.lora.targets.insert(lora::parse_projection_kind(n));
    }
  }
  c.validate();
  return c;
}

void adam_step(AdamState& state, const std::vector<NamedTensor>& params, double lr, const AdamHyper& hyper) {
  for (const auto& [name, t] : params) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (const auto& [name, handle] : params) {
    if (!handle.requires_grad() || !handle.has_grad()) continue;
    Tensor t = handle;
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(t.numel(), 0.0);
      slot.v.assign(t.numel(), 0.0);
    }
    if (slot.m.size() != t.numel()) throw ContractError("adam: state for '" + name + "' has the wrong size");
    const auto g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g[i];
      slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = slot.m[i] / c1;
      const double v_hat = slot.v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

std::map<std::string, std::string> pretrain_caption_words(const synth::Manifest& manifest,
                                                          const model::ModelConfig& cfg) {
  std::map<std::string, std::string> words;
  words[std::string(synth::kRealFamily)] = std::string(model::kReal);
  char grid = 'a', check = 'a';
  for (const auto& name : manifest.fake_families()) {
    const auto* spec = manifest.family(name);
    if (spec && spec->role == synth::FamilyRole::kPretrain) {
      words[name] = std::string(model::kFake);
      continue;
    }
    const bool checker = spec && spec->kind == synth::ArtifactKind::kCheckerboard;
    words[name] = checker ? std::string("check-") + check++ : std::string("grid-") + grid++;
  }
  for (const auto& [family, word] : words) {
    if (std::find(cfg.vocab.begin(), cfg.vocab.end(), word) == cfg.vocab.end()) {
      words[family] = "other";
    }
  }
  return words;
}

std::vector<Example> load_examples(const synth::Manifest& manifest, const std::string& split,
                                   const model::ModelConfig& model_cfg, const TrainConfig& cfg) {
  std::vector<const synth::Record*> records;
  std::map<std::string, std::string> words;
  if (cfg.stage == Stage::kFinetune) {
    if (cfg.families.size() != 1) throw ConfigError("finetune trains on exactly one family");
    const auto known = manifest.fake_families();
    if (std::find(known.begin(), known.end(), cfg.families[0]) == known.end()) {
      throw ConfigError("family '" + cfg.families[0] + "' not in manifest");
    }
    records = manifest.select(split, cfg.families[0]);
  } else {
    auto families = cfg.families;
    if (families.empty()) {
      families = manifest.families_with_role(synth::FamilyRole::kTrain);
      for (auto& f : manifest.families_with_role(synth::FamilyRole::kPretrain)) families.push_back(f);
    }
    if (families.empty()) families = manifest.fake_families();
    for (const auto& f : families) {
      const auto known = manifest.fake_families();
      if (std::find(known.begin(), known.end(), f) == known.end()) {
        throw ConfigError("family '" + f + "' not in manifest");
      }
    }
    for (const auto* r : manifest.select(split)) {
      if (r->label == 0 || std::find(families.begin(), families.end(), r->family) != families.end()) {
        records.push_back(r);
      }
    }
    words = pretrain_caption_words(manifest, model_cfg);
  }
  auto images = synth::load_images(manifest, records);
  std::vector<Example> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i].image = std::move(images[i]);
    out[i].label = records[i]->label;
    out[i].family = records[i]->family;
    const std::string word = cfg.stage == Stage::kFinetune
                                 ? std::string(records[i]->label ? model::kFake : model::kReal)
                                 : words.at(records[i]->family);
    out[i].caption = {model_cfg.token_id(word)};
  }
  return out;
}

std::uint64_t base_hash(const CaptionModel& m) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : m.base_parameters()) {
    for (double v : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

std::size_t trainable_count(const CaptionModel& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.all_parameters()) {
    if (t.requires_grad()) n += t.numel();
  }
  return n;
}

double caption_accuracy(const CaptionModel& m, const std::vector<Example>& set, Stage stage) {
  if (set.empty()) throw EmptyEvaluationError("caption_accuracy: empty set");
  return accuracy_from_cache(m, set, prefix_cache(m, set), stage);
}

TrainResult train(CaptionModel& m, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const TrainConfig& cfg, const Logger& log) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training split");
  const bool finetune = cfg.stage == Stage::kFinetune;
  if (finetune && m.adapters().empty()) throw ContractError("finetune: model has no adapters (inject first)");

  const auto& mc = m.config();
  const std::size_t q = mc.query_tokens, d = mc.d_model;
  const int bos = mc.bos(), eos = mc.eos(), pad = mc.pad();
  for (const auto& ex : train_set) {
    if (ex.caption.size() > mc.max_caption_len) throw ContractError("train: caption longer than max_caption_len");
  }

  std::vector<NamedTensor> params;
  if (finetune) {
    m.set_base_trainable(false);
    params = m.adapter_parameters();
  } else {
    m.set_base_trainable(true);
    params = m.base_parameters();
  }
  for (auto& [name, t] : params) t.set_requires_grad(true);

  TrainResult result;
  result.base_hash_before = base_hash(m);
  result.trainable_params = trainable_count(m);

  // Frozen encoder and bridge: compute every visual prefix once.
  std::vector<double> train_cache, val_cache;
  if (finetune) {
    train_cache = prefix_cache(m, train_set);
    if (!val_set.empty()) val_cache = prefix_cache(m, val_set);
  }

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamState adam;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> best;

  auto snapshot = [&] {
    best.clear();
    for (const auto& [n, t] : params) best.emplace_back(t.data().begin(), t.data().end());
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::size_t batch = idx.size();
      std::size_t steps = 0;
      for (auto i : idx) steps = std::max(steps, train_set[i].caption.size() + 1);
      std::vector<int> inputs(batch * steps, pad), targets(batch * steps, pad);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto& cap = train_set[idx[b]].caption;
        inputs[b * steps] = bos;
        for (std::size_t s = 0; s < cap.size(); ++s) {
          inputs[b * steps + s + 1] = cap[s];
          targets[b * steps + s] = cap[s];
        }
        targets[b * steps + cap.size()] = eos;
      }

      for (auto& [n, t] : params) t.zero_grad();
      Graph g;
      Tensor prefix;
      if (finetune) {
        prefix = gather_prefix(train_cache, idx, q, d);
      } else {
        std::vector<const Image*> imgs;
        for (auto i : idx) imgs.push_back(&train_set[i].image);
        prefix = m.bridge(g, m.encode(g, m.patchify(imgs), batch), batch, mc.num_patches());
      }
      const Tensor logits = m.decode(g, prefix, batch, inputs, steps, {true, &dropout_rng});
      const Tensor loss = model::seq_loss(g, logits, targets, pad);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches + 1));
      }
      g.backward(loss);
      adam_step(adam, params, cfg.learning_rate, cfg.adam);
      loss_sum += lv;
      ++batches;
    }

    EpochLog entry{epoch, loss_sum / static_cast<double>(batches), 0.0};
    if (!val_set.empty()) {
      entry.val_accuracy = finetune ? accuracy_from_cache(m, val_set, val_cache, cfg.stage)
                                    : caption_accuracy(m, val_set, cfg.stage);
    }
    result.history.push_back(entry);
    if (log) {
      log(std::string(to_string(cfg.stage)) + " epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.epochs) +
          " loss " + fmt(entry.train_loss) + " val_acc " + fmt(entry.val_accuracy));
    }
    // Strictly better validation accuracy wins; with no validation set the
    // latest epoch is kept.
    if (val_set.empty() || entry.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = entry.val_accuracy;
      result.best_epoch = epoch;
      snapshot();
    }
    if (cfg.early_exit && !val_set.empty() && entry.val_accuracy >= 1.0 && epoch >= cfg.min_epochs) break;
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].second.mutable_data();
    std::copy(best[i].begin(), best[i].end(), w.begin());
    params[i].second.zero_grad();
  }
  result.base_hash_after = base_hash(m);
  if (finetune && result.base_hash_after != result.base_hash_before) {
    throw InvariantError("finetune modified the frozen base");
  }
  return result;
}

}  // namespace capdetect::train
