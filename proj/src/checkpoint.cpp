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

#include "capdetect/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "capdetect/errors.hpp"

namespace capdetect::train {
namespace {

using nlohmann::json;
constexpr char kMagic[4] = {'B', 'L', 'R', 'A'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) throw TruncatedFileError(std::string("checkpoint truncated while reading ") + what);
  }
  template <typename T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

std::string kind_code(lora::ProjectionKind k) { return std::string(lora::to_string(k)); }

}  // namespace

json model_config_to_json(const model::ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"channels", c.channels},
          {"patch", c.patch},
          {"d_model", c.d_model},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"heads", c.heads},
          {"query_tokens", c.query_tokens},
          {"mlp_hidden", c.mlp_hidden},
          {"max_caption_len", c.max_caption_len},
          {"vocab", c.vocab},
          {"seed", c.seed}};
}

model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "image_size") c.image_size = v.get<std::size_t>();
      else if (k == "channels") c.channels = v.get<std::size_t>();
      else if (k == "patch") c.patch = v.get<std::size_t>();
      else if (k == "d_model") c.d_model = v.get<std::size_t>();
      else if (k == "encoder_layers") c.encoder_layers = v.get<std::size_t>();
      else if (k == "decoder_layers") c.decoder_layers = v.get<std::size_t>();
      else if (k == "heads") c.heads = v.get<std::size_t>();
      else if (k == "query_tokens") c.query_tokens = v.get<std::size_t>();
      else if (k == "mlp_hidden") c.mlp_hidden = v.get<std::size_t>();
      else if (k == "max_caption_len") c.max_caption_len = v.get<std::size_t>();
      else if (k == "vocab") c.vocab = v.get<std::vector<std::string>>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("model config: unknown key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Checkpoint make_checkpoint(const model::CaptionModel& m, const TrainConfig& cfg, Stage stage) {
  Checkpoint ck;
  for (const auto& [name, t] : m.all_parameters()) ck.tensors.emplace_back(name, t.clone());
  ck.model = m.config();
  ck.train = cfg;
  ck.stage = stage;
  for (const auto& [key, ad] : m.adapters()) {
    ck.adapters.push_back({key.first, key.second, ad.rank, ad.alpha, ad.dropout_p});
  }
  return ck;
}

model::CaptionModel restore_model(const Checkpoint& ckpt) {
  model::CaptionModel m(ckpt.model);
  std::map<std::string, Tensor> stored;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    if (!stored.emplace(ckpt.tensors[i].first, ckpt.tensors[i].second).second) {
      throw InvariantError("duplicate tensor '" + ckpt.tensors[i].first + "'", i);
    }
  }
  for (const auto& meta : ckpt.adapters) {
    const auto target = model::CaptionModel::adapter_target(meta.layer, meta.kind);
    auto ad = lora::init_adapter(ckpt.model.d_model, ckpt.model.d_model, meta.rank, meta.alpha, meta.dropout_p, 0);
    m.attach_adapter(meta.layer, meta.kind, std::move(ad));
  }
  std::set<std::string> used;
  for (auto& [name, handle] : m.all_parameters()) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw InvariantError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != handle.shape()) {
      throw InvariantError("tensor '" + name + "' has shape " + shape_to_string(it->second.shape()) + ", expected " +
                           shape_to_string(handle.shape()));
    }
    Tensor t = handle;
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
    used.insert(name);
  }
  for (const auto& [name, t] : stored) {
    if (!used.contains(name)) throw InvariantError("unexpected tensor '" + name + "' in checkpoint");
  }
  // Requires-grad flags follow the stage: adapters train, the base is frozen.
  if (!ckpt.adapters.empty()) m.set_base_trainable(false);
  return m;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(ck.version);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw ContractError("tensor name too long");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.uint<std::uint64_t>(e);
    for (double v : t.data()) w.f64(v);
  }
  json adapters = json::array();
  for (const auto& a : ck.adapters) {
    adapters.push_back({{"layer", a.layer}, {"kind", kind_code(a.kind)}, {"rank", a.rank}, {"alpha", a.alpha},
                        {"dropout", a.dropout_p}});
  }
  const json meta = {{"model", model_config_to_json(ck.model)},
                     {"train", train_config_to_json(ck.train)},
                     {"stage", std::string(to_string(ck.stage))},
                     {"adapters", adapters},
                     {"extras", ck.extras}};
  const std::string blob = meta.dump();
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(reinterpret_cast<const char*>(w.data().data()), static_cast<std::streamsize>(w.data().size()));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf));

  if (r.remaining() < 4) throw TruncatedFileError("checkpoint truncated while reading magic");
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw BadMagicError(path.string() + " is not a checkpoint");
  Checkpoint ck;
  ck.version = r.uint<std::uint32_t>("version");
  if (ck.version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint version " + std::to_string(ck.version) + " unsupported (expected " +
                               std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.uint<std::uint16_t>("name length");
    std::string name = r.str(len, "name");
    const auto rank = r.uint<std::uint8_t>("rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      shape.push_back(r.uint<std::uint64_t>("extent"));
      if (shape.back() == 0) throw FormatError("tensor '" + name + "' has a zero extent");
      numel *= shape.back();
    }
    r.need(numel * 8, "tensor data");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("tensor data");
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const auto blob_len = r.uint<std::uint32_t>("config length");
  const std::string blob = r.str(blob_len, "config");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint config");
  try {
    const json meta = json::parse(blob);
    ck.model = model_config_from_json(meta.at("model"));
    ck.train = train_config_from_json(meta.at("train"));
    ck.stage = parse_stage(meta.at("stage").get<std::string>());
    for (const auto& a : meta.at("adapters")) {
      ck.adapters.push_back({a.at("layer").get<std::size_t>(), lora::parse_projection_kind(a.at("kind").get<std::string>()),
                             a.at("rank").get<std::size_t>(), a.at("alpha").get<double>(),
                             a.at("dropout").get<double>()});
    }
    ck.extras = meta.value("extras", json::object());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return ck;
}

}  // namespace capdetect::train
