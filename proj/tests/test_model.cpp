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
#include <cmath>
#include <random>

#include "capdetect/errors.hpp"
#include "capdetect/grad_check.hpp"
#include "capdetect/model.hpp"
#include "doctest.h"

using namespace capdetect;
using namespace capdetect::model;

namespace {

Image random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(32, 32, 3);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

Tensor find_param(const CaptionModel& m, const std::string& name) {
  for (const auto& [n, t] : m.base_parameters()) {
    if (n == name) return t;
  }
  FAIL("no parameter " << name);
  return {};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Rows of a 2-D tensor as vectors.
std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    auto row = t.data().subspan(r * t.dim(1), t.dim(1));
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.vocab.size() == 16);
  CHECK(cfg.num_patches() == 16);
  auto bad = cfg;
  bad.patch = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.vocab.erase(std::find(bad.vocab.begin(), bad.vocab.end(), "fake"));
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(CaptionModel{bad}, ConfigError);
}

TEST_CASE("encode_image: 16 tokens of width d_model; wrong size rejected") {
  const CaptionModel m(ModelConfig{});
  Graph g(false);
  const Tensor tok = m.encode_image(g, random_image(1));
  CHECK(tok.shape() == Shape{16, 64});
  CHECK_THROWS_AS(m.encode_image(g, Image(16, 16, 3)), ContractError);
  CHECK_THROWS_AS(m.encode_image(g, Image(32, 32, 1)), ContractError);
}

TEST_CASE("encode_image: constant image has equal patch embeddings") {
  const CaptionModel m(ModelConfig{});
  const Image img(32, 32, 3, 0.3);
  const Image* one[] = {&img};
  Graph g(false);
  const Tensor patches = m.patchify(one);
  const Tensor w = find_param(m, "enc.patch.w");
  const Tensor b = find_param(m, "enc.patch.b");
  const Tensor emb = g.add_bias(g.matmul(patches, g.transpose(w)), b);
  const auto rows = rows_of(emb);
  for (const auto& r : rows) CHECK(r == rows.front());
}

TEST_CASE("encode_image: a single pixel change moves the tokens") {
  const CaptionModel m(ModelConfig{});
  Image a = random_image(2);
  Image b = a;
  b.at(17, 5, 1) += 0.25;
  Graph g(false);
  const Tensor ta = m.encode_image(g, a);
  const Tensor tb = m.encode_image(g, b);
  CHECK(max_abs_diff(ta.data(), tb.data()) > 1e-6);
}

TEST_CASE("bridge: query count, permutation symmetry, zeroed queries") {
  const CaptionModel m(ModelConfig{});
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t count : {16u, 5u}) {
    std::vector<double> v(count * 64);
    for (auto& x : v) x = n(rng);
    Graph g(false);
    const Tensor out = m.bridge(g, Tensor({count, 64}, v), 1, count);
    CHECK(out.shape() == Shape{4, 64});

    // Reverse the token order: cross-attention has no positions of its own.
    std::vector<double> rev(v.size());
    for (std::size_t i = 0; i < count; ++i) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * 64), 64,
                  rev.begin() + static_cast<std::ptrdiff_t>((count - 1 - i) * 64));
    }
    const Tensor out_rev = m.bridge(g, Tensor({count, 64}, rev), 1, count);
    CHECK(max_abs_diff(out.data(), out_rev.data()) < 1e-12);
  }

  CaptionModel z = m.clone();
  Tensor q = find_param(z, "bridge.queries");
  std::fill(q.mutable_data().begin(), q.mutable_data().end(), 0.0);
  Graph g(false);
  const Tensor out = z.bridge(g, z.encode_image(g, random_image(3)), 1, 16);
  const auto rows = rows_of(out);
  for (const auto& r : rows) CHECK(r == rows.front());
  // The original is untouched by edits to the clone.
  CHECK(find_param(m, "bridge.queries").at(0) != 0.0);
}

TEST_CASE("greedy_decode: rigged logits") {
  const ModelConfig cfg;
  const int eos = cfg.eos(), fake = cfg.token_id("fake");
  auto eos_first = [&](std::span<const int>) {
    std::vector<double> l(cfg.vocab.size(), 0.0);
    l[static_cast<std::size_t>(eos)] = 5.0;
    return l;
  };
  CHECK(greedy_decode(cfg, eos_first, 4).text.empty());

  auto fake_then_eos = [&](std::span<const int> seq) {
    std::vector<double> l(cfg.vocab.size(), 0.0);
    l[static_cast<std::size_t>(seq.size() == 1 ? fake : eos)] = 5.0;
    return l;
  };
  const Caption c = greedy_decode(cfg, fake_then_eos, 4);
  CHECK(c.text == "fake");
  CHECK(c.tokens == std::vector<int>{fake});

  // Ties go to the lowest index; BOS and PAD are never emitted.
  auto flat = [&](std::span<const int>) {
    std::vector<double> l(cfg.vocab.size(), 1.0);
    l[static_cast<std::size_t>(cfg.bos())] = 9.0;
    return l;
  };
  const Caption tie = greedy_decode(cfg, flat, 4);
  CHECK(tie.tokens.empty());  // EOS (id 1) is the lowest eligible index

  auto never_stop = [&](std::span<const int>) {
    std::vector<double> l(cfg.vocab.size(), 0.0);
    l[3] = 1.0;
    return l;
  };
  CHECK(greedy_decode(cfg, never_stop, 3).text == "real real real");
  CHECK_THROWS_AS(greedy_decode(cfg, never_stop, 0), ContractError);
}

TEST_CASE("caption_to_label") {
  const ModelConfig cfg;
  CHECK(caption_to_label(make_caption(cfg, {cfg.token_id("fake")})) == Verdict::kFake);
  CHECK(caption_to_label(make_caption(cfg, {cfg.token_id("real"), cfg.token_id("plain")})) == Verdict::kReal);
  CHECK(caption_to_label(Caption{{}, "blue bedroom"}) == Verdict::kAbstain);
  CHECK(caption_to_label(Caption{}) == Verdict::kAbstain);
}

TEST_CASE("seq_loss: hand-computed values and gradients") {
  Graph g;
  const std::vector<int> target = {2, 0, 3};
  const Tensor uniform = Tensor::zeros({3, 4}, true);
  CHECK(seq_loss(g, uniform, target, -1).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  std::vector<double> sharp(12, -1000.0);
  for (std::size_t i = 0; i < 3; ++i) sharp[i * 4 + static_cast<std::size_t>(target[i])] = 1000.0;
  CHECK(seq_loss(g, Tensor({3, 4}, sharp), target, -1).item() == doctest::Approx(0.0));

  // PAD targets drop out of the mean.
  const std::vector<int> padded = {2, 0, 1};
  std::vector<double> mixed(12, 0.0);
  mixed[8 + 0] = 50.0;
  CHECK(seq_loss(g, Tensor({3, 4}, mixed), padded, 1).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(seq_loss(g, uniform, std::vector<int>{1, 2}, -1), ContractError);

  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(12);
  for (auto& x : v) x = n(rng);
  const Tensor logits({3, 4}, v, true);
  CHECK(grad_check([&](Graph& gg) { return seq_loss(gg, logits, target, -1); }, {logits}) < 1e-4);
}

TEST_CASE("generation: deterministic, batched equals single, max_len contract") {
  ModelConfig cfg;
  cfg.seed = 11;
  const CaptionModel m(cfg);
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(100 + i));
  std::vector<const Image*> ptrs;
  for (const auto& im : imgs) ptrs.push_back(&im);

  const auto batched = m.generate_captions(ptrs, 4);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    CHECK(m.generate_caption(imgs[i], 4) == batched[i]);
    CHECK(m.generate_caption(imgs[i], 4) == m.generate_caption(imgs[i], 4));
    CHECK(batched[i].tokens.size() <= 4);
  }
  CHECK_THROWS_AS(m.generate_caption(imgs[0], 0), ContractError);
  CHECK_THROWS_AS(m.generate_caption(imgs[0], 5), ContractError);
}

TEST_CASE("decode: batched logits equal per-image logits") {
  const CaptionModel m(ModelConfig{});
  const Image a = random_image(1), b = random_image(2);
  const Image* both[] = {&a, &b};
  const Image* only_b[] = {&b};
  const ModelConfig& cfg = m.config();
  const std::vector<int> toks = {cfg.bos(), 3, 5, cfg.bos(), 4, 6};
  Graph g(false);
  const Tensor l2 = m.decode(g, m.visual_prefix(both), 2, toks, 3);
  const Tensor l1 = m.decode(g, m.visual_prefix(only_b), 1, std::span<const int>(toks).subspan(3), 3);
  CHECK(l2.shape() == Shape{6, 16});
  CHECK(max_abs_diff(l2.data().subspan(3 * 16), l1.data()) == 0.0);
  CHECK_THROWS_AS(m.decode(g, m.visual_prefix(only_b), 1, toks, 6), ContractError);
}

TEST_CASE("decode: causal mask hides later tokens") {
  const CaptionModel m(ModelConfig{});
  const Image a = random_image(8);
  const Image* one[] = {&a};
  const Tensor prefix = m.visual_prefix(one);
  Graph g(false);
  const Tensor x = m.decode(g, prefix, 1, std::vector<int>{0, 3, 5}, 3);
  const Tensor y = m.decode(g, prefix, 1, std::vector<int>{0, 4, 7}, 3);
  CHECK(max_abs_diff(x.data().subspan(0, 16), y.data().subspan(0, 16)) == 0.0);
  CHECK(max_abs_diff(x.data().subspan(16, 16), y.data().subspan(16, 16)) > 0.0);
}

TEST_CASE("model gradients match finite differences") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.mlp_hidden = 8;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.query_tokens = 2;
  cfg.patch = 16;
  cfg.seed = 3;
  const CaptionModel m(cfg);
  const Image img = random_image(5);
  const Image* one[] = {&img};
  const Tensor patches = m.patchify(one);
  const std::vector<int> in = {cfg.bos(), 4};
  const std::vector<int> target = {4, cfg.eos()};
  auto f = [&](Graph& g) {
    const Tensor prefix = m.bridge(g, m.encode(g, patches, 1), 1, cfg.num_patches());
    return seq_loss(g, m.decode(g, prefix, 1, in, 2), target, cfg.pad());
  };
  std::vector<Tensor> params;
  for (const auto& [name, t] : m.base_parameters()) params.push_back(t);
  CHECK(grad_check(f, params) < 1e-4);
}
