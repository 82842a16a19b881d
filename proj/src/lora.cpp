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

#include "capdetect/lora.hpp"

#include <algorithm>

#include "capdetect/errors.hpp"
#include "capdetect/kernels.hpp"

namespace capdetect::lora {

using kernels::Trans;

std::string_view to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::kQuery: return "query";
    case ProjectionKind::kKey: return "key";
    case ProjectionKind::kValue: return "value";
    case ProjectionKind::kOutput: return "output";
  }
  return "?";
}

ProjectionKind parse_projection_kind(std::string_view name) {
  for (auto k : {ProjectionKind::kQuery, ProjectionKind::kKey, ProjectionKind::kValue,
                 ProjectionKind::kOutput}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("unknown projection kind '" + std::string(name) +
                    "' (expected query, key, value or output)");
}

std::set<ProjectionKind> parse_projection_kinds(std::string_view csv) {
  std::set<ProjectionKind> out;
  while (!csv.empty()) {
    const auto comma = csv.find(',');
    const auto item = csv.substr(0, comma);
    if (!item.empty()) out.insert(parse_projection_kind(item));
    if (comma == std::string_view::npos) break;
    csv.remove_prefix(comma + 1);
  }
  return out;
}

LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha,
                         double dropout_p, std::uint64_t seed, std::string target_id) {
  if (rank == 0 || rank > std::min(d_out, d_in)) {
    throw ContractError("lora rank " + std::to_string(rank) + " outside [1, " +
                        std::to_string(std::min(d_out, d_in)) + "]");
  }
  if (!(alpha > 0.0)) throw ContractError("lora alpha must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ContractError("lora dropout must lie in [0, 1)");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / static_cast<double>(rank));
  std::vector<double> a(rank * d_in);
  for (auto& v : a) v = dist(rng);

  LoraAdapter adapter;
  adapter.a = Tensor({rank, d_in}, std::move(a), true);
  adapter.b = Tensor::zeros({d_out, rank}, true);
  adapter.rank = rank;
  adapter.alpha = alpha;
  adapter.dropout_p = dropout_p;
  adapter.target_id = std::move(target_id);
  return adapter;
}

namespace {

void check_weight(const LoraAdapter& adapter, const Tensor& w) {
  if (w.rank() != 2 || w.dim(0) != adapter.d_out() || w.dim(1) != adapter.d_in()) {
    throw DimensionError("lora: weight " + shape_to_string(w.shape()) + " does not match adapter [" +
                         std::to_string(adapter.d_out()) + "x" + std::to_string(adapter.d_in()) + "]");
  }
}

// Inverted-dropout mask with entries 0 or 1/(1-p).
Tensor dropout_mask(const Shape& shape, double p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(shape_numel(shape));
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = u(rng) < p ? 0.0 : keep;
  return Tensor(shape, std::move(mask));
}

}  // namespace

Tensor lora_forward(const LoraAdapter& adapter, const Tensor& w, const Tensor& x, bool training,
                    std::mt19937_64* rng) {
  check_weight(adapter, w);
  if (x.rank() != 1 || x.dim(0) != adapter.d_in()) {
    throw DimensionError("lora_forward: input " + shape_to_string(x.shape()) + " vs d_in " +
                         std::to_string(adapter.d_in()));
  }
  Graph g(false);
  const Tensor row = g.reshape(x, {1, adapter.d_in()});
  const Tensor h = apply(g, adapter, w, row, training, rng);
  return g.reshape(h, {adapter.d_out()});
}

Tensor apply(Graph& graph, const LoraAdapter& adapter, const Tensor& w, const Tensor& x,
             bool training, std::mt19937_64* rng) {
  check_weight(adapter, w);
  if (x.rank() != 2 || x.dim(1) != adapter.d_in()) {
    throw DimensionError("lora: input " + shape_to_string(x.shape()) + " vs weight " +
                         shape_to_string(w.shape()));
  }
  const Tensor base = graph.matmul(x, graph.transpose(w));
  Tensor lora_in = x;
  if (training && adapter.dropout_p > 0.0) {
    if (rng == nullptr) throw ContractError("lora: training-mode dropout needs an rng");
    lora_in = graph.mul(x, dropout_mask(x.shape(), adapter.dropout_p, *rng));
  }
  const Tensor down = graph.matmul(lora_in, graph.transpose(adapter.a));
  const Tensor up = graph.matmul(down, graph.transpose(adapter.b));
  return graph.add(base, graph.scale(up, adapter.scaling()));
}

Tensor merge(const LoraAdapter& adapter, const Tensor& w) {
  check_weight(adapter, w);
  const std::size_t d_out = adapter.d_out(), d_in = adapter.d_in(), r = adapter.rank;
  std::vector<double> delta(d_out * d_in);
  kernels::gemm(Trans::kNo, Trans::kNo, d_out, d_in, r, adapter.b.data().data(),
                adapter.a.data().data(), delta.data(), false);
  std::vector<double> merged(w.data().begin(), w.data().end());
  const double s = adapter.scaling();
  for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += s * delta[i];
  return Tensor({d_out, d_in}, std::move(merged));
}

ParamBudget count_params(std::uint64_t layers, std::uint64_t d_model,
                         std::uint64_t matrices_per_layer, std::uint64_t rank,
                         std::uint64_t frozen_total) {
  if (rank == 0) throw ContractError("count_params: rank must be positive");
  if (d_model == 0) throw ContractError("count_params: d_model must be positive");
  ParamBudget budget;
  budget.trainable = layers * matrices_per_layer * rank * (d_model + d_model);
  budget.frozen = frozen_total;
  const auto total = budget.trainable + budget.frozen;
  budget.fraction = total == 0 ? 0.0 : static_cast<double>(budget.trainable) / static_cast<double>(total);
  return budget;
}

}  // namespace capdetect::lora
