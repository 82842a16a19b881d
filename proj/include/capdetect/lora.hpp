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
#include <random>
#include <set>
#include <string>
#include <string_view>

#include "capdetect/tensor.hpp"

namespace capdetect::lora {

/// Attention projection a low-rank adapter can be attached to.
enum class ProjectionKind { kQuery, kKey, kValue, kOutput };

std::string_view to_string(ProjectionKind kind);
/// "query" | "key" | "value" | "output"; anything else is a ConfigError.
ProjectionKind parse_projection_kind(std::string_view name);
/// Comma-separated list of kinds; empty string is the empty set.
std::set<ProjectionKind> parse_projection_kinds(std::string_view csv);

/// Low-rank update for one frozen weight W [d_out x d_in]:
///   W x  ->  W x + (alpha / rank) * B (A x)
/// with A [rank x d_in] and B [d_out x rank]. Both factors require grad;
/// W itself is never touched by the adapter.
struct LoraAdapter {
  Tensor a;
  Tensor b;
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout_p = 0.0;
  std::string target_id;

  double scaling() const { return alpha / static_cast<double>(rank); }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.dim(0); }
  std::size_t num_params() const { return a.numel() + b.numel(); }
};

/// A ~ N(0, (1/rank)^2) drawn from `seed`, B = 0. Throws ContractError
/// unless 0 < rank <= min(d_out, d_in), alpha > 0 and dropout_p in [0, 1).
LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha,
                         double dropout_p, std::uint64_t seed, std::string target_id = {});

/// Single-vector forward h = W x + (alpha/r) B A drop(x) with x [d_in].
/// Dropout (inverted, probability dropout_p) only applies when `training`,
/// and then `rng` must be non-null. Returns h [d_out].
Tensor lora_forward(const LoraAdapter& adapter, const Tensor& w, const Tensor& x, bool training,
                    std::mt19937_64* rng = nullptr);

/// Row-batched version recorded on `graph`: x [n x d_in] -> [n x d_out],
///   x W^T + (alpha/r) (drop(x) A^T) B^T.
/// This is the path the caption model uses.
Tensor apply(Graph& graph, const LoraAdapter& adapter, const Tensor& w, const Tensor& x,
             bool training, std::mt19937_64* rng = nullptr);

/// W' = W + (alpha/r) B A, returned as a fresh frozen tensor.
Tensor merge(const LoraAdapter& adapter, const Tensor& w);

/// Trainable-parameter accounting for square d_model x d_model projections.
struct ParamBudget {
  std::uint64_t trainable = 0;
  std::uint64_t frozen = 0;
  double fraction = 0.0;  // trainable / (trainable + frozen)
};

/// trainable = layers * matrices_per_layer * rank * (2 * d_model).
/// Zero layers or zero matrices describe an adapter-free model (trainable 0).
/// rank must be >= 1.
ParamBudget count_params(std::uint64_t layers, std::uint64_t d_model,
                         std::uint64_t matrices_per_layer, std::uint64_t rank,
                         std::uint64_t frozen_total);

}  // namespace capdetect::lora
