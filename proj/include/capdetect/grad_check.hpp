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

#include <functional>
#include <vector>

#include "capdetect/tensor.hpp"

namespace capdetect {

/// Scalar objective evaluated on a fresh graph. Must be deterministic.
using ScalarFn = std::function<Tensor(Graph&)>;

/// Compares backward() against central finite differences with the given
/// step and returns the largest
///   |analytic - numeric| / max(1, |analytic|, |numeric|)
/// over every entry of every tensor in `params`. The params are marked as
/// requiring grad for the duration of the check and restored afterwards;
/// their values are restored bit-exactly. Throws NumericError if `f`
/// produces a non-finite value and ContractError if step <= 0.
double grad_check(const ScalarFn& f, std::vector<Tensor> params, double step = 1e-5);

}  // namespace capdetect
