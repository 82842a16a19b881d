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

#include "capdetect/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "capdetect/errors.hpp"

namespace capdetect {
namespace {

double evaluate(const ScalarFn& f) {
  Graph g(/*recording=*/false);
  const Tensor out = f(g);
  if (out.numel() != 1) throw ContractError("grad_check: objective is not scalar");
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: objective evaluated to a non-finite value");
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, std::vector<Tensor> params, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");

  std::vector<bool> saved_flags;
  for (auto& p : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    const Tensor loss = f(g);
    if (loss.numel() != 1) throw ContractError("grad_check: objective is not scalar");
    if (!std::isfinite(loss.item())) {
      throw NumericError("grad_check: objective evaluated to a non-finite value");
    }
    g.backward(loss);
    for (auto& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.numel(), 0.0);
      }
    }
  }

  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = evaluate(f);
      values[i] = original - step;
      const double down = evaluate(f);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[t][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }

  for (std::size_t t = 0; t < params.size(); ++t) {
    params[t].zero_grad();
    params[t].set_requires_grad(saved_flags[t]);
  }
  return worst;
}

}  // namespace capdetect
