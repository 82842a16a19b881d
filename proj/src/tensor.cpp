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

#include "capdetect/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "capdetect/errors.hpp"
#include "capdetect/kernels.hpp"

namespace capdetect {

using kernels::Trans;

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->data = std::move(data);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->shape;
}

std::size_t Tensor::numel() const { return storage_ ? storage_->data.size() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  }
  return storage_->shape[axis];
}

std::span<const double> Tensor::data() const {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!storage_) throw ContractError("use of an undefined tensor");
  return storage_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor of shape " + shape_to_string(shape()));
  return storage_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_to_string(shape()));
  return storage_->data[row * storage_->shape[1] + col];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!storage_) throw ContractError("use of an undefined tensor");
  storage_->requires_grad = on;
  if (!on) zero_grad();
}

bool Tensor::has_grad() const { return storage_ && storage_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("gradient buffer is absent");
  return storage_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw ContractError("gradient buffer is absent");
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (!storage_) return;
  storage_->grad.clear();
  storage_->grad.shrink_to_fit();
  storage_->has_grad = false;
}

Tensor Tensor::clone() const {
  if (!storage_) return {};
  return Tensor(storage_->shape, storage_->data, storage_->requires_grad);
}

std::vector<double>& Tensor::grad_buffer() const {
  if (!storage_->has_grad) {
    storage_->grad.assign(storage_->data.size(), 0.0);
    storage_->has_grad = true;
  }
  return storage_->grad;
}

// ---------------------------------------------------------------------------
// Graph plumbing

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> names;
  names.reserve(ops_.size());
  for (const auto& op : ops_) names.push_back(op.name);
  return names;
}

bool Graph::needs_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::make_output(Shape shape, std::vector<double> data, bool track) {
  return Tensor(std::move(shape), std::move(data), track);
}

void Graph::record(std::string name, const Tensor& output, std::function<void()> backward) {
  ops_.push_back(Op{std::move(name), output, std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

void require_defined(const char* op, std::initializer_list<const Tensor*> ts) {
  for (const auto* t : ts) {
    if (!t->defined()) throw ContractError(std::string(op) + ": undefined input");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Arithmetic primitives

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", {&a, &b});
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) {
    m = sa[0], k = sa[1], n = sb[1];
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    out_shape = {batch, m, n};
  } else {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(sa) + " and " +
                         shape_to_string(sb));
  }
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(Trans::kNo, Trans::kNo, m, n, k, a.data().data() + i * m * k,
                  b.data().data() + i * k * n, out.data() + i * m * n, false);
  }
  const bool track = needs_grad({&a, &b});
  Tensor y = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    record("matmul", y, [a, b, y, batch, m, n, k]() mutable {
      const double* dy = y.grad().data();
      if (a.requires_grad()) {
        double* da = a.grad_buffer().data();
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm(Trans::kNo, Trans::kYes, m, k, n, dy + i * m * n,
                        b.data().data() + i * k * n, da + i * m * k, true);
        }
      }
      if (b.requires_grad()) {
        double* db = b.grad_buffer().data();
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm(Trans::kYes, Trans::kNo, k, n, m, a.data().data() + i * m * k,
                        dy + i * m * n, db + i * k * n, true);
        }
      }
    });
  }
  return y;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_defined("add", {&a, &b});
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  const bool track = needs_grad({&a, &b});
  Tensor y = make_output(a.shape(), std::move(out), track);
  if (track) {
    record("add", y, [a, b, y]() mutable {
      const auto dy = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto& g = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return y;
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& b) {
  require_defined("add_bias", {&x, &b});
  const auto& sx = x.shape();
  const auto& sb = b.shape();
  if (sb.size() > sx.size() || !std::equal(sb.rbegin(), sb.rend(), sx.rbegin())) {
    throw DimensionError("add_bias: bias " + shape_to_string(sb) +
                         " does not match trailing dims of " + shape_to_string(sx));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xd[o * inner + i] + bd[i];
  }
  const bool track = needs_grad({&x, &b});
  Tensor y = make_output(sx, std::move(out), track);
  if (track) {
    record("add_bias", y, [x, b, y, outer, inner]() mutable {
      const auto dy = y.grad();
      if (x.requires_grad()) {
        auto& g = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) g[i] += dy[o * inner + i];
        }
      }
    });
  }
  return y;
}

Tensor Graph::scale(const Tensor& a, double factor) {
  require_defined("scale", {&a});
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  const bool track = needs_grad({&a});
  Tensor y = make_output(a.shape(), std::move(out), track);
  if (track) {
    record("scale", y, [a, y, factor]() mutable {
      const auto dy = y.grad();
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * dy[i];
    });
  }
  return y;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_defined("mul", {&a, &b});
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  const bool track = needs_grad({&a, &b});
  Tensor y = make_output(a.shape(), std::move(out), track);
  if (track) {
    record("mul", y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto& g = a.grad_buffer();
        const auto bd = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto& g = b.grad_buffer();
        const auto ad = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * ad[i];
      }
    });
  }
  return y;
}

Tensor Graph::gelu(const Tensor& a) {
  require_defined("gelu", {&a});
  // Exact form: x * Phi(x).
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * kInvSqrt2));
  }
  const bool track = needs_grad({&a});
  Tensor y = make_output(a.shape(), std::move(out), track);
  if (track) {
    record("gelu", y, [a, y]() mutable {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      const auto dy = y.grad();
      const auto ad = a.data();
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ad[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        g[i] += dy[i] * (cdf + x * pdf);
      }
    });
  }
  return y;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined("layer_norm", {&x, &gamma, &beta});
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                         shape_to_string(beta.shape()) + " do not match last dim of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gd[j] * h + bd[j];
    }
  }
  const bool track = needs_grad({&x, &gamma, &beta});
  Tensor y = make_output(x.shape(), std::move(out), track);
  if (track) {
    record("layer_norm", y, [x, gamma, beta, y, xhat, inv_std, rows, d]() mutable {
      const auto dy = y.grad();
      const auto gd = gamma.data();
      if (gamma.requires_grad() || beta.requires_grad()) {
        std::vector<double> dg(d, 0.0), db(d, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            dg[j] += dy[r * d + j] * (*xhat)[r * d + j];
            db[j] += dy[r * d + j];
          }
        }
        if (gamma.requires_grad()) {
          auto& g = gamma.grad_buffer();
          for (std::size_t j = 0; j < d; ++j) g[j] += dg[j];
        }
        if (beta.requires_grad()) {
          auto& g = beta.grad_buffer();
          for (std::size_t j = 0; j < d; ++j) g[j] += db[j];
        }
      }
      if (x.requires_grad()) {
        auto& g = x.grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[r * d + j] * gd[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          const double inv = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[r * d + j] * gd[j];
            g[r * d + j] += inv * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return y;
}

Tensor Graph::softmax(const Tensor& x, std::size_t axis) {
  require_defined("softmax", {&x});
  const auto& sx = x.shape();
  if (axis >= sx.size()) {
    throw IndexError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(sx));
  }
  const std::size_t n = sx[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < sx.size(); ++i) inner *= sx[i];
  const std::size_t outer = x.numel() / (n * inner);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  if (inner == 1) {
    kernels::softmax_rows(xd, out, n);
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double mx = xd[base];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          out[base + j * inner] = std::exp(xd[base + j * inner] - mx);
          s += out[base + j * inner];
        }
        for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
      }
    }
  }
  const bool track = needs_grad({&x});
  Tensor y = make_output(sx, std::move(out), track);
  if (track) {
    record("softmax", y, [x, y, outer, n, inner]() mutable {
      const auto dy = y.grad();
      const auto yd = y.data();
      auto& g = x.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * yd[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t at = base + j * inner;
            g[at] += yd[at] * (dy[at] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor Graph::embedding(const Tensor& table, std::span<const int> ids) {
  require_defined("embedding", {&table});
  if (table.rank() != 2) throw DimensionError("embedding: table must be a matrix, got " + shape_to_string(table.shape()));
  if (ids.empty()) throw ContractError("embedding: empty id list");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const bool track = needs_grad({&table});
  Tensor y = make_output({ids.size(), d}, std::move(out), track);
  if (track) {
    std::vector<int> idv(ids.begin(), ids.end());
    record("embedding", y, [table, y, idv = std::move(idv), d]() mutable {
      const auto dy = y.grad();
      auto& g = table.grad_buffer();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        for (std::size_t j = 0; j < d; ++j) g[idv[r] * d + j] += dy[r * d + j];
      }
    });
  }
  return y;
}

Tensor Graph::concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  require_defined("concat", {&a, &b});
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (axis >= sa.size()) {
    throw IndexError("concat: axis " + std::to_string(axis) + " out of range for " + shape_to_string(sa));
  }
  bool ok = sa.size() == sb.size();
  for (std::size_t i = 0; ok && i < sa.size(); ++i) ok = i == axis || sa[i] == sb[i];
  if (!ok) {
    throw DimensionError("concat: " + shape_to_string(sa) + " and " + shape_to_string(sb) +
                         " differ off axis " + std::to_string(axis));
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t outer = a.numel() / (sa[axis] * inner);
  const std::size_t ca = sa[axis] * inner, cb = sb[axis] * inner;
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  std::vector<double> out(a.numel() + b.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + o * ca, ca, out.data() + o * (ca + cb));
    std::copy_n(bd.data() + o * cb, cb, out.data() + o * (ca + cb) + ca);
  }
  const bool track = needs_grad({&a, &b});
  Tensor y = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    record("concat", y, [a, b, y, outer, ca, cb]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto& g = a.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < ca; ++i) g[o * ca + i] += dy[o * (ca + cb) + i];
        }
      }
      if (b.requires_grad()) {
        auto& g = b.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < cb; ++i) g[o * cb + i] += dy[o * (ca + cb) + ca + i];
        }
      }
    });
  }
  return y;
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_defined("cross_entropy", {&logits});
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  kernels::softmax_rows(logits.data(), *probs, v);
  const auto ld = logits.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    const double* row = ld.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[targets[r]];
    ++counted;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  const bool track = needs_grad({&logits}) && counted > 0;
  Tensor y = make_output({1}, {loss}, track);
  if (track) {
    std::vector<int> tv(targets.begin(), targets.end());
    record("cross_entropy", y, [logits, y, probs, tv = std::move(tv), ignore_index, n, v, counted]() mutable {
      const double dy = y.grad()[0] / static_cast<double>(counted);
      auto& g = logits.grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        if (tv[r] == ignore_index) continue;
        for (std::size_t j = 0; j < v; ++j) g[r * v + j] += dy * (*probs)[r * v + j];
        g[r * v + tv[r]] -= dy;
      }
    });
  }
  return y;
}

Tensor Graph::sum(const Tensor& a) {
  require_defined("sum", {&a});
  double s = 0.0;
  for (double v : a.data()) s += v;
  const bool track = needs_grad({&a});
  Tensor y = make_output({1}, {s}, track);
  if (track) {
    record("sum", y, [a, y]() mutable {
      const double dy = y.grad()[0];
      for (auto& g : a.grad_buffer()) g += dy;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Data movement

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", {&a});
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const bool track = needs_grad({&a});
  Tensor y = make_output(std::move(shape), std::move(out), track);
  if (track) {
    record("reshape", y, [a, y]() mutable {
      const auto dy = y.grad();
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    });
  }
  return y;
}

Tensor Graph::transpose(const Tensor& a) {
  require_defined("transpose", {&a});
  if (a.rank() < 2) throw DimensionError("transpose: rank < 2 for " + shape_to_string(a.shape()));
  Shape s = a.shape();
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t batch = a.numel() / (r * c);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = ad[b * r * c + i * c + j];
    }
  }
  const bool track = needs_grad({&a});
  Tensor y = make_output(std::move(s), std::move(out), track);
  if (track) {
    record("transpose", y, [a, y, batch, r, c]() mutable {
      const auto dy = y.grad();
      auto& g = a.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += dy[b * r * c + j * r + i];
        }
      }
    });
  }
  return y;
}

Tensor Graph::slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined("slice", {&a});
  const auto& sa = a.shape();
  if (axis >= sa.size()) {
    throw IndexError("slice: axis " + std::to_string(axis) + " out of range for " + shape_to_string(sa));
  }
  if (length == 0 || start + length > sa[axis]) {
    throw IndexError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of extent " + std::to_string(sa[axis]));
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t outer = a.numel() / (sa[axis] * inner);
  const std::size_t src_block = sa[axis] * inner, dst_block = length * inner;
  Shape out_shape = sa;
  out_shape[axis] = length;
  std::vector<double> out(outer * dst_block);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + o * src_block + start * inner, dst_block, out.data() + o * dst_block);
  }
  const bool track = needs_grad({&a});
  Tensor y = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    record("slice", y, [a, y, outer, src_block, dst_block, offset = start * inner]() mutable {
      const auto dy = y.grad();
      auto& g = a.grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < dst_block; ++i) g[o * src_block + offset + i] += dy[o * dst_block + i];
      }
    });
  }
  return y;
}

namespace {

// Index of x[b*t + s, h*dh + e] inside the split [b*h + hh, s, e] layout.
struct HeadLayout {
  std::size_t batch, seq, heads, head_dim;
  std::size_t split_index(std::size_t b, std::size_t s, std::size_t h, std::size_t e) const {
    return ((b * heads + h) * seq + s) * head_dim + e;
  }
  std::size_t merged_index(std::size_t b, std::size_t s, std::size_t h, std::size_t e) const {
    return (b * seq + s) * heads * head_dim + h * head_dim + e;
  }
  template <typename F>
  void for_each(F&& f) const {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t e = 0; e < head_dim; ++e) f(merged_index(b, s, h, e), split_index(b, s, h, e));
  }
};

}  // namespace

Tensor Graph::split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  require_defined("split_heads", {&x});
  if (x.rank() != 2 || x.dim(0) != batch * seq || heads == 0 || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: " + shape_to_string(x.shape()) + " is not [" +
                         std::to_string(batch * seq) + " x heads*dh] with heads=" + std::to_string(heads));
  }
  const HeadLayout lay{batch, seq, heads, x.dim(1) / heads};
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  lay.for_each([&](std::size_t m, std::size_t s) { out[s] = xd[m]; });
  const bool track = needs_grad({&x});
  Tensor y = make_output({batch * heads, seq, lay.head_dim}, std::move(out), track);
  if (track) {
    record("split_heads", y, [x, y, lay]() mutable {
      const auto dy = y.grad();
      auto& g = x.grad_buffer();
      lay.for_each([&](std::size_t m, std::size_t s) { g[m] += dy[s]; });
    });
  }
  return y;
}

Tensor Graph::merge_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  require_defined("merge_heads", {&x});
  if (x.rank() != 3 || x.dim(0) != batch * heads || x.dim(1) != seq) {
    throw DimensionError("merge_heads: " + shape_to_string(x.shape()) + " is not [" +
                         std::to_string(batch * heads) + " x " + std::to_string(seq) + " x dh]");
  }
  const HeadLayout lay{batch, seq, heads, x.dim(2)};
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  lay.for_each([&](std::size_t m, std::size_t s) { out[m] = xd[s]; });
  const bool track = needs_grad({&x});
  Tensor y = make_output({batch * seq, heads * lay.head_dim}, std::move(out), track);
  if (track) {
    record("merge_heads", y, [x, y, lay]() mutable {
      const auto dy = y.grad();
      auto& g = x.grad_buffer();
      lay.for_each([&](std::size_t m, std::size_t s) { g[s] += dy[m]; });
    });
  }
  return y;
}

}  // namespace capdetect
