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

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace capdetect {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 array with an optional gradient buffer.
///
/// `Tensor` is a handle: copies share storage, which is how parameters owned
/// by a model are referenced from a recorded Graph. Use clone() for a deep
/// copy. The gradient buffer is absent until the first backward pass writes
/// to it; tensors with requires_grad() == false never receive one.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const;
  /// Mutable view of the values. Only optimizers and initializers should
  /// write through this; tensors referenced by a live Graph must not change.
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  /// Drops the gradient buffer (it becomes absent, not zero).
  void zero_grad();

  Tensor clone() const;
  /// Identity of the underlying storage; equal for handle copies.
  const void* id() const { return storage_.get(); }

 private:
  friend class Graph;

  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool has_grad = false;
  };

  // Allocates the gradient buffer on first use.
  std::vector<double>& grad_buffer() const;

  std::shared_ptr<Storage> storage_;
};

/// Reverse-mode tape. Every op that produces a tensor depending on a
/// requires_grad input is appended in execution order, so the tape is
/// topologically sorted by construction and backward() walks it once in
/// reverse. A Graph built with `recording == false` evaluates the same ops
/// without taping anything (inference mode).
///
/// Broadcasting is limited to add_bias(); every other elementwise op wants
/// identical shapes.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }
  /// Names of the recorded ops in tape order.
  std::vector<std::string> op_names() const;
  void clear() { ops_.clear(); }

  // --- arithmetic primitives ---

  /// [m,k]x[k,n] -> [m,n], or batched [b,m,k]x[b,k,n] -> [b,m,n].
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  /// x + b where b's shape equals the trailing dims of x; b is repeated
  /// over the leading dims (bias vectors, positional tables, masks).
  Tensor add_bias(const Tensor& x, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor gelu(const Tensor& a);
  /// Normalizes over the last axis; gamma/beta have the last axis' extent.
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5);
  Tensor softmax(const Tensor& x, std::size_t axis);
  /// Rows of `table` [v,d] selected by `ids` -> [ids.size(), d].
  Tensor embedding(const Tensor& table, std::span<const int> ids);
  Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
  /// Mean softmax cross-entropy of `logits` [n,v] against `targets` (n ids);
  /// positions whose target equals `ignore_index` are excluded.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                       int ignore_index = -1);
  /// Sum of all entries -> scalar.
  Tensor sum(const Tensor& a);

  // --- data movement (no arithmetic) ---

  Tensor reshape(const Tensor& a, Shape shape);
  /// Swaps the last two axes.
  Tensor transpose(const Tensor& a);
  Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
  /// [b*t, h*dh] -> [b*h, t, dh]
  Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads);
  /// Inverse of split_heads.
  Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads);

  /// Populates dLoss/dT for every requires_grad tensor reachable from
  /// `loss`. Gradients accumulate into existing buffers.
  void backward(const Tensor& loss);

 private:
  struct Op {
    std::string name;
    Tensor output;
    std::function<void()> backward;
  };

  bool needs_grad(std::initializer_list<const Tensor*> inputs) const;
  Tensor make_output(Shape shape, std::vector<double> data, bool track);
  void record(std::string name, const Tensor& output, std::function<void()> backward);

  bool recording_;
  std::vector<Op> ops_;
};

}  // namespace capdetect
