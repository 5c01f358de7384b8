// Copyright 2026 The Melformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar walks the graph in reverse topological order and
// accumulates gradients into every node that requires them. The graph lives
// exactly as long as the handles that reference it, so dropping the loss
// between training steps clears it.
//
// Only rank-1/2 operands are used by the model, with one exception (the
// rank-3 conv1d kernel). Broadcasting is limited to adding a bias over the
// last axis.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace melformer {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Leading extent for matrices; 1 for vectors.
  std::size_t rows() const;
  /// Last-axis extent.
  std::size_t cols() const;

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }

  double item() const;
  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  const char* op() const { return node_->op; }

  /// Fresh leaf with copied values and no lineage.
  Tensor detach() const;

  /// Populates grad on every requires_grad node reachable from this scalar.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse topological order of the graph rooted at `root` (root first).
/// Each node appears exactly once.
std::vector<Node*> topological_order(const Tensor& root);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

enum class Pointwise { Relu, Sigmoid, Tanh };
enum class Padding { Same, Valid };

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor pointwise(const Tensor& x, Pointwise f);
inline Tensor relu(const Tensor& x) { return pointwise(x, Pointwise::Relu); }
inline Tensor sigmoid(const Tensor& x) { return pointwise(x, Pointwise::Sigmoid); }
inline Tensor tanh(const Tensor& x) { return pointwise(x, Pointwise::Tanh); }
/// Multiplies by a constant (non-differentiable) tensor of the same shape.
Tensor mul_const(const Tensor& x, std::span<const double> factors);
/// Zeroes rows whose mask entry is 0; rows with mask 1 pass through unchanged.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> row_mask);

// Normalization and attention.
Tensor softmax(const Tensor& x);
/// Softmax over the last axis where columns with key_mask == 0 receive
/// probability exactly 0. Every row must keep at least one column.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Convolution and pooling.
/// Cross-correlation along time: y[t,o] = sum_w sum_c x[t+w-left, c] * k[w,c,o].
/// Same padding pads left=(W-1)/2 and right=W-1-left zeros.
Tensor conv1d(const Tensor& x, const Tensor& kernels, Padding padding);
/// Per-channel maximum over the first `length` rows (all rows when length is
/// 0). Gradient goes to the first argmax.
Tensor max_pool_time(const Tensor& x, std::size_t length = 0);

// Shape manipulation.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);

// Reductions and losses.
Tensor sum(const Tensor& x);
/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Inverted dropout with an explicit keep mask (1 keep, 0 drop).
Tensor dropout(const Tensor& x, std::span<const std::uint8_t> keep, double rate);

struct GradcheckOptions {
  double eps = 1e-5;
  /// 0 checks every coordinate; otherwise a deterministic sample per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares analytic gradients of the scalar `f()` with central differences
/// over every tensor in `inputs`. `f` must read the inputs' current values.
/// Error per coordinate: |a-n| / max(|a|, |n|, 1e-8).
GradcheckResult gradcheck(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                          const GradcheckOptions& options = {});

/// Single-input convenience overload.
double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

}  // namespace melformer
