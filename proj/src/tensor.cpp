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

#include "melformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "melformer/errors.hpp"

namespace melformer {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

// C[M×N] += A[M×K] · B[K×N], row-major. The inner loop is a contiguous axpy
// so each C[i,j] accumulates in k order.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[K×N] += Aᵀ · B where A is M×K and B is M×N.
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

bool any_requires_grad(const std::vector<NodePtr>& parents) {
  return std::any_of(parents.begin(), parents.end(),
                     [](const NodePtr& p) { return p->requires_grad; });
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<NodePtr> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (g_grad_enabled && any_requires_grad(parents)) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Accumulation target for a parent, or nullptr when it needs no gradient.
double* grad_target(const NodePtr& parent) {
  if (!parent->requires_grad) return nullptr;
  parent->ensure_grad();
  return parent->grad.data();
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (std::isnan(v)) throw NumericError(std::string(what) + ": NaN input");
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
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

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  }
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.size() < 2) return 1;
  return node_->data.size() / s.back();
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

std::span<double> Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> post;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() on a tensor that does not require grad");
  }
  const auto order = topological_order(*this);
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (Node* node : order) {
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), "matmul", {a.handle(), b.handle()},
                     [m, k, n](Node& self) {
                       const auto& pa = self.parents[0];
                       const auto& pb = self.parents[1];
                       if (double* ga = grad_target(pa)) {
                         const auto bt = transposed(pb->data.data(), k, n);
                         gemm_acc(self.grad.data(), bt.data(), ga, m, n, k);
                       }
                       if (double* gb = grad_target(pb)) {
                         gemm_tn_acc(pa->data.data(), self.grad.data(), gb, m, k, n);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  return make_result({c, r}, transposed(a.data().data(), r, c), "transpose", {a.handle()},
                     [r, c](Node& self) {
                       if (double* g = grad_target(self.parents[0])) {
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result(a.shape(), std::move(out), "add", {a.handle(), b.handle()}, [](Node& self) {
    for (const auto& p : self.parents) {
      if (double* g = grad_target(p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result(a.shape(), std::move(out), "sub", {a.handle(), b.handle()}, [](Node& self) {
    if (double* g = grad_target(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_target(self.parents[1]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result(a.shape(), std::move(out), "mul", {a.handle(), b.handle()}, [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (double* g = grad_target(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    if (double* g = grad_target(pb))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->data[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
  return make_result(a.shape(), std::move(out), "scale", {a.handle()}, [factor](Node& self) {
    if (double* g = grad_target(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t d = x.cols();
  if (bias.numel() != d || bias.rank() != 1) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bias.at(j);
  return make_result(x.shape(), std::move(out), "add_bias", {x.handle(), bias.handle()},
                     [rows, d](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       if (double* g = grad_target(self.parents[1]))
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
                     });
}

Tensor pointwise(const Tensor& x, Pointwise f) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  switch (f) {
    case Pointwise::Relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Pointwise::Sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) {
        // Split by sign so exp never overflows.
        if (in[i] >= 0.0) {
          out[i] = 1.0 / (1.0 + std::exp(-in[i]));
        } else {
          const double e = std::exp(in[i]);
          out[i] = e / (1.0 + e);
        }
      }
      break;
    case Pointwise::Tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
      break;
  }
  static constexpr const char* names[] = {"relu", "sigmoid", "tanh"};
  return make_result(x.shape(), std::move(out), names[static_cast<int>(f)], {x.handle()},
                     [f](Node& self) {
                       const auto& p = self.parents[0];
                       double* g = grad_target(p);
                       if (!g) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         const double y = self.data[i];
                         double d = 0.0;
                         switch (f) {
                           case Pointwise::Relu: d = p->data[i] > 0.0 ? 1.0 : 0.0; break;
                           case Pointwise::Sigmoid: d = y * (1.0 - y); break;
                           case Pointwise::Tanh: d = 1.0 - y * y; break;
                         }
                         g[i] += self.grad[i] * d;
                       }
                     });
}

Tensor mul_const(const Tensor& x, std::span<const double> factors) {
  if (factors.size() != x.numel()) {
    throw DimensionError("mul_const: " + std::to_string(factors.size()) + " factors for tensor " +
                         shape_str(x.shape()));
  }
  std::vector<double> f(factors.begin(), factors.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * f[i];
  return make_result(x.shape(), std::move(out), "mul_const", {x.handle()},
                     [f = std::move(f)](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * f[i];
                     });
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> row_mask) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (row_mask.size() != rows) {
    throw DimensionError("mask_rows: mask of length " + std::to_string(row_mask.size()) +
                         " for tensor " + shape_str(x.shape()));
  }
  std::vector<double> factors(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    std::fill_n(factors.begin() + static_cast<std::ptrdiff_t>(r * d), d, row_mask[r] ? 1.0 : 0.0);
  return mul_const(x, factors);
}

// ---------------------------------------------------------------------------
// Normalization and attention

namespace {

Tensor softmax_impl(const Tensor& x, std::span<const std::uint8_t> key_mask, const char* op) {
  require_finite(x.data(), op);
  const std::size_t n = x.cols();
  const std::size_t rows = x.numel() / n;
  const bool masked = !key_mask.empty();
  if (masked && key_mask.size() != n) {
    throw DimensionError(std::string(op) + ": key mask of length " + std::to_string(key_mask.size()) +
                         " for rows of width " + std::to_string(n));
  }
  if (masked && std::none_of(key_mask.begin(), key_mask.end(), [](auto m) { return m != 0; })) {
    throw ContractError(std::string(op) + ": every key position is masked");
  }
  std::vector<double> out(x.numel(), 0.0);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * n;
    double* yr = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!masked || key_mask[j]) mx = std::max(mx, xr[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!masked || key_mask[j]) {
        yr[j] = std::exp(xr[j] - mx);
        total += yr[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  return make_result(x.shape(), std::move(out), op, {x.handle()}, [rows, n](Node& self) {
    double* g = grad_target(self.parents[0]);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x) { return softmax_impl(x, {}, "softmax"); }

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> key_mask) {
  return softmax_impl(x, key_mask, "masked_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv;
      out[r * d + j] = gain.at(j) * xhat[r * d + j] + bias.at(j);
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x.handle(), gain.handle(), bias.handle()},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& pg = self.parents[1];
        double* gx = grad_target(self.parents[0]);
        double* gg = grad_target(pg);
        double* gb = grad_target(self.parents[2]);
        std::vector<double> dxhat(d);
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (gg)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
          if (!gx) continue;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = dy[j] * pg->data[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
          }
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += inv_std[r] / dd * (dd * dxhat[j] - s1 - xh[j] * s2);
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Tensor conv1d(const Tensor& x, const Tensor& kernels, Padding padding) {
  require_matrix(x, "conv1d");
  if (kernels.rank() != 3) {
    throw DimensionError("conv1d: kernels must be W×Cin×Cout, got " + shape_str(kernels.shape()));
  }
  const std::size_t t_in = x.shape()[0], cin = x.shape()[1];
  const std::size_t w = kernels.shape()[0], cout = kernels.shape()[2];
  if (kernels.shape()[1] != cin) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " has " + std::to_string(cin) +
                         " channels but kernels " + shape_str(kernels.shape()) + " expect " +
                         std::to_string(kernels.shape()[1]));
  }
  const std::size_t left = padding == Padding::Same ? (w - 1) / 2 : 0;
  const std::size_t padded = padding == Padding::Same ? t_in + w - 1 : t_in;
  if (w > padded) {
    throw DimensionError("conv1d: kernel width " + std::to_string(w) + " exceeds padded input length " +
                         std::to_string(padded) + " (input " + shape_str(x.shape()) + ")");
  }
  const std::size_t t_out = padded - w + 1;
  const std::size_t patch = w * cin;
  // im2col: row t holds x[t+w-left, :] for w = 0..W-1 (zeros outside).
  std::vector<double> cols(t_out * patch, 0.0);
  const auto in = x.data();
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t k = 0; k < w; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
      std::copy_n(in.data() + static_cast<std::size_t>(src) * cin, cin, cols.data() + t * patch + k * cin);
    }
  }
  std::vector<double> out(t_out * cout, 0.0);
  gemm_acc(cols.data(), kernels.data().data(), out.data(), t_out, patch, cout);
  return make_result(
      {t_out, cout}, std::move(out), "conv1d", {x.handle(), kernels.handle()},
      [=, cols = std::move(cols)](Node& self) {
        if (double* gk = grad_target(self.parents[1])) {
          gemm_tn_acc(cols.data(), self.grad.data(), gk, t_out, patch, cout);
        }
        if (double* gx = grad_target(self.parents[0])) {
          const auto kt = transposed(self.parents[1]->data.data(), patch, cout);
          std::vector<double> dcols(t_out * patch, 0.0);
          gemm_acc(self.grad.data(), kt.data(), dcols.data(), t_out, cout, patch);
          for (std::size_t t = 0; t < t_out; ++t) {
            for (std::size_t k = 0; k < w; ++k) {
              const std::ptrdiff_t src =
                  static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(left);
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_in)) continue;
              const double* d = dcols.data() + t * patch + k * cin;
              double* g = gx + static_cast<std::size_t>(src) * cin;
              for (std::size_t c = 0; c < cin; ++c) g[c] += d[c];
            }
          }
        }
      });
}

Tensor max_pool_time(const Tensor& x, std::size_t length) {
  require_matrix(x, "max_pool_time");
  const std::size_t t_in = x.shape()[0], c = x.shape()[1];
  const std::size_t t = length == 0 ? t_in : length;
  if (t == 0 || t > t_in) {
    throw DimensionError("max_pool_time: cannot pool " + std::to_string(t) + " steps of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(c);
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    double best = x.at(0, j);
    for (std::size_t i = 1; i < t; ++i) {
      if (x.at(i, j) > best) {
        best = x.at(i, j);
        argmax[j] = i;
      }
    }
    out[j] = best;
  }
  return make_result({c}, std::move(out), "max_pool_time", {x.handle()},
                     [c, argmax = std::move(argmax)](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t j = 0; j < c; ++j) g[argmax[j] * c + j] += self.grad[j];
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= v) {
      throw DimensionError("embedding: id " + std::to_string(idx[i]) + " outside table " +
                           shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  const std::size_t n = idx.size();
  return make_result({n, d}, std::move(out), "embedding", {table.handle()},
                     [d, idx = std::move(idx)](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  const bool vector_out = parts[0].rank() == 1;
  std::vector<std::size_t> widths;
  std::vector<NodePtr> parents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows || (p.rank() == 1) != vector_out) {
      throw DimensionError("concat_cols: " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
    parents.push_back(p.handle());
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = vector_out ? Shape{total} : Shape{rows, total};
  return make_result(std::move(shape), std::move(out), "concat_cols", std::move(parents),
                     [rows, total, widths = std::move(widths)](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (double* g = grad_target(self.parents[k]))
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[r * widths[k] + j] += self.grad[r * total + off + j];
                         off += widths[k];
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::vector<std::size_t> counts;
  std::vector<NodePtr> parents;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != d || p.rank() > 2) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    }
    counts.push_back(p.numel());
    parents.push_back(p.handle());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  const std::size_t rows = out.size() / d;
  return make_result({rows, d}, std::move(out), "concat_rows", std::move(parents),
                     [counts = std::move(counts)](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < counts.size(); ++k) {
                         if (double* g = grad_target(self.parents[k]))
                           for (std::size_t i = 0; i < counts[k]; ++i) g[i] += self.grad[off + i];
                         off += counts[k];
                       }
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (count == 0 || start + count > d) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * d + start, count, out.data() + r * count);
  Shape shape = x.rank() == 1 ? Shape{count} : Shape{rows, count};
  return make_result(std::move(shape), std::move(out), "slice_cols", {x.handle()},
                     [rows, d, start, count](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < count; ++j)
                             g[r * d + start + j] += self.grad[r * count + j];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (count == 0 || start + count > rows) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(start * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * d));
  return make_result({count, d}, std::move(out), "slice_rows", {x.handle()},
                     [start, d](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * d + i] += self.grad[i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), "reshape",
                     {x.handle()}, [](Node& self) {
                       if (double* g = grad_target(self.parents[0]))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                     });
}

// ---------------------------------------------------------------------------
// Reductions and losses

Tensor sum(const Tensor& x) {
  const double total = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  return make_result({}, {total}, "sum", {x.handle()}, [](Node& self) {
    const auto& p = self.parents[0];
    if (double* g = grad_target(p))
      for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t k = logits.cols();
  const std::size_t n = logits.numel() / k;
  if (k < 2) throw ValidationError("cross_entropy: need at least 2 classes, got " + std::to_string(k));
  if (labels.size() != n) {
    throw ValidationError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(n) + " rows of logits");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw ValidationError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  require_finite(logits.data(), "cross_entropy");
  std::vector<double> probs(n * k);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    const double mx = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(z[j] - mx);
    const double log_total = std::log(total) + mx;
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(z[j] - log_total);
    loss += log_total - z[y[i]];
  }
  loss /= static_cast<double>(n);
  return make_result({}, {loss}, "cross_entropy", {logits.handle()},
                     [n, k, probs = std::move(probs), y = std::move(y)](Node& self) {
                       double* g = grad_target(self.parents[0]);
                       if (!g) return;
                       const double upstream = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j)
                           g[i * k + j] += upstream * (probs[i * k + j] - (j == y[i] ? 1.0 : 0.0));
                     });
}

Tensor dropout(const Tensor& x, std::span<const std::uint8_t> keep, double rate) {
  if (keep.size() != x.numel()) throw DimensionError("dropout: mask size mismatch");
  if (rate <= 0.0) return x;
  std::vector<double> factors(keep.size());
  const double inv = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) factors[i] = keep[i] ? inv : 0.0;
  return mul_const(x, factors);
}

// ---------------------------------------------------------------------------
// Gradient verification

GradcheckResult gradcheck(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                          const GradcheckOptions& options) {
  GradcheckResult result;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor loss = f();
    loss.backward();
  }
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& in = inputs[i];
    std::vector<std::size_t> coords(in.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input != 0 && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
    }
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    for (std::size_t c : coords) {
      const double original = in.data()[c];
      in.data()[c] = original + options.eps;
      const double plus = f().item();
      in.data()[c] = original - options.eps;
      const double minus = f().item();
      in.data()[c] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[c];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coords_checked;
      if (result.coords_checked == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = i;
        result.worst_coord = c;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  std::vector<Tensor> inputs{x};
  GradcheckOptions options;
  options.eps = eps;
  return gradcheck([&] { return f(inputs[0]); }, inputs, options).max_rel_error;
}

}  // namespace melformer
