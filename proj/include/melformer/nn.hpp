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

// Layer building blocks shared by the text frontend, the multilevel model and
// the fusion head: parameter registry, affine layers, multi-head attention and
// post-norm transformer blocks.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "melformer/tensor.hpp"

namespace melformer {

/// Deterministic generator with platform-independent real conversions
/// (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  std::vector<std::uint8_t> keep_mask(std::size_t n, double drop_rate);
  template <typename It>
  void shuffle(It first, It last) {
    for (auto n = last - first; n > 1; --n) std::swap(first[n - 1], first[static_cast<std::ptrdiff_t>(below(static_cast<std::size_t>(n)))]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Ordered registry of trainable tensors. Registration order is the
/// checkpoint order.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor value);
  /// Uniform in ±1/sqrt(fan_in).
  Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  std::vector<NamedParameter>& entries() { return entries_; }
  const std::vector<NamedParameter>& entries() const { return entries_; }
  const NamedParameter* find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad();

  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  std::vector<NamedParameter> entries_;
};

enum class Mode { Train, Eval };

struct AttentionMap {
  std::string layer;
  std::size_t head = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;
};

/// Per-forward state: mode, dropout randomness and optional attention capture.
struct ForwardContext {
  Mode mode = Mode::Eval;
  double dropout = 0.0;
  Rng* rng = nullptr;
  std::vector<AttentionMap>* attention = nullptr;

  bool training() const { return mode == Mode::Train && dropout > 0.0 && rng != nullptr; }
  Tensor drop(const Tensor& x) const;
};

class Linear {
 public:
  Linear() = default;
  /// Weight and bias uniform in ±1/sqrt(in) unless `bias_init` fixes the bias.
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         std::optional<double> bias_init = std::nullopt, bool with_bias = true);
  Tensor operator()(const Tensor& x) const {
    return !bias_.defined() ? matmul(x, weight_) : add_bias(matmul(x, weight_), bias_);
  }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;  // in × out
  Tensor bias_;  // empty without bias
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

 private:
  Tensor gain_;
  Tensor bias_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t d_model,
                     std::size_t heads, Rng& rng);

  /// Queries attend over `memory`; memory rows with key_mask 0 get zero weight.
  /// The key projection has no bias: it would shift every score in a row by
  /// the same amount and cancel in the softmax.
  Tensor operator()(const Tensor& queries, const Tensor& memory, std::span<const std::uint8_t> key_mask,
                    const ForwardContext& ctx) const;

  const Linear& value_proj() const { return v_; }
  const Linear& output_proj() const { return o_; }

 private:
  std::string name_;
  std::size_t heads_ = 1;
  Linear q_, k_, v_, o_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, std::size_t d_model, std::size_t hidden,
              Rng& rng);
  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const;

 private:
  Linear in_, out_;
};

/// Post-norm transformer encoder block: self-attention then feed-forward.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterStore& store, const std::string& name, std::size_t d_model, std::size_t heads,
               std::size_t ffn, Rng& rng);
  Tensor operator()(const Tensor& x, std::span<const std::uint8_t> mask, const ForwardContext& ctx) const;

 private:
  MultiHeadAttention self_attn_;
  LayerNorm norm1_, norm2_;
  FeedForward ffn_;
};

/// Self-attention over the query stream, attention into a memory stream, then
/// feed-forward. No causal mask.
class CrossBlock {
 public:
  CrossBlock() = default;
  CrossBlock(ParameterStore& store, const std::string& name, std::size_t d_model, std::size_t heads,
             std::size_t ffn, Rng& rng);
  Tensor operator()(const Tensor& x, std::span<const std::uint8_t> x_mask, const Tensor& memory,
                    std::span<const std::uint8_t> memory_mask, const ForwardContext& ctx) const;

  const MultiHeadAttention& memory_attention() const { return cross_attn_; }

 private:
  MultiHeadAttention self_attn_, cross_attn_;
  LayerNorm norm1_, norm2_, norm3_;
  FeedForward ffn_;
};

/// Sinusoidal position table, rows × dim.
Tensor positional_encoding(std::size_t rows, std::size_t dim);

}  // namespace melformer
