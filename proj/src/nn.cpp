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

#include "melformer/nn.hpp"

#include <cmath>
#include <numbers>

#include "melformer/errors.hpp"

namespace melformer {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  spare_ = radius * std::sin(2.0 * std::numbers::pi * u2);
  has_spare_ = true;
  return radius * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::uint8_t> Rng::keep_mask(std::size_t n, double drop_rate) {
  std::vector<std::uint8_t> keep(n);
  for (auto& k : keep) k = uniform() >= drop_rate ? 1 : 0;
  return keep;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------

Tensor ParameterStore::add(const std::string& name, Tensor value) {
  if (find(name)) throw ContractError("duplicate parameter name " + name);
  value.set_requires_grad(true);
  entries_.push_back({name, value});
  return value;
}

Tensor ParameterStore::add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return add(name, Tensor::from(std::move(shape), std::move(values)));
}

Tensor ParameterStore::add_constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

const NamedParameter* ParameterStore::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.value.data().begin(), e.value.data().end());
  return out;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != entries_.size()) throw ContractError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].value.data();
    if (values[i].size() != dst.size()) throw ContractError("restore: size mismatch for " + entries_[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------

Tensor ForwardContext::drop(const Tensor& x) const {
  if (!training()) return x;
  return melformer::dropout(x, rng->keep_mask(x.numel(), dropout), dropout);
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               std::optional<double> bias_init, bool with_bias)
    : weight_(store.add_uniform(name + ".weight", {in, out}, in, rng)) {
  if (!with_bias) return;
  bias_ = bias_init ? store.add_constant(name + ".bias", {out}, *bias_init)
                    : store.add_uniform(name + ".bias", {out}, in, rng);
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim)
    : gain_(store.add_constant(name + ".gain", {dim}, 1.0)), bias_(store.add_constant(name + ".bias", {dim}, 0.0)) {}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t d_model,
                                       std::size_t heads, Rng& rng)
    : name_(name),
      heads_(heads),
      q_(store, name + ".query", d_model, d_model, rng),
      k_(store, name + ".key", d_model, d_model, rng, std::nullopt, false),
      v_(store, name + ".value", d_model, d_model, rng),
      o_(store, name + ".out", d_model, d_model, rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw ValidationError("attention: d_model " + std::to_string(d_model) + " not divisible by " +
                          std::to_string(heads) + " heads");
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& memory,
                                      std::span<const std::uint8_t> key_mask, const ForwardContext& ctx) const {
  if (key_mask.size() != memory.rows()) {
    throw DimensionError("attention " + name_ + ": mask of length " + std::to_string(key_mask.size()) +
                         " for memory of " + std::to_string(memory.rows()) + " rows");
  }
  const Tensor q = q_(queries);
  const Tensor k = k_(memory);
  const Tensor v = v_(memory);
  const std::size_t dk = queries.cols() / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> outputs;
  outputs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor qh = heads_ == 1 ? q : slice_cols(q, h * dk, dk);
    const Tensor kh = heads_ == 1 ? k : slice_cols(k, h * dk, dk);
    const Tensor vh = heads_ == 1 ? v : slice_cols(v, h * dk, dk);
    Tensor weights = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), key_mask);
    if (ctx.attention) {
      ctx.attention->push_back({name_, h, weights.rows(), weights.cols(),
                                std::vector<double>(weights.data().begin(), weights.data().end())});
    }
    weights = ctx.drop(weights);
    outputs.push_back(matmul(weights, vh));
  }
  return o_(heads_ == 1 ? outputs[0] : concat_cols(outputs));
}

FeedForward::FeedForward(ParameterStore& store, const std::string& name, std::size_t d_model, std::size_t hidden,
                         Rng& rng)
    : in_(store, name + ".in", d_model, hidden, rng), out_(store, name + ".out", hidden, d_model, rng) {}

Tensor FeedForward::operator()(const Tensor& x, const ForwardContext& ctx) const {
  return out_(ctx.drop(relu(in_(x))));
}

EncoderBlock::EncoderBlock(ParameterStore& store, const std::string& name, std::size_t d_model,
                           std::size_t heads, std::size_t ffn, Rng& rng)
    : self_attn_(store, name + ".self_attn", d_model, heads, rng),
      norm1_(store, name + ".norm1", d_model),
      norm2_(store, name + ".norm2", d_model),
      ffn_(store, name + ".ffn", d_model, ffn, rng) {}

Tensor EncoderBlock::operator()(const Tensor& x, std::span<const std::uint8_t> mask,
                                const ForwardContext& ctx) const {
  Tensor h = norm1_(add(x, ctx.drop(self_attn_(x, x, mask, ctx))));
  return norm2_(add(h, ctx.drop(ffn_(h, ctx))));
}

CrossBlock::CrossBlock(ParameterStore& store, const std::string& name, std::size_t d_model, std::size_t heads,
                       std::size_t ffn, Rng& rng)
    : self_attn_(store, name + ".self_attn", d_model, heads, rng),
      cross_attn_(store, name + ".cross_attn", d_model, heads, rng),
      norm1_(store, name + ".norm1", d_model),
      norm2_(store, name + ".norm2", d_model),
      norm3_(store, name + ".norm3", d_model),
      ffn_(store, name + ".ffn", d_model, ffn, rng) {}

Tensor CrossBlock::operator()(const Tensor& x, std::span<const std::uint8_t> x_mask, const Tensor& memory,
                              std::span<const std::uint8_t> memory_mask, const ForwardContext& ctx) const {
  Tensor h = norm1_(add(x, ctx.drop(self_attn_(x, x, x_mask, ctx))));
  h = norm2_(add(h, ctx.drop(cross_attn_(h, memory, memory_mask, ctx))));
  return norm3_(add(h, ctx.drop(ffn_(h, ctx))));
}

Tensor positional_encoding(std::size_t rows, std::size_t dim) {
  std::vector<double> table(rows * dim);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      table[pos * dim + i] = std::sin(angle);
      if (i + 1 < dim) table[pos * dim + i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({rows, dim}, std::move(table));
}

}  // namespace melformer
