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

#include "melformer/model.hpp"

#include <algorithm>

#include "melformer/errors.hpp"
#include "melformer/fusion.hpp"

namespace melformer {

ModelInput make_input(const Utterance& utt) {
  if (!utt.mel.has_dummy) throw ContractError(utt.id + ": mel features have no dummy row");
  if (utt.tokens.words.empty()) throw ValidationError(utt.id + ": no words");
  if (utt.tokens.phonemes.size() != utt.tokens.words.size() || utt.tokens.word_ids.size() != utt.tokens.words.size())
    throw ContractError(utt.id + ": token sequence lengths disagree");
  ModelInput in;
  in.id = utt.id;
  in.mel_rows = utt.mel.rows;
  in.mel_cols = utt.mel.cols;
  in.mel = utt.mel.values;
  in.mel_mask.assign(utt.mel.rows, 1);
  in.word_ids = utt.tokens.word_ids;
  in.phonemes = utt.tokens.phonemes;
  in.word_mask.assign(utt.tokens.words.size(), 1);
  in.utterance_embedding = utt.utterance_embedding;
  in.label = utt.label;
  return in;
}

void append_padding(ModelInput& input, std::size_t mel_rows, std::size_t words) {
  input.mel.resize(input.mel.size() + mel_rows * input.mel_cols, 0.0);
  input.mel_rows += mel_rows;
  input.mel_mask.resize(input.mel_rows, 0);
  const std::size_t filler = input.word_ids.empty() ? 0 : input.word_ids.back();
  for (std::size_t i = 0; i < words; ++i) {
    input.word_ids.push_back(filler);
    input.phonemes.push_back({kPadPhoneme});
    input.word_mask.push_back(0);
  }
}

void pad_batch(std::vector<ModelInput>& batch) {
  std::size_t mel = 0, words = 0;
  for (const auto& b : batch) {
    mel = std::max(mel, b.mel_rows);
    words = std::max(words, b.word_ids.size());
  }
  for (auto& b : batch) append_padding(b, mel - b.mel_rows, words - b.word_ids.size());
}

// ---------------------------------------------------------------------------

MultilevelModel::MultilevelModel(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors,
                                 std::uint64_t seed)
    : cfg_(cfg), vectors_(std::move(vectors)) {
  cfg_.validate();
  if (!vectors_) throw ContractError("multilevel model needs word vectors");
  if (vectors_->dim() != cfg_.word_dim) {
    throw ValidationError("word vectors have dimension " + std::to_string(vectors_->dim()) + " but config expects " +
                          std::to_string(cfg_.word_dim));
  }
  Rng rng(seed);
  const std::size_t d = cfg_.d_model;
  const std::size_t u = cfg_.word_dim + cfg_.phoneme.channels;
  if (cfg_.finetune_word_vectors) {
    word_table_ = store_.add("text.word_vectors", vectors_->table().detach());
  } else {
    word_table_ = vectors_->table();
  }
  phoneme_cnn_ = PhonemeCnn(store_, "text.phoneme_cnn", cfg_.phoneme, rng);
  if (cfg_.combine == CombineMode::Highway)
    highway_.emplace(store_, "text.highway", u, cfg_.highway_layers, cfg_.highway_gate_bias, rng);
  prenet_ = EncoderPrenet(store_, "text.prenet", u, d, cfg_.prenet_layers, cfg_.prenet_width, rng);
  for (std::size_t i = 0; i < cfg_.layers_text; ++i)
    text_blocks_.emplace_back(store_, "text_encoder." + std::to_string(i), d, cfg_.heads, cfg_.ffn_dim, rng);
  mel_in_ = Linear(store_, "mel_prenet.fc0", cfg_.mel_dim, d, rng);
  mel_out_ = Linear(store_, "mel_prenet.fc1", d, d, rng);
  for (std::size_t i = 0; i < cfg_.layers_cross; ++i)
    cross_blocks_.emplace_back(store_, "cross." + std::to_string(i), d, cfg_.heads, cfg_.ffn_dim, rng);
  for (std::size_t i = 0; i < cfg_.layers_fusion; ++i)
    fusion_blocks_.emplace_back(store_, "fusion." + std::to_string(i), d, cfg_.heads, cfg_.ffn_dim, rng);
  head_ = Linear(store_, "head", d, cfg_.num_classes, rng, 0.0);
}

Tensor MultilevelModel::embed_text(const ModelInput& input) const {
  const std::size_t t = input.word_ids.size();
  if (t == 0) throw ValidationError(input.id + ": no words");
  if (input.word_mask.size() != t || input.phonemes.size() != t) {
    throw DimensionError(input.id + ": word mask/phoneme lists do not match " + std::to_string(t) + " words");
  }
  const Tensor words = embedding(word_table_, input.word_ids);
  std::vector<Tensor> phonemes;
  phonemes.reserve(t);
  for (std::size_t i = 0; i < t; ++i) {
    phonemes.push_back(input.word_mask[i] ? phoneme_cnn_(input.phonemes[i])
                                          : Tensor::zeros({phoneme_cnn_.output_dim()}));
  }
  const Tensor combined = combine(words, concat_rows(phonemes), cfg_.combine, highway());
  return prenet_(combined, input.word_mask);
}

Tensor MultilevelModel::text_encoder(const Tensor& prenet_out, std::span<const std::uint8_t> word_mask,
                                     const ForwardContext& ctx) const {
  if (word_mask.size() != prenet_out.rows()) {
    throw DimensionError("text encoder: mask of length " + std::to_string(word_mask.size()) + " for " +
                         std::to_string(prenet_out.rows()) + " positions");
  }
  Tensor x = add(prenet_out, positional_encoding(prenet_out.rows(), cfg_.d_model));
  for (const auto& block : text_blocks_) x = block(x, word_mask, ctx);
  return x;
}

Tensor MultilevelModel::mel_prenet(const Tensor& mel) const {
  if (mel.cols() != cfg_.mel_dim) {
    throw DimensionError("mel pre-net: features have " + std::to_string(mel.cols()) + " channels, config expects " +
                         std::to_string(cfg_.mel_dim));
  }
  return mel_out_(relu(mel_in_(mel)));
}

Tensor MultilevelModel::cross_modal(const Tensor& melside, std::span<const std::uint8_t> mel_mask,
                                    const Tensor& textside, std::span<const std::uint8_t> word_mask,
                                    const ForwardContext& ctx) const {
  Tensor x = melside;
  for (const auto& block : cross_blocks_) x = block(x, mel_mask, textside, word_mask, ctx);
  return x;
}

Tensor MultilevelModel::deep_fusion(const Tensor& cross_out, std::span<const std::uint8_t> mel_mask,
                                    const ForwardContext& ctx) const {
  Tensor x = cross_out;
  for (const auto& block : fusion_blocks_) x = block(x, mel_mask, ctx);
  return x;
}

Tensor MultilevelModel::classify(const Tensor& fusion_out) const { return head_(slice_rows(fusion_out, 0, 1)); }

ForwardTrace MultilevelModel::forward(const ModelInput& input, const ForwardContext& ctx,
                                      bool record_attention) const {
  if (input.mel_rows == 0 || input.mel.size() != input.mel_rows * input.mel_cols ||
      input.mel_mask.size() != input.mel_rows) {
    throw DimensionError(input.id + ": inconsistent mel matrix/mask");
  }
  ForwardTrace trace;
  ForwardContext local = ctx;
  if (record_attention) local.attention = &trace.attention;

  const Tensor prenet_out = embed_text(input);
  trace.text_enc_out = text_encoder(prenet_out, input.word_mask, local);

  const Tensor mel = Tensor::from({input.mel_rows, input.mel_cols}, input.mel);
  const Tensor melside = add(mel_prenet(mel), positional_encoding(input.mel_rows, cfg_.d_model));
  trace.cross_out = cross_modal(melside, input.mel_mask, trace.text_enc_out, input.word_mask, local);
  trace.fusion_out = deep_fusion(trace.cross_out, input.mel_mask, local);
  trace.cls = slice_rows(trace.fusion_out, 0, 1);
  trace.logits = head_(trace.cls);
  {
    NoGradGuard no_grad;
    const Tensor p = softmax(trace.logits);
    trace.probabilities.assign(p.data().begin(), p.data().end());
  }
  return trace;
}

Tensor MultilevelModel::logits(const ModelInput& input, const ForwardContext& ctx) const {
  return forward(input, ctx).logits;
}

std::unique_ptr<Classifier> make_classifier(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors,
                                            std::uint64_t seed) {
  if (cfg.kind == ModelKind::MultiGranularity)
    return std::make_unique<MultiGranularityModel>(cfg, std::move(vectors), seed);
  return std::make_unique<MultilevelModel>(cfg, std::move(vectors), seed);
}

std::vector<double> predict_proba(const Classifier& model, const ModelInput& input) {
  NoGradGuard no_grad;
  const Tensor p = softmax(model.logits(input, ForwardContext{}));
  return {p.data().begin(), p.data().end()};
}

}  // namespace melformer
