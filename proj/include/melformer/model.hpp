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

// The multilevel transformer:
//
//   words ─┬─ word vectors ─┐
//          └─ phoneme CNN ──┴─ combine ─ pre-net ─ text encoder ──────┐
//   mel (dummy row first) ─ 2-layer FC ─ cross-modality (self + attend text)
//                                        ─ deep fusion ─ row 0 ─ linear ─ logits
//
// No causal mask anywhere: the whole golden mel sequence is visible.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "melformer/audio.hpp"
#include "melformer/config.hpp"
#include "melformer/nn.hpp"
#include "melformer/text.hpp"

namespace melformer {

struct Utterance {
  std::string id;
  MelMatrix mel;  // with dummy row
  TokenSeq tokens;
  std::size_t label = 0;
  std::string session;
  std::string speaker;
  std::vector<double> utterance_embedding;  // empty when not provided
};

/// Model-ready sample. Masks use 1 for real positions and 0 for padding.
struct ModelInput {
  std::string id;
  std::size_t mel_rows = 0;
  std::size_t mel_cols = 0;
  std::vector<double> mel;
  std::vector<std::uint8_t> mel_mask;
  std::vector<std::size_t> word_ids;
  std::vector<std::vector<std::size_t>> phonemes;
  std::vector<std::uint8_t> word_mask;
  std::vector<double> utterance_embedding;
  std::size_t label = 0;
};

ModelInput make_input(const Utterance& utt);

/// Appends `mel_rows` zero frames and `words` PAD words, all masked.
void append_padding(ModelInput& input, std::size_t mel_rows, std::size_t words);

/// Pads every sample to the longest mel and word sequence in the batch.
void pad_batch(std::vector<ModelInput>& batch);

struct ForwardTrace {
  Tensor text_enc_out;  // T × d
  Tensor cross_out;     // (T'+1) × d
  Tensor fusion_out;    // (T'+1) × d
  Tensor cls;           // 1 × d, row 0 of fusion_out
  Tensor logits;        // 1 × K
  std::vector<double> probabilities;
  std::vector<AttentionMap> attention;
};

/// Common surface of trainable classifiers used by the harness.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Tensor logits(const ModelInput& input, const ForwardContext& ctx) const = 0;
  virtual ParameterStore& parameters() = 0;
  virtual const ParameterStore& parameters() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual bool is_trainable(const std::string& /*name*/) const { return true; }
};

class MultilevelModel : public Classifier {
 public:
  MultilevelModel(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors, std::uint64_t seed);

  /// p = softmax(g(x, m)) with every intermediate exposed.
  ForwardTrace forward(const ModelInput& input, const ForwardContext& ctx, bool record_attention = false) const;
  Tensor logits(const ModelInput& input, const ForwardContext& ctx) const override;

  // Stages, exposed for testing and for the fusion model.
  Tensor embed_text(const ModelInput& input) const;
  Tensor text_encoder(const Tensor& prenet_out, std::span<const std::uint8_t> word_mask,
                      const ForwardContext& ctx) const;
  Tensor mel_prenet(const Tensor& mel) const;
  Tensor cross_modal(const Tensor& melside, std::span<const std::uint8_t> mel_mask, const Tensor& textside,
                     std::span<const std::uint8_t> word_mask, const ForwardContext& ctx) const;
  Tensor deep_fusion(const Tensor& cross_out, std::span<const std::uint8_t> mel_mask, const ForwardContext& ctx) const;
  Tensor classify(const Tensor& fusion_out) const;

  ParameterStore& parameters() override { return store_; }
  const ParameterStore& parameters() const override { return store_; }
  const ModelConfig& config() const override { return cfg_; }
  const WordVectors& word_vectors() const { return *vectors_; }
  const Tensor& word_table() const { return word_table_; }
  const PhonemeCnn& phoneme_cnn() const { return phoneme_cnn_; }
  const Highway* highway() const { return highway_ ? &*highway_ : nullptr; }
  const EncoderPrenet& encoder_prenet() const { return prenet_; }
  const std::vector<CrossBlock>& cross_blocks() const { return cross_blocks_; }
  const Linear& head() const { return head_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<const WordVectors> vectors_;
  ParameterStore store_;
  Tensor word_table_;
  PhonemeCnn phoneme_cnn_;
  std::optional<Highway> highway_;
  EncoderPrenet prenet_;
  std::vector<EncoderBlock> text_blocks_;
  Linear mel_in_, mel_out_;
  std::vector<CrossBlock> cross_blocks_;
  std::vector<EncoderBlock> fusion_blocks_;
  Linear head_;
};

/// Builds the model selected by cfg.kind.
std::unique_ptr<Classifier> make_classifier(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors,
                                            std::uint64_t seed);

/// Class probabilities (softmax of logits) in eval mode.
std::vector<double> predict_proba(const Classifier& model, const ModelInput& input);

}  // namespace melformer
