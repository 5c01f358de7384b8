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

// Multi-granularity late fusion: the multilevel model's CLS vector and an
// utterance-level embedding are projected separately, concatenated, and
// classified by one affine head.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "melformer/model.hpp"

namespace melformer {

struct UtteranceEmbedding {
  std::string id;
  std::vector<double> vector;
  std::string provider;
};

using UtteranceEmbeddingMap = std::map<std::string, UtteranceEmbedding>;

/// Text file: header `UEMB <D>` then `<id> <D floats>` per line.
UtteranceEmbeddingMap load_utterance_embeddings(const std::filesystem::path& path);
UtteranceEmbeddingMap parse_utterance_embeddings(std::string_view text, const std::string& origin = "<memory>",
                                                 const std::string& provider = "file");
void write_utterance_embeddings(const std::filesystem::path& path, const UtteranceEmbeddingMap& embeddings);

/// Ids in `wanted` that the map cannot resolve, in input order.
std::vector<std::string> missing_embedding_ids(const UtteranceEmbeddingMap& embeddings,
                                               const std::vector<std::string>& wanted);

class MultiGranularityModel : public Classifier {
 public:
  MultiGranularityModel(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors, std::uint64_t seed);

  Tensor logits(const ModelInput& input, const ForwardContext& ctx) const override;
  /// Projection of both vectors, concatenation, head.
  Tensor fuse_and_classify(const Tensor& cls_fine, const Tensor& utterance) const;
  /// Utterance-level vector from the file-provided embedding or the built-in
  /// encoder (mean-pooled word vectors + one affine).
  Tensor utterance_vector(const ModelInput& input) const;

  ParameterStore& parameters() override { return store_; }
  const ParameterStore& parameters() const override { return store_; }
  const ModelConfig& config() const override { return cfg_; }
  bool is_trainable(const std::string& name) const override;

  const MultilevelModel& fine() const { return fine_; }
  const Linear& fine_projection() const { return fine_proj_; }
  const Linear& utterance_projection() const { return utt_proj_; }
  const Linear& head() const { return head_; }

 private:
  ModelConfig cfg_;
  MultilevelModel fine_;
  ParameterStore store_;
  Linear fine_proj_, utt_proj_, head_;
  std::optional<Linear> builtin_encoder_;
};

}  // namespace melformer
