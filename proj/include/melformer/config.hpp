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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "melformer/text.hpp"

namespace melformer {

enum class ModelKind { Multilevel, MultiGranularity };

/// Where the multi-granularity model gets its utterance-level vectors.
enum class UtteranceSource { File, Builtin };

struct ModelConfig {
  ModelKind kind = ModelKind::Multilevel;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t layers_text = 1;
  std::size_t layers_cross = 1;
  std::size_t layers_fusion = 2;
  CombineMode combine = CombineMode::Highway;
  std::size_t num_classes = 4;
  double dropout = 0.1;

  std::size_t mel_dim = 128;
  std::size_t word_dim = 300;
  PhonemeCnnDims phoneme;
  std::size_t highway_layers = 2;
  double highway_gate_bias = -1.0;
  std::size_t prenet_layers = 3;
  std::size_t prenet_width = 5;
  bool finetune_word_vectors = false;

  // Multi-granularity head.
  UtteranceSource utterance_source = UtteranceSource::File;
  std::size_t utterance_dim = 768;
  std::size_t fuse_dim = 128;
  bool freeze_fine = false;

  /// Throws ValidationError naming the first offending field.
  void validate() const;
};

struct TrainConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double clip_norm = 5.0;
  std::size_t folds = 5;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t split_seed = 0;
  bool random_groups = false;
  /// 0 = MELFORMER_NUM_WORKERS or hardware concurrency.
  std::size_t workers = 0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a JSON config; missing keys keep their defaults, unknown keys are
/// rejected. A missing file raises IoError("config not found: ...").
RunConfig load_run_config(const std::filesystem::path& path);

std::string to_string(CombineMode m);
std::string to_string(ModelKind k);
std::string to_string(UtteranceSource s);

/// Number of trainable scalars implied by `cfg`. `vocab_rows` only matters
/// when word vectors are fine-tuned.
std::size_t parameter_count(const ModelConfig& cfg, std::size_t vocab_rows = 0);

}  // namespace melformer
