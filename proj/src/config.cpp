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

#include "melformer/config.hpp"

#include <set>

#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"

namespace melformer {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ValidationError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown config key '" + section + "." + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ValidationError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

CombineMode parse_combine(const std::string& s) {
  if (s == "concat") return CombineMode::Concat;
  if (s == "highway") return CombineMode::Highway;
  throw ValidationError("combine_mode must be concat|highway, got '" + s + "'");
}

ModelKind parse_kind(const std::string& s) {
  if (s == "multilevel") return ModelKind::Multilevel;
  if (s == "multigranularity") return ModelKind::MultiGranularity;
  throw ValidationError("model kind must be multilevel|multigranularity, got '" + s + "'");
}

UtteranceSource parse_source(const std::string& s) {
  if (s == "file") return UtteranceSource::File;
  if (s == "builtin") return UtteranceSource::Builtin;
  throw ValidationError("utterance_source must be file|builtin, got '" + s + "'");
}

}  // namespace

std::string to_string(CombineMode m) { return m == CombineMode::Concat ? "concat" : "highway"; }
std::string to_string(ModelKind k) { return k == ModelKind::Multilevel ? "multilevel" : "multigranularity"; }
std::string to_string(UtteranceSource s) { return s == UtteranceSource::File ? "file" : "builtin"; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (d_model == 0 || heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (layers_text < 1 || layers_cross < 1 || layers_fusion < 1) fail("all layer counts must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (ffn_dim == 0 || mel_dim == 0 || word_dim == 0) fail("dimensions must be positive");
  if (phoneme.embed == 0 || phoneme.widths.empty() || phoneme.channels % phoneme.widths.size() != 0)
    fail("phoneme channels must divide evenly across kernel widths");
  for (auto w : phoneme.widths)
    if (w == 0) fail("phoneme kernel widths must be positive");
  if (combine == CombineMode::Highway && highway_layers == 0) fail("highway mode needs >= 1 highway layer");
  if (prenet_layers == 0 || prenet_width == 0) fail("encoder pre-net needs >= 1 layer of positive width");
  if (kind == ModelKind::MultiGranularity && (utterance_dim == 0 || fuse_dim == 0))
    fail("utterance_dim and fuse_dim must be positive");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("train config: " + m); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("betas must be in [0, 1)");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (folds != 5) fail("only the 5-fold rotation (3/1/1) is supported");
  if (seeds.empty()) fail("at least one seed is required");
  if (clip_norm < 0.0) fail("clip_norm must be >= 0 (0 disables clipping)");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"kind", to_string(c.kind)},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"ffn_dim", c.ffn_dim},
           {"layers_text", c.layers_text},
           {"layers_cross", c.layers_cross},
           {"layers_fusion", c.layers_fusion},
           {"combine_mode", to_string(c.combine)},
           {"num_classes", c.num_classes},
           {"dropout", c.dropout},
           {"mel_dim", c.mel_dim},
           {"word_dim", c.word_dim},
           {"phoneme_embed", c.phoneme.embed},
           {"phoneme_channels", c.phoneme.channels},
           {"phoneme_widths", c.phoneme.widths},
           {"highway_layers", c.highway_layers},
           {"highway_gate_bias", c.highway_gate_bias},
           {"prenet_layers", c.prenet_layers},
           {"prenet_width", c.prenet_width},
           {"finetune_word_vectors", c.finetune_word_vectors},
           {"utterance_source", to_string(c.utterance_source)},
           {"utterance_dim", c.utterance_dim},
           {"fuse_dim", c.fuse_dim},
           {"freeze_fine", c.freeze_fine}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j,
                 {"kind", "d_model", "heads", "ffn_dim", "layers_text", "layers_cross", "layers_fusion",
                  "combine_mode", "num_classes", "dropout", "mel_dim", "word_dim", "phoneme_embed",
                  "phoneme_channels", "phoneme_widths", "highway_layers", "highway_gate_bias", "prenet_layers",
                  "prenet_width", "finetune_word_vectors", "utterance_source", "utterance_dim", "fuse_dim",
                  "freeze_fine"},
                 "model");
  std::string s;
  if (j.contains("kind")) {
    read(j, "kind", s);
    c.kind = parse_kind(s);
  }
  read(j, "d_model", c.d_model);
  read(j, "heads", c.heads);
  read(j, "ffn_dim", c.ffn_dim);
  read(j, "layers_text", c.layers_text);
  read(j, "layers_cross", c.layers_cross);
  read(j, "layers_fusion", c.layers_fusion);
  if (j.contains("combine_mode")) {
    read(j, "combine_mode", s);
    c.combine = parse_combine(s);
  }
  read(j, "num_classes", c.num_classes);
  read(j, "dropout", c.dropout);
  read(j, "mel_dim", c.mel_dim);
  read(j, "word_dim", c.word_dim);
  read(j, "phoneme_embed", c.phoneme.embed);
  read(j, "phoneme_channels", c.phoneme.channels);
  read(j, "phoneme_widths", c.phoneme.widths);
  read(j, "highway_layers", c.highway_layers);
  read(j, "highway_gate_bias", c.highway_gate_bias);
  read(j, "prenet_layers", c.prenet_layers);
  read(j, "prenet_width", c.prenet_width);
  read(j, "finetune_word_vectors", c.finetune_word_vectors);
  if (j.contains("utterance_source")) {
    read(j, "utterance_source", s);
    c.utterance_source = parse_source(s);
  }
  read(j, "utterance_dim", c.utterance_dim);
  read(j, "fuse_dim", c.fuse_dim);
  read(j, "freeze_fine", c.freeze_fine);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"patience", c.patience},
           {"clip_norm", c.clip_norm},
           {"folds", c.folds},
           {"seeds", c.seeds},
           {"split_seed", c.split_seed},
           {"random_groups", c.random_groups},
           {"workers", c.workers}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"lr", "beta1", "beta2", "adam_eps", "batch_size", "max_epochs", "patience", "clip_norm", "folds",
                  "seeds", "split_seed", "random_groups", "workers"},
                 "train");
  read(j, "lr", c.lr);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "batch_size", c.batch_size);
  read(j, "max_epochs", c.max_epochs);
  read(j, "patience", c.patience);
  read(j, "clip_norm", c.clip_norm);
  read(j, "folds", c.folds);
  read(j, "seeds", c.seeds);
  read(j, "split_seed", c.split_seed);
  read(j, "random_groups", c.random_groups);
  read(j, "workers", c.workers);
}

void to_json(json& j, const RunConfig& c) { j = json{{"model", c.model}, {"train", c.train}}; }

void from_json(const json& j, RunConfig& c) {
  reject_unknown(j, {"model", "train"}, "<root>");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  RunConfig cfg;
  try {
    from_json(j, cfg);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

std::size_t parameter_count(const ModelConfig& c, std::size_t vocab_rows) {
  const std::size_t d = c.d_model, f = c.ffn_dim;
  const std::size_t u = c.word_dim + c.phoneme.channels;
  const std::size_t linear_dd = d * d + d;
  const std::size_t attention = 4 * linear_dd - d;  // key projection has no bias
  const std::size_t norm = 2 * d;
  const std::size_t ffn = d * f + f + f * d + d;

  std::size_t n = 0;
  // Phoneme CNN: embedding table and bias-free kernels.
  n += kPhonemeInventory * c.phoneme.embed;
  for (auto w : c.phoneme.widths) n += w * c.phoneme.embed * (c.phoneme.channels / c.phoneme.widths.size());
  if (c.combine == CombineMode::Highway) n += c.highway_layers * 2 * (u * u + u);
  // Encoder pre-net.
  n += c.prenet_width * u * d + d + norm;
  n += (c.prenet_layers - 1) * (c.prenet_width * d * d + d + norm);
  n += linear_dd;
  n += c.layers_text * (attention + 2 * norm + ffn);
  n += c.mel_dim * d + d + linear_dd;  // mel pre-net
  n += c.layers_cross * (2 * attention + 3 * norm + ffn);
  n += c.layers_fusion * (attention + 2 * norm + ffn);
  n += d * c.num_classes + c.num_classes;
  if (c.finetune_word_vectors) n += vocab_rows * c.word_dim;

  if (c.kind == ModelKind::MultiGranularity) {
    n += d * c.fuse_dim + c.fuse_dim;
    n += c.utterance_dim * c.fuse_dim + c.fuse_dim;
    n += 2 * c.fuse_dim * c.num_classes + c.num_classes;
    if (c.utterance_source == UtteranceSource::Builtin) n += c.word_dim * c.utterance_dim + c.utterance_dim;
  }
  return n;
}

}  // namespace melformer
