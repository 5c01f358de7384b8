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

// Dataset ingestion: JSON-lines manifests, the synthetic corpus generator and
// the feature cache writer.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "melformer/fusion.hpp"
#include "melformer/model.hpp"
#include "melformer/text.hpp"

namespace melformer {

/// Canonical label order; index = class id.
inline const std::vector<std::string> kEmotionLabels = {"angry", "sad", "neutral", "happy"};

/// Canonical label for `raw` (case-insensitive; "excited" and IEMOCAP
/// abbreviations are folded), or std::nullopt.
std::optional<std::string> canonical_label(const std::string& raw);

struct ManifestRecord {
  std::string id;
  std::optional<std::filesystem::path> audio_path;
  std::optional<std::filesystem::path> features_path;
  std::string transcript;
  std::string label;
  std::size_t label_index = 0;
  std::string session;
  std::string speaker;
  std::string utt_embedding_id;
  std::size_t line = 0;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<std::string> labels = kEmotionLabels;
  std::vector<ManifestRecord> records;

  std::vector<std::size_t> class_totals() const;
  std::vector<std::string> ids() const;
};

/// One JSON object per line with keys id, audio_path | features_path,
/// transcript, label and optional session, speaker, utt_embedding_id.
/// Relative paths resolve against the manifest's directory.
Manifest parse_manifest(const std::filesystem::path& path);
Manifest parse_manifest_text(std::string_view text, const std::filesystem::path& base_dir,
                             const std::string& origin = "<memory>");
std::string manifest_line(const ManifestRecord& record);

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t per_class = 8;
  std::uint32_t sample_rate = 16000;
  double min_seconds = 0.30;
  double max_seconds = 0.50;
  std::uint64_t seed = 7;
  std::size_t word_dim = 300;
  /// 0 skips writing an utterance-embedding file.
  std::size_t utterance_dim = 768;

  void validate() const;
};

struct SyntheticCorpus {
  std::filesystem::path manifest;
  std::filesystem::path lexicon;
  std::filesystem::path vectors;
  std::optional<std::filesystem::path> utterance_embeddings;
  std::size_t utterances = 0;
};

/// Class k audio is a 200·(k+1) Hz sinusoid plus low noise; transcripts come
/// from class-specific templates. Output is byte-identical for a fixed spec.
SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Samples of the synthetic waveform for class k (exposed for oracles).
std::vector<double> synthetic_waveform(std::size_t class_index, std::size_t samples, std::uint32_t sample_rate,
                                       std::uint64_t seed);

struct DatasetOptions {
  const UtteranceEmbeddingMap* embeddings = nullptr;
  bool require_embeddings = false;
};

/// Loads features (cache or WAV) and tokens for every record.
std::vector<Utterance> load_dataset(const Manifest& manifest, const Lexicon& lexicon, const WordVectors& vectors,
                                    const DatasetOptions& options = {});

struct FeaturizeReport {
  std::size_t written = 0;
  std::size_t unchanged = 0;
  std::filesystem::path manifest;
};

/// Writes `<out_dir>/<id>.mel` for every audio record plus a manifest that
/// points at the cache. Files whose content hash already matches are not
/// rewritten.
FeaturizeReport featurize_manifest(const Manifest& manifest, const std::filesystem::path& out_dir);

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

}  // namespace melformer
