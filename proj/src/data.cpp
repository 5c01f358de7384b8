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

#include "melformer/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "melformer/audio.hpp"
#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"
#include "melformer/nn.hpp"

namespace melformer {

using nlohmann::json;

namespace {

const std::map<std::string, std::string>& label_aliases() {
  static const std::map<std::string, std::string> aliases = {
      {"angry", "angry"}, {"ang", "angry"},   {"anger", "angry"},     {"sad", "sad"},
      {"sadness", "sad"}, {"neutral", "neutral"}, {"neu", "neutral"}, {"happy", "happy"},
      {"hap", "happy"},   {"happiness", "happy"}, {"excited", "happy"}, {"exc", "happy"}};
  return aliases;
}

// Template sentences per class for the synthetic corpus.
const std::vector<std::vector<std::string>>& synthetic_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"I am so angry right now!", "This is completely unacceptable.", "Stop shouting at me!",
       "I hate waiting like this."},
      {"I feel so lonely today.", "Nobody came to see me.", "I miss my old friend.", "Everything feels so empty."},
      {"The meeting starts at noon.", "Please close the door.", "The report is on the desk.",
       "We will take the train."},
      {"This is the best day ever!", "I am so glad you came!", "We won the big game!", "What a wonderful surprise!"}};
  return t;
}

// CMU-style pronunciations for the template vocabulary ("unacceptable" is
// deliberately absent and exercises the letter fallback).
constexpr const char* kSyntheticLexicon = R"(;;; synthetic corpus lexicon
A  AH0
AM  AE1 M
ANGRY  AE1 NG G R IY0
AT  AE1 T
BEST  B EH1 S T
BIG  B IH1 G
CAME  K EY1 M
CLOSE  K L OW1 Z
COMPLETELY  K AH0 M P L IY1 T L IY0
DAY  D EY1
DESK  D EH1 S K
DOOR  D AO1 R
EMPTY  EH1 M P T IY0
EVER  EH1 V ER0
EVERYTHING  EH1 V R IY0 TH IH2 NG
FEEL  F IY1 L
FEELS  F IY1 L Z
FRIEND  F R EH1 N D
GAME  G EY1 M
GLAD  G L AE1 D
HATE  HH EY1 T
I  AY1
IS  IH1 Z
LIKE  L AY1 K
LONELY  L OW1 N L IY0
ME  M IY1
MEETING  M IY1 T IH0 NG
MISS  M IH1 S
MY  M AY1
NOBODY  N OW1 B AA2 D IY0
NOON  N UW1 N
NOW  N AW1
OLD  OW1 L D
ON  AA1 N
PLEASE  P L IY1 Z
REPORT  R IH0 P AO1 R T
RIGHT  R AY1 T
SEE  S IY1
SHOUTING  SH AW1 T IH0 NG
SO  S OW1
STARTS  S T AA1 R T S
STOP  S T AA1 P
SURPRISE  S ER0 P R AY1 Z
TAKE  T EY1 K
THE  DH AH0
THIS  DH IH1 S
TO  T UW1
TODAY  T AH0 D EY1
TRAIN  T R EY1 N
WAITING  W EY1 T IH0 NG
WE  W IY1
WHAT  W AH1 T
WILL  W IH1 L
WON  W AH1 N
WONDERFUL  W AH1 N D ER0 F AH0 L
YOU  Y UW1
)";

std::string format_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string path_string(const std::filesystem::path& p) { return p.generic_string(); }

}  // namespace

std::optional<std::string> canonical_label(const std::string& raw) {
  std::string key;
  for (char c : raw) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (auto it = label_aliases().find(key); it != label_aliases().end()) return it->second;
  return std::nullopt;
}

std::vector<std::size_t> Manifest::class_totals() const {
  std::vector<std::size_t> totals(labels.size(), 0);
  for (const auto& r : records) ++totals[r.label_index];
  return totals;
}

std::vector<std::string> Manifest::ids() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.id);
  return out;
}

Manifest parse_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("manifest not found: " + path.string());
  return parse_manifest_text(io::read_text(path), path.parent_path(), path.string());
}

Manifest parse_manifest_text(std::string_view text, const std::filesystem::path& base_dir, const std::string& origin) {
  Manifest manifest;
  manifest.base_dir = base_dir;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ValidationError(where + ": record must be a JSON object");
    auto str_field = [&](const char* key, bool required) -> std::string {
      auto it = j.find(key);
      if (it == j.end() || it->is_null()) {
        if (required) throw ValidationError(where + ": missing field '" + key + "'");
        return {};
      }
      if (!it->is_string()) throw ValidationError(where + ": field '" + key + "' must be a string");
      return it->get<std::string>();
    };
    ManifestRecord r;
    r.line = line_no;
    r.id = str_field("id", true);
    if (r.id.empty()) throw ValidationError(where + ": empty id");
    if (!seen.insert(r.id).second) throw ValidationError(where + ": duplicate id '" + r.id + "'");
    const std::string audio = str_field("audio_path", false);
    const std::string features = str_field("features_path", false);
    if (!audio.empty() && !features.empty())
      throw ValidationError(where + ": record '" + r.id + "' has both audio_path and features_path");
    if (audio.empty() && features.empty())
      throw ValidationError(where + ": missing field 'audio_path' or 'features_path'");
    if (!audio.empty()) r.audio_path = base_dir / audio;
    if (!features.empty()) r.features_path = base_dir / features;
    r.transcript = str_field("transcript", true);
    const std::string raw_label = str_field("label", true);
    const auto label = canonical_label(raw_label);
    const auto pos = label ? std::find(manifest.labels.begin(), manifest.labels.end(), *label) : manifest.labels.end();
    if (pos == manifest.labels.end()) throw ValidationError(where + ": unknown label '" + raw_label + "'");
    r.label = *label;
    r.label_index = static_cast<std::size_t>(pos - manifest.labels.begin());
    r.session = str_field("session", false);
    r.speaker = str_field("speaker", false);
    r.utt_embedding_id = str_field("utt_embedding_id", false);
    manifest.records.push_back(std::move(r));
  }
  if (manifest.records.empty()) throw ValidationError(origin + ": no records");
  return manifest;
}

std::string manifest_line(const ManifestRecord& r) {
  json j;
  j["id"] = r.id;
  if (r.audio_path) j["audio_path"] = path_string(*r.audio_path);
  if (r.features_path) j["features_path"] = path_string(*r.features_path);
  j["transcript"] = r.transcript;
  j["label"] = r.label;
  if (!r.session.empty()) j["session"] = r.session;
  if (!r.speaker.empty()) j["speaker"] = r.speaker;
  if (!r.utt_embedding_id.empty()) j["utt_embedding_id"] = r.utt_embedding_id;
  return j.dump();
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (classes < 2 || classes > kEmotionLabels.size())
    throw ValidationError("synthetic: classes must be in [2, " + std::to_string(kEmotionLabels.size()) + "]");
  if (per_class == 0) throw ValidationError("synthetic: per_class must be >= 1");
  if (sample_rate == 0) throw ValidationError("synthetic: sample rate must be positive");
  if (!(min_seconds > 0.0) || max_seconds < min_seconds)
    throw ValidationError("synthetic: need 0 < min_seconds <= max_seconds");
  if (static_cast<double>(frame_layout(sample_rate).window) > min_seconds * sample_rate)
    throw ValidationError("synthetic: min_seconds shorter than one analysis window");
  if (word_dim == 0) throw ValidationError("synthetic: word_dim must be positive");
}

std::vector<double> synthetic_waveform(std::size_t class_index, std::size_t samples, std::uint32_t sample_rate,
                                       std::uint64_t seed) {
  Rng rng(seed);
  const double freq = 200.0 * static_cast<double>(class_index + 1);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> out(samples);
  for (std::size_t n = 0; n < samples; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(sample_rate);
    out[n] = 0.5 * std::sin(2.0 * std::numbers::pi * freq * t + phase) + 0.01 * rng.normal();
  }
  return out;
}

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "wav");
  SyntheticCorpus corpus;
  corpus.manifest = out_dir / "manifest.jsonl";
  corpus.lexicon = out_dir / "lexicon.txt";
  corpus.vectors = out_dir / "vectors.txt";

  io::write_text(corpus.lexicon, kSyntheticLexicon);

  // Word vectors for every template word, sorted for a stable file.
  std::set<std::string> vocab;
  for (std::size_t k = 0; k < spec.classes; ++k)
    for (const auto& s : synthetic_templates()[k])
      for (auto& w : normalize_words(s)) vocab.insert(w);
  {
    Rng rng(mix_seed(spec.seed, 0xB0CA));
    std::string text;
    for (const auto& w : vocab) {
      text += w;
      for (std::size_t i = 0; i < spec.word_dim; ++i) text += ' ' + format_fixed(0.5 * rng.normal());
      text += '\n';
    }
    io::write_text(corpus.vectors, text);
  }

  std::vector<std::vector<double>> centroids;
  Rng emb_rng(mix_seed(spec.seed, 0xE3B));
  if (spec.utterance_dim > 0) {
    for (std::size_t k = 0; k < spec.classes; ++k) {
      std::vector<double> c(spec.utterance_dim);
      for (auto& v : c) v = emb_rng.normal();
      centroids.push_back(std::move(c));
    }
  }

  std::string manifest_text;
  std::string emb_text = "UEMB " + std::to_string(spec.utterance_dim) + "\n";
  std::size_t index = 0;
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t k = 0; k < spec.classes; ++k, ++index) {
      Rng rng(mix_seed(spec.seed, index));
      char id_buf[32];
      std::snprintf(id_buf, sizeof(id_buf), "syn_%s_%04zu", kEmotionLabels[k].c_str(), i);
      const std::string id = id_buf;
      const double seconds = rng.uniform(spec.min_seconds, spec.max_seconds);
      const auto samples = static_cast<std::size_t>(seconds * spec.sample_rate);
      const auto wave = synthetic_waveform(k, samples, spec.sample_rate, rng.next());
      const auto wav_rel = std::filesystem::path("wav") / (id + ".wav");
      write_wav(out_dir / wav_rel, wave, spec.sample_rate);

      const auto& templates = synthetic_templates()[k];
      ManifestRecord r;
      r.id = id;
      r.audio_path = wav_rel;
      r.transcript = templates[rng.below(templates.size())];
      r.label = kEmotionLabels[k];
      r.session = "Ses0" + std::to_string(index % 5 + 1);
      manifest_text += manifest_line(r) + '\n';

      if (spec.utterance_dim > 0) {
        emb_text += id;
        for (std::size_t d = 0; d < spec.utterance_dim; ++d)
          emb_text += ' ' + format_fixed(centroids[k][d] + 0.5 * emb_rng.normal());
        emb_text += '\n';
      }
    }
  }
  io::write_text(corpus.manifest, manifest_text);
  if (spec.utterance_dim > 0) {
    corpus.utterance_embeddings = out_dir / "utterance_embeddings.txt";
    io::write_text(*corpus.utterance_embeddings, emb_text);
  }
  corpus.utterances = index;
  return corpus;
}

// ---------------------------------------------------------------------------

std::vector<Utterance> load_dataset(const Manifest& manifest, const Lexicon& lexicon, const WordVectors& vectors,
                                    const DatasetOptions& options) {
  if (options.require_embeddings) {
    if (!options.embeddings) throw ValidationError("utterance embeddings required but none were loaded");
    std::vector<std::string> keys;
    for (const auto& r : manifest.records) keys.push_back(r.utt_embedding_id.empty() ? r.id : r.utt_embedding_id);
    const auto missing = missing_embedding_ids(*options.embeddings, keys);
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw ValidationError(std::to_string(missing.size()) + " utterance embedding(s) missing: " + list);
    }
  }
  std::vector<Utterance> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    Utterance u;
    u.id = r.id;
    if (r.features_path) {
      u.mel = read_features(*r.features_path);
    } else {
      // Route through the cache encoding so both sources yield identical inputs.
      const auto bytes = encode_features(featurize_wav(*r.audio_path));
      u.mel = decode_features(bytes, r.audio_path->string());
    }
    try {
      u.tokens = tokenize_and_g2p(r.transcript, lexicon, &vectors);
    } catch (const ValidationError& e) {
      throw ValidationError(r.id + ": " + e.what());
    }
    u.label = r.label_index;
    u.session = r.session;
    u.speaker = r.speaker;
    if (options.embeddings) {
      const std::string key = r.utt_embedding_id.empty() ? r.id : r.utt_embedding_id;
      if (auto it = options.embeddings->find(key); it != options.embeddings->end()) u.utterance_embedding = it->second.vector;
    }
    out.push_back(std::move(u));
  }
  return out;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

// Returns true when the file was (re)written.
bool write_if_changed(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (std::filesystem::exists(path)) {
    const auto existing = io::read_file(path);
    if (existing.size() == bytes.size() && fnv1a(existing) == fnv1a(bytes)) return false;
  }
  io::write_file(path, bytes);
  return true;
}

}  // namespace

FeaturizeReport featurize_manifest(const Manifest& manifest, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  FeaturizeReport report;
  std::string text;
  for (const auto& r : manifest.records) {
    ManifestRecord cached = r;
    if (r.audio_path) {
      const auto bytes = encode_features(featurize_wav(*r.audio_path));
      const auto target = out_dir / (r.id + ".mel");
      (write_if_changed(target, bytes) ? report.written : report.unchanged) += 1;
      cached.audio_path.reset();
      cached.features_path = std::filesystem::path(r.id + ".mel");
    } else {
      cached.features_path = std::filesystem::relative(*r.features_path, out_dir);
    }
    text += manifest_line(cached) + '\n';
  }
  report.manifest = out_dir / "manifest.jsonl";
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
  write_if_changed(report.manifest, bytes);
  return report;
}

}  // namespace melformer
