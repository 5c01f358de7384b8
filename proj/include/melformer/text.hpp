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

// Text frontend: transcript -> words + per-word phoneme ids, word vectors,
// the phoneme CNN, the phoneme/word combination (concat or highway) and the
// convolutional encoder pre-net.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "melformer/nn.hpp"
#include "melformer/tensor.hpp"

namespace melformer {

// Phoneme inventory: PAD, UNK, then the 39 ARPAbet symbols.
inline constexpr std::size_t kPadPhoneme = 0;
inline constexpr std::size_t kUnkPhoneme = 1;
inline constexpr std::array<std::string_view, 39> kArpabet = {
    "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH", "EH", "ER", "EY",
    "F",  "G",  "HH", "IH", "IY", "JH", "K",  "L",  "M",  "N",  "NG", "OW", "OY",
    "P",  "R",  "S",  "SH", "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};
inline constexpr std::size_t kPhonemeInventory = kArpabet.size() + 2;

/// Id of an ARPAbet symbol (stress digits already stripped), or kUnkPhoneme.
std::size_t phoneme_id(std::string_view symbol);
std::string_view phoneme_symbol(std::size_t id);

/// Letter-to-phoneme fallback used for out-of-lexicon words: one phoneme per
/// letter, a..z. Non-letters map to UNK.
std::size_t letter_phoneme(char letter);

class Lexicon {
 public:
  Lexicon() = default;
  /// CMU-dictionary style: `WORD  PH1 PH2 ...`; `;;;` comments; "(2)"
  /// alternates ignored; stress digits stripped.
  static Lexicon load(const std::filesystem::path& path);
  static Lexicon parse(std::string_view text, const std::string& origin = "<memory>");

  void add(const std::string& word, std::vector<std::size_t> phonemes);
  /// Lexicon pronunciation or the letter fallback; never empty.
  std::vector<std::size_t> pronounce(const std::string& word) const;
  bool contains(const std::string& word) const { return entries_.contains(word); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, std::vector<std::size_t>> entries_;
};

struct TokenSeq {
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> phonemes;
  std::vector<std::size_t> word_ids;
};

/// Lowercased word list with punctuation stripped (apostrophes kept).
std::vector<std::string> normalize_words(std::string_view transcript);

class WordVectors;

/// Whitespace tokenization + G2P. word_ids are filled when `vectors` is given.
TokenSeq tokenize_and_g2p(std::string_view transcript, const Lexicon& lexicon,
                          const WordVectors* vectors = nullptr);

class WordVectors {
 public:
  WordVectors() = default;
  /// Rows 0..V-1 are the file's words; row V is UNK (columnwise mean).
  WordVectors(std::vector<std::string> words, std::vector<double> matrix, std::size_t dim);

  /// One token per line: word followed by `dim` decimals.
  static WordVectors load(const std::filesystem::path& path, std::size_t dim = 300);
  static WordVectors parse(std::string_view text, std::size_t dim = 300, const std::string& origin = "<memory>");

  std::size_t dim() const { return dim_; }
  std::size_t vocab_size() const { return words_.size(); }
  std::size_t unk_id() const { return words_.size(); }
  std::size_t rows() const { return words_.size() + 1; }
  std::size_t lookup(const std::string& word) const;
  std::span<const double> row(std::size_t id) const { return {matrix_.data() + id * dim_, dim_}; }
  /// Frozen (rows × dim) tensor view of the table.
  const Tensor& table() const { return table_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> matrix_;
  std::size_t dim_ = 0;
  Tensor table_;
};

// ---------------------------------------------------------------------------
// Trainable pieces

struct PhonemeCnnDims {
  std::size_t embed = 64;
  std::size_t channels = 150;
  std::vector<std::size_t> widths{2, 3, 4};
};

/// Embeds a word's phonemes, runs one bias-free same-padding conv per width
/// (channels/|widths| filters each), ReLU, and max-pools over time. PAD
/// entries are zeroed before the conv and excluded from the pool.
class PhonemeCnn {
 public:
  PhonemeCnn() = default;
  PhonemeCnn(ParameterStore& store, const std::string& name, const PhonemeCnnDims& dims, Rng& rng);
  Tensor operator()(std::span<const std::size_t> phonemes) const;
  std::size_t output_dim() const { return output_dim_; }
  const Tensor& table() const { return table_; }

 private:
  Tensor table_;
  std::vector<Tensor> kernels_;
  std::size_t output_dim_ = 0;
};

enum class CombineMode { Concat, Highway };

/// Two-or-more-layer highway network Z = H(u)·T(u) + u·(1 - T(u)) with
/// H = ReLU(affine) and T = sigmoid(affine); dimension preserving.
class Highway {
 public:
  Highway() = default;
  Highway(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t layers, double gate_bias,
          Rng& rng);
  Tensor operator()(const Tensor& u) const;
  std::size_t layers() const { return transform_.size(); }
  const Linear& transform(std::size_t i) const { return transform_[i]; }
  const Linear& gate(std::size_t i) const { return gate_[i]; }

 private:
  std::vector<Linear> transform_;
  std::vector<Linear> gate_;
};

/// Concatenates word and phoneme vectors (row-wise) and applies the
/// selected combination; highway must be non-null in Highway mode.
Tensor combine(const Tensor& word_vecs, const Tensor& phoneme_vecs, CombineMode mode, const Highway* highway);

/// Three same-padding width-5 convs (ReLU + layer_norm each) and a final
/// projection. Masked rows are zeroed before every conv so trailing padding
/// behaves like the conv's own zero padding.
class EncoderPrenet {
 public:
  EncoderPrenet() = default;
  EncoderPrenet(ParameterStore& store, const std::string& name, std::size_t in_dim, std::size_t model_dim,
                std::size_t layers, std::size_t width, Rng& rng);
  Tensor operator()(const Tensor& seq, std::span<const std::uint8_t> row_mask) const;

 private:
  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
  std::vector<LayerNorm> norms_;
  Linear projection_;
};

}  // namespace melformer
