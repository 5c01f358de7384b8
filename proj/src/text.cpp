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

#include "melformer/text.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"

namespace melformer {

namespace {

// a..z -> ARPAbet
constexpr std::array<std::string_view, 26> kLetterFallback = {
    "AE", "B", "K", "D", "EH", "F", "G", "HH", "IH", "JH", "K", "L", "M",
    "N",  "AA", "P", "K", "R", "S", "T", "AH", "V", "W", "K", "Y", "Z"};

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    fn(line, line_no);
    if (end == text.size()) break;
    pos = end + 1;
  }
}

}  // namespace

std::size_t phoneme_id(std::string_view symbol) {
  for (std::size_t i = 0; i < kArpabet.size(); ++i)
    if (kArpabet[i] == symbol) return i + 2;
  return kUnkPhoneme;
}

std::string_view phoneme_symbol(std::size_t id) {
  if (id == kPadPhoneme) return "<pad>";
  if (id == kUnkPhoneme || id >= kPhonemeInventory) return "<unk>";
  return kArpabet[id - 2];
}

std::size_t letter_phoneme(char letter) {
  const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(letter)));
  if (c < 'a' || c > 'z') return kUnkPhoneme;
  return phoneme_id(kLetterFallback[static_cast<std::size_t>(c - 'a')]);
}

// ---------------------------------------------------------------------------

Lexicon Lexicon::load(const std::filesystem::path& path) { return parse(io::read_text(path), path.string()); }

Lexicon Lexicon::parse(std::string_view text, const std::string& origin) {
  Lexicon lex;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (line.starts_with(";;;")) return;
    const auto fields = split_ws(line);
    if (fields.empty()) return;
    std::string word = lowercase(fields[0]);
    if (word.size() > 3 && word.back() == ')' && word[word.size() - 3] == '(') return;  // alternate
    if (fields.size() < 2) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": entry '" + word + "' has no phonemes");
    }
    std::vector<std::size_t> phonemes;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      std::string symbol;
      for (char c : fields[i])
        if (!std::isdigit(static_cast<unsigned char>(c))) symbol += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      phonemes.push_back(phoneme_id(symbol));
    }
    if (!lex.contains(word)) lex.add(word, std::move(phonemes));
  });
  return lex;
}

void Lexicon::add(const std::string& word, std::vector<std::size_t> phonemes) {
  if (phonemes.empty()) throw ValidationError("lexicon entry '" + word + "' has no phonemes");
  for (auto& p : phonemes)
    if (p >= kPhonemeInventory || p == kPadPhoneme) p = kUnkPhoneme;
  entries_[lowercase(word)] = std::move(phonemes);
}

std::vector<std::size_t> Lexicon::pronounce(const std::string& word) const {
  if (auto it = entries_.find(word); it != entries_.end()) return it->second;
  std::vector<std::size_t> out;
  for (char c : word) {
    if (c == '\'') continue;
    out.push_back(letter_phoneme(c));
  }
  if (out.empty()) out.push_back(kUnkPhoneme);
  return out;
}

std::vector<std::string> normalize_words(std::string_view transcript) {
  std::vector<std::string> words;
  for (auto token : split_ws(transcript)) {
    std::string w;
    for (char c : token) {
      const auto u = static_cast<unsigned char>(c);
      if (std::isalnum(u) || c == '\'') w += static_cast<char>(std::tolower(u));
    }
    const auto first = w.find_first_not_of('\'');
    if (first == std::string::npos) continue;
    w = w.substr(first, w.find_last_not_of('\'') - first + 1);
    words.push_back(std::move(w));
  }
  return words;
}

TokenSeq tokenize_and_g2p(std::string_view transcript, const Lexicon& lexicon, const WordVectors* vectors) {
  TokenSeq seq;
  seq.words = normalize_words(transcript);
  if (seq.words.empty()) throw ValidationError("transcript is empty after stripping punctuation");
  for (const auto& w : seq.words) {
    seq.phonemes.push_back(lexicon.pronounce(w));
    seq.word_ids.push_back(vectors ? vectors->lookup(w) : 0);
  }
  return seq;
}

// ---------------------------------------------------------------------------

WordVectors::WordVectors(std::vector<std::string> words, std::vector<double> matrix, std::size_t dim)
    : words_(std::move(words)), dim_(dim) {
  if (dim == 0) throw ValidationError("word vector dimension must be positive");
  if (matrix.size() != words_.size() * dim) throw DimensionError("word vector matrix size mismatch");
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i);
  std::vector<double> unk(dim, 0.0);
  if (!words_.empty()) {
    for (std::size_t r = 0; r < words_.size(); ++r)
      for (std::size_t c = 0; c < dim; ++c) unk[c] += matrix[r * dim + c];
    for (auto& v : unk) v /= static_cast<double>(words_.size());
  }
  matrix_ = std::move(matrix);
  matrix_.insert(matrix_.end(), unk.begin(), unk.end());
  table_ = Tensor::from({rows(), dim_}, matrix_);
}

WordVectors WordVectors::load(const std::filesystem::path& path, std::size_t dim) {
  return parse(io::read_text(path), dim, path.string());
}

WordVectors WordVectors::parse(std::string_view text, std::size_t dim, const std::string& origin) {
  std::vector<std::string> words;
  std::vector<double> matrix;
  std::unordered_map<std::string, bool> seen;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const auto fields = split_ws(line);
    if (fields.empty()) return;
    if (fields.size() - 1 != dim) {
      throw FormatError(origin + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                        " values, found " + std::to_string(fields.size() - 1));
    }
    std::string word = lowercase(fields[0]);
    std::vector<double> row(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const auto f = fields[i + 1];
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), row[i]);
      if (ec != std::errc() || ptr != f.data() + f.size()) {
        throw FormatError(origin + ":" + std::to_string(line_no) + ": bad number '" + std::string(f) + "'");
      }
    }
    if (seen.emplace(word, true).second) {
      words.push_back(std::move(word));
      matrix.insert(matrix.end(), row.begin(), row.end());
    }
  });
  return WordVectors(std::move(words), std::move(matrix), dim);
}

std::size_t WordVectors::lookup(const std::string& word) const {
  if (auto it = index_.find(lowercase(word)); it != index_.end()) return it->second;
  return unk_id();
}

// ---------------------------------------------------------------------------

PhonemeCnn::PhonemeCnn(ParameterStore& store, const std::string& name, const PhonemeCnnDims& dims, Rng& rng) {
  if (dims.widths.empty() || dims.channels % dims.widths.size() != 0) {
    throw ValidationError("phoneme CNN: " + std::to_string(dims.channels) + " channels not divisible across " +
                          std::to_string(dims.widths.size()) + " kernel widths");
  }
  table_ = store.add_uniform(name + ".table", {kPhonemeInventory, dims.embed}, 1, rng);
  const std::size_t per_width = dims.channels / dims.widths.size();
  for (std::size_t w : dims.widths) {
    kernels_.push_back(store.add_uniform(name + ".conv" + std::to_string(w), {w, dims.embed, per_width},
                                         w * dims.embed, rng));
  }
  output_dim_ = dims.channels;
}

Tensor PhonemeCnn::operator()(std::span<const std::size_t> phonemes) const {
  std::size_t length = 0;
  std::vector<std::uint8_t> mask(phonemes.size());
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    mask[i] = phonemes[i] != kPadPhoneme;
    if (mask[i]) length = i + 1;
  }
  if (length == 0) throw ContractError("phoneme CNN: word has no phonemes");
  const Tensor embedded = mask_rows(embedding(table_, phonemes), mask);
  std::vector<Tensor> pooled;
  pooled.reserve(kernels_.size());
  for (const auto& k : kernels_) pooled.push_back(max_pool_time(relu(conv1d(embedded, k, Padding::Same)), length));
  return concat_cols(pooled);
}

Highway::Highway(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t layers,
                 double gate_bias, Rng& rng) {
  for (std::size_t i = 0; i < layers; ++i) {
    transform_.emplace_back(store, name + ".transform" + std::to_string(i), dim, dim, rng);
    gate_.emplace_back(store, name + ".gate" + std::to_string(i), dim, dim, rng, gate_bias);
  }
}

Tensor Highway::operator()(const Tensor& u) const {
  Tensor z = u;
  const Tensor ones = Tensor::full(u.shape(), 1.0);
  for (std::size_t i = 0; i < transform_.size(); ++i) {
    const Tensor h = relu(transform_[i](z));
    const Tensor t = sigmoid(gate_[i](z));
    z = add(mul(h, t), mul(z, sub(ones, t)));
  }
  return z;
}

Tensor combine(const Tensor& word_vecs, const Tensor& phoneme_vecs, CombineMode mode, const Highway* highway) {
  Tensor u = concat_cols({word_vecs, phoneme_vecs});
  if (mode == CombineMode::Concat) return u;
  if (!highway) throw ContractError("combine: highway mode without a highway network");
  return (*highway)(u);
}

EncoderPrenet::EncoderPrenet(ParameterStore& store, const std::string& name, std::size_t in_dim,
                             std::size_t model_dim, std::size_t layers, std::size_t width, Rng& rng) {
  std::size_t channels_in = in_dim;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string prefix = name + ".conv" + std::to_string(i);
    kernels_.push_back(store.add_uniform(prefix + ".kernel", {width, channels_in, model_dim}, width * channels_in, rng));
    biases_.push_back(store.add_constant(prefix + ".bias", {model_dim}, 0.0));
    norms_.emplace_back(store, prefix + ".norm", model_dim);
    channels_in = model_dim;
  }
  projection_ = Linear(store, name + ".projection", channels_in, model_dim, rng);
}

Tensor EncoderPrenet::operator()(const Tensor& seq, std::span<const std::uint8_t> row_mask) const {
  Tensor x = seq;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    x = mask_rows(x, row_mask);
    x = norms_[i](relu(add_bias(conv1d(x, kernels_[i], Padding::Same), biases_[i])));
  }
  return projection_(x);
}

}  // namespace melformer
