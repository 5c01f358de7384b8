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

#include "melformer/fusion.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"

namespace melformer {

UtteranceEmbeddingMap load_utterance_embeddings(const std::filesystem::path& path) {
  return parse_utterance_embeddings(io::read_text(path), path.string());
}

UtteranceEmbeddingMap parse_utterance_embeddings(std::string_view text, const std::string& origin,
                                                 const std::string& provider) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  bool have_header = false;
  UtteranceEmbeddingMap out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::string first;
    if (!(fields >> first)) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (!have_header) {
      if (first != "UEMB" || !(fields >> dim) || dim == 0)
        throw FormatError(where + ": expected header 'UEMB <dimension>'");
      have_header = true;
      continue;
    }
    UtteranceEmbedding emb{first, {}, provider};
    std::string token;
    while (fields >> token) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
      if (ec != std::errc() || ptr != token.data() + token.size() || !std::isfinite(v))
        throw FormatError(where + ": bad value '" + token + "'");
      emb.vector.push_back(v);
    }
    if (emb.vector.size() != dim) {
      throw FormatError(where + ": id '" + first + "' has " + std::to_string(emb.vector.size()) +
                        " values but header declares " + std::to_string(dim));
    }
    if (out.contains(first)) throw ValidationError(where + ": duplicate utterance id '" + first + "'");
    out.emplace(first, std::move(emb));
  }
  if (!have_header) throw FormatError(origin + ": missing 'UEMB <dimension>' header");
  return out;
}

void write_utterance_embeddings(const std::filesystem::path& path, const UtteranceEmbeddingMap& embeddings) {
  std::ostringstream os;
  os << std::setprecision(17);
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.begin()->second.vector.size();
  os << "UEMB " << dim << '\n';
  for (const auto& [id, emb] : embeddings) {
    os << id;
    for (double v : emb.vector) os << ' ' << v;
    os << '\n';
  }
  io::write_text(path, os.str());
}

std::vector<std::string> missing_embedding_ids(const UtteranceEmbeddingMap& embeddings,
                                               const std::vector<std::string>& wanted) {
  std::vector<std::string> missing;
  for (const auto& id : wanted)
    if (!embeddings.contains(id)) missing.push_back(id);
  return missing;
}

// ---------------------------------------------------------------------------

MultiGranularityModel::MultiGranularityModel(const ModelConfig& cfg, std::shared_ptr<const WordVectors> vectors,
                                             std::uint64_t seed)
    : cfg_(cfg), fine_(cfg, vectors, seed) {
  for (const auto& e : fine_.parameters().entries()) store_.add("fine." + e.name, e.value);
  Rng rng(mix_seed(seed, 0xF05E));
  fine_proj_ = Linear(store_, "fusion.fine_projection", cfg_.d_model, cfg_.fuse_dim, rng);
  utt_proj_ = Linear(store_, "fusion.utterance_projection", cfg_.utterance_dim, cfg_.fuse_dim, rng);
  head_ = Linear(store_, "fusion.head", 2 * cfg_.fuse_dim, cfg_.num_classes, rng, 0.0);
  if (cfg_.utterance_source == UtteranceSource::Builtin)
    builtin_encoder_.emplace(store_, "fusion.builtin_encoder", cfg_.word_dim, cfg_.utterance_dim, rng);
}

bool MultiGranularityModel::is_trainable(const std::string& name) const {
  return !(cfg_.freeze_fine && name.starts_with("fine."));
}

Tensor MultiGranularityModel::utterance_vector(const ModelInput& input) const {
  if (builtin_encoder_) {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < input.word_ids.size(); ++i)
      if (input.word_mask[i]) ids.push_back(input.word_ids[i]);
    const Tensor words = embedding(fine_.word_table(), ids);
    const Tensor pooled = scale(matmul(Tensor::full({1, ids.size()}, 1.0), words), 1.0 / static_cast<double>(ids.size()));
    return (*builtin_encoder_)(pooled);
  }
  if (input.utterance_embedding.size() != cfg_.utterance_dim) {
    throw ValidationError(input.id + ": utterance embedding " +
                          (input.utterance_embedding.empty() ? std::string("missing")
                                                             : "has dimension " + std::to_string(input.utterance_embedding.size())) +
                          ", expected " + std::to_string(cfg_.utterance_dim));
  }
  return Tensor::from({1, cfg_.utterance_dim}, input.utterance_embedding);
}

Tensor MultiGranularityModel::fuse_and_classify(const Tensor& cls_fine, const Tensor& utterance) const {
  return head_(concat_cols({fine_proj_(cls_fine), utt_proj_(utterance)}));
}

Tensor MultiGranularityModel::logits(const ModelInput& input, const ForwardContext& ctx) const {
  const ForwardTrace trace = fine_.forward(input, ctx);
  return fuse_and_classify(trace.cls, utterance_vector(input));
}

}  // namespace melformer
