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

#include <cmath>

#include "doctest.h"
#include "melformer/errors.hpp"
#include "melformer/fusion.hpp"
#include "melformer/gradsuite.hpp"
#include "test_util.hpp"

using namespace melformer;
using melformer::test::values;

namespace {

ModelConfig fusion_config() {
  ModelConfig cfg;
  cfg.kind = ModelKind::MultiGranularity;
  return cfg;
}

void zero_parameter(Classifier& m, const std::string& name) {
  for (auto& e : m.parameters().entries())
    if (e.name == name)
      for (double& v : e.value.data()) v = 0.0;
}

}  // namespace

TEST_CASE("utterance embedding files") {
  CHECK(parse_utterance_embeddings("UEMB 8\n").empty());
  const auto three = parse_utterance_embeddings(
      "UEMB 8\n"
      "a 1 2 3 4 5 6 7 8\n"
      "b 0 0 0 0 0 0 0 0.5\n"
      "c -1 -2 -3 -4 -5 -6 -7 -8\n");
  CHECK(three.size() == 3);
  for (const auto& [id, e] : three) CHECK(e.vector.size() == 8);
  CHECK(three.at("b").vector[7] == 0.5);

  try {
    parse_utterance_embeddings("UEMB 2\nx 1 2\nx 3 4\n");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("'x'") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_utterance_embeddings("UEMB 3\nx 1 2\n"), FormatError);
  CHECK_THROWS_AS(parse_utterance_embeddings("x 1 2\n"), FormatError);

  CHECK(missing_embedding_ids(three, {"a", "q", "c", "r"}) == std::vector<std::string>{"q", "r"});
}

TEST_CASE("utterance embedding file round trip") {
  test::TempDir dir("uemb");
  UtteranceEmbeddingMap m;
  m["u1"] = {"u1", {0.1, -2.5, 3.0}, "file"};
  m["u2"] = {"u2", {1e-7, 0.0, 42.0}, "file"};
  write_utterance_embeddings(dir.path() / "e.txt", m);
  const auto back = load_utterance_embeddings(dir.path() / "e.txt");
  REQUIRE(back.size() == 2);
  CHECK(back.at("u1").vector == m["u1"].vector);
  CHECK(back.at("u2").vector == m["u2"].vector);
}

TEST_CASE("fused logits have K entries and need the embedding") {
  const ModelConfig cfg = fusion_config();
  const auto vectors = random_word_vectors(20, cfg.word_dim, 1);
  const MultiGranularityModel model(cfg, vectors, 3);
  Rng rng(4);
  ModelInput in = random_input(cfg, *vectors, 6, 3, 0, rng);
  CHECK(model.logits(in, ForwardContext{}).numel() == 4);
  in.utterance_embedding.clear();
  CHECK_THROWS_AS(model.logits(in, ForwardContext{}), ValidationError);
}

TEST_CASE("a zero embedding with zero projection bias silences the utterance branch") {
  const ModelConfig cfg = fusion_config();
  const auto vectors = random_word_vectors(20, cfg.word_dim, 1);
  MultiGranularityModel model(cfg, vectors, 5);
  zero_parameter(model, "fusion.utterance_projection.bias");
  Rng rng(6);
  ModelInput in = random_input(cfg, *vectors, 5, 2, 0, rng);
  std::fill(in.utterance_embedding.begin(), in.utterance_embedding.end(), 0.0);
  const auto before = values(model.logits(in, ForwardContext{}));
  for (auto& e : model.parameters().entries())
    if (e.name == "fusion.utterance_projection.weight")
      for (double& v : e.value.data()) v = rng.normal();
  CHECK(values(model.logits(in, ForwardContext{})) == before);
}

TEST_CASE("built-in utterance encoder runs without files") {
  ModelConfig cfg = fusion_config();
  cfg.utterance_source = UtteranceSource::Builtin;
  const auto vectors = random_word_vectors(20, cfg.word_dim, 1);
  const MultiGranularityModel model(cfg, vectors, 7);
  Rng rng(8);
  ModelInput in = random_input(cfg, *vectors, 5, 3, 0, rng);
  in.utterance_embedding.clear();
  CHECK(model.utterance_vector(in).shape() == Shape{1, cfg.utterance_dim});
  CHECK(model.logits(in, ForwardContext{}).numel() == 4);
}

TEST_CASE("freeze-fine limits training to the fusion parameters") {
  ModelConfig cfg = fusion_config();
  cfg.freeze_fine = true;
  const auto vectors = random_word_vectors(10, cfg.word_dim, 1);
  const MultiGranularityModel model(cfg, vectors, 1);
  std::size_t frozen = 0;
  for (const auto& e : model.parameters().entries()) {
    const bool fine = e.name.starts_with("fine.");
    CHECK(model.is_trainable(e.name) == !fine);
    frozen += fine;
  }
  CHECK(frozen == model.fine().parameters().entries().size());
}

TEST_CASE("both projections receive gradient") {
  const ModelConfig cfg = fusion_config();
  const auto vectors = random_word_vectors(20, cfg.word_dim, 1);
  MultiGranularityModel model(cfg, vectors, 9);
  Rng rng(10);
  std::vector<ModelInput> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back(random_input(cfg, *vectors, 4 + i, 2 + i % 2, i, rng));
  model.parameters().zero_grad();
  batch_loss(model, batch).backward();
  for (const char* name : {"fusion.fine_projection.weight", "fusion.utterance_projection.weight"}) {
    const auto* p = model.parameters().find(name);
    REQUIRE(p != nullptr);
    double norm = 0.0;
    for (double g : p->value.grad()) norm += g * g;
    INFO(name);
    CHECK(std::sqrt(norm) > 0.0);
  }
}

TEST_CASE("fusion degrades exactly to a projected fine-grained head") {
  for (auto source : {UtteranceSource::File, UtteranceSource::Builtin}) {
    ModelConfig cfg = fusion_config();
    cfg.utterance_source = source;
    const auto vectors = random_word_vectors(20, cfg.word_dim, 2);
    MultiGranularityModel model(cfg, vectors, 12);
    zero_parameter(model, "fusion.utterance_projection.weight");
    zero_parameter(model, "fusion.utterance_projection.bias");
    Rng rng(13);
    for (auto& e : model.parameters().entries())
      if (e.name.starts_with("fusion.head")) for (double& v : e.value.data()) v = rng.normal();
    for (int trial = 0; trial < 5; ++trial) {
      const ModelInput in = random_input(cfg, *vectors, 3 + trial, 1 + trial % 3, 0, rng);
      const auto fused = values(model.logits(in, ForwardContext{}));
      const Tensor cls = model.fine().forward(in, ForwardContext{}).cls;
      const Tensor w_top = slice_rows(model.head().weight(), 0, cfg.fuse_dim);
      const auto reference = values(add_bias(matmul(model.fine_projection()(cls), w_top), model.head().bias()));
      CHECK(fused == reference);
    }
  }
}
