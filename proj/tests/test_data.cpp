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
#include <map>
#include <numbers>

#include "doctest.h"
#include "melformer/binary_io.hpp"
#include "melformer/data.hpp"
#include "melformer/errors.hpp"
#include "melformer/fusion.hpp"
#include "test_util.hpp"

using namespace melformer;
namespace fs = std::filesystem;

namespace {

std::string expect_validation(std::string_view text) {
  try {
    parse_manifest_text(text, "/data", "m.jsonl");
  } catch (const ValidationError& e) {
    return e.what();
  }
  FAIL("expected ValidationError");
  return {};
}

// Goertzel power at one frequency.
double goertzel(const std::vector<double>& s, double hz, double rate) {
  const double w = 2.0 * std::numbers::pi * hz / rate;
  const double coeff = 2.0 * std::cos(w);
  double s1 = 0.0, s2 = 0.0;
  for (double x : s) {
    const double s0 = x + coeff * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  return s1 * s1 + s2 * s2 - coeff * s1 * s2;
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
  return out;
}

}  // namespace

TEST_CASE("manifest parsing") {
  const auto m = parse_manifest_text(
      R"({"id":"a","audio_path":"wav/a.wav","transcript":"hi","label":"excited","session":"Ses01"})"
      "\n\n"
      R"({"id":"b","features_path":"/abs/b.mel","transcript":"yo","label":"ANG","speaker":"s1","utt_embedding_id":"e7"})"
      "\n",
      "/data");
  REQUIRE(m.records.size() == 2);
  CHECK(m.records[0].label == "happy");
  CHECK(m.records[0].label_index == 3);
  CHECK(*m.records[0].audio_path == fs::path("/data/wav/a.wav"));
  CHECK(m.records[0].line == 1);
  CHECK(m.records[1].label == "angry");
  CHECK(*m.records[1].features_path == fs::path("/abs/b.mel"));
  CHECK(m.records[1].line == 3);
  CHECK(m.records[1].utt_embedding_id == "e7");
  CHECK(m.class_totals() == std::vector<std::size_t>{1, 0, 0, 1});
  CHECK(m.ids() == std::vector<std::string>{"a", "b"});
}

TEST_CASE("manifest errors carry the line") {
  CHECK(expect_validation("").find("no records") != std::string::npos);
  CHECK(expect_validation("\n  \n").find("no records") != std::string::npos);
  const std::string a = R"({"id":"a","audio_path":"x.wav","transcript":"t","label":"sad"})";
  CHECK(expect_validation(a + "\n" + a).find("m.jsonl:2") != std::string::npos);
  CHECK(expect_validation(a + "\n" + a).find("duplicate id 'a'") != std::string::npos);
  CHECK(expect_validation(R"({"id":"a","audio_path":"x","features_path":"y","transcript":"t","label":"sad"})")
            .find("both") != std::string::npos);
  CHECK(expect_validation(R"({"id":"a","transcript":"t","label":"sad"})").find("missing field") !=
        std::string::npos);
  CHECK(expect_validation(R"({"id":"a","audio_path":"x","label":"sad"})").find("transcript") != std::string::npos);
  CHECK(expect_validation(R"({"id":"a","audio_path":"x","transcript":"t","label":"bored"})")
            .find("unknown label 'bored'") != std::string::npos);
  CHECK(expect_validation("{not json").find("m.jsonl:1") != std::string::npos);
  CHECK_THROWS_AS(parse_manifest("/nonexistent/m.jsonl"), IoError);
}

TEST_CASE("manifest lines round trip") {
  const auto m = parse_manifest_text(
      R"({"id":"a","audio_path":"/w/a.wav","transcript":"he said \"no\"","label":"neutral","session":"S1"})", "/");
  const auto again = parse_manifest_text(manifest_line(m.records[0]), "/");
  CHECK(again.records[0].transcript == m.records[0].transcript);
  CHECK(again.records[0].session == "S1");
  CHECK(*again.records[0].audio_path == *m.records[0].audio_path);
}

TEST_CASE("synthetic corpus layout") {
  test::TempDir dir("syn");
  SyntheticSpec spec;
  const auto corpus = gen_synthetic(spec, dir.path());
  CHECK(corpus.utterances == 32);
  std::size_t wavs = 0;
  for (const auto& e : fs::directory_iterator(dir.path() / "wav")) wavs += e.path().extension() == ".wav";
  CHECK(wavs == 32);
  const auto m = parse_manifest(corpus.manifest);
  CHECK(m.records.size() == 32);
  CHECK(m.class_totals() == std::vector<std::size_t>{8, 8, 8, 8});
  REQUIRE(corpus.utterance_embeddings);
  const auto emb = load_utterance_embeddings(*corpus.utterance_embeddings);
  CHECK(missing_embedding_ids(emb, m.ids()).empty());

  SyntheticSpec bad;
  bad.classes = 1;
  CHECK_THROWS_AS(gen_synthetic(bad, dir.path() / "bad"), ValidationError);
}

TEST_CASE("synthetic generation is byte identical for a seed") {
  test::TempDir a("syn_a"), b("syn_b"), c("syn_c");
  SyntheticSpec spec;
  spec.per_class = 3;
  gen_synthetic(spec, a.path());
  gen_synthetic(spec, b.path());
  CHECK(snapshot(a.path()) == snapshot(b.path()));
  spec.seed = 8;
  gen_synthetic(spec, c.path());
  CHECK(snapshot(a.path()) != snapshot(c.path()));
}

TEST_CASE("a spectral-peak classifier separates the synthetic audio") {
  test::TempDir dir("peak");
  SyntheticSpec spec;
  spec.utterance_dim = 0;
  const auto corpus = gen_synthetic(spec, dir.path());
  const auto m = parse_manifest(corpus.manifest);
  std::size_t correct = 0;
  for (const auto& r : m.records) {
    const auto pcm = load_wav(*r.audio_path);
    double best = -1.0, best_hz = 0.0;
    for (double hz = 50.0; hz <= 1500.0; hz += 10.0) {
      const double p = goertzel(pcm.samples, hz, pcm.sample_rate);
      if (p > best) {
        best = p;
        best_hz = hz;
      }
    }
    const auto predicted = static_cast<std::size_t>(std::lround(best_hz / 200.0)) - 1;
    correct += predicted == r.label_index;
  }
  CHECK(correct == m.records.size());
}

TEST_CASE("dataset loading from audio and from cached features agree") {
  test::TempDir dir("load");
  SyntheticSpec spec;
  spec.per_class = 2;
  const auto corpus = gen_synthetic(spec, dir.path());
  const auto m = parse_manifest(corpus.manifest);
  const auto report = featurize_manifest(m, dir.path() / "cache");
  CHECK(report.written == 8);
  const auto cached = parse_manifest(report.manifest);
  CHECK(cached.records[0].features_path.has_value());

  const auto lex = Lexicon::load(corpus.lexicon);
  const auto vec = WordVectors::load(corpus.vectors);
  const auto from_wav = load_dataset(m, lex, vec);
  const auto from_cache = load_dataset(cached, lex, vec);
  REQUIRE(from_wav.size() == from_cache.size());
  for (std::size_t i = 0; i < from_wav.size(); ++i) {
    CHECK(from_wav[i].mel.values == from_cache[i].mel.values);
    CHECK(from_wav[i].tokens.word_ids == from_cache[i].tokens.word_ids);
    CHECK(from_wav[i].mel.has_dummy);
  }
}

TEST_CASE("missing utterance embeddings are listed together") {
  test::TempDir dir("missing");
  SyntheticSpec spec;
  spec.per_class = 1;
  spec.utterance_dim = 4;
  const auto corpus = gen_synthetic(spec, dir.path());
  const auto m = parse_manifest(corpus.manifest);
  auto emb = load_utterance_embeddings(*corpus.utterance_embeddings);
  emb.erase(m.records[1].id);
  emb.erase(m.records[3].id);
  DatasetOptions opt{&emb, true};
  try {
    load_dataset(m, Lexicon::load(corpus.lexicon), WordVectors::load(corpus.vectors), opt);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2 utterance embedding") != std::string::npos);
    CHECK(msg.find(m.records[1].id) != std::string::npos);
    CHECK(msg.find(m.records[3].id) != std::string::npos);
  }
}

TEST_CASE("featurize is idempotent") {
  test::TempDir dir("idem");
  SyntheticSpec spec;
  spec.per_class = 2;
  const auto corpus = gen_synthetic(spec, dir.path());
  const auto m = parse_manifest(corpus.manifest);
  const auto first = featurize_manifest(m, dir.path() / "cache");
  CHECK(first.written == 8);
  CHECK(first.unchanged == 0);
  std::map<std::string, fs::file_time_type> times;
  for (const auto& e : fs::directory_iterator(dir.path() / "cache")) times[e.path().string()] = e.last_write_time();
  const auto second = featurize_manifest(m, dir.path() / "cache");
  CHECK(second.written == 0);
  CHECK(second.unchanged == 8);
  for (const auto& e : fs::directory_iterator(dir.path() / "cache"))
    CHECK(times.at(e.path().string()) == e.last_write_time());
}
