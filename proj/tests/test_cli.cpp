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

#include <sys/wait.h>

#include <cstdio>

#include "doctest.h"
#include "json.hpp"
#include "melformer/binary_io.hpp"
#include "melformer/config.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string output;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(MELFORMER_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small corpus plus the data flags every training command needs.
std::string corpus(const fs::path& dir, int per_class = 4) {
  const auto r = cli("gen-synthetic --out " + q(dir) + " --per-class " + std::to_string(per_class));
  REQUIRE(r.status == 0);
  return " --manifest " + q(dir / "manifest.jsonl") + " --lexicon " + q(dir / "lexicon.txt") + " --vectors " +
         q(dir / "vectors.txt");
}

}  // namespace

TEST_CASE("unknown flag prints usage and exits 2") {
  const auto r = cli("train --no-such-flag");
  CHECK(r.status == 2);
  CHECK(r.output.find("error: usage") != std::string::npos);
  CHECK(cli("").status == 2);
  CHECK(cli("frobnicate").status == 2);
}

TEST_CASE("missing config is a one-line error") {
  const auto r = cli("train --config /nonexistent/missing.json");
  CHECK(r.status == 1);
  CHECK(r.output.find("config not found") != std::string::npos);
  CHECK(r.output.rfind("error: ", 0) == 0);
}

TEST_CASE("gradcheck exits 0") {
  const auto r = cli("gradcheck --quick");
  CHECK(r.status == 0);
  CHECK(r.output.find("PASS") != std::string::npos);
}

TEST_CASE("train echoes the resolved config, eval scores the checkpoint") {
  melformer::test::TempDir dir("cli_train");
  const std::string data = corpus(dir.path() / "syn");
  const auto run = dir.path() / "run";
  const auto r = cli("train" + data + " --fold 0 --max-epochs 0 --layers-fusion 1 --quiet --out " + q(run));
  INFO(r.output);
  REQUIRE(r.status == 0);
  REQUIRE(fs::exists(run / "model.mfck"));

  const auto echoed = nlohmann::json::parse(melformer::io::read_text(run / "config.json"));
  melformer::RunConfig expected;
  expected.model.layers_fusion = 1;
  expected.train.max_epochs = 0;
  for (const char* section : {"model", "train"})
    for (const auto& [key, value] : nlohmann::json(expected)[section].items()) {
      INFO(section << "." << key);
      REQUIRE(echoed[section].contains(key));
      if (key != "seeds") CHECK(echoed[section][key] == value);
    }

  // An untrained model on a balanced set: WA close to chance.
  const auto e = cli("eval" + data + " --checkpoint " + q(run / "model.mfck") + " --out " + q(run));
  INFO(e.output);
  REQUIRE(e.status == 0);
  const auto scored = nlohmann::json::parse(melformer::io::read_text(run / "eval.json"));
  CHECK(std::abs(scored["wa"].get<double>() - 0.25) <= 0.15);

  const auto p = cli("predict" + data + " --checkpoint " + q(run / "model.mfck") + " --audio " +
                           q(dir.path() / "syn" / "wav" / "syn_angry_0000.wav") + " --transcript 'I am so angry'");
  INFO(p.output);
  CHECK(p.status == 0);
  CHECK(p.output.find("angry") != std::string::npos);
}

TEST_CASE("featurize twice performs no writes the second time") {
  melformer::test::TempDir dir("cli_feat");
  corpus(dir.path() / "syn", 1);
  const std::string args = "featurize --manifest " + q(dir.path() / "syn" / "manifest.jsonl") + " --out " +
                           q(dir.path() / "cache");
  const auto first = cli(args);
  REQUIRE(first.status == 0);
  CHECK(first.output.find("written 4 unchanged 0") != std::string::npos);
  const auto second = cli(args);
  CHECK(second.status == 0);
  CHECK(second.output.find("written 0 unchanged 4") != std::string::npos);
}

TEST_CASE("malformed manifest names the line") {
  melformer::test::TempDir dir("cli_bad");
  melformer::io::write_text(dir.path() / "m.jsonl", "{\"id\":\"a\"}\n");
  const auto r = cli("featurize --manifest " + q(dir.path() / "m.jsonl") + " --out " + q(dir.path() / "c"));
  CHECK(r.status == 1);
  CHECK(r.output.find("m.jsonl:1") != std::string::npos);
}
