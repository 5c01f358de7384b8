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
#include <cstdlib>
#include <map>
#include <set>

#include "doctest.h"
#include "melformer/data.hpp"
#include "melformer/errors.hpp"
#include "melformer/gradsuite.hpp"
#include "melformer/harness.hpp"
#include "test_util.hpp"

using namespace melformer;

namespace {

// Independent scalar Adam.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double p, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, t));
    const double vhat = v / (1.0 - std::pow(b2, t));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

std::vector<SplitItem> grouped_items(std::size_t groups, std::size_t per_group, bool speakers_only = false) {
  std::vector<SplitItem> items;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < per_group; ++i) {
      SplitItem it;
      it.id = "g" + std::to_string(g) + "_" + std::to_string(i);
      it.label = i % 4;
      if (speakers_only) it.speaker = "spk" + std::to_string(g);
      else it.session = "Ses0" + std::to_string(g + 1);
      items.push_back(it);
    }
  return items;
}

std::vector<ModelInput> random_set(const ModelConfig& cfg, const WordVectors& vectors, std::size_t n, Rng& rng) {
  std::vector<ModelInput> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto in = random_input(cfg, vectors, 2 + rng.below(4), 1 + rng.below(3), i % cfg.num_classes, rng);
    in.id = "r" + std::to_string(i);
    out.push_back(std::move(in));
  }
  return out;
}

ModelConfig small_config(std::size_t word_dim) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.heads = 2;
  cfg.ffn_dim = 64;
  cfg.word_dim = word_dim;
  cfg.phoneme = {16, 12, {2, 3, 4}};
  cfg.prenet_width = 3;
  cfg.utterance_dim = 8;
  cfg.fuse_dim = 16;
  return cfg;
}

Dataset synthetic_dataset(const std::filesystem::path& dir, std::size_t per_class, std::size_t word_dim) {
  SyntheticSpec spec;
  spec.per_class = per_class;
  spec.word_dim = word_dim;
  spec.utterance_dim = 0;
  const auto corpus = gen_synthetic(spec, dir);
  const auto manifest = parse_manifest(corpus.manifest);
  const auto lexicon = Lexicon::load(corpus.lexicon);
  auto vectors = std::make_shared<const WordVectors>(WordVectors::load(corpus.vectors, word_dim));
  return Dataset{load_dataset(manifest, lexicon, *vectors), vectors};
}

double wa_oracle(const std::vector<std::vector<std::size_t>>& c) {
  double hit = 0, total = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j) {
      total += c[i][j];
      if (i == j) hit += c[i][j];
    }
  return hit / total;
}

double ua_oracle(const std::vector<std::vector<std::size_t>>& c) {
  double sum = 0;
  int classes = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    double row = 0;
    for (auto v : c[i]) row += v;
    if (row == 0) continue;
    sum += c[i][i] / row;
    ++classes;
  }
  return sum / classes;
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradient") {
  ParameterStore store;
  Tensor p = store.add("p", Tensor::from({3}, {1, -2, 3}, true));
  p.zero_grad();
  AdamState st;
  adam_step(store, st, AdamOptions{1e-3});
  CHECK(test::values(p) == std::vector<double>{1, -2, 3});
}

TEST_CASE("adam first step moves each coordinate by lr") {
  ParameterStore store;
  Tensor p = store.add("p", Tensor::from({4}, {0, 0, 0, 0}, true));
  p.zero_grad();
  const double g[] = {3.0, -0.01, 250.0, -7.0};
  for (int i = 0; i < 4; ++i) p.grad()[i] = g[i];
  AdamState st;
  adam_step(store, st, AdamOptions{1e-3});
  for (int i = 0; i < 4; ++i) CHECK(p.at(i) == doctest::Approx(-std::copysign(1e-3, g[i])).epsilon(1e-6));
}

TEST_CASE("adam two steps with unit gradient") {
  ParameterStore store;
  Tensor p = store.add("p", Tensor::from({1}, {0.5}, true));
  AdamState st;
  ScalarAdam ref;
  double want = 0.5;
  for (int t = 0; t < 2; ++t) {
    p.zero_grad();
    p.grad()[0] = 1.0;
    adam_step(store, st, AdamOptions{0.01});
    want = ref.step(want, 1.0, 0.01);
  }
  CHECK(p.at(0) == doctest::Approx(want).epsilon(1e-15));
  CHECK(st.step == 2);
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParameterStore store;
  Tensor p = store.add("layer.weight", Tensor::from({2}, {0, 0}, true));
  p.zero_grad();
  p.grad()[1] = std::nan("");
  AdamState st;
  try {
    adam_step(store, st, AdamOptions{});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
  }
  CHECK(p.at(0) == 0.0);
}

TEST_CASE("adam and clipping honour the trainable filter") {
  ParameterStore store;
  Tensor a = store.add("a", Tensor::from({1}, {1.0}, true));
  Tensor b = store.add("b", Tensor::from({1}, {1.0}, true));
  a.zero_grad();
  b.zero_grad();
  a.grad()[0] = 3.0;
  b.grad()[0] = 4.0;
  const auto only_a = [](const std::string& n) { return n == "a"; };
  CHECK(clip_grad_norm(store, 1.0, only_a) == doctest::Approx(3.0));
  CHECK(a.grad()[0] == doctest::Approx(1.0));
  CHECK(b.grad()[0] == 4.0);
  AdamState st;
  adam_step(store, st, AdamOptions{0.1}, only_a);
  CHECK(a.at(0) != 1.0);
  CHECK(b.at(0) == 1.0);
}

TEST_CASE("gradient clipping") {
  ParameterStore store;
  Tensor p = store.add("p", Tensor::from({2}, {0, 0}, true));
  p.zero_grad();
  p.grad()[0] = 6.0;
  p.grad()[1] = 8.0;
  CHECK(clip_grad_norm(store, 5.0) == doctest::Approx(10.0));
  CHECK(p.grad()[0] == doctest::Approx(3.0));
  CHECK(p.grad()[1] == doctest::Approx(4.0));
  CHECK(clip_grad_norm(store, 5.0) == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("five equal groups split 3/1/1 with rotation") {
  const auto items = grouped_items(5, 8);
  const auto split = kfold_split(items, 0);
  CHECK(split.grouping == GroupingKind::Session);
  REQUIRE(split.folds.size() == 5);
  std::map<std::string, int> tested;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& f = split.folds[i];
    CHECK(f.fold == i);
    CHECK(f.train_ids.size() == 24);
    CHECK(f.dev_ids.size() == 8);
    CHECK(f.test_ids.size() == 8);
    CHECK(f.train_groups.size() == 3);
    CHECK(f.dev_group == split.buckets[(i + 3) % 5][0]);
    CHECK(f.test_group == split.buckets[(i + 4) % 5][0]);
    std::set<std::string> all(f.train_ids.begin(), f.train_ids.end());
    all.insert(f.dev_ids.begin(), f.dev_ids.end());
    all.insert(f.test_ids.begin(), f.test_ids.end());
    CHECK(all.size() == items.size());
    for (const auto& id : f.test_ids) ++tested[id];
  }
  CHECK(tested.size() == items.size());
  for (const auto& [id, n] : tested) CHECK(n == 1);
}

TEST_CASE("grouping fallbacks") {
  CHECK(kfold_split(grouped_items(6, 3, true), 0).grouping == GroupingKind::Speaker);
  try {
    kfold_split(grouped_items(4, 5), 0);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("--random-groups") != std::string::npos);
  }

  auto items = grouped_items(2, 20);
  const auto split = kfold_split(items, 3, true);
  CHECK(split.grouping == GroupingKind::Random);
  // Stratified: every bucket gets 2 of each class.
  for (const auto& f : split.folds) {
    std::map<std::size_t, int> per_class;
    for (const auto& id : f.test_ids)
      for (const auto& it : items)
        if (it.id == id) ++per_class[it.label];
    for (const auto& [label, n] : per_class) CHECK(n == 2);
  }
}

TEST_CASE("ten sessions are chunked into five buckets") {
  const auto split = kfold_split(grouped_items(10, 2), 0);
  for (const auto& b : split.buckets) CHECK(b.size() == 2);
  CHECK(split.folds[0].test_ids.size() == 4);
}

TEST_CASE("metrics examples") {
  const auto all = metrics_from_confusion({{3, 0}, {0, 2}});
  CHECK(all.wa == 1.0);
  CHECK(all.ua == 1.0);

  const auto m = metrics_from_confusion({{2, 1}, {0, 1}});
  CHECK(m.wa == doctest::Approx(0.75));
  CHECK(m.ua == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0));
  CHECK(m.ua == doctest::Approx(0.8333).epsilon(1e-4));

  const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<std::size_t> pred(8, 2);
  const auto one = metrics_from_predictions(labels, pred, 4);
  CHECK(one.wa == 0.25);
  CHECK(one.ua == 0.25);

  const auto partial = metrics_from_confusion({{1, 0, 0}, {0, 0, 0}, {1, 0, 1}});
  CHECK(std::isnan(partial.recall[1]));
  CHECK(partial.ua == doctest::Approx(0.75));
  CHECK_THROWS_AS(metrics_from_confusion({{0, 0}, {0, 0}}), ValidationError);
}

TEST_CASE("mean and std formatting") {
  const std::vector<double> same{0.7, 0.7, 0.7};
  CHECK(format_mean_std(mean_std(same)) == "0.700 ± 0.000");
  const std::vector<double> two{0.7, 0.8};
  const auto s = mean_std(two);
  CHECK(s.mean == doctest::Approx(0.75));
  CHECK(s.stddev == doctest::Approx(0.05));
  CHECK(format_mean_std(s) == "0.750 ± 0.050");
}

TEST_CASE("worker count honours the environment cap") {
  ::setenv("MELFORMER_NUM_WORKERS", "2", 1);
  CHECK(resolve_workers(8) == 2);
  CHECK(resolve_workers(1) == 1);
  ::setenv("MELFORMER_NUM_WORKERS", "zero", 1);
  CHECK_THROWS_AS(resolve_workers(4), ValidationError);
  ::unsetenv("MELFORMER_NUM_WORKERS");
  CHECK(resolve_workers(3) == 3);
  CHECK(resolve_workers(0) >= 1);
}

TEST_CASE("patience zero stops one epoch after the first best") {
  const ModelConfig cfg = tiny_model_config();
  const auto vectors = random_word_vectors(10, cfg.word_dim, 1);
  Rng rng(5);
  const auto train = random_set(cfg, *vectors, 8, rng);
  const auto dev = random_set(cfg, *vectors, 8, rng);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.max_epochs = 20;
  tc.patience = 0;
  auto model = make_classifier(cfg, vectors, 1);
  const auto out = train_model(*model, train, dev, tc, 7);
  REQUIRE(out.best_epoch >= 1);
  CHECK(out.history.size() == out.best_epoch + 1);
  CHECK(out.steps == out.history.size() * 2);
}

TEST_CASE("training is reproducible for a fixed seed") {
  const ModelConfig cfg = tiny_model_config();
  const auto vectors = random_word_vectors(10, cfg.word_dim, 1);
  Rng rng(6);
  const auto train = random_set(cfg, *vectors, 8, rng);
  const auto dev = random_set(cfg, *vectors, 6, rng);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.max_epochs = 4;
  std::vector<std::vector<double>> runs;
  for (int r = 0; r < 2; ++r) {
    auto model = make_classifier(cfg, vectors, 9);
    const auto out = train_model(*model, train, dev, tc, 9);
    std::vector<double> trace;
    for (const auto& e : out.history) {
      trace.push_back(e.train_loss);
      trace.push_back(e.dev_wa);
    }
    runs.push_back(trace);
  }
  CHECK(runs[0] == runs[1]);
}

TEST_CASE("divergence aborts with the checkpoint path") {
  test::TempDir dir("diverge");
  const ModelConfig cfg = tiny_model_config();
  const auto vectors = random_word_vectors(10, cfg.word_dim, 1);
  Rng rng(7);
  const auto train = random_set(cfg, *vectors, 8, rng);
  TrainConfig tc;
  tc.lr = 1e300;
  tc.max_epochs = 3;
  auto model = make_classifier(cfg, vectors, 1);
  TrainOptions opt;
  opt.checkpoint_path = dir.path() / "best.mfck";
  try {
    train_model(*model, train, train, tc, 1, opt);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("diverged") != std::string::npos);
    CHECK(msg.find("last good checkpoint") != std::string::npos);
  }
}

TEST_CASE("a separable synthetic set reaches dev WA 0.9") {
  test::TempDir dir("separable");
  const Dataset data = synthetic_dataset(dir.path(), 20, 16);
  RunConfig cfg;
  cfg.model = small_config(16);
  cfg.train.lr = 1e-3;
  cfg.train.max_epochs = 30;
  cfg.train.patience = 30;
  const auto split = kfold_split(data.split_items(), 0);
  const auto result = train_fold(split.folds[0], data, cfg, 1);
  CHECK(result.training.best_dev_wa >= 0.9);
}

TEST_CASE("protocol results do not depend on the worker count") {
  test::TempDir dir("workers");
  const Dataset data = synthetic_dataset(dir.path(), 5, 16);
  RunConfig cfg;
  cfg.model = small_config(16);
  cfg.train.lr = 1e-3;
  cfg.train.max_epochs = 2;
  cfg.train.seeds = {1, 2};
  std::vector<ExperimentResult> results;
  for (std::size_t w : {1u, 3u}) {
    cfg.train.workers = w;
    results.push_back(repeat_and_average(cfg, data));
  }
  const auto& r = results[0];
  REQUIRE(r.folds.size() == 2);
  REQUIRE(r.folds[0].size() == 5);
  CHECK(r.seed_wa.size() == 2);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(r.folds[s][f].fold == f);
      CHECK(r.folds[s][f].test.confusion == results[1].folds[s][f].test.confusion);
      CHECK(r.folds[s][f].training.history.size() == results[1].folds[s][f].training.history.size());
    }
  CHECK(table_row("x", r) == table_row("x", results[1]));
  const auto j = results_json(r, cfg, run_id(cfg, {"a"}), kEmotionLabels);
  CHECK(j["folds"].size() == 10);
  CHECK(j["summary"]["wa"].get<std::string>() == format_mean_std(r.wa));
}

TEST_CASE("table formatting") {
  ExperimentResult r;
  r.seed_wa = {0.7, 0.8};
  r.seed_ua = {0.72, 0.72};
  r.wa = mean_std(r.seed_wa);
  r.ua = mean_std(r.seed_ua);
  const auto row = table_row("Multilevel (1|1|2, highway)", r);
  CHECK(row.find("0.750 ± 0.050") != std::string::npos);
  CHECK(row.find("0.720 ± 0.000") != std::string::npos);
  CHECK(row == table_row("Multilevel (1|1|2, highway)", r));
  CHECK(model_label(ModelConfig{}) == "Multilevel (1|1|2, highway)");
}

TEST_SUITE("invariants") {
  TEST_CASE("WA and UA agree with the confusion-matrix oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k = 2 + rng.below(5);
      std::vector<std::vector<std::size_t>> c(k, std::vector<std::size_t>(k));
      std::size_t total = 0;
      for (auto& row : c)
        for (auto& v : row) total += v = rng.below(10);
      if (total == 0) c[0][0] = total = 1;
      const auto m = metrics_from_confusion(c);
      CHECK(m.wa == doctest::Approx(wa_oracle(c)).epsilon(1e-14));
      CHECK(m.ua == doctest::Approx(ua_oracle(c)).epsilon(1e-14));
      CHECK(m.count == total);
      for (std::size_t i = 0; i < k; ++i) {
        std::size_t row = 0;
        for (auto v : c[i]) row += v;
        CHECK(m.support[i] == row);
      }
    }
  }

  TEST_CASE("duplicating one class leaves UA unchanged") {
    Rng rng(32);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::size_t> labels, pred;
      for (int i = 0; i < 40; ++i) {
        labels.push_back(i % 4);
        pred.push_back(rng.uniform() < 0.6 ? i % 4 : rng.below(4));
      }
      const auto base = metrics_from_predictions(labels, pred, 4);
      const std::size_t cls = rng.below(4);
      auto l2 = labels, p2 = pred;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == cls) {
          l2.push_back(labels[i]);
          p2.push_back(pred[i]);
        }
      const auto dup = metrics_from_predictions(l2, p2, 4);
      CHECK(dup.ua == doctest::Approx(base.ua).epsilon(1e-14));
      const double r = base.recall[cls];
      CHECK(std::abs(dup.wa - r) <= std::abs(base.wa - r) + 1e-12);
      std::size_t sum = 0;
      for (const auto& row : dup.confusion)
        for (auto v : row) sum += v;
      CHECK(sum == l2.size());
    }
  }

  TEST_CASE("adam matches a scalar reference over 100 steps") {
    ParameterStore store;
    Rng rng(33);
    Tensor p = store.add("p", test::random_tensor({6}, rng, 1.0, true));
    std::vector<ScalarAdam> ref(6);
    auto want = test::values(p);
    AdamState st;
    const AdamOptions opt{1e-3, 0.9, 0.999, 1e-8};
    for (int t = 0; t < 100; ++t) {
      p.zero_grad();
      for (std::size_t i = 0; i < 6; ++i) {
        const double g = rng.normal();
        p.grad()[i] = g;
        want[i] = ref[i].step(want[i], g, opt.lr);
      }
      adam_step(store, st, opt);
    }
    CHECK(test::max_abs_diff(test::values(p), want) < 1e-12);
  }

  TEST_CASE("early stopping keeps the best recorded dev WA") {
    const ModelConfig cfg = tiny_model_config();
    const auto vectors = random_word_vectors(10, cfg.word_dim, 2);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(40 + seed);
      const auto train = random_set(cfg, *vectors, 8, rng);
      const auto dev = random_set(cfg, *vectors, 8, rng);
      TrainConfig tc;
      tc.lr = 1e-2;
      tc.max_epochs = 6;
      tc.patience = 2;
      auto model = make_classifier(cfg, vectors, seed);
      const auto out = train_model(*model, train, dev, tc, seed);
      for (const auto& e : out.history) CHECK(out.best_dev_wa >= e.dev_wa);
      CHECK(evaluate(*model, dev).wa == out.best_dev_wa);
    }
  }
}
