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

#include "melformer/gradsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include "melformer/data.hpp"
#include "melformer/fusion.hpp"

namespace melformer {

bool GradSuiteReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradSuiteReport::max_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.ffn_dim = 12;
  c.mel_dim = 6;
  c.word_dim = 5;
  c.phoneme = {4, 6, {2, 3, 4}};
  c.prenet_width = 3;
  c.utterance_dim = 5;
  c.fuse_dim = 4;
  c.dropout = 0.0;
  return c;
}

std::shared_ptr<const WordVectors> random_word_vectors(std::size_t words, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> names;
  std::vector<double> matrix;
  for (std::size_t i = 0; i < words; ++i) {
    names.push_back("w" + std::to_string(i));
    for (std::size_t d = 0; d < dim; ++d) matrix.push_back(rng.normal() * 0.5);
  }
  return std::make_shared<const WordVectors>(std::move(names), std::move(matrix), dim);
}

ModelInput random_input(const ModelConfig& cfg, const WordVectors& vectors, std::size_t mel_frames,
                        std::size_t words, std::size_t label, Rng& rng) {
  ModelInput in;
  in.id = "random";
  in.mel_rows = mel_frames + 1;
  in.mel_cols = cfg.mel_dim;
  in.mel.assign(in.mel_rows * in.mel_cols, 0.0);
  for (std::size_t i = in.mel_cols; i < in.mel.size(); ++i) in.mel[i] = rng.normal();
  in.mel_mask.assign(in.mel_rows, 1);
  for (std::size_t w = 0; w < words; ++w) {
    in.word_ids.push_back(rng.below(vectors.rows()));
    std::vector<std::size_t> ph(1 + rng.below(4));
    for (auto& p : ph) p = 2 + rng.below(kPhonemeInventory - 2);
    in.phonemes.push_back(std::move(ph));
  }
  in.word_mask.assign(words, 1);
  in.utterance_embedding.resize(cfg.utterance_dim);
  for (auto& v : in.utterance_embedding) v = rng.normal();
  in.label = label;
  return in;
}

Tensor batch_loss(const Classifier& model, std::vector<ModelInput> batch) {
  pad_batch(batch);
  std::vector<Tensor> rows;
  std::vector<std::size_t> labels;
  for (const auto& in : batch) {
    rows.push_back(model.logits(in, ForwardContext{}));
    labels.push_back(in.label);
  }
  return cross_entropy(concat_rows(rows), labels);
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Keeps entries clear of the ReLU kink.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (double& x : t.data()) x = x < 0 ? x - 0.05 : x + 0.05;
  return t;
}

// Random linear functional of y, so every output coordinate matters.
Tensor project(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

std::vector<std::uint8_t> random_mask(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& b : m) b = rng.uniform() < 0.7;
  m[rng.below(n)] = 1;
  return m;
}

struct Case {
  std::vector<Tensor> inputs;
  std::function<Tensor()> f;
};

using CaseBuilder = std::function<Case(Rng&)>;

std::vector<std::pair<std::string, CaseBuilder>> op_cases() {
  std::vector<std::pair<std::string, CaseBuilder>> cases;
  auto unary = [&cases](const std::string& name, std::function<Tensor(const Tensor&)> op, bool kinked = false) {
    cases.emplace_back(name, [op, kinked](Rng& rng) {
      const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
      Tensor x = kinked ? away_from_zero(s, rng) : random_tensor(s, rng, -2.0, 2.0);
      Tensor w = random_tensor(s, rng);
      return Case{{x}, [x, w, op] { return project(op(x), w); }};
    });
  };
  auto binary = [&cases](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    cases.emplace_back(name, [op](Rng& rng) {
      const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
      Tensor a = random_tensor(s, rng), b = random_tensor(s, rng), w = random_tensor(s, rng);
      return Case{{a, b}, [a, b, w, op] { return project(op(a, b), w); }};
    });
  };

  cases.emplace_back("matmul", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), w = random_tensor({m, n}, rng);
    return Case{{a, b}, [a, b, w] { return project(matmul(a, b), w); }};
  });
  cases.emplace_back("transpose", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Tensor a = random_tensor({m, n}, rng), w = random_tensor({n, m}, rng);
    return Case{{a}, [a, w] { return project(transpose(a), w); }};
  });
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  cases.emplace_back("add_bias", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
    Tensor x = random_tensor({m, n}, rng), b = random_tensor({n}, rng), w = random_tensor({m, n}, rng);
    return Case{{x, b}, [x, b, w] { return project(add_bias(x, b), w); }};
  });
  unary("relu", [](const Tensor& x) { return relu(x); }, true);
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  unary("tanh", [](const Tensor& x) { return tanh(x); });
  cases.emplace_back("mul_const", [](Rng& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
    Tensor x = random_tensor(s, rng), c = random_tensor(s, rng), w = random_tensor(s, rng);
    std::vector<double> factors(c.data().begin(), c.data().end());
    return Case{{x}, [x, w, factors] { return project(mul_const(x, factors), w); }};
  });
  cases.emplace_back("mask_rows", [](Rng& rng) {
    const Shape s{dim(rng, 1, 5), dim(rng, 1, 4)};
    Tensor x = random_tensor(s, rng), w = random_tensor(s, rng);
    const auto mask = random_mask(s[0], rng);
    return Case{{x}, [x, w, mask] { return project(mask_rows(x, mask), w); }};
  });
  unary("softmax", [](const Tensor& x) { return softmax(x); });
  cases.emplace_back("masked_softmax", [](Rng& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 2, 6)};
    Tensor x = random_tensor(s, rng, -2.0, 2.0), w = random_tensor(s, rng);
    const auto mask = random_mask(s[1], rng);
    return Case{{x}, [x, w, mask] { return project(masked_softmax(x, mask), w); }};
  });
  cases.emplace_back("layer_norm", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), n = dim(rng, 2, 6);
    Tensor x = random_tensor({m, n}, rng, -2.0, 2.0), g = random_tensor({n}, rng, 0.5, 1.5),
           b = random_tensor({n}, rng), w = random_tensor({m, n}, rng);
    return Case{{x, g, b}, [x, g, b, w] { return project(layer_norm(x, g, b), w); }};
  });
  for (auto padding : {Padding::Same, Padding::Valid}) {
    cases.emplace_back(padding == Padding::Same ? "conv1d_same" : "conv1d_valid", [padding](Rng& rng) {
      const std::size_t width = dim(rng, 1, 4), t = dim(rng, width, 7), cin = dim(rng, 1, 3), cout = dim(rng, 1, 3);
      Tensor x = random_tensor({t, cin}, rng), k = random_tensor({width, cin, cout}, rng);
      const std::size_t out_t = padding == Padding::Same ? t : t - width + 1;
      Tensor w = random_tensor({out_t, cout}, rng);
      return Case{{x, k}, [x, k, w, padding] { return project(conv1d(x, k, padding), w); }};
    });
  }
  cases.emplace_back("max_pool_time", [](Rng& rng) {
    const std::size_t t = dim(rng, 1, 6), c = dim(rng, 1, 4);
    const std::size_t length = 1 + rng.below(t);
    Tensor x = random_tensor({t, c}, rng), w = random_tensor({c}, rng);
    return Case{{x}, [x, w, length] { return project(max_pool_time(x, length), w); }};
  });
  cases.emplace_back("embedding", [](Rng& rng) {
    const std::size_t v = dim(rng, 2, 6), d = dim(rng, 1, 4), n = dim(rng, 1, 6);
    std::vector<std::size_t> ids(n);
    for (auto& i : ids) i = rng.below(v);
    Tensor table = random_tensor({v, d}, rng), w = random_tensor({n, d}, rng);
    return Case{{table}, [table, w, ids] { return project(embedding(table, ids), w); }};
  });
  cases.emplace_back("concat_cols", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), a = dim(rng, 1, 3), b = dim(rng, 1, 3);
    Tensor x = random_tensor({m, a}, rng), y = random_tensor({m, b}, rng), w = random_tensor({m, a + b}, rng);
    return Case{{x, y}, [x, y, w] { return project(concat_cols({x, y}), w); }};
  });
  cases.emplace_back("concat_rows", [](Rng& rng) {
    const std::size_t n = dim(rng, 1, 4), a = dim(rng, 1, 3), b = dim(rng, 1, 3);
    Tensor x = random_tensor({a, n}, rng), y = random_tensor({b, n}, rng), w = random_tensor({a + b, n}, rng);
    return Case{{x, y}, [x, y, w] { return project(concat_rows({x, y}), w); }};
  });
  cases.emplace_back("slice_cols", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), n = dim(rng, 2, 6), start = rng.below(n), count = 1 + rng.below(n - start);
    Tensor x = random_tensor({m, n}, rng), w = random_tensor({m, count}, rng);
    return Case{{x}, [x, w, start, count] { return project(slice_cols(x, start, count), w); }};
  });
  cases.emplace_back("slice_rows", [](Rng& rng) {
    const std::size_t m = dim(rng, 2, 6), n = dim(rng, 1, 4), start = rng.below(m), count = 1 + rng.below(m - start);
    Tensor x = random_tensor({m, n}, rng), w = random_tensor({count, n}, rng);
    return Case{{x}, [x, w, start, count] { return project(slice_rows(x, start, count), w); }};
  });
  cases.emplace_back("reshape", [](Rng& rng) {
    const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Tensor x = random_tensor({m, n}, rng), w = random_tensor({n * m}, rng);
    return Case{{x}, [x, w, n, m] { return project(reshape(x, {n * m}), w); }};
  });
  cases.emplace_back("sum", [](Rng& rng) {
    Tensor x = random_tensor({dim(rng, 1, 4), dim(rng, 1, 4)}, rng);
    return Case{{x}, [x] { return sum(mul(x, x)); }};
  });
  cases.emplace_back("cross_entropy", [](Rng& rng) {
    const std::size_t n = dim(rng, 1, 4), k = dim(rng, 2, 5);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(k);
    Tensor x = random_tensor({n, k}, rng, -2.0, 2.0);
    return Case{{x}, [x, labels] { return cross_entropy(x, labels); }};
  });
  cases.emplace_back("softmax_cross_entropy", [](Rng& rng) {
    const std::size_t n = dim(rng, 1, 3), d = dim(rng, 1, 4), k = dim(rng, 2, 4);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(k);
    Tensor x = random_tensor({n, d}, rng), w = random_tensor({d, k}, rng);
    return Case{{x, w}, [x, w, labels] { return cross_entropy(matmul(x, w), labels); }};
  });
  cases.emplace_back("dropout", [](Rng& rng) {
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
    Tensor x = random_tensor(s, rng), w = random_tensor(s, rng);
    const auto keep = rng.keep_mask(x.numel(), 0.3);
    return Case{{x}, [x, w, keep] { return project(dropout(x, keep, 0.3), w); }};
  });
  cases.emplace_back("fan_out", [](Rng& rng) {
    const std::size_t n = dim(rng, 1, 4);
    Tensor x = random_tensor({n, n}, rng), w = random_tensor({n, n}, rng);
    return Case{{x}, [x, w] {
                  const Tensor h = tanh(x);
                  return project(add(matmul(h, transpose(h)), mul(h, x)), w);
                }};
  });
  return cases;
}


// Layer-level cases: every parameter coordinate plus the layer inputs.
std::vector<std::pair<std::string, CaseBuilder>> module_cases() {
  std::vector<std::pair<std::string, CaseBuilder>> cases;
  auto with_store = [](std::shared_ptr<ParameterStore> store, std::vector<Tensor> extra) {
    for (const auto& p : store->entries()) extra.push_back(p.value);
    return extra;
  };
  cases.emplace_back("phoneme_cnn", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto cnn = std::make_shared<PhonemeCnn>(*store, "cnn", PhonemeCnnDims{4, 6, {2, 3, 4}}, rng);
    std::vector<std::vector<std::size_t>> words(2);
    for (auto& w : words) {
      w.resize(1 + rng.below(5));
      for (auto& p : w) p = 2 + rng.below(kPhonemeInventory - 2);
    }
    words[1].push_back(kPadPhoneme);
    Tensor w = random_tensor({2, 6}, rng);
    return Case{with_store(store, {}), [store, cnn, words, w] {
                  return project(concat_rows({(*cnn)(words[0]), (*cnn)(words[1])}), w);
                }};
  });
  cases.emplace_back("highway", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto hw = std::make_shared<Highway>(*store, "hw", 7, 2, -1.0, rng);
    Tensor u = random_tensor({3, 7}, rng), w = random_tensor({3, 7}, rng);
    return Case{with_store(store, {u}), [store, hw, u, w] { return project((*hw)(u), w); }};
  });
  cases.emplace_back("encoder_prenet", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto net = std::make_shared<EncoderPrenet>(*store, "pre", 7, 8, 3, 5, rng);
    const std::size_t t = dim(rng, 2, 6);
    std::vector<std::uint8_t> mask(t, 1);
    mask.back() = 0;
    Tensor x = random_tensor({t, 7}, rng), w = random_tensor({t, 8}, rng);
    return Case{with_store(store, {x}), [store, net, x, w, mask] { return project((*net)(x, mask), w); }};
  });
  cases.emplace_back("attention", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto attn = std::make_shared<MultiHeadAttention>(*store, "attn", 8, 2, rng);
    const std::size_t tq = dim(rng, 1, 4), tk = dim(rng, 2, 5);
    const auto mask = random_mask(tk, rng);
    Tensor q = random_tensor({tq, 8}, rng), m = random_tensor({tk, 8}, rng), w = random_tensor({tq, 8}, rng);
    return Case{with_store(store, {q, m}),
                [store, attn, q, m, w, mask] { return project((*attn)(q, m, mask, ForwardContext{}), w); }};
  });
  cases.emplace_back("encoder_block", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto block = std::make_shared<EncoderBlock>(*store, "enc", 8, 2, 12, rng);
    const std::size_t t = dim(rng, 2, 5);
    const auto mask = random_mask(t, rng);
    Tensor x = random_tensor({t, 8}, rng), w = random_tensor({t, 8}, rng);
    return Case{with_store(store, {x}), [store, block, x, w, mask] { return project((*block)(x, mask, ForwardContext{}), w); }};
  });
  cases.emplace_back("cross_block", [with_store](Rng& rng) {
    auto store = std::make_shared<ParameterStore>();
    auto block = std::make_shared<CrossBlock>(*store, "cross", 8, 2, 12, rng);
    const std::size_t tq = dim(rng, 1, 4), tk = dim(rng, 1, 4);
    const auto qmask = random_mask(tq, rng), kmask = random_mask(tk, rng);
    Tensor x = random_tensor({tq, 8}, rng), m = random_tensor({tk, 8}, rng), w = random_tensor({tq, 8}, rng);
    return Case{with_store(store, {x, m}), [store, block, x, m, w, qmask, kmask] {
                  return project((*block)(x, qmask, m, kmask, ForwardContext{}), w);
                }};
  });
  cases.emplace_back("fusion_head", [](Rng& rng) {
    ModelConfig cfg = tiny_model_config();
    cfg.kind = ModelKind::MultiGranularity;
    auto model = std::make_shared<MultiGranularityModel>(cfg, random_word_vectors(3, cfg.word_dim, rng.next()), rng.next());
    std::vector<Tensor> inputs{random_tensor({1, cfg.d_model}, rng), random_tensor({1, cfg.utterance_dim}, rng)};
    for (const auto& p : model->parameters().entries())
      if (p.name.starts_with("fusion.")) inputs.push_back(p.value);
    const std::vector<std::size_t> label{rng.below(cfg.num_classes)};
    const Tensor cls = inputs[0], utt = inputs[1];
    return Case{inputs, [model, cls, utt, label] { return cross_entropy(model->fuse_and_classify(cls, utt), label); }};
  });
  return cases;
}

std::string describe(const GradcheckResult& r, const std::vector<std::string>& names) {
  char buf[160];
  const std::string input = r.worst_input < names.size() ? names[r.worst_input] : std::to_string(r.worst_input);
  std::snprintf(buf, sizeof(buf), "[%zu] analytic=%.6e numeric=%.6e", r.worst_coord, r.analytic, r.numeric);
  return input + buf;
}

GradSuiteEntry check_model(const std::string& name, Classifier& model, std::vector<ModelInput> batch,
                           const GradcheckOptions& gopt, double tolerance) {
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& p : model.parameters().entries()) {
    if (!model.is_trainable(p.name)) continue;
    inputs.push_back(p.value);
    names.push_back(p.name);
  }
  const auto r = gradcheck([&] { return batch_loss(model, batch); }, inputs, gopt);
  return {name, r.max_rel_error, r.coords_checked, describe(r, names), r.max_rel_error < tolerance};
}

}  // namespace

GradSuiteReport run_gradient_suite(const GradSuiteOptions& options,
                                   const std::function<void(const GradSuiteEntry&)>& on_entry) {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport report;
  auto record = [&](GradSuiteEntry e) {
    if (on_entry) on_entry(e);
    report.entries.push_back(std::move(e));
  };

  auto run_cases = [&](const std::string& prefix, const std::vector<std::pair<std::string, CaseBuilder>>& cases,
                       std::size_t seeds) {
   for (const auto& [name, build] : cases) {
    GradSuiteEntry entry{prefix + name, 0.0, 0, "", true};
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(mix_seed(options.seed, mix_seed(s, fnv1a({reinterpret_cast<const std::uint8_t*>(name.data()), name.size()}))));
      Case c = build(rng);
      GradcheckOptions gopt;
      gopt.eps = options.eps;
      const auto r = gradcheck(c.f, c.inputs, gopt);
      entry.coords += r.coords_checked;
      if (s == 0 || r.max_rel_error > entry.max_rel_error) {
        entry.max_rel_error = r.max_rel_error;
        entry.worst = "seed " + std::to_string(s) + " input " + describe(r, {});
      }
    }
    entry.passed = entry.max_rel_error < options.tolerance;
    record(std::move(entry));
   }
  };
  run_cases("op/", op_cases(), options.property_seeds);
  run_cases("module/", module_cases(), std::max<std::size_t>(1, options.property_seeds / 4));

  struct ModelCase {
    std::string name;
    ModelConfig cfg;
    std::size_t sampled;
  };
  std::vector<ModelCase> models;
  {
    ModelConfig c = tiny_model_config();
    c.finetune_word_vectors = true;
    models.push_back({"model/multilevel-highway", c, options.tiny_sampled_coords});
    c.combine = CombineMode::Concat;
    c.finetune_word_vectors = false;
    models.push_back({"model/multilevel-concat", c, options.tiny_sampled_coords});
    c = tiny_model_config();
    c.kind = ModelKind::MultiGranularity;
    models.push_back({"model/fusion-file", c, options.tiny_sampled_coords});
    c.utterance_source = UtteranceSource::Builtin;
    c.finetune_word_vectors = true;
    models.push_back({"model/fusion-builtin", c, options.tiny_sampled_coords});
    if (options.full_size_models) {
      ModelConfig d;
      d.dropout = 0.0;
      models.push_back({"model/multilevel-default-dims", d, options.sampled_coords});
      d.kind = ModelKind::MultiGranularity;
      models.push_back({"model/fusion-default-dims", d, options.sampled_coords});
    }
  }
  for (const auto& mc : models) {
    const auto vectors = random_word_vectors(6, mc.cfg.word_dim, mix_seed(options.seed, 11));
    auto model = make_classifier(mc.cfg, vectors, mix_seed(options.seed, 12));
    Rng rng(mix_seed(options.seed, 13));
    // Unequal lengths so padding and masks are exercised.
    std::vector<ModelInput> batch{random_input(mc.cfg, *vectors, 7, 4, 0, rng),
                                  random_input(mc.cfg, *vectors, 4, 2, 1, rng)};
    GradcheckOptions gopt;
    gopt.eps = options.eps;
    gopt.max_coords_per_input = mc.sampled;
    gopt.seed = mix_seed(options.seed, 14);
    record(check_model(mc.name, *model, std::move(batch), gopt, options.tolerance));
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace melformer
