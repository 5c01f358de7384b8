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

#include "melformer/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>
#include <unordered_map>

#include "melformer/checkpoint.hpp"
#include "melformer/errors.hpp"

namespace melformer {

using nlohmann::json;

AdamOptions adam_options(const TrainConfig& cfg) { return {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps}; }

void adam_step(ParameterStore& store, AdamState& state, const AdamOptions& opt, const TrainableFilter& trainable) {
  auto& entries = store.entries();
  if (state.m.size() != entries.size()) {
    state.m.assign(entries.size(), {});
    state.v.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      state.m[i].assign(entries[i].value.numel(), 0.0);
      state.v[i].assign(entries[i].value.numel(), 0.0);
    }
  }
  auto active = [&](const NamedParameter& p) {
    return !p.value.grad().empty() && (!trainable || trainable(p.name));
  };
  for (const auto& p : entries) {
    if (!active(p)) continue;
    for (double g : p.value.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!active(entries[i])) continue;
    auto values = entries[i].value.data();
    const auto grad = entries[i].value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * grad[k];
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * grad[k] * grad[k];
      values[k] -= opt.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
    }
  }
}

double clip_grad_norm(ParameterStore& store, double max_norm, const TrainableFilter& trainable) {
  double sq = 0.0;
  for (auto& p : store.entries()) {
    if (p.value.grad().empty() || (trainable && !trainable(p.name))) continue;
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : store.entries()) {
      if (p.value.grad().empty() || (trainable && !trainable(p.name))) continue;
      for (double& g : p.value.grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::string to_string(GroupingKind g) {
  switch (g) {
    case GroupingKind::Session: return "session";
    case GroupingKind::Speaker: return "speaker";
    case GroupingKind::Random: return "random";
  }
  return "?";
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : sep) + p;
  return out;
}

}  // namespace

FoldSplit kfold_split(const std::vector<SplitItem>& items, std::uint64_t seed, bool random_groups) {
  if (items.empty()) throw ValidationError("cannot split an empty dataset");
  FoldSplit split;
  split.buckets.resize(kFoldCount);
  std::vector<std::size_t> bucket_of(items.size());

  const bool all_sessions = std::all_of(items.begin(), items.end(), [](const auto& i) { return !i.session.empty(); });
  const bool all_speakers = std::all_of(items.begin(), items.end(), [](const auto& i) { return !i.speaker.empty(); });

  if (random_groups || (!all_sessions && !all_speakers)) {
    split.grouping = GroupingKind::Random;
    if (items.size() < kFoldCount)
      throw ValidationError("need at least " + std::to_string(kFoldCount) + " utterances for random grouping, got " +
                            std::to_string(items.size()));
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < items.size(); ++i) by_class[items[i].label].push_back(i);
    std::size_t offset = 0;
    for (auto& [label, members] : by_class) {
      Rng rng(mix_seed(seed, label));
      rng.shuffle(members.begin(), members.end());
      for (std::size_t p = 0; p < members.size(); ++p) bucket_of[members[p]] = (offset + p) % kFoldCount;
      offset += members.size();
    }
    for (std::size_t b = 0; b < kFoldCount; ++b) split.buckets[b] = {"random-" + std::to_string(b + 1)};
  } else {
    split.grouping = all_sessions ? GroupingKind::Session : GroupingKind::Speaker;
    auto key = [&](const SplitItem& i) -> const std::string& { return all_sessions ? i.session : i.speaker; };
    std::set<std::string> names;
    for (const auto& i : items) names.insert(key(i));
    if (names.size() < kFoldCount) {
      throw ValidationError("only " + std::to_string(names.size()) + " distinct " + to_string(split.grouping) +
                            " group(s); " + std::to_string(kFoldCount) +
                            " are needed (use --random-groups for stratified random grouping)");
    }
    std::map<std::string, std::size_t> group_bucket;
    std::size_t j = 0;
    for (const auto& n : names) {
      const std::size_t b = j++ * kFoldCount / names.size();
      group_bucket[n] = b;
      split.buckets[b].push_back(n);
    }
    for (std::size_t i = 0; i < items.size(); ++i) bucket_of[i] = group_bucket[key(items[i])];
  }

  for (std::size_t f = 0; f < kFoldCount; ++f) {
    FoldPlan plan;
    plan.fold = f;
    const std::size_t dev = (f + 3) % kFoldCount, test = (f + 4) % kFoldCount;
    for (std::size_t k = 0; k < 3; ++k) plan.train_groups.push_back(join(split.buckets[(f + k) % kFoldCount], "+"));
    plan.dev_group = join(split.buckets[dev], "+");
    plan.test_group = join(split.buckets[test], "+");
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::size_t b = bucket_of[i];
      if (b == dev) plan.dev_ids.push_back(items[i].id);
      else if (b == test) plan.test_ids.push_back(items[i].id);
      else plan.train_ids.push_back(items[i].id);
    }
    split.folds.push_back(std::move(plan));
  }
  return split;
}

FoldSplit kfold_split(const Manifest& manifest, std::uint64_t seed, bool random_groups) {
  std::vector<SplitItem> items;
  for (const auto& r : manifest.records) items.push_back({r.id, r.label_index, r.session, r.speaker});
  return kfold_split(items, seed, random_groups);
}

// ---------------------------------------------------------------------------

FoldMetrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t k = confusion.size();
  FoldMetrics m;
  m.confusion = confusion;
  m.recall.assign(k, std::numeric_limits<double>::quiet_NaN());
  m.support.assign(k, 0);
  std::size_t correct = 0, classes_with_support = 0;
  double recall_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (confusion[i].size() != k) throw DimensionError("confusion matrix must be square");
    for (auto c : confusion[i]) m.support[i] += c;
    m.count += m.support[i];
    correct += confusion[i][i];
    if (m.support[i] > 0) {
      m.recall[i] = static_cast<double>(confusion[i][i]) / static_cast<double>(m.support[i]);
      recall_sum += m.recall[i];
      ++classes_with_support;
    }
  }
  if (m.count == 0) throw ValidationError("empty evaluation set");
  m.wa = static_cast<double>(correct) / static_cast<double>(m.count);
  m.ua = recall_sum / static_cast<double>(classes_with_support);
  return m;
}

FoldMetrics metrics_from_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> predicted,
                                     std::size_t classes) {
  if (labels.size() != predicted.size()) throw DimensionError("labels and predictions differ in length");
  std::vector<std::vector<std::size_t>> confusion(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predicted[i] >= classes) throw ValidationError("class index out of range");
    ++confusion[labels[i]][predicted[i]];
  }
  return metrics_from_confusion(confusion);
}

std::size_t predict_class(const Classifier& model, const ModelInput& input) {
  NoGradGuard no_grad;
  const Tensor logits = model.logits(input, ForwardContext{});
  const auto values = logits.data();
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

FoldMetrics evaluate(const Classifier& model, const std::vector<ModelInput>& inputs) {
  if (inputs.empty()) throw ValidationError("empty evaluation set");
  std::vector<std::size_t> labels, predicted;
  for (const auto& in : inputs) {
    labels.push_back(in.label);
    predicted.push_back(predict_class(model, in));
  }
  return metrics_from_predictions(labels, predicted, model.config().num_classes);
}

// ---------------------------------------------------------------------------

double train_step(Classifier& model, std::vector<ModelInput> batch, AdamState& adam, const TrainConfig& cfg,
                  Rng& rng) {
  if (batch.empty()) throw ValidationError("empty training batch");
  pad_batch(batch);
  auto& store = model.parameters();
  store.zero_grad();
  const ForwardContext ctx{Mode::Train, model.config().dropout, &rng, nullptr};
  std::vector<Tensor> rows;
  std::vector<std::size_t> labels;
  for (const auto& in : batch) {
    rows.push_back(model.logits(in, ctx));
    labels.push_back(in.label);
  }
  const Tensor loss = cross_entropy(concat_rows(rows), labels);
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("training loss is not finite");
  loss.backward();
  const TrainableFilter trainable = [&model](const std::string& n) { return model.is_trainable(n); };
  clip_grad_norm(store, cfg.clip_norm, trainable);
  adam_step(store, adam, adam_options(cfg), trainable);
  return value;
}

TrainOutcome train_model(Classifier& model, const std::vector<ModelInput>& train, const std::vector<ModelInput>& dev,
                         const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& options) {
  if (train.empty()) throw ValidationError("empty training set");
  TrainOutcome outcome;
  auto& store = model.parameters();
  auto best = store.snapshot();
  bool checkpoint_written = false;
  auto save_best = [&] {
    if (!options.checkpoint_path) return;
    save_checkpoint(*options.checkpoint_path, model.config(), store);
    checkpoint_written = true;
  };
  if (cfg.max_epochs == 0) {
    save_best();
    return outcome;
  }
  outcome.best_dev_wa = -1.0;

  Rng rng(mix_seed(seed, 0x7A11));
  AdamState adam;
  std::vector<std::size_t> order(train.size());
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ModelInput> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(train[order[i]]);
      try {
        loss_sum += train_step(model, std::move(batch), adam, cfg, rng);
      } catch (const NumericError& e) {
        const std::string where = checkpoint_written ? options.checkpoint_path->string() : std::string("none written");
        throw NumericError(std::string("training diverged at epoch ") + std::to_string(epoch) + ", step " +
                           std::to_string(outcome.steps + 1) + " (" + e.what() + "); last good checkpoint: " + where);
      }
      ++batches;
      ++outcome.steps;
    }
    const FoldMetrics dev_metrics = evaluate(model, dev);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), dev_metrics.wa, dev_metrics.ua};
    outcome.history.push_back(rec);
    if (rec.dev_wa > outcome.best_dev_wa) {
      outcome.best_dev_wa = rec.dev_wa;
      outcome.best_epoch = epoch;
      best = store.snapshot();
      since_best = 0;
      save_best();
    } else {
      ++since_best;
    }
    if (options.log) {
      char line[160];
      std::snprintf(line, sizeof(line), "epoch %zu loss %.4f dev WA %.3f UA %.3f%s", epoch, rec.train_loss,
                    rec.dev_wa, rec.dev_ua, outcome.best_epoch == epoch ? " *" : "");
      options.log(line);
    }
    if (since_best > cfg.patience) break;
  }
  store.restore(best);
  return outcome;
}

std::vector<ModelInput> Dataset::inputs(const std::vector<std::string>& ids) const {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < utterances.size(); ++i) index.emplace(utterances[i].id, i);
  std::vector<ModelInput> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("unknown utterance id '" + id + "'");
    out.push_back(make_input(utterances[it->second]));
  }
  return out;
}

std::vector<SplitItem> Dataset::split_items() const {
  std::vector<SplitItem> items;
  for (const auto& u : utterances) items.push_back({u.id, u.label, u.session, u.speaker});
  return items;
}

FoldResult train_fold(const FoldPlan& plan, const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                      const TrainOptions& options) {
  FoldResult result;
  result.fold = plan.fold;
  result.seed = seed;
  const std::uint64_t job_seed = mix_seed(seed, plan.fold);
  auto model = make_classifier(cfg.model, data.vectors, job_seed);
  result.training = train_model(*model, data.inputs(plan.train_ids), data.inputs(plan.dev_ids), cfg.train, job_seed,
                                options);
  result.checkpoint = options.checkpoint_path;
  result.test = evaluate(*model, data.inputs(plan.test_ids));
  return result;
}

// ---------------------------------------------------------------------------

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / n)};
}

std::string format_mean_std(const MeanStd& s) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", s.mean, s.stddev);
  return buf;
}

void summarize(ExperimentResult& result) {
  result.seed_wa.clear();
  result.seed_ua.clear();
  for (const auto& folds : result.folds) {
    double wa = 0.0, ua = 0.0;
    for (const auto& f : folds) {
      wa += f.test.wa;
      ua += f.test.ua;
    }
    result.seed_wa.push_back(wa / static_cast<double>(folds.size()));
    result.seed_ua.push_back(ua / static_cast<double>(folds.size()));
  }
  result.wa = mean_std(result.seed_wa);
  result.ua = mean_std(result.seed_ua);
}

std::size_t resolve_workers(std::size_t requested) {
  std::size_t n = requested != 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MELFORMER_NUM_WORKERS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1)
      throw ValidationError(std::string("MELFORMER_NUM_WORKERS must be a positive integer, got '") + env + "'");
    n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

ExperimentResult repeat_and_average(const RunConfig& cfg, const Dataset& data, const ExperimentOptions& options) {
  cfg.model.validate();
  cfg.train.validate();
  const FoldSplit split = kfold_split(data.split_items(), cfg.train.split_seed, cfg.train.random_groups);

  ExperimentResult result;
  result.grouping = split.grouping;
  result.seeds = cfg.train.seeds;
  result.folds.assign(result.seeds.size(), std::vector<FoldResult>(split.folds.size()));

  struct Job {
    std::size_t seed_index, fold;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < result.seeds.size(); ++s)
    for (std::size_t f = 0; f < split.folds.size(); ++f) jobs.push_back({s, f});

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      const auto [s, f] = jobs[j];
      const std::uint64_t seed = result.seeds[s];
      const std::string tag = "seed " + std::to_string(seed) + " fold " + std::to_string(f);
      TrainOptions topt;
      if (options.checkpoint_dir)
        topt.checkpoint_path =
            *options.checkpoint_dir / ("seed" + std::to_string(seed) + "_fold" + std::to_string(f) + ".mfck");
      if (options.log) {
        topt.log = [&, tag](const std::string& msg) {
          std::lock_guard lock(log_mutex);
          options.log(tag + ": " + msg);
        };
      }
      try {
        FoldResult r = train_fold(split.folds[f], data, cfg, seed, topt);
        if (options.log) {
          char line[96];
          std::snprintf(line, sizeof(line), "test WA %.3f UA %.3f (best epoch %zu)", r.test.wa, r.test.ua,
                        r.training.best_epoch);
          topt.log(line);
        }
        result.folds[s][f] = std::move(r);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  const std::size_t width = std::min(resolve_workers(cfg.train.workers), jobs.size());
  if (width <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < width; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  summarize(result);
  return result;
}

std::string run_id(const RunConfig& cfg, const std::vector<std::string>& ids) {
  std::string text = json(cfg).dump();
  for (const auto& id : ids) text += '\n' + id;
  const auto hash = fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return std::string(buf, 12);
}

json results_json(const ExperimentResult& result, const RunConfig& cfg, const std::string& id,
                  const std::vector<std::string>& labels) {
  json j;
  j["run_id"] = id;
  j["config"] = cfg;
  j["labels"] = labels;
  j["grouping"] = to_string(result.grouping);
  j["folds"] = json::array();
  for (std::size_t s = 0; s < result.folds.size(); ++s) {
    for (const auto& f : result.folds[s]) {
      json recall = json::array();
      for (double r : f.test.recall) recall.push_back(std::isnan(r) ? json(nullptr) : json(r));
      json history = json::array();
      for (const auto& e : f.training.history) history.push_back(e.dev_wa);
      j["folds"].push_back({{"seed", f.seed},
                            {"fold", f.fold},
                            {"wa", f.test.wa},
                            {"ua", f.test.ua},
                            {"recall", recall},
                            {"confusion", f.test.confusion},
                            {"best_epoch", f.training.best_epoch},
                            {"epochs", f.training.history.size()},
                            {"dev_wa_history", history}});
    }
  }
  j["per_seed"] = json::array();
  for (std::size_t s = 0; s < result.seeds.size(); ++s)
    j["per_seed"].push_back({{"seed", result.seeds[s]}, {"wa", result.seed_wa[s]}, {"ua", result.seed_ua[s]}});
  j["summary"] = {{"wa_mean", result.wa.mean},
                  {"wa_std", result.wa.stddev},
                  {"ua_mean", result.ua.mean},
                  {"ua_std", result.ua.stddev},
                  {"wa", format_mean_std(result.wa)},
                  {"ua", format_mean_std(result.ua)}};
  return j;
}

std::string model_label(const ModelConfig& cfg) {
  std::string name = cfg.kind == ModelKind::Multilevel ? "Multilevel" : "Multi-granularity";
  return name + " (" + std::to_string(cfg.layers_text) + "|" + std::to_string(cfg.layers_cross) + "|" +
         std::to_string(cfg.layers_fusion) + ", " + to_string(cfg.combine) + ")";
}

namespace {

std::string pad_right(std::string s, std::size_t width) {
  // "±" is two bytes but one column.
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  if (cols < width) s.append(width - cols, ' ');
  return s;
}

}  // namespace

std::string table_header() {
  return pad_right("Model", 36) + " | " + pad_right("WA", 13) + " | UA\n" + std::string(36, '-') + "-+-" +
         std::string(13, '-') + "-+-" + std::string(13, '-') + "\n";
}

std::string table_row(const std::string& name, const ExperimentResult& result) {
  return pad_right(name, 36) + " | " + pad_right(format_mean_std(result.wa), 13) + " | " + format_mean_std(result.ua) +
         "\n";
}

std::vector<SweepRow> run_sweep(const RunConfig& base, const Dataset& data, const std::vector<std::size_t>& text,
                                const std::vector<std::size_t>& cross, const std::vector<std::size_t>& fusion,
                                const ExperimentOptions& options) {
  if (text.empty() || cross.empty() || fusion.empty()) throw ValidationError("sweep needs at least one value per axis");
  std::vector<SweepRow> rows;
  for (auto t : text) {
    for (auto c : cross) {
      for (auto f : fusion) {
        RunConfig cfg = base;
        cfg.model.layers_text = t;
        cfg.model.layers_cross = c;
        cfg.model.layers_fusion = f;
        ExperimentOptions opt = options;
        const std::string tag = std::to_string(t) + "_" + std::to_string(c) + "_" + std::to_string(f);
        if (options.checkpoint_dir) opt.checkpoint_dir = *options.checkpoint_dir / ("layers_" + tag);
        if (opt.checkpoint_dir) std::filesystem::create_directories(*opt.checkpoint_dir);
        if (options.log) opt.log = [&options, tag](const std::string& m) { options.log("[" + tag + "] " + m); };
        rows.push_back({t, c, f, repeat_and_average(cfg, data, opt)});
      }
    }
  }
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::string out = "Text | Cross | Fusion | WA            | UA\n-----+-------+--------+---------------+--------------\n";
  for (const auto& r : rows) {
    char head[48];
    std::snprintf(head, sizeof(head), "%4zu | %5zu | %6zu | ", r.text, r.cross, r.fusion);
    out += head + pad_right(format_mean_std(r.result.wa), 13) + " | " + format_mean_std(r.result.ua) + "\n";
  }
  return out;
}

}  // namespace melformer
