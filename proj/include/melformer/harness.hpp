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

// Training and evaluation protocol: Adam, fold planning, WA/UA metrics, the
// early-stopped fold trainer and multi-seed averaging.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "melformer/config.hpp"
#include "melformer/data.hpp"
#include "melformer/model.hpp"

namespace melformer {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamOptions adam_options(const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

using TrainableFilter = std::function<bool(const std::string&)>;

/// One bias-corrected Adam update over every parameter that has a gradient
/// and passes `trainable`. A non-finite gradient raises NumericError naming
/// the parameter before anything is modified.
void adam_step(ParameterStore& store, AdamState& state, const AdamOptions& opt,
               const TrainableFilter& trainable = {});

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling. max_norm <= 0 disables clipping.
double clip_grad_norm(ParameterStore& store, double max_norm, const TrainableFilter& trainable = {});

// ---------------------------------------------------------------------------
// Fold planning

struct FoldPlan {
  std::size_t fold = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> dev_ids;
  std::vector<std::string> test_ids;
  std::vector<std::string> train_groups;
  std::string dev_group;
  std::string test_group;
};

struct SplitItem {
  std::string id;
  std::size_t label = 0;
  std::string session;
  std::string speaker;
};

enum class GroupingKind { Session, Speaker, Random };
std::string to_string(GroupingKind g);

struct FoldSplit {
  GroupingKind grouping = GroupingKind::Session;
  /// Five buckets of group names (random buckets are named "random-<i>").
  std::vector<std::vector<std::string>> buckets;
  std::vector<FoldPlan> folds;
};

inline constexpr std::size_t kFoldCount = 5;

/// Groups by session when every record has one, else by speaker, else
/// stratified random groups (also forced by `random_groups`). Sorted group
/// names are chunked into five buckets; fold i trains on buckets i..i+2,
/// validates on i+3 and tests on i+4 (mod 5).
FoldSplit kfold_split(const std::vector<SplitItem>& items, std::uint64_t seed, bool random_groups = false);
FoldSplit kfold_split(const Manifest& manifest, std::uint64_t seed, bool random_groups = false);

// ---------------------------------------------------------------------------
// Metrics

struct FoldMetrics {
  double wa = 0.0;
  double ua = 0.0;
  /// Per-class recall; NaN for classes without support.
  std::vector<double> recall;
  std::vector<std::size_t> support;
  /// confusion[true][predicted].
  std::vector<std::vector<std::size_t>> confusion;
  std::size_t count = 0;
};

/// WA = trace / total; UA = mean recall over classes with support.
FoldMetrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion);
FoldMetrics metrics_from_predictions(std::span<const std::size_t> labels, std::span<const std::size_t> predicted,
                                     std::size_t classes);

std::size_t predict_class(const Classifier& model, const ModelInput& input);

/// Eval-mode predictions for every input. Empty input raises ValidationError.
FoldMetrics evaluate(const Classifier& model, const std::vector<ModelInput>& inputs);

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_wa = 0.0;
  double dev_ua = 0.0;
};

struct TrainOptions {
  /// When set, the best weights are written here as they improve.
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const std::string&)> log;
};

struct TrainOutcome {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = initial weights
  double best_dev_wa = 0.0;
  std::size_t steps = 0;
};

/// One optimizer step on a batch (padded to its longest member). Returns the
/// batch-mean loss. A non-finite loss raises NumericError.
double train_step(Classifier& model, std::vector<ModelInput> batch, AdamState& adam, const TrainConfig& cfg,
                  Rng& rng);

/// Epoch loop with early stopping on dev WA: training stops once more than
/// `patience` epochs pass without a strict improvement, and the best weights
/// are restored into `model`. On divergence the error names the last good
/// checkpoint.
TrainOutcome train_model(Classifier& model, const std::vector<ModelInput>& train, const std::vector<ModelInput>& dev,
                         const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& options = {});

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  FoldMetrics test;
  TrainOutcome training;
  std::optional<std::filesystem::path> checkpoint;
};

struct Dataset {
  std::vector<Utterance> utterances;
  std::shared_ptr<const WordVectors> vectors;

  std::vector<ModelInput> inputs(const std::vector<std::string>& ids) const;
  std::vector<SplitItem> split_items() const;
};

/// Builds a model seeded from (seed, fold), trains it on the plan and scores
/// the test bucket with the best weights.
FoldResult train_fold(const FoldPlan& plan, const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                      const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Experiments

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Population statistics.
MeanStd mean_std(std::span<const double> values);

/// "0.XXX ± 0.XXX".
std::string format_mean_std(const MeanStd& s);

struct ExperimentResult {
  GroupingKind grouping = GroupingKind::Session;
  std::vector<std::uint64_t> seeds;
  /// folds[seed index][fold index].
  std::vector<std::vector<FoldResult>> folds;
  std::vector<double> seed_wa;  // mean over folds
  std::vector<double> seed_ua;
  MeanStd wa;
  MeanStd ua;
};

/// Aggregates per-seed fold means into mean ± population std.
void summarize(ExperimentResult& result);

struct ExperimentOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const std::string&)> log;
};

/// Worker count: `requested` (0 = hardware concurrency), capped by
/// MELFORMER_NUM_WORKERS when set.
std::size_t resolve_workers(std::size_t requested);

/// Every (seed, fold) job on a worker pool; each worker owns its model.
ExperimentResult repeat_and_average(const RunConfig& cfg, const Dataset& data, const ExperimentOptions& options = {});

/// Stable short hex id derived from the config and the data ids.
std::string run_id(const RunConfig& cfg, const std::vector<std::string>& ids);

nlohmann::json results_json(const ExperimentResult& result, const RunConfig& cfg, const std::string& id,
                            const std::vector<std::string>& labels);

/// Table row in `name | WA | UA` form.
std::string table_row(const std::string& name, const ExperimentResult& result);
std::string table_header();
std::string model_label(const ModelConfig& cfg);

struct SweepRow {
  std::size_t text = 0;
  std::size_t cross = 0;
  std::size_t fusion = 0;
  ExperimentResult result;
};

/// Runs the experiment for every (text, cross, fusion) layer combination in
/// lexicographic order.
std::vector<SweepRow> run_sweep(const RunConfig& base, const Dataset& data, const std::vector<std::size_t>& text,
                                const std::vector<std::size_t>& cross, const std::vector<std::size_t>& fusion,
                                const ExperimentOptions& options = {});
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace melformer
