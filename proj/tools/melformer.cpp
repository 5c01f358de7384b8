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

// melformer: command-line entry point.
//
// Config precedence: built-in defaults < --config file < command-line flags.
// Exit status: 0 success, 1 runtime error ("error: <kind>: <message>"),
// 2 usage error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "melformer/binary_io.hpp"
#include "melformer/checkpoint.hpp"
#include "melformer/data.hpp"
#include "melformer/errors.hpp"
#include "melformer/fusion.hpp"
#include "melformer/gradsuite.hpp"
#include "melformer/harness.hpp"

namespace fs = std::filesystem;
using namespace melformer;
using nlohmann::json;

namespace {

struct DataFlags {
  std::string manifest;
  std::string lexicon;
  std::string vectors;
  std::string utterance_embeddings;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--manifest", f.manifest, "JSON-lines manifest");
  cmd->add_option("--lexicon", f.lexicon, "Pronunciation lexicon (CMU format)");
  cmd->add_option("--vectors", f.vectors, "Word vectors (text format)");
  cmd->add_option("--utterance-embeddings", f.utterance_embeddings, "Utterance-level embeddings (UEMB file)");
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ValidationError(flag + " is required");
}

// Flags that override config values; unset flags leave the config alone.
struct ConfigFlags {
  std::string config;
  std::optional<std::string> kind, combine, utterance_source;
  std::optional<std::size_t> layers_text, layers_cross, layers_fusion, num_classes, word_dim, utterance_dim;
  std::optional<double> dropout, lr, clip_norm;
  std::optional<std::size_t> batch_size, max_epochs, patience, workers;
  std::optional<std::uint64_t> split_seed;
  std::vector<std::uint64_t> seeds;
  bool random_groups = false;
  bool finetune = false;
  bool freeze_fine = false;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config, "JSON run config");
  cmd->add_option("--kind", f.kind, "multilevel | multigranularity");
  cmd->add_option("--combine", f.combine, "highway | concat");
  cmd->add_option("--utterance-source", f.utterance_source, "file | builtin");
  cmd->add_option("--layers-text", f.layers_text);
  cmd->add_option("--layers-cross", f.layers_cross);
  cmd->add_option("--layers-fusion", f.layers_fusion);
  cmd->add_option("--num-classes", f.num_classes);
  cmd->add_option("--word-dim", f.word_dim);
  cmd->add_option("--utterance-dim", f.utterance_dim);
  cmd->add_option("--dropout", f.dropout);
  cmd->add_option("--lr", f.lr);
  cmd->add_option("--clip-norm", f.clip_norm);
  cmd->add_option("--batch-size", f.batch_size);
  cmd->add_option("--max-epochs", f.max_epochs);
  cmd->add_option("--patience", f.patience);
  cmd->add_option("--workers", f.workers, "Worker threads (MELFORMER_NUM_WORKERS caps this)");
  cmd->add_option("--split-seed", f.split_seed);
  cmd->add_option("--seeds", f.seeds, "Training seeds")->delimiter(',');
  cmd->add_flag("--random-groups", f.random_groups, "Stratified random fold groups instead of sessions");
  cmd->add_flag("--finetune-word-vectors", f.finetune);
  cmd->add_flag("--freeze-fine", f.freeze_fine, "Train only the fusion head of the multi-granularity model");
}

RunConfig resolve_config(const ConfigFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  json j = cfg;
  auto& m = j["model"];
  auto& t = j["train"];
  if (f.kind) m["kind"] = *f.kind;
  if (f.combine) m["combine_mode"] = *f.combine;
  if (f.utterance_source) m["utterance_source"] = *f.utterance_source;
  if (f.layers_text) m["layers_text"] = *f.layers_text;
  if (f.layers_cross) m["layers_cross"] = *f.layers_cross;
  if (f.layers_fusion) m["layers_fusion"] = *f.layers_fusion;
  if (f.num_classes) m["num_classes"] = *f.num_classes;
  if (f.word_dim) m["word_dim"] = *f.word_dim;
  if (f.utterance_dim) m["utterance_dim"] = *f.utterance_dim;
  if (f.dropout) m["dropout"] = *f.dropout;
  if (f.finetune) m["finetune_word_vectors"] = true;
  if (f.freeze_fine) m["freeze_fine"] = true;
  if (f.lr) t["lr"] = *f.lr;
  if (f.clip_norm) t["clip_norm"] = *f.clip_norm;
  if (f.batch_size) t["batch_size"] = *f.batch_size;
  if (f.max_epochs) t["max_epochs"] = *f.max_epochs;
  if (f.patience) t["patience"] = *f.patience;
  if (f.workers) t["workers"] = *f.workers;
  if (f.split_seed) t["split_seed"] = *f.split_seed;
  if (!f.seeds.empty()) t["seeds"] = f.seeds;
  if (f.random_groups) t["random_groups"] = true;
  try {
    cfg = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad flag value: ") + e.what());
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

void echo_config(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  io::write_text(out / "config.json", json(cfg).dump(2) + "\n");
}

struct LoadedData {
  Manifest manifest;
  Dataset dataset;
};

bool needs_embeddings(const ModelConfig& cfg) {
  return cfg.kind == ModelKind::MultiGranularity && cfg.utterance_source == UtteranceSource::File;
}

LoadedData load_data(const DataFlags& f, const ModelConfig& cfg) {
  require(f.manifest, "--manifest");
  require(f.lexicon, "--lexicon");
  require(f.vectors, "--vectors");
  LoadedData d;
  d.manifest = parse_manifest(f.manifest);
  if (cfg.num_classes != d.manifest.labels.size())
    throw ValidationError("config num_classes " + std::to_string(cfg.num_classes) + " but the label set has " +
                          std::to_string(d.manifest.labels.size()));
  const Lexicon lexicon = Lexicon::load(f.lexicon);
  auto vectors = std::make_shared<const WordVectors>(WordVectors::load(f.vectors, cfg.word_dim));
  std::optional<UtteranceEmbeddingMap> embeddings;
  if (!f.utterance_embeddings.empty()) embeddings = load_utterance_embeddings(f.utterance_embeddings);
  if (needs_embeddings(cfg) && !embeddings)
    throw ValidationError("--utterance-embeddings is required for the multi-granularity model with file source");
  DatasetOptions opts{embeddings ? &*embeddings : nullptr, needs_embeddings(cfg)};
  d.dataset.utterances = load_dataset(d.manifest, lexicon, *vectors, opts);
  d.dataset.vectors = std::move(vectors);
  return d;
}

void print_totals(const Manifest& m) {
  const auto totals = m.class_totals();
  std::cerr << m.records.size() << " utterances:";
  for (std::size_t k = 0; k < totals.size(); ++k) std::cerr << ' ' << m.labels[k] << '=' << totals[k];
  std::cerr << '\n';
}

std::unique_ptr<Classifier> restore_model(const Checkpoint& ckpt, std::shared_ptr<const WordVectors> vectors) {
  auto model = make_classifier(ckpt.config, std::move(vectors), 0);
  apply_checkpoint(ckpt, model->parameters());
  return model;
}

std::string format3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

std::vector<std::size_t> parse_counts(const std::string& list, const std::string& axis) {
  std::vector<std::size_t> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ValidationError("--layers " + axis + ": bad layer count '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("--layers " + axis + ": empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"melformer: multilevel transformer for audio + text emotion recognition"};
  app.require_subcommand(1);

  // gen-synthetic
  SyntheticSpec spec;
  std::string synth_out;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic corpus (wavs, manifest, lexicon, vectors)");
  gen->add_option("--out", synth_out, "Output directory")->required();
  gen->add_option("--classes", spec.classes);
  gen->add_option("--per-class", spec.per_class);
  gen->add_option("--sample-rate", spec.sample_rate);
  gen->add_option("--min-seconds", spec.min_seconds);
  gen->add_option("--max-seconds", spec.max_seconds);
  gen->add_option("--seed", spec.seed);
  gen->add_option("--word-dim", spec.word_dim);
  gen->add_option("--utterance-dim", spec.utterance_dim, "0 skips the utterance-embedding file");

  // featurize
  std::string feat_manifest, feat_out;
  auto* featurize = app.add_subcommand("featurize", "Cache log-mel features for every audio record");
  featurize->add_option("--manifest", feat_manifest)->required();
  featurize->add_option("--out", feat_out, "Cache directory")->required();

  // train
  DataFlags train_data;
  ConfigFlags train_cfg;
  std::string train_out;
  std::optional<std::size_t> train_fold_index;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "5-fold x seeds protocol, or a single fold with --fold");
  add_data_flags(train, train_data);
  add_config_flags(train, train_cfg);
  train->add_option("--out", train_out, "Run directory");
  train->add_option("--fold", train_fold_index, "Train only this fold (first seed) and write <out>/model.mfck");
  train->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  // eval
  DataFlags eval_data;
  std::string eval_ckpt, eval_out;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on every record of a manifest");
  add_data_flags(eval, eval_data);
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--out", eval_out, "Directory for eval.json");

  // predict
  DataFlags pred_data;
  std::string pred_ckpt, pred_audio, pred_features, pred_transcript, pred_utt_id;
  auto* predict = app.add_subcommand("predict", "Class probabilities for one utterance or a whole manifest");
  add_data_flags(predict, pred_data);
  predict->add_option("--checkpoint", pred_ckpt)->required();
  predict->add_option("--audio", pred_audio, "16-bit PCM WAV");
  predict->add_option("--features", pred_features, "Cached feature file");
  predict->add_option("--transcript", pred_transcript);
  predict->add_option("--utterance-id", pred_utt_id, "Key into --utterance-embeddings");

  // gradcheck
  GradSuiteOptions gopt;
  bool grad_quick = false;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and both models");
  gradcheck_cmd->add_option("--seed", gopt.seed);
  gradcheck_cmd->add_option("--property-seeds", gopt.property_seeds);
  gradcheck_cmd->add_flag("--quick", grad_quick, "Skip the default-size models");

  // sweep
  DataFlags sweep_data;
  ConfigFlags sweep_cfg;
  std::vector<std::string> sweep_layers;
  std::string sweep_out;
  bool sweep_quiet = false;
  auto* sweep = app.add_subcommand("sweep", "Layer-count matrix: one results row per combination");
  add_data_flags(sweep, sweep_data);
  add_config_flags(sweep, sweep_cfg);
  sweep->add_option("--layers", sweep_layers, "text=1,2,3 cross=1,2,3 fusion=1,2,3")->expected(1, 3);
  sweep->add_option("--out", sweep_out, "Run directory");
  sweep->add_flag("--quiet", sweep_quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) {
      const auto corpus = gen_synthetic(spec, synth_out);
      std::cout << "wrote " << corpus.utterances << " utterances\n"
                << "manifest " << corpus.manifest.string() << "\n"
                << "lexicon " << corpus.lexicon.string() << "\n"
                << "vectors " << corpus.vectors.string() << "\n";
      if (corpus.utterance_embeddings) std::cout << "utterance-embeddings " << corpus.utterance_embeddings->string() << "\n";
      return 0;
    }

    if (featurize->parsed()) {
      const Manifest manifest = parse_manifest(feat_manifest);
      print_totals(manifest);
      const auto report = featurize_manifest(manifest, feat_out);
      std::cout << "written " << report.written << " unchanged " << report.unchanged << "\nmanifest "
                << report.manifest.string() << "\n";
      return 0;
    }

    if (train->parsed()) {
      const RunConfig cfg = resolve_config(train_cfg);
      require(train_out, "--out");
      echo_config(cfg, train_out);
      const LoadedData data = load_data(train_data, cfg.model);
      print_totals(data.manifest);
      auto log = [quiet](const std::string& m) {
        if (!quiet) std::cerr << m << '\n';
      };
      if (train_fold_index) {
        if (*train_fold_index >= kFoldCount) throw ValidationError("--fold must be in [0, 4]");
        const auto split = kfold_split(data.dataset.split_items(), cfg.train.split_seed, cfg.train.random_groups);
        TrainOptions topt;
        topt.checkpoint_path = fs::path(train_out) / "model.mfck";
        topt.log = log;
        const FoldResult r = train_fold(split.folds[*train_fold_index], data.dataset, cfg, cfg.train.seeds.front(), topt);
        std::cout << "fold " << r.fold << " test WA " << format3(r.test.wa) << " UA " << format3(r.test.ua)
                  << " best epoch " << r.training.best_epoch << "\ncheckpoint " << topt.checkpoint_path->string() << "\n";
        return 0;
      }
      ExperimentOptions eopt;
      eopt.checkpoint_dir = fs::path(train_out) / "checkpoints";
      fs::create_directories(*eopt.checkpoint_dir);
      eopt.log = log;
      const ExperimentResult result = repeat_and_average(cfg, data.dataset, eopt);
      const std::string id = run_id(cfg, data.manifest.ids());
      io::write_text(fs::path(train_out) / "results.json",
                     results_json(result, cfg, id, data.manifest.labels).dump(2) + "\n");
      const std::string table = table_header() + table_row(model_label(cfg.model), result);
      io::write_text(fs::path(train_out) / "results.txt", table);
      std::cout << "run " << id << " (" << to_string(result.grouping) << " folds)\n" << table;
      return 0;
    }

    if (eval->parsed()) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const LoadedData data = load_data(eval_data, ckpt.config);
      const auto model = restore_model(ckpt, data.dataset.vectors);
      const FoldMetrics m = evaluate(*model, data.dataset.inputs(data.manifest.ids()));
      std::cout << "utterances " << m.count << "\nWA " << format3(m.wa) << "\nUA " << format3(m.ua) << "\n";
      std::cout << "confusion (rows = true " << data.manifest.labels.size() << " classes)\n";
      for (const auto& row : m.confusion) {
        for (std::size_t k = 0; k < row.size(); ++k) std::cout << (k ? " " : "") << row[k];
        std::cout << '\n';
      }
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        json recall = json::array();
        for (double r : m.recall) recall.push_back(std::isnan(r) ? json(nullptr) : json(r));
        json j{{"checkpoint", eval_ckpt}, {"wa", m.wa},       {"ua", m.ua},       {"recall", recall},
               {"confusion", m.confusion}, {"labels", data.manifest.labels}, {"config", ckpt.config}};
        io::write_text(fs::path(eval_out) / "eval.json", j.dump(2) + "\n");
      }
      return 0;
    }

    if (predict->parsed()) {
      const Checkpoint ckpt = load_checkpoint(pred_ckpt);
      const auto& labels = kEmotionLabels;
      auto emit = [&](const std::string& id, const std::vector<double>& probs) {
        json p = json::object();
        for (std::size_t k = 0; k < probs.size(); ++k) p[k < labels.size() ? labels[k] : std::to_string(k)] = probs[k];
        const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        std::cout << json{{"id", id}, {"label", best < labels.size() ? labels[best] : std::to_string(best)},
                          {"probabilities", p}}
                         .dump()
                  << '\n';
      };
      if (!pred_data.manifest.empty()) {
        const LoadedData data = load_data(pred_data, ckpt.config);
        const auto model = restore_model(ckpt, data.dataset.vectors);
        for (const auto& in : data.dataset.inputs(data.manifest.ids())) emit(in.id, predict_proba(*model, in));
        return 0;
      }
      require(pred_data.lexicon, "--lexicon");
      require(pred_data.vectors, "--vectors");
      require(pred_transcript, "--transcript");
      if (pred_audio.empty() == pred_features.empty())
        throw ValidationError("exactly one of --audio, --features or --manifest is required");
      auto vectors = std::make_shared<const WordVectors>(WordVectors::load(pred_data.vectors, ckpt.config.word_dim));
      Utterance u;
      u.id = pred_utt_id.empty() ? "input" : pred_utt_id;
      u.mel = pred_audio.empty() ? read_features(pred_features) : featurize_wav(pred_audio);
      u.tokens = tokenize_and_g2p(pred_transcript, Lexicon::load(pred_data.lexicon), vectors.get());
      if (needs_embeddings(ckpt.config)) {
        require(pred_data.utterance_embeddings, "--utterance-embeddings");
        require(pred_utt_id, "--utterance-id");
        const auto map = load_utterance_embeddings(pred_data.utterance_embeddings);
        auto it = map.find(pred_utt_id);
        if (it == map.end()) throw ValidationError("utterance embedding missing for '" + pred_utt_id + "'");
        u.utterance_embedding = it->second.vector;
      }
      const auto model = restore_model(ckpt, vectors);
      emit(u.id, predict_proba(*model, make_input(u)));
      return 0;
    }

    if (gradcheck_cmd->parsed()) {
      gopt.full_size_models = !grad_quick;
      const auto report = run_gradient_suite(gopt, [&](const GradSuiteEntry& e) {
        std::printf("%-4s %-32s max_rel_error %.3e over %zu coords\n", e.passed ? "ok" : "FAIL", e.name.c_str(),
                    e.max_rel_error, e.coords);
        if (!e.passed) std::printf("     worst %s\n", e.worst.c_str());
        std::fflush(stdout);
      });
      std::printf("%s: max relative error %.3e (tolerance %.0e), %.1f s\n", report.passed() ? "PASS" : "FAIL",
                  report.max_error(), gopt.tolerance, report.seconds);
      return report.passed() ? 0 : 1;
    }

    if (sweep->parsed()) {
      const RunConfig base = resolve_config(sweep_cfg);
      require(sweep_out, "--out");
      std::vector<std::size_t> text{base.model.layers_text}, cross{base.model.layers_cross},
          fusion{base.model.layers_fusion};
      for (const auto& spec_item : sweep_layers) {
        const auto eq = spec_item.find('=');
        if (eq == std::string::npos) throw ValidationError("--layers expects axis=list, got '" + spec_item + "'");
        const std::string axis = spec_item.substr(0, eq);
        const auto values = parse_counts(spec_item.substr(eq + 1), axis);
        if (axis == "text") text = values;
        else if (axis == "cross") cross = values;
        else if (axis == "fusion") fusion = values;
        else throw ValidationError("--layers: unknown axis '" + axis + "' (text, cross, fusion)");
      }
      echo_config(base, sweep_out);
      const LoadedData data = load_data(sweep_data, base.model);
      print_totals(data.manifest);
      ExperimentOptions eopt;
      eopt.checkpoint_dir = fs::path(sweep_out) / "checkpoints";
      eopt.log = [sweep_quiet](const std::string& m) {
        if (!sweep_quiet) std::cerr << m << '\n';
      };
      const auto rows = run_sweep(base, data.dataset, text, cross, fusion, eopt);
      json all = json::array();
      for (const auto& r : rows) {
        RunConfig cfg = base;
        cfg.model.layers_text = r.text;
        cfg.model.layers_cross = r.cross;
        cfg.model.layers_fusion = r.fusion;
        all.push_back(results_json(r.result, cfg, run_id(cfg, data.manifest.ids()), data.manifest.labels));
      }
      io::write_text(fs::path(sweep_out) / "sweep.json", all.dump(2) + "\n");
      const std::string table = sweep_table(rows);
      io::write_text(fs::path(sweep_out) / "sweep.txt", table);
      std::cout << table;
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
