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

// Finite-difference verification of every differentiable op and of both
// models on padded two-sample batches.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "melformer/model.hpp"

namespace melformer {

struct GradSuiteOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Randomized shapes per op.
  std::size_t property_seeds = 20;
  std::uint64_t seed = 0;
  /// Also check default-size models (sampled coordinates).
  bool full_size_models = true;
  /// Coordinates per parameter tensor in the end-to-end model checks
  /// (0 = all). Layer-level checks always cover every coordinate.
  std::size_t tiny_sampled_coords = 6;
  std::size_t sampled_coords = 3;
};

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst;  // "<input>[coord] analytic=... numeric=..."
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double seconds = 0.0;

  bool passed() const;
  double max_error() const;
};

GradSuiteReport run_gradient_suite(const GradSuiteOptions& options = {},
                                   const std::function<void(const GradSuiteEntry&)>& on_entry = {});

/// Small dimensions that keep full-coordinate checks cheap.
ModelConfig tiny_model_config();

/// Random vocabulary of `words` entries with `dim`-dimensional vectors.
std::shared_ptr<const WordVectors> random_word_vectors(std::size_t words, std::size_t dim, std::uint64_t seed);

/// Random unpadded sample shaped for `cfg` (mel row 0 is the zero dummy).
ModelInput random_input(const ModelConfig& cfg, const WordVectors& vectors, std::size_t mel_frames,
                        std::size_t words, std::size_t label, Rng& rng);

/// Mean cross entropy over a padded batch in eval mode.
Tensor batch_loss(const Classifier& model, std::vector<ModelInput> batch);

}  // namespace melformer
