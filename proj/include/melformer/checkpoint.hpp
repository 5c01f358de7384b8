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

// Checkpoint layout (all integers little-endian u32):
//   "MFCK" | version | config_len | config JSON (ModelConfig) | count |
//   count × { name_len | name | rank | dims[rank] | f32 payload }

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "melformer/config.hpp"
#include "melformer/model.hpp"

namespace melformer {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<CheckpointTensor> tensors;
};

Checkpoint capture_checkpoint(const ModelConfig& cfg, const ParameterStore& store);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore& store);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values into `store`; names, order and shapes must match exactly.
void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store);

}  // namespace melformer
