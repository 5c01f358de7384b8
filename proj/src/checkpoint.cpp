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

#include "melformer/checkpoint.hpp"

#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"

namespace melformer {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

Checkpoint capture_checkpoint(const ModelConfig& cfg, const ParameterStore& store) {
  Checkpoint ckpt{cfg, {}};
  for (const auto& e : store.entries()) {
    CheckpointTensor t{e.name, e.value.shape(), {}};
    t.values.reserve(e.value.numel());
    for (double v : e.value.data()) t.values.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out;
  io::put_bytes(out, "MFCK");
  io::put_u32(out, kCheckpointVersion);
  const std::string config = nlohmann::json(ckpt.config).dump();
  io::put_u32(out, static_cast<std::uint32_t>(config.size()));
  io::put_bytes(out, config);
  io::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    io::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    io::put_bytes(out, t.name);
    io::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values) io::put_f32(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  io::Reader in(bytes, origin);
  if (in.str(4, "magic") != "MFCK") throw FormatError(origin + ": not a checkpoint (bad magic)");
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto config_len = in.u32("config length");
  try {
    from_json(nlohmann::json::parse(in.str(config_len, "config")), ckpt.config);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": bad config header: " + e.what());
  }
  const auto count = in.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = in.str(in.u32("name length"), "name");
    const auto rank = in.u32("rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(in.u32("dim"));
    t.values.resize(shape_numel(t.shape));
    for (auto& v : t.values) v = in.f32("payload");
    ckpt.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw FormatError(origin + ": trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterStore& store) {
  io::write_file(path, encode_checkpoint(capture_checkpoint(cfg, store)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint(bytes, path.string());
}

void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& store) {
  auto& entries = store.entries();
  if (entries.size() != ckpt.tensors.size()) {
    throw ValidationError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = ckpt.tensors[i];
    auto& dst = entries[i];
    if (src.name != dst.name || src.shape != dst.value.shape()) {
      throw ValidationError("checkpoint tensor " + src.name + shape_str(src.shape) + " does not match model tensor " +
                            dst.name + shape_str(dst.value.shape()));
    }
    auto values = dst.value.data();
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = static_cast<double>(src.values[k]);
  }
}

}  // namespace melformer
