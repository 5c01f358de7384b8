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

// Audio frontend: 16-bit PCM WAV -> Hann-windowed 25 ms / 12 ms frames ->
// 128 log mel filterbank energies -> per-utterance channel normalization with
// a zero "dummy" row prepended at position 0.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace melformer {

inline constexpr std::size_t kMelBins = 128;
inline constexpr double kFrameMs = 25.0;
inline constexpr double kHopMs = 12.0;
inline constexpr double kLogFloor = 1e-10;

struct PcmAudio {
  std::vector<double> samples;  // in [-1, 1]
  std::uint32_t sample_rate = 0;
};

/// Row-major feature matrix. After normalize_and_prepend_dummy, row 0 is the
/// all-zero dummy vector.
struct MelMatrix {
  std::size_t rows = 0;
  std::size_t cols = kMelBins;
  std::vector<double> values;
  std::uint32_t sample_rate = 16000;
  bool has_dummy = false;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

struct FrameLayout {
  std::size_t window = 0;
  std::size_t hop = 0;
};

FrameLayout frame_layout(std::uint32_t sample_rate);

/// Mono 16-bit PCM; multi-channel data is averaged per sample.
PcmAudio load_wav(const std::filesystem::path& path);
PcmAudio parse_wav(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
/// Writes mono 16-bit PCM, clamping to [-1, 1].
void write_wav(const std::filesystem::path& path, std::span<const double> samples, std::uint32_t sample_rate);

/// 1 + floor((L - win) / hop) Hann-windowed frames; trailing partial frame dropped.
std::vector<std::vector<double>> frame_signal(std::span<const double> samples, std::uint32_t sample_rate);

/// Triangular HTK-mel filters spanning 0 Hz to Nyquist over `fft_size`/2+1
/// bins, row-major kMelBins × bins.
std::vector<double> mel_filterbank(std::uint32_t sample_rate, std::size_t fft_size);
double hz_to_mel(double hz);
double mel_to_hz(double mel);
std::size_t fft_size_for(std::size_t window);

MelMatrix log_mel(const std::vector<std::vector<double>>& frames, std::uint32_t sample_rate);

/// Per-channel mean/variance normalization, then a zero row at position 0.
MelMatrix normalize_and_prepend_dummy(const MelMatrix& mel);

/// Full chain for one file.
MelMatrix featurize_wav(const std::filesystem::path& path);

// Feature cache: "MEL1", u32 rows, u32 cols, rows*cols little-endian f32.
std::vector<std::uint8_t> encode_features(const MelMatrix& mel);
MelMatrix decode_features(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
MelMatrix read_features(const std::filesystem::path& path);

}  // namespace melformer
