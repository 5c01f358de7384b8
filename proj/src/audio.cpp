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

#include "melformer/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>

#include "melformer/binary_io.hpp"
#include "melformer/errors.hpp"

namespace melformer {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace io

namespace {

// The FFTW planner is not thread-safe; execution with new-array functions is.
std::mutex g_fftw_planner;

}  // namespace

FrameLayout frame_layout(std::uint32_t sample_rate) {
  if (sample_rate == 0) throw ValidationError("sample rate must be positive");
  const auto ms_to_samples = [&](double ms) {
    return static_cast<std::size_t>(std::lround(static_cast<double>(sample_rate) * ms / 1000.0));
  };
  return {ms_to_samples(kFrameMs), ms_to_samples(kHopMs)};
}

PcmAudio parse_wav(std::span<const std::uint8_t> bytes, const std::string& origin) {
  io::Reader in(bytes, origin);
  if (in.str(4, "RIFF tag") != "RIFF") throw FormatError(origin + ": missing RIFF chunk");
  in.u32("RIFF size");
  if (in.str(4, "WAVE tag") != "WAVE") throw FormatError(origin + ": RIFF chunk is not WAVE");

  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    if (in.remaining() == 0) throw IoError(origin + ": truncated, no data chunk");
    const std::string id = in.str(4, "chunk id");
    const std::uint32_t size = in.u32("chunk size");
    if (id == "fmt ") {
      if (size < 16) throw FormatError(origin + ": fmt chunk too small");
      std::uint16_t format = in.u16("fmt format");
      channels = in.u16("fmt channels");
      rate = in.u32("fmt sample rate");
      in.u32("fmt byte rate");
      in.u16("fmt block align");
      bits = in.u16("fmt bits per sample");
      std::size_t consumed = 16;
      if (format == 0xFFFE && size >= 40) {
        in.u16("fmt extension size");
        in.u16("fmt valid bits");
        in.u32("fmt channel mask");
        format = in.u16("fmt sub-format");
        in.skip(14, "fmt sub-format guid");
        consumed = 40;
      }
      in.skip(size - consumed + (size & 1), "fmt chunk");
      if (format != 1 || bits != 16) {
        throw FormatError(origin + ": fmt chunk declares unsupported encoding (format " + std::to_string(format) +
                          ", " + std::to_string(bits) + " bits); only 16-bit PCM is supported");
      }
      if (channels == 0) throw FormatError(origin + ": fmt chunk declares zero channels");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(origin + ": data chunk before fmt chunk");
      const auto payload = in.take(size, "data chunk");
      const std::size_t frames = size / (2u * channels);
      PcmAudio audio;
      audio.sample_rate = rate;
      audio.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t at = (f * channels + c) * 2;
          const auto raw = static_cast<std::int16_t>(payload[at] | (payload[at + 1] << 8));
          acc += static_cast<double>(raw) / 32768.0;
        }
        audio.samples[f] = acc / static_cast<double>(channels);
      }
      return audio;
    } else {
      in.skip(size + (size & 1), "chunk payload");
    }
  }
}

PcmAudio load_wav(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_wav(bytes, path.string());
}

void write_wav(const std::filesystem::path& path, std::span<const double> samples, std::uint32_t sample_rate) {
  std::vector<std::uint8_t> out;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  io::put_bytes(out, "RIFF");
  io::put_u32(out, 36 + data_bytes);
  io::put_bytes(out, "WAVEfmt ");
  io::put_u32(out, 16);
  io::put_u16(out, 1);
  io::put_u16(out, 1);
  io::put_u32(out, sample_rate);
  io::put_u32(out, sample_rate * 2);
  io::put_u16(out, 2);
  io::put_u16(out, 16);
  io::put_bytes(out, "data");
  io::put_u32(out, data_bytes);
  for (double s : samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(std::min(clamped * 32768.0, 32767.0)));
    io::put_u16(out, static_cast<std::uint16_t>(q));
  }
  io::write_file(path, out);
}

std::vector<std::vector<double>> frame_signal(std::span<const double> samples, std::uint32_t sample_rate) {
  const auto [window, hop] = frame_layout(sample_rate);
  if (samples.size() < window) {
    throw TooShortError("signal of " + std::to_string(samples.size()) + " samples is shorter than one " +
                        std::to_string(window) + "-sample window");
  }
  const std::size_t count = 1 + (samples.size() - window) / hop;
  std::vector<double> hann(window);
  for (std::size_t n = 0; n < window; ++n)
    hann[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(window - 1));
  std::vector<std::vector<double>> frames(count, std::vector<double>(window));
  for (std::size_t f = 0; f < count; ++f)
    for (std::size_t n = 0; n < window; ++n) frames[f][n] = samples[f * hop + n] * hann[n];
  return frames;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t fft_size_for(std::size_t window) { return std::bit_ceil(window); }

std::vector<double> mel_filterbank(std::uint32_t sample_rate, std::size_t fft_size) {
  const std::size_t bins = fft_size / 2 + 1;
  const double nyquist = static_cast<double>(sample_rate) / 2.0;
  const double top = hz_to_mel(nyquist);
  std::vector<double> edges(kMelBins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(kMelBins + 1));
  std::vector<double> weights(kMelBins * bins, 0.0);
  for (std::size_t m = 0; m < kMelBins; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * static_cast<double>(sample_rate) / static_cast<double>(fft_size);
      const double rise = (f - lo) / (center - lo);
      const double fall = (hi - f) / (hi - center);
      weights[m * bins + k] = std::max(0.0, std::min(rise, fall));
    }
  }
  return weights;
}

MelMatrix log_mel(const std::vector<std::vector<double>>& frames, std::uint32_t sample_rate) {
  if (frames.empty()) throw ValidationError("log_mel: no frames");
  const std::size_t window = frames[0].size();
  const std::size_t n = fft_size_for(window);
  const std::size_t bins = n / 2 + 1;
  const auto filters = mel_filterbank(sample_rate, n);

  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard lock(g_fftw_planner);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
  }

  MelMatrix mel;
  mel.rows = frames.size();
  mel.sample_rate = sample_rate;
  mel.values.resize(mel.rows * kMelBins);
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    std::fill(in, in + n, 0.0);
    std::copy(frames[f].begin(), frames[f].end(), in);
    fftw_execute_dft_r2c(plan, in, out);
    for (std::size_t k = 0; k < bins; ++k) power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    for (std::size_t m = 0; m < kMelBins; ++m) {
      double energy = 0.0;
      for (std::size_t k = 0; k < bins; ++k) energy += filters[m * bins + k] * power[k];
      mel.values[f * kMelBins + m] = std::log(energy + kLogFloor);
    }
  }

  {
    std::lock_guard lock(g_fftw_planner);
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return mel;
}

MelMatrix normalize_and_prepend_dummy(const MelMatrix& mel) {
  if (mel.has_dummy) throw ContractError("features already carry a dummy row");
  if (mel.rows == 0) throw ValidationError("normalize: empty feature matrix");
  MelMatrix out;
  out.rows = mel.rows + 1;
  out.cols = mel.cols;
  out.sample_rate = mel.sample_rate;
  out.has_dummy = true;
  out.values.assign(out.rows * out.cols, 0.0);
  const double count = static_cast<double>(mel.rows);
  for (std::size_t c = 0; c < mel.cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < mel.rows; ++r) mean += mel.at(r, c);
    mean /= count;
    double var = 0.0;
    for (std::size_t r = 0; r < mel.rows; ++r) var += (mel.at(r, c) - mean) * (mel.at(r, c) - mean);
    var /= count;
    const double sd = std::sqrt(var);
    for (std::size_t r = 0; r < mel.rows; ++r) {
      // Constant channels (e.g. filters with no FFT bin) normalize to zero.
      out.values[(r + 1) * out.cols + c] = sd > 1e-8 ? (mel.at(r, c) - mean) / sd : 0.0;
    }
  }
  return out;
}

MelMatrix featurize_wav(const std::filesystem::path& path) {
  const PcmAudio audio = load_wav(path);
  return normalize_and_prepend_dummy(log_mel(frame_signal(audio.samples, audio.sample_rate), audio.sample_rate));
}

std::vector<std::uint8_t> encode_features(const MelMatrix& mel) {
  std::vector<std::uint8_t> out;
  out.reserve(12 + mel.values.size() * 4);
  io::put_bytes(out, "MEL1");
  io::put_u32(out, static_cast<std::uint32_t>(mel.rows));
  io::put_u32(out, static_cast<std::uint32_t>(mel.cols));
  for (double v : mel.values) io::put_f32(out, static_cast<float>(v));
  return out;
}

MelMatrix decode_features(std::span<const std::uint8_t> bytes, const std::string& origin) {
  io::Reader in(bytes, origin);
  if (in.str(4, "magic") != "MEL1") throw FormatError(origin + ": bad magic, expected MEL1");
  MelMatrix mel;
  mel.rows = in.u32("rows");
  mel.cols = in.u32("cols");
  if (mel.cols != kMelBins) {
    throw FormatError(origin + ": expected " + std::to_string(kMelBins) + " columns, found " +
                      std::to_string(mel.cols));
  }
  if (mel.rows == 0) throw FormatError(origin + ": zero rows");
  mel.values.resize(mel.rows * mel.cols);
  for (auto& v : mel.values) v = static_cast<double>(in.f32("feature payload"));
  if (in.remaining() != 0) throw FormatError(origin + ": trailing bytes after feature payload");
  mel.has_dummy = true;
  return mel;
}

MelMatrix read_features(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_features(bytes, path.string());
}

}  // namespace melformer
