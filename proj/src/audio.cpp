// Copyright (c) 2026 The freesvc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "freesvc/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

namespace freesvc::audio {

namespace {

uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t read_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::ofstream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
void put_u16(std::ofstream& out, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

// Windowed-sinc kernel sampled finely on [0, kZeroCrossings].
constexpr int kZeroCrossings = 32;
constexpr int kTableResolution = 512;
constexpr double kKaiserBeta = 8.6;

const std::vector<double>& sinc_table() {
  static const std::vector<double> table = [] {
    const int n = kZeroCrossings * kTableResolution + 2;
    std::vector<double> t(n, 0.0);
    const double denom = std::cyl_bessel_i(0.0, kKaiserBeta);
    for (int i = 0; i < n; ++i) {
      const double u = static_cast<double>(i) / kTableResolution;
      if (u >= kZeroCrossings) break;
      const double r = u / kZeroCrossings;
      const double window =
          std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - r * r)) / denom;
      const double sinc =
          u == 0.0 ? 1.0 : std::sin(M_PI * u) / (M_PI * u);
      t[i] = sinc * window;
    }
    return t;
  }();
  return table;
}

double kernel(double u) {
  u = std::abs(u);
  if (u >= kZeroCrossings) return 0.0;
  const auto& t = sinc_table();
  const double pos = u * kTableResolution;
  const int64_t i = static_cast<int64_t>(pos);
  const double frac = pos - static_cast<double>(i);
  return t[i] + frac * (t[i + 1] - t[i]);
}

double hz_to_mel(double hz) {
  const double f_sp = 200.0 / 3.0;
  const double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (hz >= min_log_hz) return min_log_mel + std::log(hz / min_log_hz) / logstep;
  return hz / f_sp;
}

double mel_to_hz(double mel) {
  const double f_sp = 200.0 / 3.0;
  const double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  if (mel >= min_log_mel) return min_log_hz * std::exp(logstep * (mel - min_log_mel));
  return f_sp * mel;
}

void check_synthesis_input(const Waveform& w) {
  if (w.sample_rate != kSynthesisRate) {
    throw Error("spectrogram expects 24000 Hz audio, got " +
                std::to_string(w.sample_rate));
  }
  if (w.size() < kWindow) {
    throw Error("waveform shorter than one window (" +
                std::to_string(w.size()) + " < " + std::to_string(kWindow) +
                " samples)");
  }
}

}  // namespace

Waveform read_wav(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error("missing file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty()) throw Error("zero-length audio: " + path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error("unsupported encoding (not a RIFF/WAVE file): " + path);
  }
  int format = -1, channels = 0, rate = 0, bits = 0;
  const unsigned char* data = nullptr;
  size_t data_size = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const uint32_t size = read_u32(chunk + 4);
    const size_t body = pos + 8;
    const size_t avail = std::min<size_t>(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0 && avail >= 16) {
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = static_cast<int>(read_u32(chunk + 12));
      bits = read_u16(chunk + 22);
      if (format == 0xFFFE && avail >= 26) format = read_u16(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = avail;
    }
    pos = body + size + (size & 1);
  }
  if (format < 0 || channels <= 0 || rate <= 0) {
    throw Error("unsupported encoding (missing fmt chunk): " + path);
  }
  const bool pcm = format == 1 && (bits == 16 || bits == 24 || bits == 32);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) {
    throw Error("unsupported encoding (format " + std::to_string(format) +
                ", " + std::to_string(bits) + " bits): " + path);
  }
  const size_t bytes_per = bits / 8;
  const size_t frames = data ? data_size / (bytes_per * channels) : 0;
  if (frames == 0) throw Error("zero-length audio: " + path);

  Waveform w;
  w.sample_rate = rate;
  w.samples.assign(frames, 0.0);
  for (size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * bytes_per;
      double v = 0.0;
      if (flt) {
        float f;
        std::memcpy(&f, p, 4);
        v = f;
      } else if (bits == 16) {
        v = static_cast<int16_t>(read_u16(p)) / 32768.0;
      } else if (bits == 24) {
        int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
        if (s & 0x800000) s |= ~0xFFFFFF;
        v = s / 8388608.0;
      } else {
        v = static_cast<int32_t>(read_u32(p)) / 2147483648.0;
      }
      acc += v;
    }
    w.samples[i] = acc / channels;
  }
  double peak = 0.0;
  for (double v : w.samples) {
    if (!std::isfinite(v)) throw Error("non-finite sample in " + path);
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 1.0) {
    for (double& v : w.samples) v /= peak;
  }
  return w;
}

Waveform load_waveform(const std::string& path, int target_rate) {
  if (target_rate != kContentRate && target_rate != kSynthesisRate) {
    throw Error("target rate must be 16000 or 24000, got " +
                std::to_string(target_rate));
  }
  return resample(read_wav(path), target_rate);
}

void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  out.write("RIFF", 4);
  put_u32(out, 36 + n * 2);
  out.write("WAVEfmt ", 8);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<uint32_t>(w.sample_rate));
  put_u32(out, static_cast<uint32_t>(w.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, n * 2);
  for (double v : w.samples) {
    const double c = std::clamp(v, -1.0, 1.0);
    const auto s = static_cast<int16_t>(std::lround(c * 32767.0));
    put_u16(out, static_cast<uint16_t>(s));
  }
  if (!out) throw Error("write failed: " + path);
}

std::vector<double> resample_ratio(std::span<const double> x, double ratio) {
  if (!(ratio > 0.0)) throw Error("resample ratio must be positive");
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t n_out = std::llround(static_cast<double>(n) * ratio);
  const double cutoff = std::min(1.0, ratio);
  const double half_width = kZeroCrossings / cutoff;
  std::vector<double> y(n_out, 0.0);
  for (int64_t j = 0; j < n_out; ++j) {
    const double t = static_cast<double>(j) / ratio;
    const int64_t lo = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(t - half_width)));
    const int64_t hi = std::min<int64_t>(n - 1, static_cast<int64_t>(std::floor(t + half_width)));
    double acc = 0.0;
    for (int64_t k = lo; k <= hi; ++k) acc += x[k] * kernel((t - k) * cutoff);
    y[j] = acc * cutoff;
  }
  return y;
}

Waveform resample(const Waveform& w, int new_rate) {
  if (new_rate <= 0) throw Error("resample: non-positive rate");
  if (w.sample_rate <= 0) throw Error("resample: waveform has no sample rate");
  if (new_rate == w.sample_rate) return w;
  Waveform out;
  out.sample_rate = new_rate;
  out.samples = resample_ratio(
      w.samples, static_cast<double>(new_rate) / static_cast<double>(w.sample_rate));
  return out;
}

Matrix stft_frames(std::span<const double> samples, int n_fft, int hop,
                   int win_length) {
  ag::NoGradGuard guard;
  const int64_t n = static_cast<int64_t>(samples.size());
  ag::Tensor x = ag::Tensor::from({1, 1, n}, {samples.begin(), samples.end()});
  ag::Tensor mag = ag::stft_magnitude(x, n_fft, hop, win_length);
  const int64_t bins = mag.dim(1), frames = mag.dim(2);
  Matrix out(frames, bins);
  const auto& v = mag.values();
  for (int64_t k = 0; k < bins; ++k)
    for (int64_t f = 0; f < frames; ++f) out(f, k) = v[k * frames + f];
  return out;
}

LinearSpectrogram linear_spectrogram(const Waveform& w) {
  check_synthesis_input(w);
  LinearSpectrogram spec;
  spec.magnitudes = stft_frames(w.samples, kFftSize, kHop, kWindow);
  return spec;
}

Matrix mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin,
                      double fmax) {
  const int bins = n_fft / 2 + 1;
  Matrix fb(n_mels, bins);
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> hz(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) {
    hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  }
  for (int m = 0; m < n_mels; ++m) {
    const double enorm = 2.0 / (hz[m + 2] - hz[m]);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      const double lower = (f - hz[m]) / (hz[m + 1] - hz[m]);
      const double upper = (hz[m + 2] - f) / (hz[m + 2] - hz[m + 1]);
      fb(m, k) = std::max(0.0, std::min(lower, upper)) * enorm;
    }
  }
  return fb;
}

MelSpectrogram mel_spectrogram(const Waveform& w, int n_mels) {
  check_synthesis_input(w);
  ag::NoGradGuard guard;
  ag::Tensor x = ag::Tensor::from({1, 1, w.size()}, w.samples);
  ag::Tensor lm = log_mel(x, n_mels);
  const int64_t frames = lm.dim(2);
  MelSpectrogram mel;
  mel.log_mel = Matrix(frames, n_mels);
  const auto& v = lm.values();
  for (int m = 0; m < n_mels; ++m)
    for (int64_t f = 0; f < frames; ++f) mel.log_mel(f, m) = v[m * frames + f];
  return mel;
}

ag::Tensor log_mel(const ag::Tensor& audio, int n_mels) {
  thread_local int cached_mels = -1;
  thread_local ag::Tensor fb;
  if (cached_mels != n_mels) {
    Matrix m = mel_filterbank(kSynthesisRate, kFftSize, n_mels, 0.0,
                              kSynthesisRate / 2.0);
    fb = ag::Tensor::from({m.rows, m.cols}, m.data);
    cached_mels = n_mels;
  }
  ag::Tensor mag = ag::stft_magnitude(audio, kFftSize, kHop, kWindow);
  return ag::log_clamp_min(ag::left_matmul(fb, mag), kLogFloor);
}

}  // namespace freesvc::audio
