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

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freesvc/matrix.hpp"
#include "freesvc/tensor.hpp"

namespace freesvc::audio {

inline constexpr int kSynthesisRate = 24000;
inline constexpr int kContentRate = 16000;
inline constexpr int kHop = 320;
inline constexpr int kWindow = 1280;
inline constexpr int kFftSize = 1280;
inline constexpr int kMelChannels = 80;
inline constexpr double kLogFloor = 1e-5;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// Frames produced by center-padded analysis with the given hop.
inline int64_t frame_count(int64_t num_samples, int hop = kHop) {
  return num_samples / hop + 1;
}

// Reads PCM16 / PCM24 / PCM32 / float32 WAV at its native rate; channels are
// averaged to mono and the result is peak-normalised only when it clips.
Waveform read_wav(const std::string& path);
Waveform load_waveform(const std::string& path, int target_rate);
// 16-bit PCM, samples clamped to [-1, 1].
void write_wav(const std::string& path, const Waveform& w);

// Kaiser-windowed sinc interpolation; output length round(n * new / old).
Waveform resample(const Waveform& w, int new_rate);
// Same kernel for an arbitrary positive ratio (output/input sample count).
std::vector<double> resample_ratio(std::span<const double> x, double ratio);

// frames x bins magnitudes of a Hann-window STFT (fft 1280, hop 320).
struct LinearSpectrogram {
  Matrix magnitudes;
  int frame_hop = kHop;
  int window_length = kWindow;
  int64_t frames() const { return magnitudes.rows; }
  int64_t bins() const { return magnitudes.cols; }
};

struct MelSpectrogram {
  Matrix log_mel;  // frames x n_mels
  int64_t frames() const { return log_mel.rows; }
};

LinearSpectrogram linear_spectrogram(const Waveform& w);
MelSpectrogram mel_spectrogram(const Waveform& w, int n_mels = kMelChannels);

// Generic magnitude STFT (frames x bins) used by other front ends.
Matrix stft_frames(std::span<const double> samples, int n_fft, int hop,
                   int win_length);

// Slaney-style mel filterbank, [n_mels, n_fft/2 + 1].
Matrix mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin,
                      double fmax);

// Differentiable log-mel of a batch [B, 1, T] -> [B, n_mels, frames] on the
// synthesis front end (24 kHz, fft 1280, hop 320).
ag::Tensor log_mel(const ag::Tensor& audio, int n_mels = kMelChannels);

}  // namespace freesvc::audio
