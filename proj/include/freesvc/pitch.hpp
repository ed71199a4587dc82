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
#include <string>
#include <vector>

#include "freesvc/audio.hpp"

namespace freesvc::pitch {

inline constexpr double kDefaultFmin = 50.0;
inline constexpr double kDefaultFmax = 1100.0;
inline constexpr int kPitchBins = 256;
inline constexpr int kAnalysisWindow = 1024;

// Per-frame fundamental frequency; f0_hz is exactly 0 on unvoiced frames.
struct F0Contour {
  std::vector<double> f0_hz;
  std::vector<bool> voiced;
  int frame_hop = audio::kHop;
  double f_min = kDefaultFmin;
  double f_max = kDefaultFmax;

  int64_t size() const { return static_cast<int64_t>(f0_hz.size()); }
  int64_t voiced_count() const;
  // Throws when voicing and frequencies disagree or leave [f_min, f_max].
  void validate() const;
};

// bins[i] in [0, 255]; 0 marks an unvoiced frame.
struct CoarsePitch {
  std::vector<int> bins;
  int64_t size() const { return static_cast<int64_t>(bins.size()); }
};

// YIN-style estimator on 16 kHz audio: cumulative-mean-normalised difference
// over a 1024-sample window every 320 samples, frames centred at i * 320.
F0Contour extract_f0(const audio::Waveform& w, double f_min = kDefaultFmin,
                     double f_max = kDefaultFmax);

// Text contour, one frame per line: "<f0_hz> <voiced 0|1>". Voiced values
// outside [f_min, f_max] are clamped into range.
F0Contour load_external_f0(const std::string& path, int64_t expected_frames);
void save_f0(const std::string& path, const F0Contour& c);

CoarsePitch quantize_pitch(const F0Contour& c, double f_min = kDefaultFmin,
                           double f_max = kDefaultFmax,
                           int n_bins = kPitchBins);
// Centre frequency of a voiced bin (inverse of the quantiser's grid).
double bin_to_hz(int bin, double f_min = kDefaultFmin,
                 double f_max = kDefaultFmax, int n_bins = kPitchBins);

F0Contour transpose_f0(const F0Contour& c, double semitones);

// Nearest-frame mapping of a contour onto a grid with `frames` entries.
F0Contour retime(const F0Contour& c, int64_t frames);

}  // namespace freesvc::pitch
