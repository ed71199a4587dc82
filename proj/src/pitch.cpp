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

#include "freesvc/pitch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace freesvc::pitch {

namespace {

constexpr double kAperiodicityThreshold = 0.15;
constexpr double kSilenceRms = 1e-4;

}  // namespace

int64_t F0Contour::voiced_count() const {
  return std::count(voiced.begin(), voiced.end(), true);
}

void F0Contour::validate() const {
  if (f0_hz.size() != voiced.size()) {
    throw Error("contour: f0 and voicing lengths differ");
  }
  for (size_t i = 0; i < f0_hz.size(); ++i) {
    if (voiced[i] != (f0_hz[i] != 0.0)) {
      throw Error("contour: frame " + std::to_string(i) +
                  " violates f0 = 0 <=> unvoiced");
    }
    // Relative slack absorbs log/exp round-off at the range ends.
    if (voiced[i] && (f0_hz[i] < f_min * (1.0 - 1e-9) ||
                      f0_hz[i] > f_max * (1.0 + 1e-9))) {
      throw Error("contour: frame " + std::to_string(i) + " f0 " +
                  std::to_string(f0_hz[i]) + " outside range");
    }
  }
}

F0Contour extract_f0(const audio::Waveform& w, double f_min, double f_max) {
  if (w.sample_rate != audio::kContentRate) {
    throw Error("extract_f0 expects 16000 Hz audio, got " +
                std::to_string(w.sample_rate));
  }
  if (!(0.0 < f_min && f_min < f_max && f_max < 8000.0)) {
    throw Error("invalid frequency range");
  }
  if (w.size() < kAnalysisWindow) {
    throw Error("waveform too short for pitch analysis (" +
                std::to_string(w.size()) + " < " +
                std::to_string(kAnalysisWindow) + " samples)");
  }
  const double sr = w.sample_rate;
  const int tau_max = static_cast<int>(std::ceil(sr / f_min));
  const int tau_min = std::max(2, static_cast<int>(std::floor(sr / f_max)));
  if (tau_max + 2 >= kAnalysisWindow) throw Error("invalid frequency range");
  const int integ = kAnalysisWindow - tau_max - 1;

  F0Contour out;
  out.f_min = f_min;
  out.f_max = f_max;
  const int64_t frames = audio::frame_count(w.size());
  out.f0_hz.assign(frames, 0.0);
  out.voiced.assign(frames, false);

  std::vector<double> buf(kAnalysisWindow);
  std::vector<double> diff(tau_max + 2), cmnd(tau_max + 2);
  for (int64_t f = 0; f < frames; ++f) {
    const int64_t start = f * audio::kHop - kAnalysisWindow / 2;
    double energy = 0.0;
    for (int i = 0; i < kAnalysisWindow; ++i) {
      const int64_t p = start + i;
      buf[i] = (p >= 0 && p < w.size()) ? w.samples[p] : 0.0;
      energy += buf[i] * buf[i];
    }
    if (std::sqrt(energy / kAnalysisWindow) < kSilenceRms) continue;

    for (int tau = 1; tau <= tau_max + 1; ++tau) {
      double d = 0.0;
      for (int j = 0; j < integ; ++j) {
        const double e = buf[j] - buf[j + tau];
        d += e * e;
      }
      diff[tau] = d;
    }
    cmnd[0] = 1.0;
    double running = 0.0;
    for (int tau = 1; tau <= tau_max + 1; ++tau) {
      running += diff[tau];
      cmnd[tau] = running > 0.0 ? diff[tau] * tau / running : 1.0;
    }
    int best = -1;
    for (int tau = tau_min; tau <= tau_max; ++tau) {
      if (cmnd[tau] < kAperiodicityThreshold) {
        while (tau + 1 <= tau_max && cmnd[tau + 1] < cmnd[tau]) ++tau;
        best = tau;
        break;
      }
    }
    if (best < 0) continue;
    const double a = cmnd[best - 1], b = cmnd[best], c = cmnd[best + 1];
    const double denom = a - 2.0 * b + c;
    const double shift =
        std::abs(denom) > 1e-12 ? std::clamp(0.5 * (a - c) / denom, -0.5, 0.5)
                                : 0.0;
    const double f0 = sr / (best + shift);
    if (f0 < f_min || f0 > f_max) continue;
    out.f0_hz[f] = f0;
    out.voiced[f] = true;
  }
  return out;
}

F0Contour load_external_f0(const std::string& path, int64_t expected_frames) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open f0 file: " + path);
  F0Contour c;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double f0;
    int voiced;
    std::string extra;
    if (!(ls >> f0 >> voiced) || (ls >> extra) || (voiced != 0 && voiced != 1) ||
        !std::isfinite(f0)) {
      throw Error("malformed f0 file " + path + " at line " +
                  std::to_string(line_no));
    }
    if (f0 < 0.0) {
      throw Error("negative frequency at line " + std::to_string(line_no));
    }
    if ((voiced == 1) != (f0 > 0.0)) {
      throw Error("voicing disagrees with f0 at line " +
                  std::to_string(line_no));
    }
    if (voiced) f0 = std::clamp(f0, c.f_min, c.f_max);
    c.f0_hz.push_back(f0);
    c.voiced.push_back(voiced == 1);
  }
  if (c.size() != expected_frames) {
    throw Error("frame-count mismatch: " + path + " has " +
                std::to_string(c.size()) + " frames, expected " +
                std::to_string(expected_frames));
  }
  return c;
}

void save_f0(const std::string& path, const F0Contour& c) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write f0 file: " + path);
  out << std::setprecision(17);
  for (int64_t i = 0; i < c.size(); ++i) {
    out << c.f0_hz[i] << ' ' << (c.voiced[i] ? 1 : 0) << '\n';
  }
}

CoarsePitch quantize_pitch(const F0Contour& c, double f_min, double f_max,
                           int n_bins) {
  c.validate();
  const double lo = std::log(f_min), span = std::log(f_max) - lo;
  const int top = n_bins - 1;
  CoarsePitch out;
  out.bins.resize(c.size());
  for (int64_t i = 0; i < c.size(); ++i) {
    if (!c.voiced[i]) {
      out.bins[i] = 0;
      continue;
    }
    const double pos = (std::log(c.f0_hz[i]) - lo) / span * (top - 1);
    out.bins[i] = std::clamp(1 + static_cast<int>(std::lround(pos)), 1, top);
  }
  return out;
}

double bin_to_hz(int bin, double f_min, double f_max, int n_bins) {
  if (bin <= 0) return 0.0;
  const double lo = std::log(f_min), span = std::log(f_max) - lo;
  return std::exp(lo + static_cast<double>(bin - 1) / (n_bins - 2) * span);
}

F0Contour transpose_f0(const F0Contour& c, double semitones) {
  F0Contour out = c;
  const double factor = std::pow(2.0, semitones / 12.0);
  for (int64_t i = 0; i < out.size(); ++i) {
    if (out.voiced[i]) {
      out.f0_hz[i] = std::clamp(out.f0_hz[i] * factor, out.f_min, out.f_max);
    }
  }
  return out;
}

F0Contour retime(const F0Contour& c, int64_t frames) {
  if (c.size() == 0 || frames <= 0) throw Error("retime: empty contour");
  F0Contour out = c;
  out.f0_hz.assign(frames, 0.0);
  out.voiced.assign(frames, false);
  const double scale = frames > 1 ? static_cast<double>(c.size() - 1) /
                                        static_cast<double>(frames - 1)
                                  : 0.0;
  for (int64_t i = 0; i < frames; ++i) {
    const int64_t src = std::min<int64_t>(
        c.size() - 1, std::llround(static_cast<double>(i) * scale));
    out.f0_hz[i] = c.f0_hz[src];
    out.voiced[i] = c.voiced[src];
  }
  return out;
}

}  // namespace freesvc::pitch
