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
#include <random>
#include <string>
#include <vector>

#include "freesvc/audio.hpp"
#include "freesvc/matrix.hpp"
#include "freesvc/nn.hpp"

namespace freesvc::content {

using ag::Tensor;

struct BackboneConfig {
  int channels = 32;   // hidden width of the strided stack
  int output_dim = 64; // D, the content feature dimension
  uint64_t seed = 1;
};

// Strided 1-D convolution stack over 16 kHz audio. Six layers with strides
// 4, 4, 4, 5, 1, 1 give one frame per 320 samples. The input is padded with
// half a hop on the left and filled (or trimmed) to F * 320 samples so that
// F = floor(n / 320) + 1 frames come out.
class ContentBackbone {
 public:
  static constexpr int kLayers = 6;

  explicit ContentBackbone(BackboneConfig config = {});

  // [B, 1, T] raw samples -> [B, D, floor(T / 320) + 1].
  Tensor forward(const Tensor& audio) const;

  const BackboneConfig& config() const { return config_; }
  int dim() const { return config_.output_dim; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Prefix of every parameter of layer i (0-based).
  static std::string layer_prefix(int i);
  // Sets trainable flags so that only the last `count` layers learn.
  void train_last_layers(int count);
  bool layer_trainable(int i) const;

 private:
  BackboneConfig config_;
  nn::ParameterSet params_;
  std::vector<nn::Conv1d> layers_;
};

// Content features of one waveform, frames x D. Evaluation mode: no graph is
// recorded and the result is deterministic.
Matrix backbone_features(const ContentBackbone& b, const audio::Waveform& w);

// Inference content path. The quantisation head never takes part.
Matrix extract_content(const ContentBackbone& b, const audio::Waveform& w);

// Text matrix: a header line "frames dim" followed by one line per frame.
Matrix load_feature_file(const std::string& path);
void save_feature_file(const std::string& path, const Matrix& m);

struct SpinHeadConfig {
  int codebook_size = 64;     // K
  int code_dim = 32;          // d
  double temperature = 0.1;   // assignment softmax temperature
  double target_temperature = 0.05;
  uint64_t seed = 2;
};

// Projection, L2 normalisation and a normalised codebook. Assignments are the
// softmax of cosine similarities divided by the temperature.
class SpinHead {
 public:
  SpinHead(int input_dim, SpinHeadConfig config = {});

  // [N, D] features -> [N, K] cosine similarities.
  Tensor similarities(const Tensor& features) const;

  const SpinHeadConfig& config() const { return config_; }
  int input_dim() const { return input_dim_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  Tensor codebook() const { return codebook_; }

 private:
  int input_dim_;
  SpinHeadConfig config_;
  nn::ParameterSet params_;
  nn::Linear projection_;
  Tensor codebook_;
};

// frames x K matrix of probability rows.
Matrix spin_assignments(const SpinHead& h, const Matrix& features);
Tensor spin_assignments(const SpinHead& h, const Tensor& features);

// Symmetric swapped-prediction cross-entropy between two aligned views.
// Targets of one view are the sharpened, gradient-stopped assignments of the
// other. Frame counts are truncated to the shorter view. Returns the mean of
// -sum_k t_k log p_k over both directions and all frames.
Tensor spin_loss(const SpinHead& h, const Tensor& features_a,
                 const Tensor& features_b);
double spin_loss(const SpinHead& h, const Matrix& features_a,
                 const Matrix& features_b);

// Sharpened assignments used as targets, [N, K], outside the graph.
Tensor spin_targets(const SpinHead& h, const Tensor& features);

// The same cross-entropy with explicit targets for each view. The gradient of
// spin_loss is the gradient of this function with the targets held fixed.
Tensor spin_cross_entropy(const SpinHead& h, const Tensor& features_a,
                          const Tensor& features_b, const Tensor& targets_a,
                          const Tensor& targets_b);

// exp of the entropy of the mean assignment row.
double codebook_perplexity(const Matrix& assignments);

// Pitch and formant shift by `semitones` through resampling, time-stretched
// back to the original length by WSOLA, then scaled by `gain`.
audio::Waveform shift_pitch(const audio::Waveform& w, double semitones,
                            double gain = 1.0);

// Random view: a shift of +-[1, 4] semitones and a gain in [0.7, 1.0].
audio::Waveform speaker_perturb(const audio::Waveform& w, std::mt19937_64& rng);

// Waveform-similarity overlap-add stretch of `x` to exactly `out_length`
// samples without changing its pitch.
std::vector<double> wsola_stretch(const std::vector<double>& x,
                                  int64_t out_length, int sample_rate);

struct SpinConfig {
  int batch_size = 8;
  int epochs = 3;
  int max_steps = 0;          // > 0 caps the number of updates
  int segment_frames = 25;    // crop length in content frames
  double learning_rate = 1e-3;
  int trainable_layers = 2;
  // Weight of the codebook-usage term log K - H(mean assignment), which keeps
  // the swapped-prediction objective from collapsing onto one cluster.
  double diversity_weight = 1.0;
  uint64_t seed = 3;

  void validate() const;
};

// log K minus the entropy of the mean assignment row of [N, D] features.
Tensor codebook_usage_penalty(const SpinHead& h, const Tensor& features);

struct SpinReport {
  std::vector<double> losses;  // spin_loss of every update
  int64_t steps = 0;
};

// Fine-tunes the head and the last two backbone layers on perturbed view
// pairs. Every other backbone parameter is left bitwise unchanged.
SpinReport spin_finetune(ContentBackbone& b, SpinHead& h,
                         const std::vector<audio::Waveform>& dataset,
                         const SpinConfig& config);

// Mean cosine similarity between assignment rows of two aligned views.
double assignment_agreement(const SpinHead& h, const Matrix& features_a,
                            const Matrix& features_b);

}  // namespace freesvc::content
