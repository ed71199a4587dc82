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
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "freesvc/audio.hpp"
#include "freesvc/content.hpp"
#include "freesvc/matrix.hpp"
#include "freesvc/nn.hpp"
#include "freesvc/pitch.hpp"
#include "freesvc/speaker.hpp"

namespace freesvc::svc {

using ag::Tensor;

inline constexpr int kSpecBins = audio::kFftSize / 2 + 1;
inline constexpr double kLogStdMin = -9.0;
inline constexpr double kLogStdMax = 2.0;
// Sine harmonics of the coarse pitch fed to the decoder as excitation.
inline constexpr int kExcitationHarmonics = 8;

struct ModelConfig {
  int inter_channels = 192;  // C, latent channels
  int hidden = 192;
  int content_dim = 256;
  int speaker_dim = speaker::kEmbeddingDim;
  int lang_dim = speaker::kLanguageDim;
  bool use_language = true;
  std::vector<std::string> languages = {"en"};
  int kernel = 5;
  int posterior_layers = 16;
  int flow_blocks = 4;
  int flow_layers = 4;
  int prior_layers = 6;
  std::vector<int> upsample_rates = {8, 8, 5};
  std::vector<int> upsample_kernels = {16, 16, 11};
  int decoder_channels = 512;
  int resblock_kernel = 3;
  std::vector<int> resblock_dilations = {1, 3};
  std::vector<int> mpd_periods = {2, 3, 5, 7, 11};
  int msd_scales = 3;
  int disc_channels = 32;
  int segment_frames = 32;
  uint64_t seed = 1234;

  // C = 32 desk-scale preset used by the toy runs.
  static ModelConfig desk();
  void validate() const;
};

struct PosteriorOutput {
  Tensor z, mean, log_std;  // [B, C, F]
  Tensor eps;               // recorded noise, z = mean + exp(log_std) * eps
};

struct PriorOutput {
  Tensor mean, log_std;  // [B, C, F]
};

struct FlowOutput {
  Tensor z;                        // [B, C, F]
  Tensor log_det;                  // [1], sum of every coupling log-scale
  std::vector<Tensor> log_scales;  // one [B, C/2, F] tensor per block
};

class PosteriorEncoder {
 public:
  PosteriorEncoder() = default;
  PosteriorEncoder(nn::ParameterSet& ps, const ModelConfig& cfg);
  // spec [B, 641, F], g [B, E, 1].
  PosteriorOutput forward(const Tensor& spec, const Tensor& g,
                          std::mt19937_64& rng) const;
  PosteriorOutput forward(const Tensor& spec, const Tensor& g,
                          const Tensor& eps) const;

 private:
  int channels_ = 0;
  nn::Conv1d pre_, proj_;
  nn::WaveNet net_;
};

// Affine couplings. Block i transforms one half of the channels conditioned
// on the other half and the speaker; even blocks transform the second half,
// odd blocks the first. The output layer of every coupling starts at zero,
// so a fresh stack is the identity.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(nn::ParameterSet& ps, const ModelConfig& cfg);

  FlowOutput forward(const Tensor& z, const Tensor& g) const;

  // Graph-free single-item passes in precision T. z is [C, frames] row-major,
  // g has E values.
  template <typename T>
  std::vector<T> forward_eval(const std::vector<T>& z, int64_t frames,
                              std::span<const double> g, T* log_det) const;
  template <typename T>
  std::vector<T> inverse_eval(const std::vector<T>& z, int64_t frames,
                              std::span<const double> g) const;

  int blocks() const { return static_cast<int>(blocks_.size()); }
  int channels() const { return channels_; }

 private:
  struct Block {
    nn::Conv1d pre, post;
    nn::WaveNet net;
  };
  Tensor coupling_stats(const Block& b, const Tensor& x, const Tensor& g) const;
  template <typename T>
  void stats_eval(const Block& b, const std::vector<T>& cond, int64_t frames,
                  std::span<const double> g, std::vector<T>& m,
                  std::vector<T>& logs) const;

  int channels_ = 0;
  std::vector<Block> blocks_;
};

class PriorEncoder {
 public:
  PriorEncoder() = default;
  PriorEncoder(nn::ParameterSet& ps, const ModelConfig& cfg);
  // content [B, Dc, F]; pitch bins, B * F values in batch-major order;
  // lang [B, E_lang] or undefined when language conditioning is off.
  PriorOutput forward(const Tensor& content, std::span<const int> pitch_bins,
                      const Tensor& lang) const;

 private:
  int channels_ = 0, hidden_ = 0;
  bool use_language_ = false;
  nn::Conv1d pre_, proj_;
  Tensor pitch_table_, lang_proj_;
  std::vector<nn::Conv1d> layers_;
};

// Upsampling generator: latent frames -> 24 kHz samples (x320). The coarse
// pitch enters as a harmonic sine excitation built at the output rate and injected
// at every upsampling stage through strided convolutions.
class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterSet& ps, const ModelConfig& cfg);
  // z [B, C, m], g [B, E, 1], excitation [B, H, 320 m] -> [B, 1, 320 m].
  Tensor forward(const Tensor& z, const Tensor& g, const Tensor& excitation) const;

 private:
  struct Stage {
    nn::ConvTranspose1d up;
    nn::Conv1d source;
    std::vector<nn::Conv1d> res;
  };
  nn::Conv1d pre_, cond_, post_;
  std::vector<Stage> stages_;
};

// Phase-continuous sines at the first kExcitationHarmonics multiples of each
// frame's coarse pitch frequency, one channel per harmonic. A channel is
// silent where the bin is 0 or its frequency reaches Nyquist. bins holds
// `batch` rows of `frames` values; the result is [batch, H, frames * 320].
Tensor pitch_excitation(std::span<const int> bins, int64_t batch, int64_t frames);

struct DiscOutput {
  Tensor score;
  std::vector<Tensor> features;
};

// Multi-period (folded 1-D convolutions) and multi-scale (average-pooled)
// discriminators.
class Discriminators {
 public:
  Discriminators() = default;
  Discriminators(nn::ParameterSet& ps, const ModelConfig& cfg);
  std::vector<DiscOutput> forward(const Tensor& audio) const;

 private:
  struct Stack {
    std::vector<nn::Conv1d> layers;
    nn::Conv1d post;
    int period = 0;  // 0 for a scale discriminator
    int pool_steps = 0;
  };
  std::vector<Stack> stacks_;
};

class SvcModel {
 public:
  explicit SvcModel(ModelConfig cfg);
  SvcModel(const SvcModel&) = delete;
  SvcModel& operator=(const SvcModel&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& generator_params() { return gen_; }
  const nn::ParameterSet& generator_params() const { return gen_; }
  nn::ParameterSet& discriminator_params() { return disc_; }
  const nn::ParameterSet& discriminator_params() const { return disc_; }

  const PosteriorEncoder& posterior() const { return posterior_; }
  const FlowStack& flow() const { return flow_; }
  const PriorEncoder& prior() const { return prior_; }
  const Decoder& decoder() const { return decoder_; }
  const Discriminators& discriminators() const { return discriminators_; }
  const speaker::LanguageTable& languages() const { return languages_; }

  // [B, E_lang] language rows, or an undefined tensor without conditioning.
  Tensor language_rows(std::span<const int> ids) const;

  // Conversion refuses a model that was neither trained nor loaded.
  bool ready() const { return ready_; }
  void set_ready(bool r) { ready_ = r; }

 private:
  ModelConfig config_;
  nn::ParameterSet gen_, disc_;
  speaker::LanguageTable languages_;
  PosteriorEncoder posterior_;
  FlowStack flow_;
  PriorEncoder prior_;
  Decoder decoder_;
  Discriminators discriminators_;
  bool ready_ = false;
};

// Linear interpolation along time to exactly `target_frames` rows; the first
// and last rows stay anchored.
Matrix align_content(const Matrix& f, int64_t target_frames);

// One training batch on the 24 kHz frame grid.
struct ModelInput {
  Tensor spec;             // [B, 641, F] linear magnitudes
  Tensor content;          // [B, Dc, F] aligned content features
  std::vector<int> pitch;  // B * F coarse bins
  Tensor speaker;          // [B, E, 1]
  std::vector<int> lang;   // B language indices
  Tensor audio;            // [B, 1, 320 F]
  int64_t batch() const { return spec.dim(0); }
  int64_t frames() const { return spec.dim(2); }
};

struct GeneratorOutput {
  PosteriorOutput posterior;
  PriorOutput prior;
  FlowOutput flow;
  Tensor fake, real;            // [B, 1, 320 * segment]
  std::vector<int64_t> starts;  // segment start frame per item
};

GeneratorOutput generator_forward(const SvcModel& model, const ModelInput& in,
                                  std::mt19937_64& rng);

// VITS-style KL estimate: the mean over elements of
// logs_p - logs_q - 1/2 + (z_p - m_p)^2 exp(-2 logs_p) / 2, minus log_det
// divided by the element count. The posterior entropy enters through its
// expectation, so the estimate is unbiased for the true KL.
Tensor kl_term(const Tensor& z_p, const Tensor& logs_q, const Tensor& m_p,
               const Tensor& logs_p, const Tensor& log_det);
Tensor kl_term(const PosteriorOutput& post, const PriorOutput& prior,
               const Tensor& z_transformed, const Tensor& log_det);

Tensor discriminator_loss(const std::vector<DiscOutput>& real,
                          const std::vector<DiscOutput>& fake);
Tensor generator_adv_loss(const std::vector<DiscOutput>& fake);
Tensor feature_matching_loss(const std::vector<DiscOutput>& real,
                             const std::vector<DiscOutput>& fake);
Tensor mel_l1_loss(const Tensor& real, const Tensor& fake);

inline constexpr double kMelWeight = 45.0;
inline constexpr double kFeatureMatchingWeight = 2.0;

struct GanLosses {
  Tensor d_loss;      // fake is detached
  Tensor g_adv;
  Tensor feat_match;  // real features are detached
  Tensor mel_l1;
};

// real, fake [B, 1, T]; both are cropped to the shorter length.
GanLosses gan_losses(const Discriminators& d, const Tensor& real, const Tensor& fake);

struct ConvertOptions {
  double key_shift = 0.0;
  double noise_scale = 0.35;
  std::string language;  // empty selects the first registered language
  uint64_t seed = 0;
};

// Synthesis from prepared inputs on the 24 kHz grid: content [F, Dc] and F
// coarse pitch bins.
audio::Waveform synthesize(const SvcModel& model, const Matrix& content,
                           std::span<const int> pitch_bins,
                           const speaker::Embedding& target,
                           const ConvertOptions& options);

// Full conversion of a source recording to the target voice.
audio::Waveform convert(const SvcModel& model,
                        const content::ContentBackbone& backbone,
                        const audio::Waveform& source,
                        const speaker::Embedding& target,
                        const ConvertOptions& options);

}  // namespace freesvc::svc
