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
#include <map>
#include <span>
#include <string>
#include <vector>

#include "freesvc/audio.hpp"
#include "freesvc/nn.hpp"

namespace freesvc::speaker {

using ag::Tensor;

inline constexpr int kEmbeddingDim = 192;
inline constexpr int kLanguageDim = 64;

using Embedding = std::vector<double>;

struct EncoderConfig {
  int n_mels = 40;
  int n_fft = 512;
  int hop = 160;
  int hidden = 64;
  int dim = kEmbeddingDim;
  uint64_t seed = 11;
};

// Toy speaker encoder: 40-band log-mel frames at 16 kHz, a two-layer frame
// MLP, mean and standard-deviation pooling, and a linear map to E values.
// It is trained once with a speaker classifier and frozen afterwards.
class SpeakerEncoder {
 public:
  explicit SpeakerEncoder(EncoderConfig config = {});

  // [F, n_mels] log-mel frames of a 16 kHz waveform (no graph).
  Tensor features(const audio::Waveform& w) const;
  // [F, n_mels] -> [1, E].
  Tensor forward(const Tensor& features) const;

  const EncoderConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  EncoderConfig config_;
  nn::ParameterSet params_;
  nn::Linear frame1_, frame2_, out_;
  Matrix filterbank_;
};

// Deterministic embedding of at least 0.5 s of 16 kHz audio.
Embedding embed_speaker(const SpeakerEncoder& encoder, const audio::Waveform& w);

struct EncoderTrainConfig {
  int steps = 300;
  int batch_size = 8;
  double segment_seconds = 0.5;
  double learning_rate = 2e-3;
  uint64_t seed = 5;
};

// Trains the encoder with a temporary linear speaker classifier on random
// crops. `labels[i]` is the speaker index of `clips[i]`. Returns the loss of
// every update.
std::vector<double> train_speaker_encoder(SpeakerEncoder& encoder,
                                          const std::vector<audio::Waveform>& clips,
                                          const std::vector<int>& labels,
                                          const EncoderTrainConfig& config);

// Text file, one row per utterance: the utterance id, then E decimals.
std::map<std::string, Embedding> load_embedding_file(const std::string& path);
void save_embedding_file(const std::string& path,
                         const std::map<std::string, Embedding>& embeddings);

// Arithmetic mean, L2-normalised.
Embedding average_embedding(std::span<const Embedding> vs);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Ordered language registry and its trainable vectors, stored in the model's
// parameter set as "lang.table". With conditioning disabled no parameters are
// created and every registered language maps to the zero vector.
class LanguageTable {
 public:
  LanguageTable() = default;
  LanguageTable(nn::ParameterSet& ps, std::vector<std::string> codes,
                int dim = kLanguageDim, bool enabled = true);

  int index(const std::string& code) const;
  // Row of the table as a [1, dim] tensor in the graph.
  Tensor vector(const std::string& code) const;
  // [B, dim] rows for a batch of language indices.
  Tensor lookup(std::span<const int> ids) const;

  const std::vector<std::string>& codes() const { return codes_; }
  int dim() const { return dim_; }
  bool enabled() const { return enabled_; }

 private:
  std::vector<std::string> codes_;
  std::map<std::string, int> index_;
  int dim_ = kLanguageDim;
  bool enabled_ = false;
  Tensor table_;
};

std::vector<double> language_vector(const LanguageTable& t, const std::string& code);

}  // namespace freesvc::speaker
