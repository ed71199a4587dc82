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

#include "freesvc/speaker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace freesvc::speaker {

namespace {

constexpr int64_t kMinSamples = audio::kContentRate / 2;

void check_speaker_input(const audio::Waveform& w) {
  if (w.sample_rate != audio::kContentRate) {
    throw Error("speaker encoder needs 16000 Hz audio, got " +
                std::to_string(w.sample_rate));
  }
  if (w.size() < kMinSamples) {
    throw Error("audio too short for a speaker embedding (" +
                std::to_string(w.size()) + " < 8000 samples)");
  }
}

// Population standard deviation over rows, [F, C] -> [1, C].
Tensor row_std(const Tensor& x, const Tensor& mean) {
  Tensor var = ag::mean_dim(ag::square(ag::sub(x, mean)), 0);
  return ag::exp(ag::scale(ag::log(ag::add_scalar(var, 1e-6)), 0.5));
}

}  // namespace

SpeakerEncoder::SpeakerEncoder(EncoderConfig config)
    : config_(config), params_(config.seed) {
  if (config_.n_mels <= 0 || config_.hidden <= 0 || config_.dim <= 0) {
    throw Error("speaker encoder: dimensions must be positive");
  }
  frame1_ = nn::Linear(params_, "spk.frame1", config_.n_mels, config_.hidden);
  frame2_ = nn::Linear(params_, "spk.frame2", config_.hidden, config_.hidden);
  out_ = nn::Linear(params_, "spk.out", 2 * config_.hidden, config_.dim);
  filterbank_ = audio::mel_filterbank(audio::kContentRate, config_.n_fft,
                                      config_.n_mels, 0.0,
                                      audio::kContentRate / 2.0);
}

Tensor SpeakerEncoder::features(const audio::Waveform& w) const {
  check_speaker_input(w);
  const Matrix mag = audio::stft_frames(w.samples, config_.n_fft, config_.hop,
                                        config_.n_fft);
  std::vector<double> out(mag.rows * filterbank_.rows);
  for (int64_t f = 0; f < mag.rows; ++f) {
    for (int64_t m = 0; m < filterbank_.rows; ++m) {
      double e = 0.0;
      for (int64_t k = 0; k < mag.cols; ++k) e += filterbank_(m, k) * mag(f, k);
      out[f * filterbank_.rows + m] = std::log(std::max(e, audio::kLogFloor));
    }
  }
  return Tensor::from({mag.rows, filterbank_.rows}, std::move(out));
}

Tensor SpeakerEncoder::forward(const Tensor& features) const {
  Tensor h = ag::relu(frame1_(features));
  h = ag::relu(frame2_(h));
  Tensor mean = ag::mean_dim(h, 0);
  Tensor pooled = ag::concat({ag::reshape(mean, {1, config_.hidden}),
                              ag::reshape(row_std(h, mean), {1, config_.hidden})},
                             1);
  return out_(pooled);
}

Embedding embed_speaker(const SpeakerEncoder& encoder, const audio::Waveform& w) {
  ag::NoGradGuard guard;
  return encoder.forward(encoder.features(w)).values();
}

std::vector<double> train_speaker_encoder(SpeakerEncoder& encoder,
                                          const std::vector<audio::Waveform>& clips,
                                          const std::vector<int>& labels,
                                          const EncoderTrainConfig& config) {
  if (clips.empty()) throw Error("train_speaker_encoder: no clips");
  if (clips.size() != labels.size()) {
    throw Error("train_speaker_encoder: clips and labels differ in length");
  }
  if (config.steps <= 0 || config.batch_size <= 0) {
    throw Error("train_speaker_encoder: steps and batch_size must be positive");
  }
  const int speakers = *std::max_element(labels.begin(), labels.end()) + 1;
  if (*std::min_element(labels.begin(), labels.end()) < 0) {
    throw Error("train_speaker_encoder: negative label");
  }
  const int64_t segment = std::max<int64_t>(
      kMinSamples, std::llround(config.segment_seconds * audio::kContentRate));
  for (const auto& w : clips) check_speaker_input(w);

  nn::ParameterSet head_params(encoder.params().seed() + 1);
  nn::Linear classifier(head_params, "spk.classifier", encoder.config().dim,
                        speakers);
  std::vector<nn::Parameter*> trainable = nn::select(encoder.params(), {""});
  for (nn::Parameter* p : nn::select(head_params, {""})) trainable.push_back(p);
  nn::Adam adam(trainable, {config.learning_rate, 0.9, 0.999, 1e-8});

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<size_t> pick(0, clips.size() - 1);
  std::vector<double> losses;
  for (int step = 0; step < config.steps; ++step) {
    Tensor total;
    for (int i = 0; i < config.batch_size; ++i) {
      const size_t c = pick(rng);
      const audio::Waveform& w = clips[c];
      const int64_t len = std::min(segment, w.size());
      const int64_t start =
          std::uniform_int_distribution<int64_t>(0, w.size() - len)(rng);
      audio::Waveform crop{{w.samples.begin() + start,
                            w.samples.begin() + start + len},
                           w.sample_rate};
      Tensor logits = classifier(encoder.forward(encoder.features(crop)));
      Tensor logp = ag::log_softmax_rows(logits);
      Tensor nll = ag::neg(ag::slice(logp, 1, labels[c], labels[c] + 1));
      total = total.defined() ? ag::add(total, nll) : nll;
    }
    Tensor loss = ag::scale(ag::sum(total), 1.0 / config.batch_size);
    losses.push_back(loss.item());
    loss.backward();
    adam.step();
  }
  return losses;
}

std::map<std::string, Embedding> load_embedding_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding file: " + path);
  std::map<std::string, Embedding> out;
  std::string line;
  int64_t line_no = 0;
  size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string id;
    if (!(ls >> id)) continue;
    Embedding v;
    std::string token;
    while (ls >> token) {
      size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(token, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != token.size() || !std::isfinite(x)) {
        throw Error("malformed embedding file " + path + " at line " +
                    std::to_string(line_no));
      }
      v.push_back(x);
    }
    if (v.empty()) {
      throw Error("malformed embedding file " + path + " at line " +
                  std::to_string(line_no) + ": no values");
    }
    if (dim == 0) dim = v.size();
    if (v.size() != dim) {
      throw Error("inconsistent dimension in " + path + " at line " +
                  std::to_string(line_no) + ": " + std::to_string(v.size()) +
                  " vs " + std::to_string(dim));
    }
    if (!out.emplace(id, std::move(v)).second) {
      throw Error("duplicate utterance id " + id + " in " + path);
    }
  }
  return out;
}

void save_embedding_file(const std::string& path,
                         const std::map<std::string, Embedding>& embeddings) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write embedding file: " + path);
  out << std::setprecision(17);
  for (const auto& [id, v] : embeddings) {
    out << id;
    for (double x : v) out << ' ' << x;
    out << '\n';
  }
}

Embedding average_embedding(std::span<const Embedding> vs) {
  if (vs.empty()) throw Error("average_embedding: empty list");
  Embedding mean(vs.front().size(), 0.0);
  for (const auto& v : vs) {
    if (v.size() != mean.size()) throw Error("average_embedding: dimension mismatch");
    for (size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
  }
  double norm = 0.0;
  for (double x : mean) norm += x * x;
  norm = std::sqrt(norm);
  // The 1/n factor cancels under normalisation; compare against the scale
  // of the inputs so exact cancellation is caught regardless of magnitude.
  double scale = 0.0;
  for (const auto& v : vs)
    for (double x : v) scale = std::max(scale, std::abs(x));
  if (!(norm > 1e-12 * std::max(scale, 1e-300))) {
    throw Error("average_embedding: zero-norm mean");
  }
  for (double& x : mean) x /= norm;
  return mean;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

LanguageTable::LanguageTable(nn::ParameterSet& ps, std::vector<std::string> codes,
                             int dim, bool enabled)
    : codes_(std::move(codes)), dim_(dim), enabled_(enabled) {
  if (dim_ <= 0) throw Error("language table: dimension must be positive");
  for (size_t i = 0; i < codes_.size(); ++i) {
    if (codes_[i].empty()) throw Error("language table: empty language code");
    if (!index_.emplace(codes_[i], static_cast<int>(i)).second) {
      throw Error("language table: duplicate language code " + codes_[i]);
    }
  }
  if (enabled_) {
    if (codes_.empty()) throw Error("language table: no languages registered");
    table_ = ps.add_normal("lang.table",
                           {static_cast<int64_t>(codes_.size()), dim_}, 0.1);
  }
}

int LanguageTable::index(const std::string& code) const {
  auto it = index_.find(code);
  if (it == index_.end()) throw Error("unknown language: " + code);
  return it->second;
}

Tensor LanguageTable::vector(const std::string& code) const {
  const int id = index(code);
  return lookup(std::span<const int>(&id, 1));
}

Tensor LanguageTable::lookup(std::span<const int> ids) const {
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(codes_.size())) {
      throw Error("unknown language index " + std::to_string(id));
    }
  }
  if (!enabled_) return Tensor::zeros({static_cast<int64_t>(ids.size()), dim_});
  return ag::embedding(table_, ids);
}

std::vector<double> language_vector(const LanguageTable& t, const std::string& code) {
  ag::NoGradGuard guard;
  return t.vector(code).values();
}

}  // namespace freesvc::speaker
