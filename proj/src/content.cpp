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

#include "freesvc/content.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

namespace freesvc::content {

namespace {

struct LayerShape {
  int stride, kernel, padding;
};

// Strides multiply to the 320-sample hop. Stride-s layers with kernel 2s and
// padding s/2 divide the length exactly; the stride-5 layer uses kernel 5.
constexpr LayerShape kLayerShapes[ContentBackbone::kLayers] = {
    {4, 8, 2}, {4, 8, 2}, {4, 8, 2}, {5, 5, 0}, {1, 3, 1}, {1, 3, 1}};

constexpr double kLeakySlope = 0.1;

void check_content_input(const audio::Waveform& w) {
  if (w.sample_rate != audio::kContentRate) {
    throw Error("content features need 16000 Hz audio, got " +
                std::to_string(w.sample_rate));
  }
  if (w.size() < audio::kHop) {
    throw Error("waveform too short for content features (" +
                std::to_string(w.size()) + " < 320 samples)");
  }
}

// [B, D, F] -> [B * F, D], frame-major rows.
Tensor frame_rows(const Tensor& x) {
  Tensor t = ag::transpose(x);
  return ag::reshape(t, {t.dim(0) * t.dim(1), t.dim(2)});
}

Tensor to_tensor(const Matrix& m) {
  return Tensor::from({m.rows, m.cols}, m.data);
}

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), t.dim(1));
  m.data = t.values();
  return m;
}

}  // namespace

ContentBackbone::ContentBackbone(BackboneConfig config)
    : config_(config), params_(config.seed) {
  if (config_.channels <= 0 || config_.output_dim <= 0) {
    throw Error("backbone: channels and output_dim must be positive");
  }
  int in = 1;
  for (int i = 0; i < kLayers; ++i) {
    const LayerShape& s = kLayerShapes[i];
    const int out = i + 1 == kLayers ? config_.output_dim : config_.channels;
    layers_.emplace_back(params_, "backbone.layer" + std::to_string(i), in, out, s.kernel, s.stride,
                         s.padding);
    in = out;
  }
}

std::string ContentBackbone::layer_prefix(int i) {
  return "backbone.layer" + std::to_string(i) + ".";
}

void ContentBackbone::train_last_layers(int count) {
  for (int i = 0; i < kLayers; ++i) {
    params_.set_trainable(layer_prefix(i), i >= kLayers - count);
  }
}

bool ContentBackbone::layer_trainable(int i) const {
  const std::string prefix = layer_prefix(i);
  for (const auto& p : params_.all()) {
    if (p.name.rfind(prefix, 0) == 0 && !p.trainable) return false;
  }
  return true;
}

Tensor ContentBackbone::forward(const Tensor& audio) const {
  if (audio.rank() != 3 || audio.dim(1) != 1) {
    throw Error("backbone expects [B, 1, T] audio, got " +
                ag::shape_str(audio.shape()));
  }
  const int64_t batch = audio.dim(0), n = audio.dim(2);
  const int64_t frames = audio::frame_count(n);
  const int64_t padded = frames * audio::kHop;
  const int64_t left = audio::kHop / 2;
  // The raw input never needs a gradient, so padding is done by value.
  std::vector<double> buf(batch * padded, 0.0);
  const auto& v = audio.values();
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t copy = std::min(n, padded - left);
    std::copy_n(v.begin() + b * n, copy, buf.begin() + b * padded + left);
  }
  Tensor x = Tensor::from({batch, 1, padded}, std::move(buf));
  for (int i = 0; i < kLayers; ++i) {
    x = layers_[i](x);
    if (i + 1 < kLayers) x = ag::leaky_relu(x, kLeakySlope);
  }
  return x;
}

Matrix backbone_features(const ContentBackbone& b, const audio::Waveform& w) {
  check_content_input(w);
  ag::NoGradGuard guard;
  Tensor y = b.forward(Tensor::from({1, 1, w.size()}, w.samples));
  return to_matrix(frame_rows(y));
}

Matrix extract_content(const ContentBackbone& b, const audio::Waveform& w) {
  return backbone_features(b, w);
}

Matrix load_feature_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open feature file: " + path);
  int64_t frames = -1, dim = -1;
  if (!(in >> frames >> dim) || frames < 0 || dim <= 0) {
    throw Error("malformed feature header in " + path);
  }
  Matrix m(frames, dim);
  for (double& x : m.data) {
    if (!(in >> x) || !std::isfinite(x)) {
      throw Error("malformed or truncated feature file: " + path);
    }
  }
  std::string extra;
  if (in >> extra) throw Error("trailing data in feature file: " + path);
  return m;
}

void save_feature_file(const std::string& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write feature file: " + path);
  out << m.rows << ' ' << m.cols << '\n' << std::setprecision(17);
  for (int64_t r = 0; r < m.rows; ++r) {
    for (int64_t c = 0; c < m.cols; ++c) out << (c ? " " : "") << m(r, c);
    out << '\n';
  }
}

SpinHead::SpinHead(int input_dim, SpinHeadConfig config)
    : input_dim_(input_dim), config_(config), params_(config.seed) {
  if (input_dim <= 0 || config_.codebook_size <= 0 || config_.code_dim <= 0) {
    throw Error("spin head: dimensions must be positive");
  }
  if (!(config_.temperature > 0.0) || !(config_.target_temperature > 0.0)) {
    throw Error("spin head: temperatures must be positive");
  }
  projection_ = nn::Linear(params_, "head.proj", input_dim, config_.code_dim);
  codebook_ = params_.add_normal("head.codebook",
                                 {config_.codebook_size, config_.code_dim}, 1.0);
}

Tensor SpinHead::similarities(const Tensor& features) const {
  if (features.rank() != 2 || features.dim(1) != input_dim_) {
    throw Error("spin head expects [N, " + std::to_string(input_dim_) +
                "] features, got " + ag::shape_str(features.shape()));
  }
  Tensor z = ag::l2_normalize_rows(projection_(features));
  Tensor c = ag::l2_normalize_rows(codebook_);
  return ag::matmul(z, ag::transpose(c));
}

Tensor spin_assignments(const SpinHead& h, const Tensor& features) {
  return ag::softmax_rows(
      ag::scale(h.similarities(features), 1.0 / h.config().temperature));
}

Matrix spin_assignments(const SpinHead& h, const Matrix& features) {
  ag::NoGradGuard guard;
  return to_matrix(spin_assignments(h, to_tensor(features)));
}

Tensor spin_targets(const SpinHead& h, const Tensor& features) {
  ag::NoGradGuard guard;
  return ag::softmax_rows(ag::scale(h.similarities(features),
                                    1.0 / h.config().target_temperature));
}

Tensor spin_cross_entropy(const SpinHead& h, const Tensor& features_a,
                          const Tensor& features_b, const Tensor& targets_a,
                          const Tensor& targets_b) {
  const int64_t n = features_a.dim(0);
  if (n == 0) throw Error("spin_loss: zero frames");
  if (features_b.dim(0) != n || targets_a.dim(0) != n || targets_b.dim(0) != n) {
    throw Error("spin_cross_entropy: frame counts differ");
  }
  const double inv_t = 1.0 / h.config().temperature;
  const Tensor log_pa =
      ag::log_softmax_rows(ag::scale(h.similarities(features_a), inv_t));
  const Tensor log_pb =
      ag::log_softmax_rows(ag::scale(h.similarities(features_b), inv_t));
  // View a predicts the targets of view b and vice versa.
  const Tensor ce = ag::add(ag::sum(ag::mul(targets_b, log_pa)),
                            ag::sum(ag::mul(targets_a, log_pb)));
  return ag::scale(ce, -0.5 / static_cast<double>(n));
}

Tensor spin_loss(const SpinHead& h, const Tensor& features_a,
                 const Tensor& features_b) {
  const int64_t n = std::min(features_a.dim(0), features_b.dim(0));
  if (n == 0) throw Error("spin_loss: zero frames");
  const Tensor fa = ag::slice(features_a, 0, 0, n);
  const Tensor fb = ag::slice(features_b, 0, 0, n);
  return spin_cross_entropy(h, fa, fb, spin_targets(h, fa), spin_targets(h, fb));
}

double spin_loss(const SpinHead& h, const Matrix& features_a,
                 const Matrix& features_b) {
  ag::NoGradGuard guard;
  return spin_loss(h, to_tensor(features_a), to_tensor(features_b)).item();
}

Tensor codebook_usage_penalty(const SpinHead& h, const Tensor& features) {
  const Tensor mean = ag::mean_dim(spin_assignments(h, features), 0);
  const Tensor neg_entropy = ag::sum(ag::mul(mean, ag::log_clamp_min(mean, 1e-12)));
  return ag::add_scalar(neg_entropy, std::log(h.config().codebook_size));
}

double codebook_perplexity(const Matrix& assignments) {
  if (assignments.rows == 0) throw Error("perplexity: no frames");
  std::vector<double> mean(assignments.cols, 0.0);
  for (int64_t r = 0; r < assignments.rows; ++r)
    for (int64_t k = 0; k < assignments.cols; ++k) mean[k] += assignments(r, k);
  double entropy = 0.0;
  for (double& p : mean) {
    p /= static_cast<double>(assignments.rows);
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

std::vector<double> wsola_stretch(const std::vector<double>& x,
                                  int64_t out_length, int sample_rate) {
  if (out_length <= 0) return {};
  if (x.empty()) return std::vector<double>(out_length, 0.0);
  const int64_t n = static_cast<int64_t>(x.size());
  // 40 ms periodic Hann frames at 50 % overlap sum to one, so no
  // normalisation is needed; the search tolerance is 5 ms.
  const int64_t frame = 2 * std::max<int64_t>(8, std::llround(0.02 * sample_rate));
  const int64_t hop = frame / 2;
  const int64_t tol = std::max<int64_t>(1, std::llround(0.005 * sample_rate));
  const double alpha = static_cast<double>(n) / static_cast<double>(out_length);
  std::vector<double> window(frame);
  for (int64_t j = 0; j < frame; ++j) {
    window[j] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * j / frame);
  }
  auto get = [&](int64_t i) { return i >= 0 && i < n ? x[i] : 0.0; };
  // Correlation over the half frame that overlaps the previous one.
  auto correlation = [&](int64_t a, int64_t b) {
    double s = 0.0;
    for (int64_t j = 0; j < hop; ++j) s += get(a + j) * get(b + j);
    return s;
  };

  std::vector<double> y(out_length, 0.0);
  int64_t prev = 0;
  bool first = true;
  for (int64_t t = -hop; t < out_length; t += hop) {
    const int64_t nominal = std::llround(static_cast<double>(t) * alpha);
    int64_t pos = nominal;
    if (!first) {
      // The natural continuation of the previous frame, one hop later.
      const int64_t target = prev + hop;
      // Coarse search on a stride-4 grid, then refine around the best.
      double best = -1e300;
      for (int64_t d = -tol; d <= tol; d += 4) {
        const double c = correlation(target, nominal + d);
        if (c > best) best = c, pos = nominal + d;
      }
      const int64_t centre = pos;
      for (int64_t d = -3; d <= 3; ++d) {
        const int64_t cand = centre + d;
        if (cand < nominal - tol || cand > nominal + tol) continue;
        const double c = correlation(target, cand);
        if (c > best) best = c, pos = cand;
      }
    }
    for (int64_t j = 0; j < frame; ++j) {
      const int64_t o = t + j;
      if (o >= 0 && o < out_length) y[o] += window[j] * get(pos + j);
    }
    prev = pos;
    first = false;
  }
  return y;
}

audio::Waveform shift_pitch(const audio::Waveform& w, double semitones,
                            double gain) {
  if (w.sample_rate <= 0) throw Error("shift_pitch: waveform has no sample rate");
  const double factor = std::pow(2.0, semitones / 12.0);
  // Playing n / factor samples at the original rate raises pitch by factor.
  std::vector<double> squeezed = audio::resample_ratio(w.samples, 1.0 / factor);
  audio::Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = wsola_stretch(squeezed, w.size(), w.sample_rate);
  for (double& v : out.samples) v *= gain;
  return out;
}

audio::Waveform speaker_perturb(const audio::Waveform& w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> magnitude(1.0, 4.0);
  std::uniform_real_distribution<double> gain(0.7, 1.0);
  std::bernoulli_distribution up(0.5);
  const double m = magnitude(rng);
  const double semitones = up(rng) ? m : -m;
  return shift_pitch(w, semitones, gain(rng));
}

void SpinConfig::validate() const {
  if (batch_size <= 0) throw Error("spin: batch_size must be positive");
  if (epochs <= 0) throw Error("spin: epochs must be positive");
  if (max_steps < 0) throw Error("spin: max_steps must be >= 0");
  if (segment_frames <= 0) throw Error("spin: segment_frames must be positive");
  if (!(learning_rate > 0.0)) throw Error("spin: learning_rate must be positive");
  if (trainable_layers < 0 || trainable_layers > ContentBackbone::kLayers) {
    throw Error("spin: trainable_layers out of range");
  }
  if (!(diversity_weight >= 0.0)) throw Error("spin: diversity_weight must be >= 0");
}

SpinReport spin_finetune(ContentBackbone& b, SpinHead& h,
                         const std::vector<audio::Waveform>& dataset,
                         const SpinConfig& config) {
  config.validate();
  if (dataset.empty()) throw Error("spin_finetune: empty dataset");
  for (const auto& w : dataset) check_content_input(w);
  if (h.input_dim() != b.dim()) {
    throw Error("spin_finetune: head input dim does not match backbone");
  }
  b.train_last_layers(config.trainable_layers);
  std::vector<std::string> prefixes;
  for (int i = ContentBackbone::kLayers - config.trainable_layers;
       i < ContentBackbone::kLayers; ++i) {
    prefixes.push_back(ContentBackbone::layer_prefix(i));
  }
  std::vector<nn::Parameter*> trainable = nn::select(b.params(), prefixes);
  for (nn::Parameter* p : nn::select(h.params(), {""})) trainable.push_back(p);
  nn::Adam adam(trainable, {config.learning_rate, 0.9, 0.999, 1e-8});

  std::mt19937_64 rng(config.seed);
  const int64_t segment = static_cast<int64_t>(config.segment_frames) * audio::kHop;
  const int64_t per_epoch =
      (static_cast<int64_t>(dataset.size()) + config.batch_size - 1) /
      config.batch_size;
  int64_t total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min<int64_t>(total, config.max_steps);

  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  SpinReport report;
  for (int64_t step = 0; step < total; ++step) {
    std::vector<double> view_a, view_b;
    view_a.reserve(config.batch_size * segment);
    view_b.reserve(config.batch_size * segment);
    for (int i = 0; i < config.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const audio::Waveform& w = dataset[order[cursor++]];
      audio::Waveform crop{std::vector<double>(segment, 0.0), w.sample_rate};
      const int64_t start =
          w.size() > segment
              ? std::uniform_int_distribution<int64_t>(0, w.size() - segment)(rng)
              : 0;
      const int64_t len = std::min(segment, w.size());
      std::copy_n(w.samples.begin() + start, len, crop.samples.begin());
      const audio::Waveform a = speaker_perturb(crop, rng);
      const audio::Waveform v = speaker_perturb(crop, rng);
      view_a.insert(view_a.end(), a.samples.begin(), a.samples.end());
      view_b.insert(view_b.end(), v.samples.begin(), v.samples.end());
    }
    const int64_t batch = config.batch_size;
    Tensor fa = frame_rows(b.forward(Tensor::from({batch, 1, segment}, view_a)));
    Tensor fb = frame_rows(b.forward(Tensor::from({batch, 1, segment}, view_b)));
    Tensor loss = spin_loss(h, fa, fb);
    const double value = loss.item();
    if (!std::isfinite(value)) throw Error("spin_finetune: non-finite loss");
    if (config.diversity_weight > 0.0) {
      Tensor usage = ag::add(codebook_usage_penalty(h, fa),
                             codebook_usage_penalty(h, fb));
      loss = ag::add(loss, ag::scale(usage, 0.5 * config.diversity_weight));
    }
    loss.backward();
    adam.step();
    report.losses.push_back(value);
    ++report.steps;
  }
  return report;
}

double assignment_agreement(const SpinHead& h, const Matrix& features_a,
                            const Matrix& features_b) {
  const Matrix pa = spin_assignments(h, features_a);
  const Matrix pb = spin_assignments(h, features_b);
  const int64_t n = std::min(pa.rows, pb.rows);
  if (n == 0) throw Error("assignment_agreement: zero frames");
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t k = 0; k < pa.cols; ++k) {
      dot += pa(r, k) * pb(r, k);
      na += pa(r, k) * pa(r, k);
      nb += pb(r, k) * pb(r, k);
    }
    total += dot / std::sqrt(na * nb);
  }
  return total / static_cast<double>(n);
}

}  // namespace freesvc::content
