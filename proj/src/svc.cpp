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

#include "freesvc/svc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace freesvc::svc {

namespace {

constexpr double kLeaky = 0.1;

std::string idx(const std::string& prefix, size_t i) {
  return prefix + std::to_string(i);
}

// ---- graph-free evaluation helpers (single item, precision T) -------------

template <typename T>
std::vector<T> conv_eval(const nn::Conv1d& c, const std::vector<T>& x,
                         int64_t len) {
  const auto& w = c.weight.values();
  const int64_t cout = c.weight.dim(0), cin = c.weight.dim(1), k = c.weight.dim(2);
  const int64_t out_len =
      (len + 2 * c.padding - c.dilation * (k - 1) - 1) / c.stride + 1;
  std::vector<T> out(cout * out_len, T(0));
  for (int64_t o = 0; o < cout; ++o) {
    const T b = c.bias.defined() ? static_cast<T>(c.bias.at(o)) : T(0);
    for (int64_t t = 0; t < out_len; ++t) {
      T acc = b;
      for (int64_t ci = 0; ci < cin; ++ci) {
        const T* xr = x.data() + ci * len;
        const double* wr = w.data() + (o * cin + ci) * k;
        for (int64_t j = 0; j < k; ++j) {
          const int64_t p = t * c.stride - c.padding + j * c.dilation;
          if (p >= 0 && p < len) acc += static_cast<T>(wr[j]) * xr[p];
        }
      }
      out[o * out_len + t] = acc;
    }
  }
  return out;
}

template <typename T>
std::vector<T> wavenet_eval(const nn::WaveNet& net, std::vector<T> x, int64_t len,
                            std::span<const double> g) {
  const int64_t hidden = net.hidden;
  const size_t layers = net.in_layers.size();
  std::vector<T> gc;
  if (net.cond.weight.defined() && !g.empty()) {
    std::vector<T> gt(g.begin(), g.end());
    gc = conv_eval<T>(net.cond, gt, 1);
  }
  std::vector<T> output(hidden * len, T(0));
  std::vector<T> acts(hidden * len);
  for (size_t i = 0; i < layers; ++i) {
    std::vector<T> h = conv_eval<T>(net.in_layers[i], x, len);
    if (!gc.empty()) {
      for (int64_t c = 0; c < 2 * hidden; ++c)
        for (int64_t t = 0; t < len; ++t) h[c * len + t] += gc[2 * hidden * i + c];
    }
    for (int64_t c = 0; c < hidden; ++c)
      for (int64_t t = 0; t < len; ++t) {
        const T a = std::tanh(h[c * len + t]);
        const T s = T(1) / (T(1) + std::exp(-h[(hidden + c) * len + t]));
        acts[c * len + t] = a * s;
      }
    std::vector<T> rs = conv_eval<T>(net.res_skip[i], acts, len);
    if (i + 1 < layers) {
      for (int64_t j = 0; j < hidden * len; ++j) {
        x[j] += rs[j];
        output[j] += rs[hidden * len + j];
      }
    } else {
      for (int64_t j = 0; j < hidden * len; ++j) output[j] += rs[j];
    }
  }
  return output;
}

Tensor batch_item(const Tensor& x, int64_t b) { return ag::slice(x, 0, b, b + 1); }

Tensor matrix_to_channels(const Matrix& m) {
  // [F, D] rows -> [1, D, F]
  std::vector<double> v(m.rows * m.cols);
  for (int64_t f = 0; f < m.rows; ++f)
    for (int64_t d = 0; d < m.cols; ++d) v[d * m.rows + f] = m(f, d);
  return Tensor::from({1, m.cols, m.rows}, std::move(v));
}

}  // namespace

// ---- configuration --------------------------------------------------------

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.inter_channels = 32;
  c.hidden = 32;
  c.content_dim = 64;
  c.posterior_layers = 4;
  c.flow_blocks = 4;
  c.flow_layers = 2;
  c.prior_layers = 3;
  c.decoder_channels = 128;
  c.disc_channels = 16;
  c.segment_frames = 32;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw Error(std::string("model config: ") + what + " must be positive");
  };
  positive(inter_channels, "inter_channels");
  positive(hidden, "hidden");
  positive(content_dim, "content_dim");
  positive(speaker_dim, "speaker_dim");
  positive(lang_dim, "lang_dim");
  positive(kernel, "kernel");
  positive(posterior_layers, "posterior_layers");
  positive(flow_blocks, "flow_blocks");
  positive(flow_layers, "flow_layers");
  positive(prior_layers, "prior_layers");
  positive(decoder_channels, "decoder_channels");
  positive(resblock_kernel, "resblock_kernel");
  positive(disc_channels, "disc_channels");
  positive(segment_frames, "segment_frames");
  if (inter_channels % 2 != 0) throw Error("model config: inter_channels must be even");
  if (kernel % 2 == 0 || resblock_kernel % 2 == 0) {
    throw Error("model config: kernels must be odd");
  }
  if (upsample_rates.empty() || upsample_rates.size() != upsample_kernels.size()) {
    throw Error("model config: upsample rates and kernels must pair up");
  }
  int total = 1;
  for (size_t i = 0; i < upsample_rates.size(); ++i) {
    const int r = upsample_rates[i], k = upsample_kernels[i];
    if (r <= 0 || k < r || (k - r) % 2 != 0) {
      throw Error("model config: upsample kernel " + std::to_string(k) +
                  " does not fit rate " + std::to_string(r));
    }
    total *= r;
  }
  if (total != audio::kHop) {
    throw Error("model config: upsample rates multiply to " + std::to_string(total) +
                ", expected 320");
  }
  if (decoder_channels % (1 << upsample_rates.size()) != 0) {
    throw Error("model config: decoder_channels must halve at every stage");
  }
  if (disc_channels % 2 != 0) throw Error("model config: disc_channels must be even");
  if (use_language && languages.empty()) {
    throw Error("model config: language conditioning needs at least one language");
  }
  for (int p : mpd_periods) {
    if (p < 1) throw Error("model config: periods must be positive");
  }
  if (msd_scales < 0) throw Error("model config: msd_scales must be >= 0");
}

// ---- posterior encoder ----------------------------------------------------

PosteriorEncoder::PosteriorEncoder(nn::ParameterSet& ps, const ModelConfig& cfg)
    : channels_(cfg.inter_channels) {
  pre_ = nn::Conv1d(ps, "post.pre", kSpecBins, cfg.hidden, 1);
  net_ = nn::WaveNet(ps, "post.net", cfg.hidden, cfg.kernel, 1,
                     cfg.posterior_layers, cfg.speaker_dim);
  proj_ = nn::Conv1d(ps, "post.proj", cfg.hidden, 2 * cfg.inter_channels, 1);
}

PosteriorOutput PosteriorEncoder::forward(const Tensor& spec, const Tensor& g,
                                          std::mt19937_64& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> eps(spec.dim(0) * channels_ * spec.dim(2));
  for (double& e : eps) e = n(rng);
  return forward(spec, g, Tensor::from({spec.dim(0), channels_, spec.dim(2)}, eps));
}

PosteriorOutput PosteriorEncoder::forward(const Tensor& spec, const Tensor& g,
                                          const Tensor& eps) const {
  if (spec.rank() != 3 || spec.dim(1) != kSpecBins) {
    throw Error("posterior expects [B, 641, F] spectrogram, got " +
                ag::shape_str(spec.shape()));
  }
  Tensor stats = proj_(net_(pre_(spec), g));
  PosteriorOutput out;
  out.mean = ag::slice(stats, 1, 0, channels_);
  out.log_std =
      ag::clamp(ag::slice(stats, 1, channels_, 2 * channels_), kLogStdMin, kLogStdMax);
  out.eps = eps;
  out.z = ag::add(out.mean, ag::mul(ag::exp(out.log_std), eps));
  return out;
}

// ---- flow -----------------------------------------------------------------

FlowStack::FlowStack(nn::ParameterSet& ps, const ModelConfig& cfg)
    : channels_(cfg.inter_channels) {
  const int half = channels_ / 2;
  for (int i = 0; i < cfg.flow_blocks; ++i) {
    const std::string name = idx("flow.", i);
    Block b;
    b.pre = nn::Conv1d(ps, name + ".pre", half, cfg.hidden, 1);
    b.net = nn::WaveNet(ps, name + ".net", cfg.hidden, cfg.kernel, 1,
                        cfg.flow_layers, cfg.speaker_dim);
    b.post = nn::Conv1d(ps, name + ".post", cfg.hidden, 2 * half, 1, 1, 0, 1,
                        true, /*zero_init=*/true);
    blocks_.push_back(std::move(b));
  }
}

Tensor FlowStack::coupling_stats(const Block& b, const Tensor& x,
                                 const Tensor& g) const {
  return b.post(b.net(b.pre(x), g));
}

FlowOutput FlowStack::forward(const Tensor& z, const Tensor& g) const {
  if (z.rank() != 3 || z.dim(1) != channels_) {
    throw Error("flow expects [B, " + std::to_string(channels_) + ", F], got " +
                ag::shape_str(z.shape()));
  }
  for (double v : z.values()) {
    if (!std::isfinite(v)) throw Error("flow: non-finite input");
  }
  const int half = channels_ / 2;
  FlowOutput out;
  Tensor x = z;
  Tensor log_det = Tensor::zeros({1});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const Tensor lo = ag::slice(x, 1, 0, half);
    const Tensor hi = ag::slice(x, 1, half, channels_);
    const bool even = i % 2 == 0;
    const Tensor stats = coupling_stats(blocks_[i], even ? lo : hi, g);
    const Tensor m = ag::slice(stats, 1, 0, half);
    const Tensor logs = ag::slice(stats, 1, half, 2 * half);
    const Tensor y = ag::add(m, ag::mul(even ? hi : lo, ag::exp(logs)));
    x = even ? ag::concat({lo, y}, 1) : ag::concat({y, hi}, 1);
    log_det = ag::add(log_det, ag::sum(logs));
    out.log_scales.push_back(logs);
  }
  out.z = x;
  out.log_det = log_det;
  return out;
}

template <typename T>
void FlowStack::stats_eval(const Block& b, const std::vector<T>& cond,
                           int64_t frames, std::span<const double> g,
                           std::vector<T>& m, std::vector<T>& logs) const {
  const int64_t half = channels_ / 2;
  std::vector<T> h = conv_eval<T>(b.pre, cond, frames);
  h = wavenet_eval<T>(b.net, std::move(h), frames, g);
  std::vector<T> stats = conv_eval<T>(b.post, h, frames);
  m.assign(stats.begin(), stats.begin() + half * frames);
  logs.assign(stats.begin() + half * frames, stats.end());
}

template <typename T>
std::vector<T> FlowStack::forward_eval(const std::vector<T>& z, int64_t frames,
                                       std::span<const double> g, T* log_det) const {
  const int64_t half = channels_ / 2, n = half * frames;
  if (static_cast<int64_t>(z.size()) != channels_ * frames) {
    throw Error("flow: latent size does not match channels x frames");
  }
  std::vector<T> x = z, m, logs;
  T total = T(0);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const bool even = i % 2 == 0;
    const std::vector<T> cond(x.begin() + (even ? 0 : n), x.begin() + (even ? n : 2 * n));
    stats_eval<T>(blocks_[i], cond, frames, g, m, logs);
    T* target = x.data() + (even ? n : 0);
    for (int64_t j = 0; j < n; ++j) {
      target[j] = m[j] + target[j] * std::exp(logs[j]);
      total += logs[j];
    }
  }
  if (log_det) *log_det = total;
  return x;
}

template <typename T>
std::vector<T> FlowStack::inverse_eval(const std::vector<T>& z, int64_t frames,
                                       std::span<const double> g) const {
  const int64_t half = channels_ / 2, n = half * frames;
  if (static_cast<int64_t>(z.size()) != channels_ * frames) {
    throw Error("flow: latent size does not match channels x frames");
  }
  for (const T& v : z) {
    if (!std::isfinite(static_cast<double>(v))) throw Error("flow: non-finite input");
  }
  std::vector<T> x = z, m, logs;
  for (size_t i = blocks_.size(); i-- > 0;) {
    const bool even = i % 2 == 0;
    const std::vector<T> cond(x.begin() + (even ? 0 : n), x.begin() + (even ? n : 2 * n));
    stats_eval<T>(blocks_[i], cond, frames, g, m, logs);
    T* target = x.data() + (even ? n : 0);
    for (int64_t j = 0; j < n; ++j) target[j] = (target[j] - m[j]) * std::exp(-logs[j]);
  }
  return x;
}

template std::vector<float> FlowStack::forward_eval<float>(
    const std::vector<float>&, int64_t, std::span<const double>, float*) const;
template std::vector<double> FlowStack::forward_eval<double>(
    const std::vector<double>&, int64_t, std::span<const double>, double*) const;
template std::vector<float> FlowStack::inverse_eval<float>(
    const std::vector<float>&, int64_t, std::span<const double>) const;
template std::vector<double> FlowStack::inverse_eval<double>(
    const std::vector<double>&, int64_t, std::span<const double>) const;

// ---- prior encoder --------------------------------------------------------

PriorEncoder::PriorEncoder(nn::ParameterSet& ps, const ModelConfig& cfg)
    : channels_(cfg.inter_channels),
      hidden_(cfg.hidden),
      use_language_(cfg.use_language) {
  pre_ = nn::Conv1d(ps, "prior.pre", cfg.content_dim, cfg.hidden, 1);
  pitch_table_ = ps.add_normal("prior.pitch", {pitch::kPitchBins, cfg.hidden}, 0.1);
  if (use_language_) {
    lang_proj_ = ps.add_uniform("lang.proj.weight", {cfg.hidden, cfg.lang_dim},
                                1.0 / std::sqrt(static_cast<double>(cfg.lang_dim)));
  }
  for (int i = 0; i < cfg.prior_layers; ++i) {
    layers_.emplace_back(ps, idx("prior.layer", i), cfg.hidden, cfg.hidden,
                         cfg.kernel, 1, cfg.kernel / 2);
  }
  proj_ = nn::Conv1d(ps, "prior.proj", cfg.hidden, 2 * cfg.inter_channels, 1);
}

PriorOutput PriorEncoder::forward(const Tensor& content,
                                  std::span<const int> pitch_bins,
                                  const Tensor& lang) const {
  if (content.rank() != 3) {
    throw Error("prior expects [B, Dc, F] content, got " +
                ag::shape_str(content.shape()));
  }
  const int64_t batch = content.dim(0), frames = content.dim(2);
  if (static_cast<int64_t>(pitch_bins.size()) != batch * frames) {
    throw Error("prior: frame mismatch between content (" + std::to_string(frames) +
                " frames) and pitch (" + std::to_string(pitch_bins.size()) +
                " values for " + std::to_string(batch) + " items)");
  }
  Tensor x = pre_(content);
  Tensor pe = ag::reshape(ag::embedding(pitch_table_, pitch_bins),
                          {batch, frames, hidden_});
  x = ag::add(x, ag::transpose(pe));
  if (use_language_) {
    if (!lang.defined() || lang.rank() != 2 || lang.dim(0) != batch) {
      throw Error("prior: language conditioning needs [B, E_lang] vectors");
    }
    Tensor lp = ag::linear(lang, lang_proj_, Tensor());
    x = ag::add(x, ag::reshape(lp, {batch, hidden_, 1}));
  }
  for (const auto& layer : layers_) x = ag::add(x, layer(ag::leaky_relu(x, kLeaky)));
  Tensor stats = proj_(x);
  PriorOutput out;
  out.mean = ag::slice(stats, 1, 0, channels_);
  out.log_std =
      ag::clamp(ag::slice(stats, 1, channels_, 2 * channels_), kLogStdMin, kLogStdMax);
  return out;
}

// ---- decoder --------------------------------------------------------------

Decoder::Decoder(nn::ParameterSet& ps, const ModelConfig& cfg) {
  int ch = cfg.decoder_channels;
  pre_ = nn::Conv1d(ps, "dec.pre", cfg.inter_channels, ch, 7, 1, 3);
  cond_ = nn::Conv1d(ps, "dec.cond", cfg.speaker_dim, ch, 1);
  int remaining = audio::kHop;
  for (size_t i = 0; i < cfg.upsample_rates.size(); ++i) {
    const int r = cfg.upsample_rates[i], k = cfg.upsample_kernels[i];
    const int out = ch / 2;
    Stage s;
    s.up = nn::ConvTranspose1d(ps, idx("dec.up", i), ch, out, k, r, (k - r) / 2);
    remaining /= r;
    // Kernel 2s (even s) or 2s - 1 (odd s) with padding (k - s) / 2 maps the
    // excitation down to exactly this stage's length.
    const int sk = 2 * remaining - remaining % 2;
    s.source = nn::Conv1d(ps, idx("dec.src", i), kExcitationHarmonics, out, sk, remaining,
                          (sk - remaining) / 2);
    for (size_t j = 0; j < cfg.resblock_dilations.size(); ++j) {
      const int d = cfg.resblock_dilations[j];
      s.res.emplace_back(ps, idx("dec.res", i) + "." + std::to_string(j), out, out,
                         cfg.resblock_kernel, 1, d * (cfg.resblock_kernel - 1) / 2, d);
    }
    stages_.push_back(std::move(s));
    ch = out;
  }
  post_ = nn::Conv1d(ps, "dec.post", ch, 1, 7, 1, 3, 1, false);
}

Tensor Decoder::forward(const Tensor& z, const Tensor& g,
                        const Tensor& excitation) const {
  const int64_t frames = z.dim(2);
  if (excitation.rank() != 3 || excitation.dim(1) != kExcitationHarmonics ||
      excitation.dim(2) != frames * audio::kHop) {
    throw Error("decoder: excitation must hold H harmonics x 320 samples per latent frame");
  }
  Tensor x = pre_(z);
  if (g.defined()) x = ag::add(x, cond_(g));
  for (const auto& s : stages_) {
    x = s.up(ag::leaky_relu(x, kLeaky));
    x = ag::add(x, s.source(excitation));
    for (const auto& r : s.res) x = ag::add(x, r(ag::leaky_relu(x, kLeaky)));
  }
  return ag::tanh(post_(ag::leaky_relu(x, 0.01)));
}

Tensor pitch_excitation(std::span<const int> bins, int64_t batch, int64_t frames) {
  if (static_cast<int64_t>(bins.size()) != batch * frames) {
    throw Error("pitch_excitation: expected batch x frames bins");
  }
  const int64_t n = frames * audio::kHop;
  constexpr int64_t kH = kExcitationHarmonics;
  std::vector<double> out(batch * kH * n, 0.0);
  for (int64_t b = 0; b < batch; ++b) {
    double phase = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const int bin = bins[b * frames + i / audio::kHop];
      if (bin <= 0) continue;
      const double hz = pitch::bin_to_hz(bin);
      phase += 2.0 * std::numbers::pi * hz / audio::kSynthesisRate;
      if (phase > 2.0 * std::numbers::pi) phase -= 2.0 * std::numbers::pi;
      for (int64_t h = 1; h <= kH && h * hz < 0.5 * audio::kSynthesisRate; ++h) {
        out[(b * kH + h - 1) * n + i] = std::sin(static_cast<double>(h) * phase);
      }
    }
  }
  return Tensor::from({batch, kH, n}, std::move(out));
}

// ---- discriminators -------------------------------------------------------

Discriminators::Discriminators(nn::ParameterSet& ps, const ModelConfig& cfg) {
  const int d = cfg.disc_channels;
  const int widths[] = {1, d / 2, d, 2 * d, 2 * d};
  for (int p : cfg.mpd_periods) {
    Stack s;
    s.period = p;
    const std::string name = idx("mpd", p);
    for (int j = 0; j < 4; ++j) {
      s.layers.emplace_back(ps, name + ".l" + std::to_string(j), widths[j],
                            widths[j + 1], 5, j < 3 ? 3 : 1, 2);
    }
    s.post = nn::Conv1d(ps, name + ".post", 2 * d, 1, 3, 1, 1);
    stacks_.push_back(std::move(s));
  }
  for (int k = 0; k < cfg.msd_scales; ++k) {
    Stack s;
    s.pool_steps = k;
    const std::string name = idx("msd", k);
    const int kernels[] = {15, 11, 11, 5};
    const int strides[] = {1, 4, 4, 1};
    for (int j = 0; j < 4; ++j) {
      s.layers.emplace_back(ps, name + ".l" + std::to_string(j), widths[j],
                            widths[j + 1], kernels[j], strides[j], kernels[j] / 2);
    }
    s.post = nn::Conv1d(ps, name + ".post", 2 * d, 1, 3, 1, 1);
    stacks_.push_back(std::move(s));
  }
}

std::vector<DiscOutput> Discriminators::forward(const Tensor& audio) const {
  if (audio.rank() != 3 || audio.dim(1) != 1) {
    throw Error("discriminators expect [B, 1, T] audio");
  }
  std::vector<DiscOutput> outs;
  for (const auto& s : stacks_) {
    Tensor x = audio;
    if (s.period > 0) {
      x = ag::fold_period(x, s.period);
    } else {
      for (int k = 0; k < s.pool_steps; ++k) x = ag::avg_pool1d(x, 4, 2, 2);
    }
    DiscOutput o;
    for (const auto& layer : s.layers) {
      x = ag::leaky_relu(layer(x), kLeaky);
      o.features.push_back(x);
    }
    x = s.post(x);
    o.features.push_back(x);
    o.score = x;
    outs.push_back(std::move(o));
  }
  return outs;
}

// ---- model ----------------------------------------------------------------

SvcModel::SvcModel(ModelConfig cfg) : config_(std::move(cfg)) {
  config_.validate();
  gen_ = nn::ParameterSet(config_.seed);
  disc_ = nn::ParameterSet(config_.seed);
  languages_ = speaker::LanguageTable(gen_, config_.languages, config_.lang_dim,
                                      config_.use_language);
  posterior_ = PosteriorEncoder(gen_, config_);
  flow_ = FlowStack(gen_, config_);
  prior_ = PriorEncoder(gen_, config_);
  decoder_ = Decoder(gen_, config_);
  discriminators_ = Discriminators(disc_, config_);
}

Tensor SvcModel::language_rows(std::span<const int> ids) const {
  if (!config_.use_language) {
    // Still validate the ids against the registry.
    languages_.lookup(ids);
    return Tensor();
  }
  return languages_.lookup(ids);
}

Matrix align_content(const Matrix& f, int64_t target_frames) {
  if (f.rows == 0) throw Error("align_content: empty features");
  if (target_frames <= 0) throw Error("align_content: target_frames must be positive");
  if (target_frames == f.rows) return f;
  Matrix out(target_frames, f.cols);
  const double scale = target_frames > 1 ? static_cast<double>(f.rows - 1) /
                                               static_cast<double>(target_frames - 1)
                                         : 0.0;
  for (int64_t i = 0; i < target_frames; ++i) {
    const double pos = static_cast<double>(i) * scale;
    const int64_t lo = std::min<int64_t>(static_cast<int64_t>(pos), f.rows - 1);
    const int64_t hi = std::min<int64_t>(lo + 1, f.rows - 1);
    const double a = pos - static_cast<double>(lo);
    for (int64_t c = 0; c < f.cols; ++c) {
      out(i, c) = (1.0 - a) * f(lo, c) + a * f(hi, c);
    }
  }
  return out;
}

GeneratorOutput generator_forward(const SvcModel& model, const ModelInput& in,
                                  std::mt19937_64& rng) {
  const int64_t batch = in.batch(), frames = in.frames();
  if (in.content.dim(0) != batch || in.content.dim(2) != frames ||
      in.audio.dim(2) != frames * audio::kHop ||
      static_cast<int64_t>(in.lang.size()) != batch) {
    throw Error("generator_forward: inconsistent batch shapes");
  }
  GeneratorOutput out;
  out.posterior = model.posterior().forward(in.spec, in.speaker, rng);
  out.flow = model.flow().forward(out.posterior.z, in.speaker);
  out.prior = model.prior().forward(in.content, in.pitch, model.language_rows(in.lang));

  const int64_t seg = std::min<int64_t>(model.config().segment_frames, frames);
  std::uniform_int_distribution<int64_t> pick(0, frames - seg);
  std::vector<Tensor> zs, real;
  std::vector<int> bins;
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t s = pick(rng);
    out.starts.push_back(s);
    zs.push_back(ag::slice(batch_item(out.posterior.z, b), 2, s, s + seg));
    real.push_back(ag::slice(batch_item(in.audio, b), 2, s * audio::kHop,
                             (s + seg) * audio::kHop));
    bins.insert(bins.end(), in.pitch.begin() + b * frames + s,
                in.pitch.begin() + b * frames + s + seg);
  }
  out.fake = model.decoder().forward(ag::concat(zs, 0), in.speaker,
                                     pitch_excitation(bins, batch, seg));
  out.real = ag::concat(real, 0);
  return out;
}

// ---- losses ---------------------------------------------------------------

Tensor kl_term(const Tensor& z_p, const Tensor& logs_q, const Tensor& m_p,
               const Tensor& logs_p, const Tensor& log_det) {
  if (z_p.shape() != logs_q.shape() || z_p.shape() != m_p.shape() ||
      z_p.shape() != logs_p.shape()) {
    throw Error("kl_term: shape mismatch");
  }
  const Tensor d = ag::sub(z_p, m_p);
  Tensor term = ag::add_scalar(ag::sub(logs_p, logs_q), -0.5);
  term = ag::add(term, ag::scale(ag::mul(ag::square(d), ag::exp(ag::scale(logs_p, -2.0))),
                                 0.5));
  Tensor kl = ag::mean(term);
  if (log_det.defined()) {
    kl = ag::sub(kl, ag::scale(log_det, 1.0 / static_cast<double>(z_p.numel())));
  }
  return kl;
}

Tensor kl_term(const PosteriorOutput& post, const PriorOutput& prior,
               const Tensor& z_transformed, const Tensor& log_det) {
  return kl_term(z_transformed, post.log_std, prior.mean, prior.log_std, log_det);
}

Tensor discriminator_loss(const std::vector<DiscOutput>& real,
                          const std::vector<DiscOutput>& fake) {
  if (real.size() != fake.size()) throw Error("discriminator_loss: size mismatch");
  Tensor total = Tensor::zeros({1});
  for (size_t i = 0; i < real.size(); ++i) {
    total = ag::add(total, ag::mean(ag::square(ag::add_scalar(real[i].score, -1.0))));
    total = ag::add(total, ag::mean(ag::square(fake[i].score)));
  }
  return total;
}

Tensor generator_adv_loss(const std::vector<DiscOutput>& fake) {
  Tensor total = Tensor::zeros({1});
  for (const auto& o : fake) {
    total = ag::add(total, ag::mean(ag::square(ag::add_scalar(o.score, -1.0))));
  }
  return total;
}

Tensor feature_matching_loss(const std::vector<DiscOutput>& real,
                             const std::vector<DiscOutput>& fake) {
  if (real.size() != fake.size()) throw Error("feature_matching_loss: size mismatch");
  Tensor total = Tensor::zeros({1});
  for (size_t i = 0; i < real.size(); ++i) {
    for (size_t l = 0; l < real[i].features.size(); ++l) {
      total = ag::add(total, ag::mean(ag::abs(ag::sub(real[i].features[l].detach(),
                                                      fake[i].features[l]))));
    }
  }
  return total;
}

Tensor mel_l1_loss(const Tensor& real, const Tensor& fake) {
  return ag::mean(ag::abs(ag::sub(audio::log_mel(real.detach()), audio::log_mel(fake))));
}

GanLosses gan_losses(const Discriminators& d, const Tensor& real_in,
                     const Tensor& fake_in) {
  const int64_t t = std::min(real_in.dim(2), fake_in.dim(2));
  if (t == 0) throw Error("gan_losses: empty audio");
  const Tensor real = ag::slice(real_in, 2, 0, t).detach();
  const Tensor fake = ag::slice(fake_in, 2, 0, t);
  GanLosses out;
  const auto d_real = d.forward(real);
  out.d_loss = discriminator_loss(d_real, d.forward(fake.detach()));
  const auto d_fake = d.forward(fake);
  out.g_adv = generator_adv_loss(d_fake);
  out.feat_match = feature_matching_loss(d_real, d_fake);
  out.mel_l1 = mel_l1_loss(real, fake);
  return out;
}

// ---- inference ------------------------------------------------------------

audio::Waveform synthesize(const SvcModel& model, const Matrix& content,
                           std::span<const int> pitch_bins,
                           const speaker::Embedding& target,
                           const ConvertOptions& options) {
  const ModelConfig& cfg = model.config();
  if (!model.ready()) throw Error("convert: model is not trained or loaded");
  if (content.cols != cfg.content_dim) {
    throw Error("convert: content dimension " + std::to_string(content.cols) +
                " does not match the model (" + std::to_string(cfg.content_dim) + ")");
  }
  if (static_cast<int64_t>(pitch_bins.size()) != content.rows) {
    throw Error("convert: pitch and content frame counts differ");
  }
  if (static_cast<int>(target.size()) != cfg.speaker_dim) {
    throw Error("convert: target embedding has " + std::to_string(target.size()) +
                " values, expected " + std::to_string(cfg.speaker_dim));
  }
  const std::string code =
      options.language.empty() ? model.languages().codes().front() : options.language;
  const int lang_id = model.languages().index(code);

  ag::NoGradGuard guard;
  const int64_t frames = content.rows;
  const PriorOutput prior = model.prior().forward(
      matrix_to_channels(content), pitch_bins,
      model.language_rows(std::span<const int>(&lang_id, 1)));
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> zp(prior.mean.numel());
  for (size_t i = 0; i < zp.size(); ++i) {
    const double eps = options.noise_scale == 0.0 ? 0.0 : n(rng);
    zp[i] = prior.mean.at(i) + std::exp(prior.log_std.at(i)) * eps * options.noise_scale;
  }
  std::vector<double> z = model.flow().inverse_eval<double>(zp, frames, target);
  const Tensor g = Tensor::from({1, cfg.speaker_dim, 1}, target);
  const Tensor y = model.decoder().forward(
      Tensor::from({1, cfg.inter_channels, frames}, std::move(z)), g,
      pitch_excitation(pitch_bins, 1, frames));
  audio::Waveform out;
  out.sample_rate = audio::kSynthesisRate;
  out.samples = y.values();
  for (double& v : out.samples) v = std::clamp(v, -1.0, 1.0);
  return out;
}

audio::Waveform convert(const SvcModel& model,
                        const content::ContentBackbone& backbone,
                        const audio::Waveform& source,
                        const speaker::Embedding& target,
                        const ConvertOptions& options) {
  if (!model.ready()) throw Error("convert: model is not trained or loaded");
  if (source.sample_rate <= 0 || source.duration() < 0.5) {
    throw Error("convert: source must be at least 0.5 s long");
  }
  const audio::Waveform w16 = audio::resample(source, audio::kContentRate);
  const audio::Waveform w24 = audio::resample(source, audio::kSynthesisRate);
  const int64_t frames = audio::frame_count(w24.size());
  const Matrix content = align_content(content::extract_content(backbone, w16), frames);
  pitch::F0Contour f0 = pitch::extract_f0(w16);
  f0 = pitch::retime(pitch::transpose_f0(f0, options.key_shift), frames);
  const pitch::CoarsePitch bins = pitch::quantize_pitch(f0);
  return synthesize(model, content, bins.bins, target, options);
}

}  // namespace freesvc::svc
