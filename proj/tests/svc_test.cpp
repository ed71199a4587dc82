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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_util.hpp"

namespace freesvc::svc {
namespace {

using testing::random_tensor;

// Small enough for finite differences; every component is present.
ModelConfig tiny_config() {
  ModelConfig c;
  c.inter_channels = 4;
  c.hidden = 4;
  c.content_dim = 6;
  c.speaker_dim = 3;
  c.lang_dim = 2;
  c.languages = {"en", "pt"};
  c.kernel = 3;
  c.posterior_layers = 1;
  c.flow_blocks = 2;
  c.flow_layers = 1;
  c.prior_layers = 1;
  c.upsample_kernels = {8, 8, 5};
  c.decoder_channels = 8;
  c.resblock_dilations = {1};
  c.mpd_periods = {2};
  c.msd_scales = 1;
  c.disc_channels = 4;
  c.segment_frames = 4;
  return c;
}

// Adds N(0, stddev) noise to every parameter whose name starts with prefix.
void perturb(nn::ParameterSet& ps, const std::string& prefix, double stddev,
             uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& p : ps.all()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    for (double& v : p.tensor.data()) v += n(rng);
  }
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

ModelInput random_input(const SvcModel& model, int64_t batch, int64_t frames,
                        uint64_t seed) {
  const ModelConfig& cfg = model.config();
  std::mt19937_64 rng(seed);
  ModelInput in;
  std::vector<double> spec(batch * kSpecBins * frames);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : spec) v = u(rng);
  in.spec = Tensor::from({batch, kSpecBins, frames}, spec);
  in.content = random_tensor({batch, cfg.content_dim, frames}, rng);
  std::uniform_int_distribution<int> bin(0, pitch::kPitchBins - 1);
  for (int64_t i = 0; i < batch * frames; ++i) in.pitch.push_back(bin(rng));
  in.speaker = random_tensor({batch, cfg.speaker_dim, 1}, rng, 0.3);
  for (int64_t b = 0; b < batch; ++b) in.lang.push_back(static_cast<int>(b % 2));
  in.audio = random_tensor({batch, 1, frames * audio::kHop}, rng, 0.1);
  return in;
}

// ---- align_content --------------------------------------------------------

Matrix independent_align(const Matrix& f, int64_t target) {
  Matrix out(target, f.cols);
  for (int64_t i = 0; i < target; ++i) {
    const double pos = target == 1 ? 0.0 : i * double(f.rows - 1) / double(target - 1);
    const double fl = std::floor(pos);
    const int64_t a = static_cast<int64_t>(fl);
    const int64_t b = std::min<int64_t>(a + 1, f.rows - 1);
    for (int64_t c = 0; c < f.cols; ++c) {
      out(i, c) = f(a, c) + (pos - fl) * (f(b, c) - f(a, c));
    }
  }
  return out;
}

TEST(AlignContentTest, Examples) {
  Matrix f(4, 2);
  for (int64_t i = 0; i < 8; ++i) f.data[i] = 0.5 * i - 1.0;
  EXPECT_EQ(align_content(f, 4), f);

  Matrix two(2, 3);
  two.data = {1.0, 2.0, 3.0, 5.0, -2.0, 0.0};
  Matrix three = align_content(two, 3);
  ASSERT_EQ(three.rows, 3);
  for (int64_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(three(1, c), 0.5 * (two(0, c) + two(1, c)));
    EXPECT_EQ(three(0, c), two(0, c));
    EXPECT_EQ(three(2, c), two(1, c));
  }
  EXPECT_THROW(align_content(f, 0), Error);
  EXPECT_THROW(align_content(Matrix(), 3), Error);
}

TEST(AlignContentTest, RoundTripMatchesDirectRecomputation) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix f(50, 5);
  for (double& v : f.data) v = n(rng);
  const Matrix up = align_content(f, 75);
  const Matrix back = align_content(up, 50);
  const Matrix expect = independent_align(independent_align(f, 75), 50);
  EXPECT_LT(max_abs_diff(back.data, expect.data), 1e-12);

  // Rows that are linear in time survive the round trip exactly.
  Matrix ramp(50, 2);
  for (int64_t i = 0; i < 50; ++i) {
    ramp(i, 0) = 0.1 * i;
    ramp(i, 1) = 3.0 - 0.02 * i;
  }
  EXPECT_LT(max_abs_diff(align_content(align_content(ramp, 75), 50).data, ramp.data),
            1e-12);
}

// ---- configuration --------------------------------------------------------

TEST(ModelConfigTest, PresetsValidate) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  ModelConfig desk = ModelConfig::desk();
  EXPECT_EQ(desk.inter_channels, 32);
  EXPECT_NO_THROW(desk.validate());
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(ModelConfigTest, RejectsBadShapes) {
  ModelConfig c = tiny_config();
  c.upsample_rates = {8, 8, 4};
  c.upsample_kernels = {8, 8, 4};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.inter_channels = 5;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.upsample_kernels = {9, 8, 5};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.languages.clear();
  EXPECT_THROW(SvcModel{c}, Error);
}

// ---- posterior ------------------------------------------------------------

TEST(PosteriorTest, ReparameterisationAndDeterminism) {
  SvcModel model(tiny_config());
  perturb(model.generator_params(), "post.", 0.2, 1);
  const ModelInput in = random_input(model, 2, 9, 4);
  std::mt19937_64 r1(11), r2(11);
  const PosteriorOutput a = model.posterior().forward(in.spec, in.speaker, r1);
  const PosteriorOutput b = model.posterior().forward(in.spec, in.speaker, r2);
  EXPECT_EQ(a.z.values(), b.z.values());
  EXPECT_EQ(a.z.shape(), (ag::Shape{2, 4, 9}));
  for (int64_t i = 0; i < a.z.numel(); ++i) {
    const double eps = (a.z.at(i) - a.mean.at(i)) / std::exp(a.log_std.at(i));
    EXPECT_NEAR(eps, a.eps.at(i), 1e-6);
    EXPECT_GE(a.log_std.at(i), kLogStdMin);
    EXPECT_LE(a.log_std.at(i), kLogStdMax);
    EXPECT_TRUE(std::isfinite(a.z.at(i)));
  }
}

TEST(PosteriorTest, RejectsWrongBinCount) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(1);
  EXPECT_THROW(model.posterior().forward(Tensor::zeros({1, 640, 4}),
                                         Tensor::zeros({1, 3, 1}), rng),
               Error);
}

// ---- flow -----------------------------------------------------------------

TEST(FlowTest, ZeroInitialisedCouplingsAreIdentity) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(2);
  const Tensor z = random_tensor({2, 4, 7}, rng);
  const Tensor g = random_tensor({2, 3, 1}, rng);
  const FlowOutput out = model.flow().forward(z, g);
  EXPECT_EQ(out.z.values(), z.values());
  EXPECT_EQ(out.log_det.item(), 0.0);
}

TEST(FlowTest, RoundTripFloat32AndFloat64) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst32 = 0.0, worst64 = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelConfig cfg = tiny_config();
    cfg.seed = 100 + trial;
    SvcModel model(cfg);
    perturb(model.generator_params(), "flow.", 0.3, trial);
    const int64_t frames = 7;
    std::vector<double> z(4 * frames), g(3);
    for (double& v : z) v = n(rng);
    for (double& v : g) v = n(rng);
    std::vector<float> zf(z.begin(), z.end());
    float ld32 = 0.0f;
    const auto fwd32 = model.flow().forward_eval<float>(zf, frames, g, &ld32);
    const auto back32 = model.flow().inverse_eval<float>(fwd32, frames, g);
    for (size_t i = 0; i < z.size(); ++i) {
      worst32 = std::max(worst32, std::abs(double(back32[i]) - double(zf[i])));
    }
    double ld64 = 0.0;
    const auto fwd64 = model.flow().forward_eval<double>(z, frames, g, &ld64);
    const auto back64 = model.flow().inverse_eval<double>(fwd64, frames, g);
    worst64 = std::max(worst64, max_abs_diff(back64, z));
  }
  EXPECT_LT(worst32, 1e-4);
  EXPECT_LT(worst64, 1e-8);
}

TEST(FlowTest, GraphAndEvalPassesAgree) {
  SvcModel model(tiny_config());
  perturb(model.generator_params(), "flow.", 0.3, 9);
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor({1, 4, 7}, rng);
  const Tensor g = random_tensor({1, 3, 1}, rng);
  const FlowOutput out = model.flow().forward(z, g);
  double ld = 0.0;
  const auto eval = model.flow().forward_eval<double>(z.values(), 7, g.values(), &ld);
  EXPECT_LT(max_abs_diff(out.z.values(), eval), 1e-12);
  EXPECT_NEAR(out.log_det.item(), ld, 1e-12);
}

TEST(FlowTest, LogDetIsSumOfStoredScales) {
  SvcModel model(tiny_config());
  perturb(model.generator_params(), "flow.", 0.3, 10);
  std::mt19937_64 rng(7);
  const Tensor z = random_tensor({3, 4, 7}, rng);
  const Tensor g = random_tensor({3, 3, 1}, rng);
  const FlowOutput out = model.flow().forward(z, g);
  ASSERT_EQ(out.log_scales.size(), 2u);
  double direct = 0.0;
  for (const Tensor& s : out.log_scales) {
    EXPECT_EQ(s.shape(), (ag::Shape{3, 2, 7}));
    for (double v : s.values()) direct += v;
  }
  EXPECT_NE(direct, 0.0);
  EXPECT_NEAR(out.log_det.item(), direct, 1e-6);
}

TEST(FlowTest, RejectsNonFiniteInput) {
  SvcModel model(tiny_config());
  std::vector<double> z(8, 0.0);
  z[3] = std::nan("");
  const std::vector<double> g(3, 0.0);
  EXPECT_THROW(model.flow().inverse_eval<double>(z, 2, g), Error);
  EXPECT_THROW(model.flow().forward(Tensor::from({1, 4, 2}, z), Tensor::zeros({1, 3, 1})),
               Error);
}

// ---- prior ----------------------------------------------------------------

TEST(PriorTest, UnvoicedPitchGivesFiniteOutput) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(8);
  const Tensor content = random_tensor({1, 6, 10}, rng);
  const std::vector<int> bins(10, 0);
  const int lang[] = {0};
  const PriorOutput p = model.prior().forward(content, bins, model.language_rows(lang));
  EXPECT_EQ(p.mean.shape(), (ag::Shape{1, 4, 10}));
  for (double v : p.mean.values()) EXPECT_TRUE(std::isfinite(v));
  for (double v : p.log_std.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(PriorTest, FrameMismatchThrows) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(8);
  const Tensor content = random_tensor({1, 6, 10}, rng);
  const std::vector<int> bins(9, 1);
  const int lang[] = {0};
  EXPECT_THROW(model.prior().forward(content, bins, model.language_rows(lang)), Error);
}

TEST(PriorTest, WiderHiddenKeepsOutputShape) {
  ModelConfig cfg = tiny_config();
  cfg.hidden *= 2;
  SvcModel model(cfg);
  std::mt19937_64 rng(8);
  const Tensor content = random_tensor({2, 6, 5}, rng);
  const std::vector<int> bins(10, 30);
  const int lang[] = {1, 0};
  const PriorOutput p = model.prior().forward(content, bins, model.language_rows(lang));
  EXPECT_EQ(p.mean.shape(), (ag::Shape{2, 4, 5}));
  EXPECT_EQ(p.log_std.shape(), (ag::Shape{2, 4, 5}));
}

TEST(PriorTest, DisabledLanguageEqualsZeroTable) {
  ModelConfig off = tiny_config();
  off.use_language = false;
  SvcModel base(off);
  SvcModel zeroed(tiny_config());
  for (double& v : zeroed.generator_params().at("lang.table").tensor.data()) v = 0.0;
  EXPECT_FALSE(base.generator_params().contains("lang.table"));
  EXPECT_FALSE(base.generator_params().contains("lang.proj.weight"));

  std::mt19937_64 rng(12);
  const Tensor content = random_tensor({2, 6, 8}, rng);
  std::vector<int> bins(16);
  for (int i = 0; i < 16; ++i) bins[i] = (i * 37) % 256;
  const int lang[] = {0, 1};
  const PriorOutput a = base.prior().forward(content, bins, base.language_rows(lang));
  const PriorOutput b = zeroed.prior().forward(content, bins, zeroed.language_rows(lang));
  EXPECT_EQ(a.mean.values(), b.mean.values());
  EXPECT_EQ(a.log_std.values(), b.log_std.values());
}

TEST(PriorTest, LanguageChangesPriorWhenEnabled) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(12);
  const Tensor content = random_tensor({1, 6, 8}, rng);
  const std::vector<int> bins(8, 40);
  const int en[] = {0}, pt[] = {1};
  const PriorOutput a = model.prior().forward(content, bins, model.language_rows(en));
  const PriorOutput b = model.prior().forward(content, bins, model.language_rows(pt));
  EXPECT_NE(a.mean.values(), b.mean.values());
}

// ---- decoder --------------------------------------------------------------

TEST(DecoderTest, ElevenFramesGive3520Samples) {
  SvcModel model(ModelConfig::desk());
  std::mt19937_64 rng(13);
  const Tensor z = random_tensor({1, 32, 11}, rng);
  const Tensor g = random_tensor({1, 192, 1}, rng, 0.1);
  const std::vector<int> bins(11, 60);
  const Tensor exc = pitch_excitation(bins, 1, 11);
  const Tensor y = model.decoder().forward(z, g, exc);
  EXPECT_EQ(y.shape(), (ag::Shape{1, 1, 3520}));
  EXPECT_EQ(y.values(), model.decoder().forward(z, g, exc).values());
}

TEST(DecoderTest, FuzzOutputStaysBounded) {
  SvcModel model(ModelConfig::desk());
  ag::NoGradGuard guard;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const int64_t m = 1 + static_cast<int64_t>(seed % 7);
    const Tensor z = random_tensor({1, 32, m}, rng, 2.0);
    const Tensor g = random_tensor({1, 192, 1}, rng, 0.1);
    std::vector<int> bins(m);
    for (int& b : bins) b = static_cast<int>(rng() % 256);
    const Tensor y = model.decoder().forward(z, g, pitch_excitation(bins, 1, m));
    ASSERT_EQ(y.numel(), 320 * m);
    for (double v : y.values()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_LE(std::abs(v), 2.0);
    }
  }
}

TEST(DecoderTest, ExcitationFollowsPitch) {
  const std::vector<int> bins = {0, 100, 100, 0};
  const Tensor e = pitch_excitation(bins, 1, 4);
  ASSERT_EQ(e.shape(), (ag::Shape{1, kExcitationHarmonics, 1280}));
  const double hz = pitch::bin_to_hz(100);
  for (int h = 1; h <= kExcitationHarmonics; ++h) {
    const int64_t base = (h - 1) * 1280;
    for (int i = 0; i < 320; ++i) EXPECT_EQ(e.at(base + i), 0.0);
    for (int i = 960; i < 1280; ++i) EXPECT_EQ(e.at(base + i), 0.0);
    int crossings = 0;
    for (int64_t i = base + 321; i < base + 960; ++i) {
      if (e.at(i - 1) < 0.0 && e.at(i) >= 0.0) ++crossings;
    }
    EXPECT_NEAR(crossings, h * hz * 640.0 / 24000.0, 1.0) << "harmonic " << h;
  }
  EXPECT_THROW(pitch_excitation(bins, 2, 4), Error);
}

TEST(DecoderTest, TopPitchBinKeepsEveryHarmonicBelowNyquist) {
  const int bin = pitch::kPitchBins - 1;
  EXPECT_LT(kExcitationHarmonics * pitch::bin_to_hz(bin), 12000.0);
  const Tensor e = pitch_excitation(std::vector<int>{bin}, 1, 1);
  for (int h = 1; h <= kExcitationHarmonics; ++h) {
    double energy = 0.0;
    for (int i = 0; i < 320; ++i) energy += e.at((h - 1) * 320 + i) * e.at((h - 1) * 320 + i);
    EXPECT_NEAR(energy, 160.0, 20.0) << "harmonic " << h;
  }
}

TEST(ShapeLawTest, RandomConfigurations) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig cfg = tiny_config();
    cfg.inter_channels = 2 * (1 + static_cast<int>(rng() % 3));
    cfg.hidden = 2 + static_cast<int>(rng() % 5);
    cfg.content_dim = 1 + static_cast<int>(rng() % 7);
    cfg.kernel = 1 + 2 * static_cast<int>(rng() % 2);
    cfg.flow_blocks = 1 + static_cast<int>(rng() % 3);
    cfg.seed = trial;
    SvcModel model(cfg);
    const int64_t frames = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t batch = 1 + static_cast<int64_t>(rng() % 2);
    const ModelInput in = random_input(model, batch, frames, trial);
    std::mt19937_64 r(trial);
    ag::NoGradGuard guard;
    const PosteriorOutput post = model.posterior().forward(in.spec, in.speaker, r);
    const ag::Shape latent{batch, cfg.inter_channels, frames};
    EXPECT_EQ(post.z.shape(), latent);
    EXPECT_EQ(model.flow().forward(post.z, in.speaker).z.shape(), latent);
    EXPECT_EQ(model.prior().forward(in.content, in.pitch, model.language_rows(in.lang))
                  .mean.shape(),
              latent);
    const Tensor y = model.decoder().forward(
        post.z, in.speaker, pitch_excitation(in.pitch, batch, frames));
    EXPECT_EQ(y.shape(), (ag::Shape{batch, 1, 320 * frames}));
    for (const DiscOutput& d : model.discriminators().forward(y)) {
      for (double v : d.score.values()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

// ---- generator forward ----------------------------------------------------

TEST(GeneratorTest, SegmentsLineUpWithAudio) {
  SvcModel model(tiny_config());
  const ModelInput in = random_input(model, 2, 10, 14);
  std::mt19937_64 rng(3);
  const GeneratorOutput out = generator_forward(model, in, rng);
  EXPECT_EQ(out.fake.shape(), (ag::Shape{2, 1, 1280}));
  EXPECT_EQ(out.real.shape(), (ag::Shape{2, 1, 1280}));
  for (int64_t b = 0; b < 2; ++b) {
    const int64_t s = out.starts[b];
    ASSERT_LE(s + 4, 10);
    for (int64_t i = 0; i < 1280; ++i) {
      ASSERT_EQ(out.real.at(b * 1280 + i), in.audio.at(b * 3200 + s * 320 + i));
    }
  }
}

// ---- KL -------------------------------------------------------------------

// Expectation of kl_term over the posterior noise. The integrand is quadratic
// in the noise, so the two-point Gauss-Hermite rule (+1, -1) is exact.
double expected_kl(const Tensor& m_q, const Tensor& logs_q, const Tensor& m_p,
                   const Tensor& logs_p) {
  double total = 0.0;
  for (double sign : {1.0, -1.0}) {
    std::vector<double> z(m_q.numel());
    for (size_t i = 0; i < z.size(); ++i) {
      z[i] = m_q.at(i) + sign * std::exp(logs_q.at(i));
    }
    total += 0.5 * kl_term(Tensor::from(m_q.shape(), z), logs_q, m_p, logs_p,
                           Tensor::zeros({1}))
                       .item();
  }
  return total;
}

TEST(KlTest, ClosedFormExamples) {
  auto one = [](double v) { return Tensor::from({1, 1, 1}, {v}); };
  EXPECT_NEAR(expected_kl(one(1.0), one(0.0), one(0.0), one(0.0)), 0.5, 1e-6);
  EXPECT_NEAR(expected_kl(one(0.7), one(-0.3), one(0.7), one(-0.3)), 0.0, 1e-6);
}

TEST(KlTest, MatchesGaussianClosedForm) {
  std::mt19937_64 rng(15);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const ag::Shape shape{1, 2, 3};
    const Tensor m_q = random_tensor(shape, rng), m_p = random_tensor(shape, rng);
    const Tensor logs_q = random_tensor(shape, rng, 0.5);
    const Tensor logs_p = random_tensor(shape, rng, 0.5);
    double closed = 0.0;
    for (int64_t i = 0; i < m_q.numel(); ++i) {
      const double sq = std::exp(logs_q.at(i)), sp = std::exp(logs_p.at(i));
      const double dm = m_q.at(i) - m_p.at(i);
      closed += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    closed /= static_cast<double>(m_q.numel());
    EXPECT_NEAR(expected_kl(m_q, logs_q, m_p, logs_p), closed, 1e-6);
  }
}

TEST(KlTest, MatchesMonteCarloDensityRatio) {
  // One Gaussian pair replicated over 10^6 elements; the mean over elements
  // is then a Monte-Carlo average over independent noise draws.
  const int64_t n = 1000000;
  const double mq = 0.4, lq = -0.2, mp = -0.1, lp = 0.3;
  std::mt19937_64 rng(16);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(n);
  double direct = 0.0;
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (int64_t i = 0; i < n; ++i) {
    const double eps = normal(rng);
    z[i] = mq + std::exp(lq) * eps;
    const double log_q = -lq - 0.5 * log2pi - 0.5 * eps * eps;
    const double dp = (z[i] - mp) * std::exp(-lp);
    const double log_p = -lp - 0.5 * log2pi - 0.5 * dp * dp;
    direct += log_q - log_p;
  }
  direct /= static_cast<double>(n);
  const ag::Shape shape{1, 1, n};
  const double kl = kl_term(Tensor::from(shape, z), Tensor::full(shape, lq),
                            Tensor::full(shape, mp), Tensor::full(shape, lp),
                            Tensor::zeros({1}))
                        .item();
  const double sq = std::exp(lq), sp = std::exp(lp);
  const double closed =
      std::log(sp / sq) + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
  EXPECT_NEAR(kl, direct, 0.01 * std::abs(direct));
  EXPECT_NEAR(kl, closed, 0.01 * closed);
}

TEST(KlTest, LogDetEntersPerElement) {
  const ag::Shape shape{1, 2, 2};
  const Tensor zero = Tensor::zeros(shape);
  const double base = kl_term(zero, zero, zero, zero, Tensor::zeros({1})).item();
  const double shifted = kl_term(zero, zero, zero, zero, Tensor::from({1}, {2.0})).item();
  EXPECT_NEAR(base - shifted, 0.5, 1e-15);
  EXPECT_THROW(kl_term(zero, Tensor::zeros({1, 2, 3}), zero, zero, Tensor()), Error);
}

TEST(KlTest, GradientMatchesFiniteDifferences) {
  SvcModel model(tiny_config());
  perturb(model.generator_params(), "flow.", 0.3, 17);
  perturb(model.generator_params(), "post.", 0.1, 18);
  const ModelInput in = random_input(model, 1, 5, 19);
  auto loss = [&] {
    const PosteriorOutput post = model.posterior().forward(
        in.spec, in.speaker, Tensor::from({1, 4, 5}, std::vector<double>(20, 0.3)));
    const FlowOutput fl = model.flow().forward(post.z, in.speaker);
    const PriorOutput prior =
        model.prior().forward(in.content, in.pitch, model.language_rows(in.lang));
    return kl_term(post, prior, fl.z, fl.log_det);
  };
  auto& ps = model.generator_params();
  EXPECT_LT(testing::gradcheck(loss, ps.at("flow.0.post.weight").tensor), 1e-3);
  EXPECT_LT(testing::gradcheck(loss, ps.at("prior.proj.weight").tensor), 1e-3);
  EXPECT_LT(testing::gradcheck(loss, ps.at("post.proj.weight").tensor), 1e-3);
}

// ---- GAN losses -----------------------------------------------------------

TEST(GanTest, IdenticalInputsGiveZeroMatchingLosses) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(20);
  const Tensor real = random_tensor({1, 1, 1280}, rng, 0.2);
  const GanLosses l = gan_losses(model.discriminators(), real, real.clone());
  EXPECT_EQ(l.feat_match.item(), 0.0);
  EXPECT_EQ(l.mel_l1.item(), 0.0);
  EXPECT_THROW(gan_losses(model.discriminators(), Tensor::zeros({1, 1, 0}),
                          Tensor::zeros({1, 1, 0})),
               Error);
}

TEST(GanTest, PerfectDiscriminatorHasZeroLoss) {
  std::vector<DiscOutput> real(3), fake(3);
  for (int i = 0; i < 3; ++i) {
    real[i].score = Tensor::full({2, 1, 5 + i}, 1.0);
    fake[i].score = Tensor::zeros({2, 1, 5 + i});
  }
  EXPECT_EQ(discriminator_loss(real, fake).item(), 0.0);
  EXPECT_EQ(generator_adv_loss(real).item(), 0.0);
  EXPECT_DOUBLE_EQ(generator_adv_loss(fake).item(), 3.0);
}

TEST(GanTest, CropsToShorterInput) {
  SvcModel model(tiny_config());
  std::mt19937_64 rng(22);
  const Tensor real = random_tensor({1, 1, 1500}, rng, 0.2);
  const GanLosses l =
      gan_losses(model.discriminators(), real, ag::slice(real, 2, 0, 1300));
  EXPECT_EQ(l.mel_l1.item(), 0.0);
}

class GanGradientTest : public ::testing::Test {
 protected:
  GanGradientTest() : model(tiny_config()) {
    perturb(model.generator_params(), "dec.", 0.05, 23);
    std::mt19937_64 rng(24);
    z = random_tensor({1, 4, 3}, rng);
    g = random_tensor({1, 3, 1}, rng, 0.3);
    real = random_tensor({1, 1, 960}, rng, 0.2);
    exc = pitch_excitation(std::vector<int>{0, 80, 90}, 1, 3);
  }
  Tensor fake() const { return model.decoder().forward(z, g, exc); }
  Tensor param(const char* name) { return model.generator_params().at(name).tensor; }

  SvcModel model;
  Tensor z, g, real, exc;
};

TEST_F(GanGradientTest, AdversarialLoss) {
  auto loss = [&] { return generator_adv_loss(model.discriminators().forward(fake())); };
  EXPECT_LT(testing::gradcheck(loss, param("dec.up1.weight")), 1e-3);
  EXPECT_LT(testing::gradcheck(loss, param("dec.post.weight")), 1e-3);
}

TEST_F(GanGradientTest, FeatureMatchingLoss) {
  auto loss = [&] {
    const auto& d = model.discriminators();
    return feature_matching_loss(d.forward(real), d.forward(fake()));
  };
  EXPECT_LT(testing::gradcheck(loss, param("dec.up1.weight")), 1e-3);
  EXPECT_LT(testing::gradcheck(loss, param("dec.src0.weight")), 1e-3);
}

TEST_F(GanGradientTest, MelL1Loss) {
  auto loss = [&] { return mel_l1_loss(real, fake()); };
  EXPECT_LT(testing::gradcheck(loss, param("dec.up1.weight")), 1e-3);
  EXPECT_LT(testing::gradcheck(loss, param("dec.pre.weight")), 1e-3);
}

TEST_F(GanGradientTest, DiscriminatorLoss) {
  auto loss = [&] {
    const auto& d = model.discriminators();
    return discriminator_loss(d.forward(real), d.forward(fake().detach()));
  };
  Tensor w = model.discriminator_params().at("mpd2.l1.weight").tensor;
  EXPECT_LT(testing::gradcheck(loss, w), 1e-3);
}

// ---- conversion -----------------------------------------------------------

class ConvertTest : public ::testing::Test {
 protected:
  ConvertTest() : model(make_config()) {
    perturb(model.generator_params(), "flow.", 0.1, 25);
    model.set_ready(true);
  }
  static ModelConfig make_config() {
    ModelConfig c = tiny_config();
    c.content_dim = content::BackboneConfig{}.output_dim;
    return c;
  }
  SvcModel model;
  content::ContentBackbone backbone;
  speaker::Embedding target{0.2, -0.5, 0.8};
};

TEST_F(ConvertTest, DeterministicAtZeroNoise) {
  const audio::Waveform src{testing::sine(220, 0.8, 16000, 0.3), 16000};
  ConvertOptions opts;
  opts.noise_scale = 0.0;
  const audio::Waveform a = convert(model, backbone, src, target, opts);
  opts.seed = 99;
  const audio::Waveform b = convert(model, backbone, src, target, opts);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.sample_rate, 24000);
  for (double v : a.samples) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LE(std::abs(v), 1.0);
  }
}

TEST_F(ConvertTest, OutputFollowsFrameLaw) {
  for (double seconds : {0.5, 0.77, 1.3}) {
    for (int rate : {16000, 22050, 24000}) {
      const audio::Waveform src{testing::sine(180, seconds, rate, 0.3), rate};
      const int64_t frames =
          audio::frame_count(audio::resample(src, audio::kSynthesisRate).size());
      const audio::Waveform out = convert(model, backbone, src, target, {});
      EXPECT_EQ(out.size(), frames * 320);
    }
  }
}

TEST_F(ConvertTest, Errors) {
  const audio::Waveform src{testing::sine(220, 0.8, 16000, 0.3), 16000};
  ConvertOptions opts;
  opts.language = "xx";
  try {
    convert(model, backbone, src, target, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unknown language"), std::string::npos);
  }
  opts.language = "pt";
  EXPECT_NO_THROW(convert(model, backbone, src, target, opts));
  EXPECT_THROW(convert(model, backbone, {testing::sine(220, 0.4, 16000), 16000}, target,
                       {}),
               Error);
  EXPECT_THROW(convert(model, backbone, src, speaker::Embedding{1.0, 2.0}, {}), Error);
  SvcModel fresh(make_config());
  try {
    convert(fresh, backbone, src, target, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("not trained"), std::string::npos);
  }
}

}  // namespace
}  // namespace freesvc::svc
