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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "test_util.hpp"

namespace freesvc::content {
namespace {

using audio::Waveform;
using testing::sine;
using testing::spectral_peak_hz;
using testing::toy_voice;

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "freesvc_content_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Matrix random_matrix(int64_t r, int64_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = n(rng);
  return m;
}

// Head whose projection is the identity, so codebook rows can be hit exactly.
void make_identity_projection(SpinHead& h) {
  auto w = h.params().at("head.proj.weight").tensor.data();
  auto b = h.params().at("head.proj.bias").tensor.data();
  const int d = h.config().code_dim;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) w[i * d + j] = i == j ? 1.0 : 0.0;
  for (double& v : b) v = 0.0;
}

TEST(ContentTest, FrameLaw) {
  ContentBackbone b;
  for (int64_t n : {320, 321, 479, 480, 481, 639, 3200, 7777, 16000}) {
    Matrix f = backbone_features(b, {sine(200, n / 16000.0, 16000), 16000});
    EXPECT_EQ(f.rows, n / 320 + 1) << n;
    EXPECT_EQ(f.cols, b.dim());
  }
  EXPECT_EQ(backbone_features(b, {std::vector<double>(3200, 0.1), 16000}).rows, 11);
  EXPECT_EQ(extract_content(b, {sine(200, 1.0, 16000), 16000}).rows, 51);
}

TEST(ContentTest, ConfiguredDimension) {
  ContentBackbone b({16, 256, 1});
  Matrix f = backbone_features(b, {sine(150, 0.2, 16000), 16000});
  EXPECT_EQ(f.cols, 256);
}

TEST(ContentTest, DeterministicAndHeadFree) {
  ContentBackbone b;
  Waveform w{toy_voice(180, 0.5, 16000, {0, 1, 2, 3, 4}), 16000};
  Matrix first = backbone_features(b, w);
  EXPECT_EQ(first, backbone_features(b, w));
  EXPECT_EQ(first, extract_content(b, w));
  for (double v : first.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(ContentTest, InputErrors) {
  ContentBackbone b;
  EXPECT_THROW(backbone_features(b, {sine(200, 1.0, 24000), 24000}), Error);
  EXPECT_THROW(backbone_features(b, {std::vector<double>(319, 0.0), 16000}), Error);
  EXPECT_THROW(extract_content(b, {std::vector<double>(10, 0.0), 16000}), Error);
}

TEST(ContentTest, FeatureFileRoundTrip) {
  std::mt19937_64 rng(4);
  Matrix m = random_matrix(7, 5, rng);
  const std::string path = temp_path("features.txt");
  save_feature_file(path, m);
  EXPECT_EQ(load_feature_file(path), m);
  const std::string bad = temp_path("bad_features.txt");
  std::ofstream(bad) << "2 2\n1 2\n3\n";
  EXPECT_THROW(load_feature_file(bad), Error);
  EXPECT_THROW(load_feature_file(temp_path("missing_features.txt")), Error);
}

TEST(ContentTest, ShiftPitchMovesSpectralPeak) {
  Waveform w{sine(220, 1.0, 16000), 16000};
  for (double st : {4.0, -4.0, 1.0, -1.0, 2.5}) {
    Waveform s = shift_pitch(w, st);
    EXPECT_NEAR(static_cast<double>(s.size()), static_cast<double>(w.size()), 1.0);
    // Skip the edges, where overlap-add frames are only partly filled.
    std::vector<double> mid(s.samples.begin() + 1600, s.samples.end() - 1600);
    EXPECT_NEAR(spectral_peak_hz(mid, 16000), 220.0 * std::pow(2.0, st / 12.0), 2.0)
        << st;
  }
}

TEST(ContentTest, ShiftPitchAppliesGain) {
  Waveform w{sine(300, 0.5, 16000), 16000};
  Waveform a = shift_pitch(w, 0.0, 1.0);
  Waveform b = shift_pitch(w, 0.0, 0.7);
  for (int64_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(b.samples[i], 0.7 * a.samples[i], 1e-12);
  }
}

TEST(ContentTest, SpeakerPerturbIsSeededAndKeepsLength) {
  Waveform w{toy_voice(200, 0.6, 16000, {1, 3}), 16000};
  std::mt19937_64 r1(17), r2(17);
  Waveform a = speaker_perturb(w, r1);
  Waveform b = speaker_perturb(w, r2);
  EXPECT_EQ(a.samples, b.samples);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Waveform p = speaker_perturb(w, rng);
    EXPECT_LE(std::abs(p.size() - w.size()), 1);
    EXPECT_EQ(p.sample_rate, 16000);
  }
}

TEST(ContentTest, SpeakerPerturbShiftIsWithinRange) {
  // The peak of a perturbed 220 Hz tone must lie between 1 and 4 semitones
  // away, in either direction.
  Waveform w{sine(220, 1.0, 16000), 16000};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Waveform p = speaker_perturb(w, rng);
    std::vector<double> mid(p.samples.begin() + 1600, p.samples.end() - 1600);
    const double st = 12.0 * std::log2(spectral_peak_hz(mid, 16000) / 220.0);
    EXPECT_GE(std::abs(st), 1.0 - 0.05) << seed;
    EXPECT_LE(std::abs(st), 4.0 + 0.05) << seed;
  }
}

TEST(ContentTest, AssignmentRowsAreDistributions) {
  std::mt19937_64 rng(6);
  SpinHead h(12, {16, 8, 0.1, 0.05, 3});
  Matrix p = spin_assignments(h, random_matrix(30, 12, rng));
  ASSERT_EQ(p.rows, 30);
  ASSERT_EQ(p.cols, 16);
  for (int64_t r = 0; r < p.rows; ++r) {
    double s = 0.0;
    for (int64_t k = 0; k < p.cols; ++k) {
      EXPECT_GE(p(r, k), 0.0);
      s += p(r, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(ContentTest, FeatureOnCodebookRowSelectsIt) {
  SpinHead h(6, {10, 6, 0.01, 0.005, 5});
  make_identity_projection(h);
  const auto code = h.codebook().values();
  Matrix f(10, 6);
  for (int k = 0; k < 10; ++k)
    for (int j = 0; j < 6; ++j) f(k, j) = 3.0 * code[k * 6 + j];
  Matrix p = spin_assignments(h, f);
  for (int k = 0; k < 10; ++k) {
    EXPECT_EQ(std::max_element(p.row(k), p.row(k) + 10) - p.row(k), k);
  }
}

TEST(ContentTest, UniformCodebookGivesUniformRows) {
  SpinHead h(5, {7, 4, 0.1, 0.05, 1});
  auto c = h.params().at("head.codebook").tensor.data();
  for (int k = 0; k < 7; ++k)
    for (int j = 0; j < 4; ++j) c[k * 4 + j] = 0.3 + 0.1 * j;
  std::mt19937_64 rng(2);
  Matrix p = spin_assignments(h, random_matrix(9, 5, rng));
  for (double v : p.data) EXPECT_NEAR(v, 1.0 / 7.0, 1e-12);
}

TEST(ContentTest, UsagePenaltyBounds) {
  // Uniform assignments use every code: no penalty.
  SpinHead uniform(5, {7, 4, 0.1, 0.05, 1});
  auto c = uniform.params().at("head.codebook").tensor.data();
  for (double& v : c) v = 1.0;
  std::mt19937_64 rng(3);
  Tensor f = testing::random_tensor({6, 5}, rng);
  EXPECT_NEAR(codebook_usage_penalty(uniform, f).item(), 0.0, 1e-12);
  // Every frame sharply on one code: the penalty approaches log K.
  SpinHead sharp(4, {4, 4, 1e-3, 1e-3, 0});
  make_identity_projection(sharp);
  auto code = sharp.params().at("head.codebook").tensor.data();
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j) code[k * 4 + j] = k == j ? 1.0 : 0.0;
  Tensor one_hot = Tensor::from({2, 4}, {0, 1, 0, 0, 0, 1, 0, 0});
  EXPECT_NEAR(codebook_usage_penalty(sharp, one_hot).item(), std::log(4.0), 1e-9);
}

// Direct recomputation of the swapped-prediction loss with plain loops.
double reference_loss(const SpinHead& h, const Matrix& fa, const Matrix& fb) {
  const int64_t n = std::min(fa.rows, fb.rows);
  const int d = h.config().code_dim, kk = h.config().codebook_size;
  const int in = h.input_dim();
  const auto& w = h.params().at("head.proj.weight").tensor.values();
  const auto& b = h.params().at("head.proj.bias").tensor.values();
  const auto& c = h.codebook().values();
  auto cosines = [&](const double* f) {
    std::vector<double> z(d);
    double zn = 0.0;
    for (int i = 0; i < d; ++i) {
      z[i] = b[i];
      for (int j = 0; j < in; ++j) z[i] += w[i * in + j] * f[j];
      zn += z[i] * z[i];
    }
    std::vector<double> cos(kk);
    for (int k = 0; k < kk; ++k) {
      double dot = 0.0, cn = 0.0;
      for (int i = 0; i < d; ++i) {
        dot += z[i] * c[k * d + i];
        cn += c[k * d + i] * c[k * d + i];
      }
      cos[k] = dot / std::sqrt(zn * cn);
    }
    return cos;
  };
  auto softmax = [&](const std::vector<double>& s, double t) {
    double m = *std::max_element(s.begin(), s.end()), z = 0.0;
    std::vector<double> p(s.size());
    for (size_t k = 0; k < s.size(); ++k) z += p[k] = std::exp((s[k] - m) / t);
    for (double& v : p) v /= z;
    return p;
  };
  const double t = h.config().temperature, ts = h.config().target_temperature;
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const auto ca = cosines(fa.row(r)), cb = cosines(fb.row(r));
    const auto pa = softmax(ca, t), pb = softmax(cb, t);
    const auto ta = softmax(ca, ts), tb = softmax(cb, ts);
    for (int k = 0; k < kk; ++k) {
      total -= tb[k] * std::log(pa[k]) + ta[k] * std::log(pb[k]);
    }
  }
  return total / (2.0 * static_cast<double>(n));
}

TEST(ContentTest, LossMatchesDirectFormula) {
  std::mt19937_64 rng(12);
  SpinHead h(9, {13, 5, 0.1, 0.05, 8});
  Matrix fa = random_matrix(11, 9, rng), fb = random_matrix(14, 9, rng);
  EXPECT_NEAR(spin_loss(h, fa, fb), reference_loss(h, fa, fb), 1e-10);
  EXPECT_THROW(spin_loss(h, Matrix(0, 9), fb), Error);
}

TEST(ContentTest, PerfectAgreementLossVanishes) {
  // Orthonormal codebook, identity projection, one-hot features on code 2.
  double previous = 1e300;
  for (double t : {0.5, 0.1, 0.02, 0.005}) {
    SpinHead h(4, {4, 4, t, t / 2, 0});
    make_identity_projection(h);
    auto c = h.params().at("head.codebook").tensor.data();
    for (int k = 0; k < 4; ++k)
      for (int j = 0; j < 4; ++j) c[k * 4 + j] = k == j ? 1.0 : 0.0;
    Matrix f(3, 4);
    for (int r = 0; r < 3; ++r) f(r, 2) = 1.0;
    const double loss = spin_loss(h, f, f);
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-20);
}

TEST(ContentTest, LossGradientWrtCodebook) {
  std::mt19937_64 rng(21);
  SpinHead h(4, {8, 4, 0.1, 0.05, 9});
  Tensor fa = testing::random_tensor({4, 4}, rng);
  Tensor fb = testing::random_tensor({4, 4}, rng);
  Tensor code = h.params().at("head.codebook").tensor;
  // Targets are gradient-stopped, so the reference differentiates the
  // cross-entropy with the targets frozen at the evaluation point.
  const Tensor ta = spin_targets(h, fa), tb = spin_targets(h, fb);
  const double err = testing::gradcheck(
      [&] { return spin_cross_entropy(h, fa, fb, ta, tb); }, code, 1e-6, 1e-6, 64);
  EXPECT_LT(err, 1e-3);
  spin_loss(h, fa, fb).backward();
  std::vector<double> from_loss(code.grad().begin(), code.grad().end());
  code.zero_grad();
  spin_cross_entropy(h, fa, fb, ta, tb).backward();
  for (size_t i = 0; i < from_loss.size(); ++i) {
    EXPECT_NEAR(from_loss[i], code.grad()[i], 1e-12);
  }
}

TEST(ContentTest, PaperScaleConfigIsAccepted) {
  SpinConfig c;
  c.batch_size = 32;
  c.epochs = 3;
  EXPECT_NO_THROW(c.validate());
  SpinHead h(256, {2048, 256, 0.1, 0.05, 1});
  EXPECT_EQ(h.codebook().dim(0), 2048);
  EXPECT_EQ(h.codebook().dim(1), 256);
  SpinConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(SpinHead(8, {8, 4, 0.0, 0.05, 1}), Error);
}

TEST(ContentTest, FinetuneRejectsEmptyDataset) {
  ContentBackbone b;
  SpinHead h(b.dim());
  EXPECT_THROW(spin_finetune(b, h, {}, {}), Error);
}

// One shared toy fine-tuning run: 8 utterances, 200 updates.
class SpinTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> f0(140.0, 260.0);
    std::uniform_int_distribution<int> phone(0, 5);
    for (int u = 0; u < 8; ++u) {
      std::vector<int> phones(6);
      for (int& p : phones) p = phone(rng);
      data_.push_back({toy_voice(f0(rng), 0.6, 16000, phones), 16000});
    }
    // Fixed perturbed pairs for before/after comparisons.
    for (const auto& w : data_) {
      eval_a_.push_back(speaker_perturb(w, rng));
      eval_b_.push_back(speaker_perturb(w, rng));
    }
    backbone_ = std::make_unique<ContentBackbone>();
    head_ = std::make_unique<SpinHead>(backbone_->dim());
    for (const auto& p : backbone_->params().all())
      before_.push_back(p.tensor.values());
    loss_before_ = eval_loss();
    agreement_before_ = eval_agreement();
    SpinConfig config;
    config.batch_size = 8;
    config.max_steps = 200;
    config.epochs = 200;
    report_ = spin_finetune(*backbone_, *head_, data_, config);
  }

  static void TearDownTestSuite() {
    backbone_.reset();
    head_.reset();
  }

  static double eval_loss() {
    double total = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) {
      total += spin_loss(*head_, extract_content(*backbone_, eval_a_[i]),
                         extract_content(*backbone_, eval_b_[i]));
    }
    return total / static_cast<double>(data_.size());
  }

  static double eval_agreement() {
    double total = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) {
      total += assignment_agreement(*head_, extract_content(*backbone_, eval_a_[i]),
                                    extract_content(*backbone_, eval_b_[i]));
    }
    return total / static_cast<double>(data_.size());
  }

  static inline std::vector<Waveform> data_, eval_a_, eval_b_;
  static inline std::unique_ptr<ContentBackbone> backbone_;
  static inline std::unique_ptr<SpinHead> head_;
  static inline std::vector<std::vector<double>> before_;
  static inline double loss_before_ = 0.0, agreement_before_ = 0.0;
  static inline SpinReport report_;
};

TEST_F(SpinTraining, OnlyLastTwoLayersChange) {
  ASSERT_EQ(report_.steps, 200);
  const auto& params = backbone_->params().all();
  for (size_t i = 0; i < params.size(); ++i) {
    const bool late = params[i].name.rfind(ContentBackbone::layer_prefix(4), 0) == 0 ||
                      params[i].name.rfind(ContentBackbone::layer_prefix(5), 0) == 0;
    if (late) {
      EXPECT_NE(params[i].tensor.values(), before_[i]) << params[i].name;
    } else {
      EXPECT_EQ(params[i].tensor.values(), before_[i]) << params[i].name;
    }
  }
  for (int l = 0; l < ContentBackbone::kLayers; ++l) {
    EXPECT_EQ(backbone_->layer_trainable(l), l >= ContentBackbone::kLayers - 2) << l;
  }
}

TEST_F(SpinTraining, LossDecreases) {
  EXPECT_LT(eval_loss(), loss_before_);
  EXPECT_LT(report_.losses.back(), report_.losses.front());
}

TEST_F(SpinTraining, CodebookIsNotDead) {
  std::vector<double> rows;
  Matrix all(0, head_->config().codebook_size);
  for (const auto& w : data_) {
    Matrix p = spin_assignments(*head_, extract_content(*backbone_, w));
    all.data.insert(all.data.end(), p.data.begin(), p.data.end());
    all.rows += p.rows;
  }
  const double perplexity = codebook_perplexity(all);
  Matrix dead(4, head_->config().codebook_size);
  for (int r = 0; r < 4; ++r) dead(r, 3) = 1.0;
  EXPECT_DOUBLE_EQ(codebook_perplexity(dead), 1.0);
  EXPECT_GT(perplexity, codebook_perplexity(dead));
  EXPECT_GT(perplexity, 1.5);
  std::cout << "toy codebook perplexity " << perplexity << '\n';
}

TEST_F(SpinTraining, ViewsAgreeMoreAfterTraining) {
  EXPECT_GT(eval_agreement(), agreement_before_);
}

}  // namespace
}  // namespace freesvc::content
