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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "test_util.hpp"

namespace freesvc::pitch {
namespace {

using testing::median;
using testing::sine;

std::vector<double> voiced_values(const F0Contour& c, int64_t begin,
                                  int64_t end) {
  std::vector<double> v;
  for (int64_t i = begin; i < end; ++i)
    if (c.voiced[i]) v.push_back(c.f0_hz[i]);
  return v;
}

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "freesvc_pitch_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

class ToneTest : public ::testing::TestWithParam<double> {};

TEST_P(ToneTest, MedianWithinOnePercent) {
  const double hz = GetParam();
  F0Contour c = extract_f0({sine(hz, 1.0, 16000), 16000});
  ASSERT_EQ(c.size(), 16000 / 320 + 1);
  c.validate();
  EXPECT_GE(static_cast<double>(c.voiced_count()), 0.9 * c.size());
  const double m = median(voiced_values(c, 0, c.size()));
  EXPECT_LT(std::abs(m - hz) / hz, 0.01) << "median " << m;
}

INSTANTIATE_TEST_SUITE_P(SyntheticTones, ToneTest,
                         ::testing::Values(100.0, 220.0, 440.0, 600.0, 880.0));

TEST(PitchTest, SilenceIsUnvoiced) {
  F0Contour c = extract_f0({std::vector<double>(16000, 0.0), 16000});
  EXPECT_EQ(c.voiced_count(), 0);
  for (double f : c.f0_hz) EXPECT_EQ(f, 0.0);
}

TEST(PitchTest, PiecewiseTones) {
  auto first = sine(220, 1.0, 16000);
  auto second = sine(440, 1.0, 16000);
  first.insert(first.end(), second.begin(), second.end());
  F0Contour c = extract_f0({first, 16000});
  const int64_t half = c.size() / 2;
  const double m1 = median(voiced_values(c, 0, half));
  const double m2 = median(voiced_values(c, half, c.size()));
  EXPECT_LT(std::abs(m1 - 220) / 220, 0.02);
  EXPECT_LT(std::abs(m2 - 440) / 440, 0.02);
}

TEST(PitchTest, NoiseIsMostlyUnvoiced) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.2);
  std::vector<double> x(16000);
  for (double& v : x) v = n(rng);
  F0Contour c = extract_f0({x, 16000});
  EXPECT_LT(static_cast<double>(c.voiced_count()), 0.2 * c.size());
}

TEST(PitchTest, LengthLaw) {
  for (int64_t n : {1024, 1500, 3200, 7777}) {
    std::vector<double> x = sine(200, n / 16000.0, 16000);
    x.resize(n, 0.0);
    EXPECT_EQ(extract_f0({x, 16000}).size(), n / 320 + 1);
  }
}

TEST(PitchTest, ExtractErrors) {
  EXPECT_THROW(extract_f0({sine(200, 0.05, 16000), 16000}), Error);
  EXPECT_THROW(extract_f0({sine(200, 1.0, 24000), 24000}), Error);
  EXPECT_THROW(extract_f0({sine(200, 1.0, 16000), 16000}, 500, 100), Error);
  EXPECT_THROW(extract_f0({sine(200, 1.0, 16000), 16000}, 0, 100), Error);
}

TEST(PitchTest, ExternalContourRoundTrip) {
  F0Contour c;
  for (int i = 0; i < 101; ++i) {
    const bool v = i % 3 != 0;
    c.voiced.push_back(v);
    c.f0_hz.push_back(v ? 100.0 + i : 0.0);
  }
  const std::string path = temp_path("contour.f0");
  save_f0(path, c);
  F0Contour back = load_external_f0(path, 101);
  EXPECT_EQ(back.f0_hz, c.f0_hz);
  EXPECT_EQ(back.voiced, c.voiced);
  try {
    load_external_f0(path, 100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("frame-count mismatch"), std::string::npos);
  }
}

TEST(PitchTest, ExternalContourErrors) {
  const std::string neg = temp_path("neg.f0");
  std::ofstream(neg) << "100 1\n-5 1\n";
  try {
    load_external_f0(neg, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("negative frequency"), std::string::npos);
  }
  const std::string bad = temp_path("bad.f0");
  std::ofstream(bad) << "100 1\nabc 1\n";
  EXPECT_THROW(load_external_f0(bad, 2), Error);
  const std::string mismatch = temp_path("mismatch.f0");
  std::ofstream(mismatch) << "100 0\n";
  EXPECT_THROW(load_external_f0(mismatch, 1), Error);
}

TEST(PitchTest, QuantizeEndpointsAndMidpoint) {
  F0Contour c;
  c.f0_hz = {50.0, 1100.0, std::sqrt(50.0 * 1100.0), 0.0};
  c.voiced = {true, true, true, false};
  CoarsePitch p = quantize_pitch(c);
  EXPECT_EQ(p.bins[0], 1);
  EXPECT_EQ(p.bins[1], 255);
  EXPECT_NEAR(p.bins[2], 128, 1);
  EXPECT_EQ(p.bins[3], 0);
}

TEST(PitchTest, QuantizeIsMonotone) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(std::log(50.0), std::log(1100.0));
  F0Contour c;
  for (int i = 0; i < 2000; ++i) {
    c.f0_hz.push_back(std::exp(u(rng)));
    c.voiced.push_back(true);
  }
  std::sort(c.f0_hz.begin(), c.f0_hz.end());
  CoarsePitch p = quantize_pitch(c);
  for (size_t i = 1; i < p.bins.size(); ++i) {
    EXPECT_LE(p.bins[i - 1], p.bins[i]);
    EXPECT_GE(p.bins[i], 1);
    EXPECT_LE(p.bins[i], 255);
  }
  // Bin centres quantise back to themselves.
  for (int b = 1; b <= 255; ++b) {
    F0Contour one;
    one.f0_hz = {bin_to_hz(b)};
    one.voiced = {true};
    EXPECT_EQ(quantize_pitch(one).bins[0], b);
  }
}

TEST(PitchTest, Transpose) {
  F0Contour c;
  c.f0_hz = {220.0, 0.0, 300.0};
  c.voiced = {true, false, true};
  F0Contour same = transpose_f0(c, 0.0);
  EXPECT_EQ(same.f0_hz, c.f0_hz);
  F0Contour up = transpose_f0(c, 12.0);
  EXPECT_DOUBLE_EQ(up.f0_hz[0], 440.0);
  EXPECT_EQ(up.f0_hz[1], 0.0);
  EXPECT_EQ(up.voiced, c.voiced);
  F0Contour back = transpose_f0(transpose_f0(c, -12.0), 12.0);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(back.f0_hz[i], c.f0_hz[i], 1e-9 * c.f0_hz[i]);
  }
  F0Contour clamped = transpose_f0(c, 48.0);
  EXPECT_EQ(clamped.f0_hz[0], 1100.0);
}

}  // namespace
}  // namespace freesvc::pitch
