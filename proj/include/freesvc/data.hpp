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
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "freesvc/audio.hpp"
#include "freesvc/content.hpp"
#include "freesvc/matrix.hpp"
#include "freesvc/speaker.hpp"
#include "freesvc/svc.hpp"

namespace freesvc::data {

enum class ContentType { Speech, Singing };
enum class Gender { F, M, Unknown };

// Datasets without a language (instrumental-style singing corpora) use this.
inline constexpr const char* kUnknownLanguage = "unknown";

struct ManifestRecord {
  std::string audio_path;
  std::string speaker_id;
  std::string language;
  ContentType content_type = ContentType::Speech;
  Gender gender = Gender::Unknown;
  std::string dataset;
  bool test_split = false;

  bool operator==(const ManifestRecord&) const = default;
};

std::string to_string(ContentType t);
std::string to_string(Gender g);

// Tab-separated, seven columns in the field order above; blank lines and
// lines starting with '#' are skipped. A language of "-" reads as unknown.
// When `languages` is non-empty every record's language must be one of them
// or unknown. Relative audio paths resolve against the manifest's directory.
std::vector<ManifestRecord> load_manifest(const std::string& path,
                                          std::span<const std::string> languages = {});
std::vector<ManifestRecord> parse_manifest(std::istream& in, const std::string& source,
                                           const std::string& base_dir = "",
                                           std::span<const std::string> languages = {});
void save_manifest(const std::string& path, std::span<const ManifestRecord> records);

struct EvalSplits {
  std::vector<ManifestRecord> known_eval;
  std::vector<ManifestRecord> unknown_eval;
  std::vector<ManifestRecord> train;
};

inline constexpr int kKnownEvalClips = 10;

// Held-out evaluation sets. unknown_eval takes every test-split record and,
// for each dataset without a test split, every record of the
// lexicographically smallest F and M speaker. Any speaker that lands in
// unknown_eval leaves train completely. known_eval holds the first 10 train
// clips (manifest order) of each remaining speaker, or 1 when the speaker has
// fewer than 10; those clips stay in train.
EvalSplits split_eval_sets(std::span<const ManifestRecord> records);

enum class GroupBy { LanguageSpeaker, Speaker, Language, Dataset };
GroupBy parse_group_by(const std::string& name);

struct SampleWeights {
  std::vector<double> weights;  // one per record, 1 / size of its group
  std::vector<int> groups;      // group index per record
  int group_count = 0;
};

SampleWeights compute_weights(std::span<const ManifestRecord> records,
                              GroupBy by = GroupBy::LanguageSpeaker);

// Probability mass of each group under P(i) = w_i / sum(w).
std::vector<double> group_probabilities(const SampleWeights& w);

// n i.i.d. draws with replacement, P(i) = w_i / sum(w).
std::vector<size_t> weighted_sample(std::span<const double> weights, size_t n,
                                    std::mt19937_64& rng);

// Features of one utterance on the 24 kHz frame grid.
struct Example {
  std::string id;
  std::vector<double> audio;  // 24 kHz, zero-padded to frames * 320
  Matrix spec;                // frames x 641 linear magnitudes
  Matrix content;             // frames x Dc, aligned from the 16 kHz grid
  std::vector<int> pitch;     // frames coarse bins
  speaker::Embedding speaker;
  int language = 0;

  int64_t frames() const { return spec.rows; }
  bool operator==(const Example&) const = default;
};

Example prepare_example(const audio::Waveform& w,
                        const content::ContentBackbone& backbone,
                        const speaker::SpeakerEncoder& encoder, int language,
                        std::string id = "");

// Little-endian binary cache file for a prepared example.
void save_example(const std::string& path, const Example& e);
Example load_example(const std::string& path);

// Random crops of `segment_frames` frames from each listed example. Examples
// shorter than the segment are skipped and reported in `warnings`.
svc::ModelInput make_batch(std::span<const Example> examples,
                           std::span<const size_t> indices, int64_t segment_frames,
                           std::mt19937_64& rng,
                           std::vector<std::string>* warnings = nullptr);

}  // namespace freesvc::data
