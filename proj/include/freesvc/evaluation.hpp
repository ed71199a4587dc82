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
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freesvc/pitch.hpp"

namespace freesvc::eval {

// ---- alignment and correlation --------------------------------------------

struct DtwPath {
  std::vector<std::pair<int64_t, int64_t>> steps;  // (index into a, index into b)
};

struct DtwResult {
  DtwPath path;
  double cost = 0.0;
};

using Distance = std::function<double(double, double)>;

// Minimum-cost monotone alignment with steps (1,0), (0,1) and (1,1). The
// default distance is the absolute difference. Equal-cost predecessors are
// resolved in the order (1,1), (1,0), (0,1).
DtwResult dtw_align(std::span<const double> a, std::span<const double> b,
                    const Distance& dist = {});

// Throws "zero variance" when either sequence is constant.
double pearson(std::span<const double> x, std::span<const double> y);

enum class F0Scale { LogHz, Hz };
F0Scale parse_f0_scale(const std::string& name);  // "log" or "hz"

// Unvoiced frames of both contours are dropped, the remaining values are
// standardised and aligned with DTW, and the original values are correlated
// over the aligned pairs. A transposed contour scores 1.
double f0ppc(const pitch::F0Contour& ref, const pitch::F0Contour& gen,
             F0Scale scale = F0Scale::LogHz);

// ---- error rates ------------------------------------------------------------

// Whitespace-separated words.
std::vector<std::string> word_tokens(const std::string& text);
// UTF-8 code points after trimming and collapsing whitespace runs to one space.
std::vector<std::string> char_tokens(const std::string& text);

// Unit-cost Levenshtein distance.
int64_t edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp);
// Distance divided by the reference length; throws on an empty reference.
double edit_rate(std::span<const std::string> ref, std::span<const std::string> hyp);
double word_error_rate(const std::string& ref, const std::string& hyp);
double char_error_rate(const std::string& ref, const std::string& hyp);

// ---- bootstrap statistics -----------------------------------------------------

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

using Statistic = std::function<double(std::span<const double>)>;

double mean(std::span<const double> v);
// Sample standard deviation (n - 1 denominator); 0 for a single value.
double stddev(std::span<const double> v);

// Percentile interval of `statistic` over `n_boot` resamples with
// replacement. Percentiles interpolate linearly between order statistics.
Interval bootstrap_ci(std::span<const double> values, std::mt19937_64& rng,
                      int n_boot = 1000, double level = 95.0,
                      const Statistic& statistic = {});

enum class Pairing { Auto, Paired, Unpaired };

// True when the bootstrap interval of mean(variant) - mean(baseline)
// excludes 0. Auto pairs items when the lengths agree and resamples the two
// sides independently otherwise.
bool significance_vs_baseline(std::span<const double> baseline,
                              std::span<const double> variant, std::mt19937_64& rng,
                              Pairing pairing = Pairing::Auto, int n_boot = 1000);

// ---- reports --------------------------------------------------------------------

struct ConditionRow {
  std::string name;
  int64_t count = 0;
  double mean = 0.0;
  double std = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool significant = false;  // always false without a baseline
};

struct ReportSection {
  std::string title;
  std::vector<ConditionRow> rows;
};

struct MetricReport {
  std::vector<ReportSection> sections;
  std::vector<std::string> warnings;
};

// Mean, std and bootstrap interval of `values`; the significance flag is
// computed against `baseline` when one is given.
ConditionRow summarize(const std::string& name, std::span<const double> values,
                       std::mt19937_64& rng,
                       const std::vector<double>* baseline = nullptr,
                       Pairing pairing = Pairing::Auto);

enum class SpeakerGroup { KnownSinging, KnownSpeech, Unknown };
std::string to_string(SpeakerGroup g);
SpeakerGroup parse_speaker_group(const std::string& name);

// Utterance embeddings per speaker.
using SpeakerEmbeddings = std::map<std::string, std::vector<std::vector<double>>>;

struct SimilarityResult {
  // Cosine between the average real and the average generated embedding.
  std::map<std::string, double> per_speaker;
  MetricReport report;  // one section, one row per group that has speakers
};

// Speakers present on one side only, or without a group, are excluded with
// a warning. With `baseline`, each group is flagged against the baseline's
// values for the same speakers (paired when the speaker sets match).
SimilarityResult speaker_similarity_report(
    const SpeakerEmbeddings& real, const SpeakerEmbeddings& generated,
    const std::map<std::string, SpeakerGroup>& groups, std::mt19937_64& rng,
    const SimilarityResult* baseline = nullptr, const std::string& condition = "generated");

double cosine(std::span<const double> a, std::span<const double> b);
std::vector<double> average(const std::vector<std::vector<double>>& rows);

// `utterance_id<TAB>text` per line; blank lines and `#` comments skipped.
std::map<std::string, std::string> load_transcripts(const std::string& path);
std::map<std::string, std::string> parse_transcripts(std::istream& in,
                                                     const std::string& source);

// Tab-separated rows: section, name, count, mean, std, ci_low, ci_high, significant.
void write_report_tsv(std::ostream& out, const MetricReport& report);
// Fixed-width tables, one per section, followed by the warnings.
void write_report_table(std::ostream& out, const MetricReport& report);

}  // namespace freesvc::eval
