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

#include "freesvc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "freesvc/tensor.hpp"

namespace freesvc::eval {

namespace {

// Linear interpolation between order statistics at fraction q in [0, 1].
double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> voiced_values(const pitch::F0Contour& c, F0Scale scale) {
  std::vector<double> out;
  for (int64_t i = 0; i < c.size(); ++i) {
    if (!c.voiced[i] || c.f0_hz[i] <= 0.0) continue;
    out.push_back(scale == F0Scale::LogHz ? std::log(c.f0_hz[i]) : c.f0_hz[i]);
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

// ---- alignment and correlation --------------------------------------------

DtwResult dtw_align(std::span<const double> a, std::span<const double> b,
                    const Distance& dist) {
  if (a.empty() || b.empty()) throw Error("dtw_align: empty sequence");
  const auto n = static_cast<int64_t>(a.size());
  const auto m = static_cast<int64_t>(b.size());
  auto d = [&](int64_t i, int64_t j) {
    return dist ? dist(a[i], b[j]) : std::abs(a[i] - b[j]);
  };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(n * m, kInf);
  auto at = [&](int64_t i, int64_t j) -> double& { return acc[i * m + j]; };
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      double best = 0.0;
      if (i > 0 || j > 0) {
        best = kInf;
        if (i > 0 && j > 0) best = at(i - 1, j - 1);
        if (i > 0) best = std::min(best, at(i - 1, j));
        if (j > 0) best = std::min(best, at(i, j - 1));
      }
      at(i, j) = best + d(i, j);
    }
  }
  DtwResult r;
  r.cost = at(n - 1, m - 1);
  int64_t i = n - 1, j = m - 1;
  r.path.steps.emplace_back(i, j);
  while (i > 0 || j > 0) {
    const double diag = (i > 0 && j > 0) ? at(i - 1, j - 1) : kInf;
    const double up = i > 0 ? at(i - 1, j) : kInf;
    const double left = j > 0 ? at(i, j - 1) : kInf;
    if (diag <= up && diag <= left) {
      --i;
      --j;
    } else if (up <= left) {
      --i;
    } else {
      --j;
    }
    r.path.steps.emplace_back(i, j);
  }
  std::reverse(r.path.steps.begin(), r.path.steps.end());
  return r;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson: sequences differ in length");
  if (x.size() < 2) throw Error("pearson: need at least 2 values");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

F0Scale parse_f0_scale(const std::string& name) {
  if (name == "log" || name == "log-hz") return F0Scale::LogHz;
  if (name == "hz" || name == "linear") return F0Scale::Hz;
  throw Error("unknown f0 scale '" + name + "' (expected log or hz)");
}

double f0ppc(const pitch::F0Contour& ref, const pitch::F0Contour& gen, F0Scale scale) {
  const std::vector<double> a = voiced_values(ref, scale);
  const std::vector<double> b = voiced_values(gen, scale);
  if (a.size() < 2 || b.size() < 2) {
    throw Error("f0ppc: fewer than 2 voiced frames (reference " +
                std::to_string(a.size()) + ", generated " + std::to_string(b.size()) + ")");
  }
  // DTW runs on standardised contours so that a transposition, which shifts
  // log-f0 or scales Hz, does not distort the alignment.
  auto standardised = [](std::vector<double> v) {
    const double m = mean(v);
    double ss = 0.0;
    for (double& x : v) {
      x -= m;
      ss += x * x;
    }
    const double sd = std::sqrt(ss / static_cast<double>(v.size()));
    if (!(sd > 0.0)) throw Error("f0ppc: zero variance contour");
    for (double& x : v) x /= sd;
    return v;
  };
  const DtwResult r = dtw_align(standardised(a), standardised(b));
  std::vector<double> x, y;
  x.reserve(r.path.steps.size());
  y.reserve(r.path.steps.size());
  for (const auto& [i, j] : r.path.steps) {
    x.push_back(a[i]);
    y.push_back(b[j]);
  }
  return pearson(x, y);
}

// ---- error rates ------------------------------------------------------------

std::vector<std::string> word_tokens(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> char_tokens(const std::string& text) {
  std::string collapsed;
  bool space = false;
  for (char c : trim(text)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space) collapsed.push_back(' ');
    space = false;
    collapsed.push_back(c);
  }
  std::vector<std::string> out;
  for (size_t i = 0; i < collapsed.size();) {
    const auto lead = static_cast<unsigned char>(collapsed[i]);
    size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, collapsed.size() - i);
    out.push_back(collapsed.substr(i, len));
    i += len;
  }
  return out;
}

int64_t edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp) {
  std::vector<int64_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= hyp.size(); ++j) {
      const int64_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double edit_rate(std::span<const std::string> ref, std::span<const std::string> hyp) {
  if (ref.empty()) throw Error("edit_rate: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

double word_error_rate(const std::string& ref, const std::string& hyp) {
  return edit_rate(word_tokens(ref), word_tokens(hyp));
}

double char_error_rate(const std::string& ref, const std::string& hyp) {
  return edit_rate(char_tokens(ref), char_tokens(hyp));
}

// ---- bootstrap statistics -----------------------------------------------------

double mean(std::span<const double> v) {
  if (v.empty()) throw Error("mean: empty input");
  // Accumulating offsets from the first value keeps constant data exact.
  double s = 0.0;
  for (double x : v) s += x - v.front();
  return v.front() + s / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Interval bootstrap_ci(std::span<const double> values, std::mt19937_64& rng, int n_boot,
                      double level, const Statistic& statistic) {
  if (values.empty()) throw Error("bootstrap_ci: empty input");
  if (n_boot < 1) throw Error("bootstrap_ci: n_boot must be positive");
  if (!(level > 0.0 && level < 100.0)) throw Error("bootstrap_ci: level must be in (0, 100)");
  std::uniform_int_distribution<size_t> pick(0, values.size() - 1);
  std::vector<double> sample(values.size());
  std::vector<double> stats(n_boot);
  for (int k = 0; k < n_boot; ++k) {
    for (double& s : sample) s = values[pick(rng)];
    stats[k] = statistic ? statistic(sample) : mean(sample);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (100.0 - level) / 200.0;
  return {percentile(stats, tail), percentile(stats, 1.0 - tail)};
}

bool significance_vs_baseline(std::span<const double> baseline,
                              std::span<const double> variant, std::mt19937_64& rng,
                              Pairing pairing, int n_boot) {
  if (baseline.empty() || variant.empty()) throw Error("significance_vs_baseline: empty input");
  const bool paired = pairing == Pairing::Paired ||
                      (pairing == Pairing::Auto && baseline.size() == variant.size());
  Interval ci;
  if (paired) {
    if (baseline.size() != variant.size()) {
      throw Error("significance_vs_baseline: paired samples differ in length");
    }
    std::vector<double> diff(variant.size());
    for (size_t i = 0; i < diff.size(); ++i) diff[i] = variant[i] - baseline[i];
    ci = bootstrap_ci(diff, rng, n_boot);
  } else {
    std::uniform_int_distribution<size_t> pb(0, baseline.size() - 1), pv(0, variant.size() - 1);
    std::vector<double> stats(n_boot), sb(baseline.size()), sv(variant.size());
    for (int k = 0; k < n_boot; ++k) {
      for (double& x : sb) x = baseline[pb(rng)];
      for (double& x : sv) x = variant[pv(rng)];
      stats[k] = mean(sv) - mean(sb);
    }
    std::sort(stats.begin(), stats.end());
    ci = {percentile(stats, 0.025), percentile(stats, 0.975)};
  }
  return ci.low > 0.0 || ci.high < 0.0;
}

// ---- reports --------------------------------------------------------------------

ConditionRow summarize(const std::string& name, std::span<const double> values,
                       std::mt19937_64& rng, const std::vector<double>* baseline,
                       Pairing pairing) {
  ConditionRow row;
  row.name = name;
  row.count = static_cast<int64_t>(values.size());
  row.mean = mean(values);
  row.std = stddev(values);
  const Interval ci = bootstrap_ci(values, rng);
  row.ci_low = ci.low;
  row.ci_high = ci.high;
  if (baseline != nullptr) {
    row.significant = significance_vs_baseline(*baseline, values, rng, pairing);
  }
  return row;
}

std::string to_string(SpeakerGroup g) {
  switch (g) {
    case SpeakerGroup::KnownSinging: return "known-singing";
    case SpeakerGroup::KnownSpeech: return "known-speech";
    case SpeakerGroup::Unknown: return "unknown";
  }
  return "?";
}

SpeakerGroup parse_speaker_group(const std::string& name) {
  for (SpeakerGroup g :
       {SpeakerGroup::KnownSinging, SpeakerGroup::KnownSpeech, SpeakerGroup::Unknown}) {
    if (name == to_string(g)) return g;
  }
  throw Error("unknown speaker group '" + name +
              "' (expected known-singing, known-speech or unknown)");
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw Error("cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw Error("cosine: zero-norm vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<double> average(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw Error("average: no embeddings");
  std::vector<double> out(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != out.size()) throw Error("average: embedding dimensions differ");
    for (size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v /= static_cast<double>(rows.size());
  return out;
}

SimilarityResult speaker_similarity_report(const SpeakerEmbeddings& real,
                                           const SpeakerEmbeddings& generated,
                                           const std::map<std::string, SpeakerGroup>& groups,
                                           std::mt19937_64& rng,
                                           const SimilarityResult* baseline,
                                           const std::string& condition) {
  SimilarityResult out;
  std::vector<std::string>& warnings = out.report.warnings;
  for (const auto& [spk, embs] : real) {
    const auto g = generated.find(spk);
    if (g == generated.end() || g->second.empty()) {
      warnings.push_back("speaker " + spk + " has no generated audio; excluded");
      continue;
    }
    if (embs.empty()) {
      warnings.push_back("speaker " + spk + " has no reference audio; excluded");
      continue;
    }
    if (!groups.contains(spk)) {
      warnings.push_back("speaker " + spk + " has no group; excluded");
      continue;
    }
    out.per_speaker[spk] = cosine(average(embs), average(g->second));
  }
  for (const auto& [spk, embs] : generated) {
    if (!real.contains(spk)) {
      warnings.push_back("speaker " + spk + " has no reference audio; excluded");
    }
  }

  ReportSection section;
  section.title = "Speaker similarity (average embeddings, reference vs generated)";
  for (SpeakerGroup grp :
       {SpeakerGroup::KnownSinging, SpeakerGroup::KnownSpeech, SpeakerGroup::Unknown}) {
    std::vector<std::string> speakers;
    std::vector<double> values;
    for (const auto& [spk, sim] : out.per_speaker) {
      if (groups.at(spk) != grp) continue;
      speakers.push_back(spk);
      values.push_back(sim);
    }
    if (values.empty()) continue;
    const std::string name = condition + " / " + to_string(grp);
    if (baseline == nullptr) {
      section.rows.push_back(summarize(name, values, rng));
      continue;
    }
    std::vector<double> base;
    bool same_speakers = true;
    for (const auto& spk : speakers) {
      const auto it = baseline->per_speaker.find(spk);
      if (it == baseline->per_speaker.end()) {
        same_speakers = false;
        continue;
      }
      base.push_back(it->second);
    }
    for (const auto& [spk, sim] : baseline->per_speaker) {
      if (groups.contains(spk) && groups.at(spk) == grp &&
          !out.per_speaker.contains(spk)) {
        base.push_back(sim);
        same_speakers = false;
      }
    }
    if (base.empty()) {
      warnings.push_back("baseline has no speakers in group " + to_string(grp) +
                         "; significance not computed");
      section.rows.push_back(summarize(name, values, rng));
      continue;
    }
    section.rows.push_back(summarize(name, values, rng, &base,
                                     same_speakers ? Pairing::Paired : Pairing::Unpaired));
  }
  out.report.sections.push_back(std::move(section));
  return out;
}

std::map<std::string, std::string> parse_transcripts(std::istream& in,
                                                     const std::string& source) {
  std::map<std::string, std::string> out;
  std::string line;
  for (int64_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || trim(line).front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw Error("malformed transcript " + source + " line " + std::to_string(n) +
                  ": expected utterance_id<TAB>text");
    }
    const std::string id = line.substr(0, tab);
    if (!out.emplace(id, line.substr(tab + 1)).second) {
      throw Error("duplicate utterance " + id + " in " + source + " line " + std::to_string(n));
    }
  }
  return out;
}

std::map<std::string, std::string> load_transcripts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open transcript file " + path);
  return parse_transcripts(in, path);
}

void write_report_tsv(std::ostream& out, const MetricReport& report) {
  out << "section\tname\tcount\tmean\tstd\tci_low\tci_high\tsignificant\n";
  out << std::setprecision(10);
  for (const auto& s : report.sections) {
    for (const auto& r : s.rows) {
      out << s.title << '\t' << r.name << '\t' << r.count << '\t' << r.mean << '\t' << r.std
          << '\t' << r.ci_low << '\t' << r.ci_high << '\t' << (r.significant ? 1 : 0) << '\n';
    }
  }
}

void write_report_table(std::ostream& out, const MetricReport& report) {
  for (const auto& s : report.sections) {
    out << s.title << "\n";
    size_t width = 9;
    for (const auto& r : s.rows) width = std::max(width, r.name.size() + 2);
    out << std::left << std::setw(static_cast<int>(width)) << "condition" << std::right
        << std::setw(6) << "n" << std::setw(20) << "mean +- std" << std::setw(24)
        << "95% CI" << "\n";
    for (const auto& r : s.rows) {
      std::ostringstream ms, ci;
      ms << std::fixed << std::setprecision(3) << r.mean << " +- " << r.std
         << (r.significant ? " **" : "   ");
      ci << std::fixed << std::setprecision(3) << "[" << r.ci_low << ", " << r.ci_high << "]";
      out << std::left << std::setw(static_cast<int>(width)) << r.name << std::right
          << std::setw(6) << r.count << std::setw(20) << ms.str() << std::setw(24) << ci.str()
          << "\n";
    }
    out << "\n";
  }
  if (!report.warnings.empty()) {
    out << "warnings:\n";
    for (const auto& w : report.warnings) out << "  " << w << "\n";
  }
  out << "** significant difference from the baseline (bootstrap 95% CI of the mean "
         "difference excludes 0)\n";
}

}  // namespace freesvc::eval
