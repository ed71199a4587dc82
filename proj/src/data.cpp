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

#include "freesvc/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "freesvc/pitch.hpp"

namespace freesvc::data {

namespace {

constexpr size_t kColumns = 7;

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

[[noreturn]] void bad_line(const std::string& source, int64_t line_no,
                           const std::string& why) {
  throw Error("malformed manifest " + source + " line " + std::to_string(line_no) +
              ": " + why);
}

}  // namespace

std::string to_string(ContentType t) {
  return t == ContentType::Singing ? "singing" : "speech";
}

std::string to_string(Gender g) {
  switch (g) {
    case Gender::F:
      return "F";
    case Gender::M:
      return "M";
    default:
      return "unknown";
  }
}

std::vector<ManifestRecord> parse_manifest(std::istream& in, const std::string& source,
                                           const std::string& base_dir,
                                           std::span<const std::string> languages) {
  std::vector<ManifestRecord> out;
  std::set<std::string> paths;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::vector<std::string> f = split_tabs(line);
    if (f.size() != kColumns) {
      bad_line(source, line_no, "expected 7 tab-separated fields, found " +
                                    std::to_string(f.size()));
    }
    static const char* names[kColumns] = {"audio_path", "speaker_id", "language",
                                          "content_type", "gender", "dataset", "split"};
    for (size_t i = 0; i < kColumns; ++i) {
      if (f[i].empty()) bad_line(source, line_no, std::string("empty ") + names[i]);
    }
    ManifestRecord r;
    std::filesystem::path p(f[0]);
    if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
    r.audio_path = p.lexically_normal().string();
    r.speaker_id = f[1];
    r.language = f[2] == "-" ? kUnknownLanguage : f[2];
    if (!languages.empty() && r.language != kUnknownLanguage &&
        std::find(languages.begin(), languages.end(), r.language) == languages.end()) {
      bad_line(source, line_no, "unregistered language " + r.language);
    }
    if (f[3] == "speech") {
      r.content_type = ContentType::Speech;
    } else if (f[3] == "singing") {
      r.content_type = ContentType::Singing;
    } else {
      bad_line(source, line_no, "unknown content_type " + f[3]);
    }
    if (f[4] == "F") {
      r.gender = Gender::F;
    } else if (f[4] == "M") {
      r.gender = Gender::M;
    } else if (f[4] == "unknown" || f[4] == "-") {
      r.gender = Gender::Unknown;
    } else {
      bad_line(source, line_no, "unknown gender " + f[4]);
    }
    r.dataset = f[5];
    if (f[6] == "train") {
      r.test_split = false;
    } else if (f[6] == "test") {
      r.test_split = true;
    } else {
      bad_line(source, line_no, "unknown split " + f[6]);
    }
    if (!paths.insert(r.audio_path).second) {
      throw Error("duplicate path " + r.audio_path + " in " + source + " line " +
                  std::to_string(line_no));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ManifestRecord> load_manifest(const std::string& path,
                                          std::span<const std::string> languages) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest: " + path);
  const std::string base = std::filesystem::absolute(path).parent_path().string();
  return parse_manifest(in, path, base, languages);
}

void save_manifest(const std::string& path, std::span<const ManifestRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest: " + path);
  out << "# audio_path\tspeaker_id\tlanguage\tcontent_type\tgender\tdataset\tsplit\n";
  for (const auto& r : records) {
    out << r.audio_path << '\t' << r.speaker_id << '\t' << r.language << '\t'
        << to_string(r.content_type) << '\t' << to_string(r.gender) << '\t' << r.dataset
        << '\t' << (r.test_split ? "test" : "train") << '\n';
  }
  if (!out) throw Error("failed writing manifest: " + path);
}

EvalSplits split_eval_sets(std::span<const ManifestRecord> records) {
  if (records.empty()) throw Error("split_eval_sets: empty input");

  std::set<std::string> unknown_speakers;
  std::map<std::string, bool> dataset_has_test;
  for (const auto& r : records) {
    dataset_has_test[r.dataset] = dataset_has_test[r.dataset] || r.test_split;
    if (r.test_split) unknown_speakers.insert(r.speaker_id);
  }
  for (const auto& [dataset, has_test] : dataset_has_test) {
    if (has_test) continue;
    std::map<Gender, std::string> first;
    for (const auto& r : records) {
      if (r.dataset != dataset || r.gender == Gender::Unknown) continue;
      auto it = first.find(r.gender);
      if (it == first.end() || r.speaker_id < it->second) first[r.gender] = r.speaker_id;
    }
    for (const auto& [gender, id] : first) unknown_speakers.insert(id);
  }

  EvalSplits out;
  std::map<std::string, std::vector<size_t>> per_speaker;
  std::vector<std::string> order;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.test_split || unknown_speakers.count(r.speaker_id)) {
      out.unknown_eval.push_back(r);
      continue;
    }
    out.train.push_back(r);
    auto [it, inserted] = per_speaker.try_emplace(r.speaker_id);
    if (inserted) order.push_back(r.speaker_id);
    it->second.push_back(out.train.size() - 1);
  }
  for (const auto& id : order) {
    const auto& idx = per_speaker[id];
    const size_t take = idx.size() >= static_cast<size_t>(kKnownEvalClips)
                            ? static_cast<size_t>(kKnownEvalClips)
                            : 1;
    for (size_t k = 0; k < take; ++k) out.known_eval.push_back(out.train[idx[k]]);
  }
  return out;
}

GroupBy parse_group_by(const std::string& name) {
  if (name == "language_speaker") return GroupBy::LanguageSpeaker;
  if (name == "speaker") return GroupBy::Speaker;
  if (name == "language") return GroupBy::Language;
  if (name == "dataset") return GroupBy::Dataset;
  throw Error("unknown grouping: " + name +
              " (expected language_speaker, speaker, language or dataset)");
}

SampleWeights compute_weights(std::span<const ManifestRecord> records, GroupBy by) {
  if (records.empty()) throw Error("compute_weights: empty input");
  std::map<std::string, int> ids;
  SampleWeights w;
  std::vector<int64_t> sizes;
  for (const auto& r : records) {
    std::string key;
    switch (by) {
      case GroupBy::LanguageSpeaker:
        key = r.language + '\t' + r.speaker_id;
        break;
      case GroupBy::Speaker:
        key = r.speaker_id;
        break;
      case GroupBy::Language:
        key = r.language;
        break;
      case GroupBy::Dataset:
        key = r.dataset;
        break;
    }
    auto [it, inserted] = ids.try_emplace(key, static_cast<int>(ids.size()));
    if (inserted) sizes.push_back(0);
    ++sizes[it->second];
    w.groups.push_back(it->second);
  }
  w.group_count = static_cast<int>(sizes.size());
  for (int g : w.groups) w.weights.push_back(1.0 / static_cast<double>(sizes[g]));
  return w;
}

std::vector<double> group_probabilities(const SampleWeights& w) {
  std::vector<double> p(w.group_count, 0.0);
  double total = 0.0;
  for (double x : w.weights) total += x;
  for (size_t i = 0; i < w.weights.size(); ++i) p[w.groups[i]] += w.weights[i] / total;
  return p;
}

std::vector<size_t> weighted_sample(std::span<const double> weights, size_t n,
                                    std::mt19937_64& rng) {
  if (n == 0) throw Error("weighted_sample: n must be at least 1");
  if (weights.empty()) throw Error("weighted_sample: no weights");
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw Error("weighted_sample: weights must be positive and finite");
    }
  }
  std::discrete_distribution<size_t> dist(weights.begin(), weights.end());
  std::vector<size_t> out(n);
  for (auto& i : out) i = dist(rng);
  return out;
}

Example prepare_example(const audio::Waveform& w,
                        const content::ContentBackbone& backbone,
                        const speaker::SpeakerEncoder& encoder, int language,
                        std::string id) {
  const audio::Waveform w16 = audio::resample(w, audio::kContentRate);
  const audio::Waveform w24 = audio::resample(w, audio::kSynthesisRate);
  Example e;
  e.id = std::move(id);
  e.language = language;
  e.spec = audio::linear_spectrogram(w24).magnitudes;
  const int64_t frames = e.spec.rows;
  e.audio = w24.samples;
  e.audio.resize(frames * audio::kHop, 0.0);
  e.content = svc::align_content(content::extract_content(backbone, w16), frames);
  e.pitch = pitch::quantize_pitch(pitch::retime(pitch::extract_f0(w16), frames)).bins;
  e.speaker = speaker::embed_speaker(encoder, w16);
  return e;
}

namespace {

constexpr char kExampleMagic[8] = {'F', 'S', 'V', 'C', 'E', 'X', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "cache files are written in host order, which must be little-endian");

void write_i64(std::ostream& out, int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

int64_t read_i64(std::istream& in) {
  int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("truncated example cache file");
  return v;
}

void write_doubles(std::ostream& out, std::span<const double> v) {
  write_i64(out, static_cast<int64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in) {
  const int64_t n = read_i64(in);
  if (n < 0 || n > (int64_t{1} << 34)) throw Error("corrupt example cache file");
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw Error("truncated example cache file");
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_i64(out, m.rows);
  write_i64(out, m.cols);
  write_doubles(out, m.data);
}

Matrix read_matrix(std::istream& in) {
  Matrix m;
  m.rows = read_i64(in);
  m.cols = read_i64(in);
  m.data = read_doubles(in);
  if (static_cast<int64_t>(m.data.size()) != m.rows * m.cols) {
    throw Error("corrupt example cache file");
  }
  return m;
}

}  // namespace

void save_example(const std::string& path, const Example& e) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write example cache: " + tmp);
    out.write(kExampleMagic, sizeof kExampleMagic);
    write_i64(out, static_cast<int64_t>(e.id.size()));
    out.write(e.id.data(), static_cast<std::streamsize>(e.id.size()));
    write_i64(out, e.language);
    write_doubles(out, e.audio);
    write_matrix(out, e.spec);
    write_matrix(out, e.content);
    std::vector<double> bins(e.pitch.begin(), e.pitch.end());
    write_doubles(out, bins);
    write_doubles(out, e.speaker);
    if (!out) throw Error("failed writing example cache: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Example load_example(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open example cache: " + path);
  char magic[sizeof kExampleMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kExampleMagic, sizeof magic) != 0) {
    throw Error("not an example cache file: " + path);
  }
  Example e;
  const int64_t id_len = read_i64(in);
  if (id_len < 0 || id_len > 1 << 20) throw Error("corrupt example cache file: " + path);
  e.id.resize(id_len);
  in.read(e.id.data(), id_len);
  e.language = static_cast<int>(read_i64(in));
  e.audio = read_doubles(in);
  e.spec = read_matrix(in);
  e.content = read_matrix(in);
  for (double b : read_doubles(in)) e.pitch.push_back(static_cast<int>(b));
  e.speaker = read_doubles(in);
  if (static_cast<int64_t>(e.pitch.size()) != e.spec.rows ||
      e.content.rows != e.spec.rows ||
      static_cast<int64_t>(e.audio.size()) != e.spec.rows * audio::kHop) {
    throw Error("inconsistent example cache file: " + path);
  }
  return e;
}

svc::ModelInput make_batch(std::span<const Example> examples,
                           std::span<const size_t> indices, int64_t segment_frames,
                           std::mt19937_64& rng, std::vector<std::string>* warnings) {
  if (segment_frames <= 0) throw Error("make_batch: segment_frames must be positive");
  std::vector<const Example*> usable;
  for (size_t i : indices) {
    if (i >= examples.size()) throw Error("make_batch: index out of range");
    const Example& e = examples[i];
    if (e.frames() < segment_frames) {
      if (warnings) {
        warnings->push_back("skipping " + (e.id.empty() ? std::to_string(i) : e.id) +
                            ": " + std::to_string(e.frames()) + " frames < segment " +
                            std::to_string(segment_frames));
      }
      continue;
    }
    usable.push_back(&e);
  }
  if (usable.empty()) throw Error("make_batch: every record is shorter than the segment");

  const int64_t b = static_cast<int64_t>(usable.size()), f = segment_frames;
  const int64_t bins = usable.front()->spec.cols, dc = usable.front()->content.cols;
  const int64_t e_dim = static_cast<int64_t>(usable.front()->speaker.size());
  std::vector<double> spec(b * bins * f), content(b * dc * f), spk(b * e_dim),
      wav(b * f * audio::kHop);
  svc::ModelInput in;
  for (int64_t k = 0; k < b; ++k) {
    const Example& e = *usable[k];
    if (e.spec.cols != bins || e.content.cols != dc ||
        static_cast<int64_t>(e.speaker.size()) != e_dim) {
      throw Error("make_batch: examples disagree in feature dimensions");
    }
    const int64_t s =
        std::uniform_int_distribution<int64_t>(0, e.frames() - f)(rng);
    for (int64_t t = 0; t < f; ++t) {
      for (int64_t c = 0; c < bins; ++c) spec[(k * bins + c) * f + t] = e.spec(s + t, c);
      for (int64_t c = 0; c < dc; ++c) content[(k * dc + c) * f + t] = e.content(s + t, c);
      in.pitch.push_back(e.pitch[s + t]);
    }
    std::copy(e.speaker.begin(), e.speaker.end(), spk.begin() + k * e_dim);
    std::copy(e.audio.begin() + s * audio::kHop, e.audio.begin() + (s + f) * audio::kHop,
              wav.begin() + k * f * audio::kHop);
    in.lang.push_back(e.language);
  }
  in.spec = ag::Tensor::from({b, bins, f}, std::move(spec));
  in.content = ag::Tensor::from({b, dc, f}, std::move(content));
  in.speaker = ag::Tensor::from({b, e_dim, 1}, std::move(spk));
  in.audio = ag::Tensor::from({b, 1, f * audio::kHop}, std::move(wav));
  return in;
}

}  // namespace freesvc::data
