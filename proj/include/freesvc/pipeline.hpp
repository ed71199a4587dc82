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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freesvc/content.hpp"
#include "freesvc/data.hpp"
#include "freesvc/evaluation.hpp"
#include "freesvc/speaker.hpp"
#include "freesvc/svc.hpp"
#include "freesvc/training.hpp"

// Run orchestration behind the command-line tool: configuration, feature
// caching and the prepare / train-spin / train-svc / convert / evaluate
// commands.
namespace freesvc::pipeline {

// ---- configuration ----------------------------------------------------------------

// Flat "section.key" -> value map. Files use INI-style sections:
//
//   [train]
//   steps = 2000
//
// Every key must be known (see RunConfig::keys()); values are validated when
// read. Later sources override earlier ones.
class RunConfig {
 public:
  RunConfig();  // defaults

  static const std::vector<std::string>& keys();

  void load_file(const std::string& path);
  void parse(std::istream& in, const std::string& source);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  // The fully resolved configuration in file syntax, sections in key order.
  std::string resolved() const;

  uint64_t seed() const { return static_cast<uint64_t>(get_int("run.seed")); }
  training::Variant variant() const;

  // Model shape from the model.* keys; the language list is passed in.
  svc::ModelConfig model_config(const std::vector<std::string>& languages) const;
  training::TrainConfig train_config() const;
  content::SpinConfig spin_config() const;
  speaker::EncoderTrainConfig encoder_config() const;

 private:
  std::map<std::string, std::string> values_;
};

// Feature cache directory: FREESVC_CACHE when set, otherwise <out>/cache.
std::string cache_dir(const std::string& out_dir);

// Stable 64-bit FNV-1a hash of parameter values, used in cache keys.
uint64_t params_hash(const nn::ParameterSet& ps);

// Parameter sets stored inside a checkpoint under a name prefix.
void store_params(const nn::ParameterSet& ps, const std::string& prefix,
                  training::Checkpoint& ckpt);
void restore_params(nn::ParameterSet& ps, const std::string& prefix,
                    const training::Checkpoint& ckpt);

// Languages of a manifest in first-seen order.
std::vector<std::string> manifest_languages(const std::vector<data::ManifestRecord>& records);

// ---- commands -------------------------------------------------------------------------

struct PrepareResult {
  int64_t train = 0, known_eval = 0, unknown_eval = 0;
  int64_t cached = 0;          // examples written by this run
  int64_t already_cached = 0;  // examples found in the cache
};

// Splits the manifest into <out>/{train,known_eval,unknown_eval}.tsv, trains
// the speaker encoder on the training speakers (<out>/speaker.ckpt, reused
// when present) and caches stock-backbone features for every record.
PrepareResult cmd_prepare(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, std::ostream& log);

struct SpinResult {
  double first_loss = 0.0, last_loss = 0.0;  // averaged over up to 10 updates
  double perplexity = 0.0;
  int64_t steps = 0;
  std::string checkpoint;
};

// Fine-tunes the content backbone and SPIN head on the manifest's clips and
// writes <out>/spin.ckpt. Throws when a frozen layer moved.
SpinResult cmd_train_spin(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, std::ostream& log);

struct TrainResult {
  int64_t start_step = 0, end_step = 0;
  std::vector<training::LossReport> history;
  std::string checkpoint;
};

// Trains the selected variant on <manifest> (default <out>/train.tsv) and
// writes <out>/svc.ckpt, a self-contained checkpoint that also carries the
// content backbone and speaker encoder. With `resume`, training continues
// from the existing checkpoint's step and optimizer state.
TrainResult cmd_train_svc(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, bool resume, std::ostream& log);

// A trained model with its content backbone and speaker encoder.
struct LoadedModel {
  std::unique_ptr<svc::SvcModel> model;
  content::ContentBackbone backbone;
  speaker::SpeakerEncoder encoder;
  training::Variant variant = training::Variant::Baseline;
  int64_t step = 0;
};
LoadedModel load_model(const std::string& checkpoint);

struct ConvertRequest {
  std::string checkpoint;
  std::string source;  // wav
  std::string target;  // wav, or an embedding file (rows are averaged)
  std::string out;     // wav
  svc::ConvertOptions options;
};

// Writes a 24 kHz wav of frame_count(source at 24 kHz) * 320 samples.
audio::Waveform cmd_convert(const ConvertRequest& request, std::ostream& log);

struct EvaluateRequest {
  std::string generated_dir;
  std::string reference_dir;
  std::string baseline_dir;     // optional generated audio of the baseline
  std::string gt_text;          // ground-truth lyrics or text
  std::string asr_text;         // transcription of the generated audio
  std::string baseline_asr_text;
  std::string reference_asr_text;  // transcription of the reference audio
  std::string speakers;         // utterance<TAB>speaker<TAB>group
  std::string checkpoint;       // provides the speaker encoder
  std::string out_dir;
  eval::F0Scale f0_scale = eval::F0Scale::LogHz;
  uint64_t seed = 0;
};

// Speaker similarity, WER/CER and F0PPC over utterances matched by file
// stem. Writes <out>/report.tsv and <out>/report.txt.
eval::MetricReport cmd_evaluate(const EvaluateRequest& request, std::ostream& log);

}  // namespace freesvc::pipeline
