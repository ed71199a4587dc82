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

#include "freesvc/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "freesvc/pitch.hpp"

namespace freesvc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Key -> default. An empty model.* default means "take it from the preset".
const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> d = {
      {"run.seed", "1234"},
      {"run.variant", "spin_lang_emb"},
      {"run.log_every", "50"},
      {"model.preset", "desk"},
      {"model.languages", ""},
      {"model.inter_channels", ""},
      {"model.hidden", ""},
      {"model.kernel", ""},
      {"model.posterior_layers", ""},
      {"model.flow_blocks", ""},
      {"model.flow_layers", ""},
      {"model.prior_layers", ""},
      {"model.decoder_channels", ""},
      {"model.disc_channels", ""},
      {"model.segment_frames", ""},
      {"train.steps", "2000"},
      {"train.batch_size", "4"},
      {"train.learning_rate", "2e-4"},
      {"train.lr_decay", "0.999875"},
      {"train.steps_per_epoch", "0"},
      {"train.group_by", "language_speaker"},
      {"train.checkpoint_every", "500"},
      {"spin.epochs", "3"},
      {"spin.max_steps", "0"},
      {"spin.batch_size", "8"},
      {"spin.segment_frames", "25"},
      {"spin.learning_rate", "1e-3"},
      {"spin.trainable_layers", "2"},
      {"spin.codebook_size", "64"},
      {"spin.code_dim", "32"},
      {"speaker.steps", "300"},
      {"speaker.batch_size", "8"},
      {"convert.key_shift", "0"},
      {"convert.noise_scale", "0.35"},
      {"convert.lang", ""},
      {"eval.f0_scale", "log"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir + ": " + ec.message());
}

void check_audio_exists(const std::vector<data::ManifestRecord>& records) {
  std::vector<std::string> missing;
  for (const auto& r : records) {
    if (!fs::exists(r.audio_path)) missing.push_back(r.audio_path);
  }
  if (missing.empty()) return;
  std::string msg = "missing audio file" + std::string(missing.size() > 1 ? "s" : "") + ":";
  for (const auto& m : missing) msg += " " + m;
  throw Error(msg);
}

std::vector<data::ManifestRecord> read_manifest(const RunConfig& cfg, const std::string& path) {
  const std::vector<std::string> langs = cfg.get_list("model.languages");
  auto records = data::load_manifest(path, langs);
  if (records.empty()) throw Error("manifest " + path + " has no records");
  check_audio_exists(records);
  return records;
}

// The SVC model's own tensors: drops optimizer state and the bundled
// content backbone and speaker encoder.
training::Checkpoint model_tensors(const training::Checkpoint& ckpt) {
  training::Checkpoint out = ckpt;
  for (auto it = out.tensors.begin(); it != out.tensors.end();) {
    const std::string& n = it->first;
    const bool other = n.rfind("adam.", 0) == 0 || n.rfind("content.", 0) == 0 ||
                       n.rfind("speaker.", 0) == 0;
    it = other ? out.tensors.erase(it) : std::next(it);
  }
  return out;
}

speaker::SpeakerEncoder ensure_encoder(const RunConfig& cfg,
                                       const std::vector<data::ManifestRecord>& records,
                                       const std::string& out_dir, std::ostream& log) {
  speaker::SpeakerEncoder encoder;
  const std::string path = (fs::path(out_dir) / "speaker.ckpt").string();
  if (fs::exists(path)) {
    restore_params(encoder.params(), "speaker.", training::load_checkpoint(path));
    log << "speaker encoder: loaded " << path << "\n";
    return encoder;
  }
  std::map<std::string, int> ids;
  std::vector<audio::Waveform> clips;
  std::vector<int> labels;
  for (const auto& r : records) {
    const int id = ids.emplace(r.speaker_id, static_cast<int>(ids.size())).first->second;
    clips.push_back(audio::load_waveform(r.audio_path, audio::kContentRate));
    labels.push_back(id);
  }
  const auto losses = speaker::train_speaker_encoder(encoder, clips, labels, cfg.encoder_config());
  log << "speaker encoder: trained on " << clips.size() << " clips of " << ids.size()
      << " speakers, loss " << losses.front() << " -> " << losses.back() << "\n";
  training::Checkpoint ckpt;
  store_params(encoder.params(), "speaker.", ckpt);
  training::save_checkpoint(path, ckpt);
  return encoder;
}

// Backbone of a variant: the stock weights, or the fine-tuned ones from
// <out>/spin.ckpt.
content::ContentBackbone variant_backbone(training::Variant v, const std::string& out_dir) {
  content::ContentBackbone backbone;
  if (!training::uses_spin(v)) return backbone;
  const std::string path = (fs::path(out_dir) / "spin.ckpt").string();
  if (!fs::exists(path)) {
    throw Error("variant " + training::to_string(v) + " needs " + path +
                "; run train-spin first");
  }
  restore_params(backbone.params(), "content.", training::load_checkpoint(path));
  return backbone;
}

std::string example_key(const data::ManifestRecord& r, uint64_t backbone_hash,
                        uint64_t encoder_hash) {
  const std::string canon = fs::weakly_canonical(r.audio_path).string();
  uint64_t h = fnv1a(canon.data(), canon.size());
  const auto size = static_cast<uint64_t>(fs::file_size(r.audio_path));
  const auto mtime = static_cast<int64_t>(fs::last_write_time(r.audio_path).time_since_epoch().count());
  h = fnv1a(&size, sizeof size, h);
  h = fnv1a(&mtime, sizeof mtime, h);
  h = fnv1a(&backbone_hash, sizeof backbone_hash, h);
  h = fnv1a(&encoder_hash, sizeof encoder_hash, h);
  return hex(h) + ".ex";
}

// Loads cached features or computes and caches them. Returns the number of
// examples taken from the cache through `hits`.
std::vector<data::Example> cached_examples(const std::vector<data::ManifestRecord>& records,
                                           const content::ContentBackbone& backbone,
                                           const speaker::SpeakerEncoder& encoder,
                                           const std::vector<std::string>& languages,
                                           const std::string& cache, int64_t* hits) {
  ensure_dir(cache);
  const uint64_t bh = params_hash(backbone.params());
  const uint64_t eh = params_hash(encoder.params());
  std::vector<data::Example> out;
  int64_t found = 0;
  for (const auto& r : records) {
    const std::string path = (fs::path(cache) / example_key(r, bh, eh)).string();
    data::Example e;
    if (fs::exists(path)) {
      e = data::load_example(path);
      ++found;
    } else {
      e = data::prepare_example(audio::read_wav(r.audio_path), backbone, encoder, 0, r.audio_path);
      data::save_example(path, e);
    }
    const auto it = std::find(languages.begin(), languages.end(), r.language);
    e.language = it == languages.end() ? 0 : static_cast<int>(it - languages.begin());
    out.push_back(std::move(e));
  }
  if (hits) *hits = found;
  return out;
}

std::string checkpoint_json(const svc::ModelConfig& mc, training::Variant v,
                            const RunConfig& cfg) {
  json j;
  j["model"] = json::parse(training::model_config_json(mc));
  j["variant"] = training::to_string(v);
  j["resolved_config"] = cfg.resolved();
  return j.dump();
}

void save_svc(const std::string& path, svc::SvcModel& model, training::Trainer& trainer,
              const content::ContentBackbone& backbone, const speaker::SpeakerEncoder& encoder,
              training::Variant v, const RunConfig& cfg) {
  training::Checkpoint c =
      training::capture(model, &trainer, checkpoint_json(model.config(), v, cfg));
  store_params(backbone.params(), "content.", c);
  store_params(encoder.params(), "speaker.", c);
  training::save_checkpoint(path, c);
}

std::map<std::string, std::string> wav_stems(const std::string& dir) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") {
      out[e.path().stem().string()] = e.path().string();
    }
  }
  return out;
}

// Values of `a` and `b` aligned on shared keys when the key sets agree;
// otherwise both full value lists.
std::pair<std::vector<double>, std::vector<double>> align_values(
    const std::map<std::string, double>& a, const std::map<std::string, double>& b,
    bool* paired) {
  std::vector<double> va, vb;
  bool same = a.size() == b.size();
  for (const auto& [k, v] : a) {
    va.push_back(v);
    if (!b.contains(k)) same = false;
  }
  for (const auto& [k, v] : b) vb.push_back(v);
  *paired = same;
  return {va, vb};
}

}  // namespace

// ---- configuration ----------------------------------------------------------------

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, value] : defaults()) out.push_back(key);
    return out;
  }();
  return k;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path);
  parse(in, path);
}

void RunConfig::parse(std::istream& in, const std::string& source) {
  std::string line, section;
  for (int64_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#' || t.front() == ';') continue;
    const std::string where = source + " line " + std::to_string(n);
    if (t.front() == '[') {
      if (t.back() != ']') throw Error("malformed section header in " + where);
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("expected key = value in " + where);
    const std::string key = trim(t.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    if (!values_.contains(full)) throw Error("unknown config key '" + full + "' in " + where);
    values_[full] = trim(t.substr(eq + 1));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!values_.contains(key)) throw Error("unknown config key '" + key + "'");
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error("unknown config key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  size_t used = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (v.empty() || used != v.size()) {
    throw Error("config key " + key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (v.empty() || used != v.size()) {
    throw Error("config key " + key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config key " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream s(get(key));
  for (std::string item; std::getline(s, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string RunConfig::resolved() const {
  std::ostringstream out;
  std::string section;
  for (const auto& key : keys()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << values_.at(key) << "\n";
  }
  return out.str();
}

training::Variant RunConfig::variant() const { return training::parse_variant(get("run.variant")); }

svc::ModelConfig RunConfig::model_config(const std::vector<std::string>& languages) const {
  const std::string preset = get("model.preset");
  svc::ModelConfig c;
  if (preset == "desk") {
    c = svc::ModelConfig::desk();
  } else if (preset != "full") {
    throw Error("config key model.preset: expected desk or full, got '" + preset + "'");
  }
  auto apply = [&](const char* key, int& field) {
    if (!get(key).empty()) field = static_cast<int>(get_int(key));
  };
  apply("model.inter_channels", c.inter_channels);
  apply("model.hidden", c.hidden);
  apply("model.kernel", c.kernel);
  apply("model.posterior_layers", c.posterior_layers);
  apply("model.flow_blocks", c.flow_blocks);
  apply("model.flow_layers", c.flow_layers);
  apply("model.prior_layers", c.prior_layers);
  apply("model.decoder_channels", c.decoder_channels);
  apply("model.disc_channels", c.disc_channels);
  apply("model.segment_frames", c.segment_frames);
  c.languages = languages.empty() ? std::vector<std::string>{data::kUnknownLanguage} : languages;
  c.use_language = training::uses_language(variant());
  c.seed = seed();
  c.validate();
  return c;
}

training::TrainConfig RunConfig::train_config() const {
  training::TrainConfig t;
  t.learning_rate = get_double("train.learning_rate");
  t.lr_decay = get_double("train.lr_decay");
  t.batch_size = static_cast<int>(get_int("train.batch_size"));
  t.total_steps = get_int("train.steps");
  t.steps_per_epoch = get_int("train.steps_per_epoch");
  t.seed = seed();
  t.variant = variant();
  t.validate();
  return t;
}

content::SpinConfig RunConfig::spin_config() const {
  content::SpinConfig s;
  s.epochs = static_cast<int>(get_int("spin.epochs"));
  s.max_steps = static_cast<int>(get_int("spin.max_steps"));
  s.batch_size = static_cast<int>(get_int("spin.batch_size"));
  s.segment_frames = static_cast<int>(get_int("spin.segment_frames"));
  s.learning_rate = get_double("spin.learning_rate");
  s.trainable_layers = static_cast<int>(get_int("spin.trainable_layers"));
  s.seed = seed();
  s.validate();
  return s;
}

speaker::EncoderTrainConfig RunConfig::encoder_config() const {
  speaker::EncoderTrainConfig e;
  e.steps = static_cast<int>(get_int("speaker.steps"));
  e.batch_size = static_cast<int>(get_int("speaker.batch_size"));
  e.seed = seed();
  return e;
}

std::string cache_dir(const std::string& out_dir) {
  const char* env = std::getenv("FREESVC_CACHE");
  if (env != nullptr && *env != '\0') return env;
  return (fs::path(out_dir) / "cache").string();
}

uint64_t params_hash(const nn::ParameterSet& ps) {
  uint64_t h = fnv1a(nullptr, 0);
  for (const auto& p : ps.all()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    const auto& v = p.tensor.values();
    h = fnv1a(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

void store_params(const nn::ParameterSet& ps, const std::string& prefix,
                  training::Checkpoint& ckpt) {
  for (const auto& p : ps.all()) {
    ckpt.tensors[prefix + p.name] = {p.tensor.shape(), p.tensor.values()};
  }
}

void restore_params(nn::ParameterSet& ps, const std::string& prefix,
                    const training::Checkpoint& ckpt) {
  for (auto& p : ps.all()) {
    const auto it = ckpt.tensors.find(prefix + p.name);
    if (it == ckpt.tensors.end()) throw Error("checkpoint lacks " + prefix + p.name);
    if (it->second.shape != p.tensor.shape()) {
      throw Error("checkpoint shape mismatch for " + prefix + p.name);
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.tensor.data().begin());
  }
}

std::vector<std::string> manifest_languages(const std::vector<data::ManifestRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (std::find(out.begin(), out.end(), r.language) == out.end()) out.push_back(r.language);
  }
  return out;
}

// ---- commands -------------------------------------------------------------------------

PrepareResult cmd_prepare(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, std::ostream& log) {
  const auto records = read_manifest(cfg, manifest);
  ensure_dir(out_dir);
  const data::EvalSplits splits = data::split_eval_sets(records);
  if (splits.train.empty()) throw Error("prepare: no training speakers left after the split");
  data::save_manifest((fs::path(out_dir) / "train.tsv").string(), splits.train);
  data::save_manifest((fs::path(out_dir) / "known_eval.tsv").string(), splits.known_eval);
  data::save_manifest((fs::path(out_dir) / "unknown_eval.tsv").string(), splits.unknown_eval);
  PrepareResult r;
  r.train = static_cast<int64_t>(splits.train.size());
  r.known_eval = static_cast<int64_t>(splits.known_eval.size());
  r.unknown_eval = static_cast<int64_t>(splits.unknown_eval.size());
  log << "split: train " << r.train << ", known_eval " << r.known_eval << ", unknown_eval "
      << r.unknown_eval << "\n";

  const speaker::SpeakerEncoder encoder = ensure_encoder(cfg, splits.train, out_dir, log);
  const content::ContentBackbone backbone;
  const std::vector<std::string> languages = manifest_languages(records);
  int64_t hits = 0;
  cached_examples(records, backbone, encoder, languages, cache_dir(out_dir), &hits);
  r.already_cached = hits;
  r.cached = static_cast<int64_t>(records.size()) - hits;
  log << "features: " << r.cached << " cached now, " << r.already_cached << " already cached";
  if (r.cached == 0) log << " (all items cached)";
  log << "\n";
  return r;
}

SpinResult cmd_train_spin(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, std::ostream& log) {
  const auto records = read_manifest(cfg, manifest);
  ensure_dir(out_dir);
  std::vector<audio::Waveform> clips;
  for (const auto& r : records) clips.push_back(audio::load_waveform(r.audio_path, audio::kContentRate));

  content::ContentBackbone backbone;
  content::SpinHeadConfig hc;
  hc.codebook_size = static_cast<int>(cfg.get_int("spin.codebook_size"));
  hc.code_dim = static_cast<int>(cfg.get_int("spin.code_dim"));
  hc.seed = cfg.seed();
  content::SpinHead head(backbone.dim(), hc);
  const content::SpinConfig sc = cfg.spin_config();

  const int frozen = content::ContentBackbone::kLayers - sc.trainable_layers;
  std::vector<std::vector<double>> before;
  for (const auto& p : backbone.params().all()) before.push_back(p.tensor.values());
  const content::SpinReport rep = content::spin_finetune(backbone, head, clips, sc);
  for (size_t i = 0; i < backbone.params().all().size(); ++i) {
    const auto& p = backbone.params().all()[i];
    for (int l = 0; l < frozen; ++l) {
      if (p.name.rfind(content::ContentBackbone::layer_prefix(l), 0) == 0 &&
          p.tensor.values() != before[i]) {
        throw Error("train-spin: frozen parameter " + p.name + " changed");
      }
    }
  }

  std::vector<double> rows;
  int64_t n = 0;
  for (const auto& w : clips) {
    const Matrix a = content::spin_assignments(head, content::backbone_features(backbone, w));
    rows.insert(rows.end(), a.data.begin(), a.data.end());
    n += a.rows;
  }
  SpinResult r;
  r.steps = rep.steps;
  // Per-update losses depend on the random crops, so both ends are averaged
  // over a short window.
  const size_t window = std::clamp<size_t>(rep.losses.size() / 5, 1, 10);
  r.first_loss = std::accumulate(rep.losses.begin(), rep.losses.begin() + window, 0.0) / window;
  r.last_loss = std::accumulate(rep.losses.end() - window, rep.losses.end(), 0.0) / window;
  Matrix assignments(n, hc.codebook_size);
  assignments.data = std::move(rows);
  r.perplexity = content::codebook_perplexity(assignments);
  r.checkpoint = (fs::path(out_dir) / "spin.ckpt").string();
  training::Checkpoint ckpt;
  ckpt.step = rep.steps;
  ckpt.config_json = json{{"resolved_config", cfg.resolved()}}.dump();
  store_params(backbone.params(), "content.", ckpt);
  store_params(head.params(), "spin.", ckpt);
  training::save_checkpoint(r.checkpoint, ckpt);
  log << "train-spin: " << r.steps << " steps, loss " << r.first_loss << " -> " << r.last_loss
      << ", codebook perplexity " << r.perplexity << ", frozen layers 0.." << frozen - 1
      << " unchanged\n";
  log << "wrote " << r.checkpoint << "\n";
  return r;
}

TrainResult cmd_train_svc(const RunConfig& cfg, const std::string& manifest,
                          const std::string& out_dir, bool resume, std::ostream& log) {
  const std::string manifest_path =
      manifest.empty() ? (fs::path(out_dir) / "train.tsv").string() : manifest;
  const auto records = read_manifest(cfg, manifest_path);
  ensure_dir(out_dir);
  const training::Variant variant = cfg.variant();
  const training::TrainConfig tc = cfg.train_config();
  const std::string ckpt_path = (fs::path(out_dir) / "svc.ckpt").string();

  std::vector<std::string> languages = cfg.get_list("model.languages");
  if (languages.empty()) languages = manifest_languages(records);

  speaker::SpeakerEncoder encoder = ensure_encoder(cfg, records, out_dir, log);
  content::ContentBackbone backbone = variant_backbone(variant, out_dir);

  std::optional<training::Checkpoint> previous;
  svc::ModelConfig mc = cfg.model_config(languages);
  mc.content_dim = backbone.dim();
  if (resume) {
    if (!fs::exists(ckpt_path)) throw Error("resume: no checkpoint at " + ckpt_path);
    previous = training::load_checkpoint(ckpt_path);
    const json j = json::parse(previous->config_json);
    if (j.value("variant", "") != training::to_string(variant)) {
      throw Error("resume: checkpoint variant " + j.value("variant", std::string("?")) +
                  " differs from " + training::to_string(variant));
    }
    mc = training::model_config_from_json(j.at("model").dump());
    languages = mc.languages;
    restore_params(backbone.params(), "content.", *previous);
    restore_params(encoder.params(), "speaker.", *previous);
  }

  int64_t hits = 0;
  const std::vector<data::Example> examples =
      cached_examples(records, backbone, encoder, languages, cache_dir(out_dir), &hits);
  log << "train-svc: variant " << training::to_string(variant) << ", " << examples.size()
      << " clips (" << hits << " from cache), languages";
  for (const auto& l : languages) log << " " << l;
  log << "\n";

  svc::SvcModel model(mc);
  training::Trainer trainer(model, tc);
  if (previous) {
    training::warm_start(model, model_tensors(*previous), true);
    training::restore_optimizer(trainer.generator_optimizer(), "gen", *previous);
    training::restore_optimizer(trainer.discriminator_optimizer(), "disc", *previous);
    trainer.set_steps_done(previous->step);
    log << "resumed from " << ckpt_path << " at step " << previous->step << "\n";
  }

  const data::SampleWeights weights =
      data::compute_weights(records, data::parse_group_by(cfg.get("train.group_by")));
  TrainResult r;
  r.start_step = trainer.steps_done();
  const int64_t remaining = std::max<int64_t>(0, tc.total_steps - r.start_step);
  std::mt19937_64 rng(cfg.seed() ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(r.start_step + 1)));
  const int64_t log_every = std::max<int64_t>(1, cfg.get_int("run.log_every"));
  const int64_t save_every = cfg.get_int("train.checkpoint_every");
  std::vector<std::string> warnings;
  r.history = training::train_loop(
      trainer, examples, weights.weights, remaining, rng,
      [&](const training::LossReport& rep) {
        const int64_t done = rep.step + 1;
        if (done % log_every == 0 || done == tc.total_steps) {
          log << "step " << done << " lr " << rep.learning_rate << " d " << rep.d_loss
              << " adv " << rep.g_adv << " fm " << rep.feat_match << " mel " << rep.mel_l1
              << " kl " << rep.kl << "\n";
        }
        if (save_every > 0 && done % save_every == 0 && done != tc.total_steps) {
          save_svc(ckpt_path, model, trainer, backbone, encoder, variant, cfg);
        }
        return true;
      },
      &warnings);
  for (const auto& w : warnings) log << "warning: " << w << "\n";
  r.end_step = trainer.steps_done();
  model.set_ready(true);
  save_svc(ckpt_path, model, trainer, backbone, encoder, variant, cfg);
  r.checkpoint = ckpt_path;
  log << "wrote " << ckpt_path << " at step " << r.end_step << "\n";
  return r;
}

LoadedModel load_model(const std::string& checkpoint) {
  const training::Checkpoint ckpt = training::load_checkpoint(checkpoint);
  json j;
  try {
    j = json::parse(ckpt.config_json);
  } catch (const json::exception&) {
    throw Error(checkpoint + " has an unreadable config header");
  }
  if (!j.contains("model")) throw Error(checkpoint + " is not an SVC model checkpoint");
  LoadedModel m;
  m.model = std::make_unique<svc::SvcModel>(training::model_config_from_json(j["model"].dump()));
  m.variant = training::parse_variant(j.value("variant", std::string("baseline")));
  m.step = ckpt.step;
  training::warm_start(*m.model, model_tensors(ckpt), true);
  restore_params(m.backbone.params(), "content.", ckpt);
  restore_params(m.encoder.params(), "speaker.", ckpt);
  m.model->set_ready(true);
  return m;
}

audio::Waveform cmd_convert(const ConvertRequest& req, std::ostream& log) {
  const LoadedModel m = load_model(req.checkpoint);
  const audio::Waveform source = audio::read_wav(req.source);
  speaker::Embedding target;
  if (fs::path(req.target).extension() == ".wav") {
    target = speaker::embed_speaker(m.encoder, audio::load_waveform(req.target, audio::kContentRate));
  } else {
    const auto rows = speaker::load_embedding_file(req.target);
    if (rows.empty()) throw Error("embedding file " + req.target + " is empty");
    // Plain mean, so a single row conditions exactly like the wav it came from.
    target.assign(rows.begin()->second.size(), 0.0);
    for (const auto& [id, e] : rows) {
      if (e.size() != target.size()) throw Error("embedding file " + req.target + ": rows differ in size");
      for (size_t i = 0; i < e.size(); ++i) target[i] += e[i] / static_cast<double>(rows.size());
    }
  }
  const audio::Waveform out = svc::convert(*m.model, m.backbone, source, target, req.options);
  if (!req.out.empty()) {
    const auto parent = fs::path(req.out).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    audio::write_wav(req.out, out);
  }
  log << "convert: " << req.source << " -> " << (req.out.empty() ? "(memory)" : req.out)
      << ", " << out.samples.size() << " samples at " << out.sample_rate << " Hz\n";
  return out;
}

eval::MetricReport cmd_evaluate(const EvaluateRequest& req, std::ostream& log) {
  std::mt19937_64 rng(req.seed);
  eval::MetricReport report;
  auto& warnings = report.warnings;
  const auto generated = wav_stems(req.generated_dir);
  const auto reference = wav_stems(req.reference_dir);
  std::map<std::string, std::string> baseline;
  if (!req.baseline_dir.empty()) baseline = wav_stems(req.baseline_dir);

  std::vector<std::string> utts;
  for (const auto& [id, path] : generated) {
    if (!reference.contains(id)) {
      warnings.push_back("utterance " + id + " has no reference audio; excluded");
      continue;
    }
    utts.push_back(id);
  }
  if (utts.empty()) throw Error("evaluate: no generated utterance has a matching reference");

  // Speaker identity and group per utterance.
  std::map<std::string, std::pair<std::string, eval::SpeakerGroup>> who;
  if (!req.speakers.empty()) {
    std::ifstream in(req.speakers);
    if (!in) throw Error("cannot open speaker map " + req.speakers);
    std::string line;
    for (int64_t n = 1; std::getline(in, line); ++n) {
      if (trim(line).empty() || trim(line).front() == '#') continue;
      std::stringstream s(line);
      std::string utt, spk, grp;
      if (!std::getline(s, utt, '\t') || !std::getline(s, spk, '\t') || !std::getline(s, grp)) {
        throw Error("malformed speaker map " + req.speakers + " line " + std::to_string(n) +
                    ": expected utterance<TAB>speaker<TAB>group");
      }
      who[utt] = {spk, eval::parse_speaker_group(trim(grp))};
    }
  }
  auto speaker_of = [&](const std::string& utt) {
    const auto it = who.find(utt);
    return it != who.end() ? it->second
                           : std::pair<std::string, eval::SpeakerGroup>{utt, eval::SpeakerGroup::Unknown};
  };

  const auto load16 = [](const std::string& p) { return audio::load_waveform(p, audio::kContentRate); };
  std::optional<speaker::SpeakerEncoder> encoder;
  if (!req.checkpoint.empty()) {
    encoder.emplace();
    restore_params(encoder->params(), "speaker.", training::load_checkpoint(req.checkpoint));
  } else {
    warnings.push_back("no checkpoint given; speaker similarity skipped");
  }

  struct Side {
    eval::SpeakerEmbeddings embs;
    std::map<std::string, double> f0ppc, wer_gt, cer_gt, wer_tr, cer_tr;
  };
  const auto gt = req.gt_text.empty() ? std::map<std::string, std::string>{}
                                      : eval::load_transcripts(req.gt_text);
  const auto ref_asr = req.reference_asr_text.empty() ? std::map<std::string, std::string>{}
                                                      : eval::load_transcripts(req.reference_asr_text);
  eval::SpeakerEmbeddings real_embs;
  std::map<std::string, eval::SpeakerGroup> groups;
  std::map<std::string, pitch::F0Contour> ref_f0;
  for (const auto& id : utts) {
    const audio::Waveform w = load16(reference.at(id));
    ref_f0[id] = pitch::extract_f0(w);
    const auto [spk, grp] = speaker_of(id);
    groups[spk] = grp;
    if (encoder) real_embs[spk].push_back(speaker::embed_speaker(*encoder, w));
  }

  auto score = [&](const std::map<std::string, std::string>& audio_by_id,
                   const std::string& asr_path, const std::string& label) {
    Side side;
    const auto asr = asr_path.empty() ? std::map<std::string, std::string>{}
                                      : eval::load_transcripts(asr_path);
    if (asr_path.empty()) {
      warnings.push_back(label + ": no transcription file; WER/CER skipped");
    }
    for (const auto& id : utts) {
      const auto a = audio_by_id.find(id);
      if (a == audio_by_id.end()) {
        warnings.push_back(label + ": utterance " + id + " missing; excluded");
        continue;
      }
      const audio::Waveform w = load16(a->second);
      if (encoder) side.embs[speaker_of(id).first].push_back(speaker::embed_speaker(*encoder, w));
      try {
        side.f0ppc[id] = eval::f0ppc(ref_f0.at(id), pitch::extract_f0(w), req.f0_scale);
      } catch (const Error& e) {
        warnings.push_back(label + ": utterance " + id + " excluded from F0PPC: " + e.what());
      }
      if (asr_path.empty()) continue;
      const auto hyp = asr.find(id);
      if (hyp == asr.end()) {
        warnings.push_back(label + ": utterance " + id +
                           " has no transcription; excluded from WER/CER");
        continue;
      }
      if (const auto g = gt.find(id); g != gt.end()) {
        side.wer_gt[id] = eval::word_error_rate(g->second, hyp->second);
        side.cer_gt[id] = eval::char_error_rate(g->second, hyp->second);
      } else if (!req.gt_text.empty()) {
        warnings.push_back(label + ": utterance " + id +
                           " has no ground-truth text; excluded from WER/CER");
      }
      if (const auto t = ref_asr.find(id); t != ref_asr.end()) {
        side.wer_tr[id] = eval::word_error_rate(t->second, hyp->second);
        side.cer_tr[id] = eval::char_error_rate(t->second, hyp->second);
      }
    }
    return side;
  };

  const Side gen = score(generated, req.asr_text, "generated");
  std::optional<Side> base;
  if (!baseline.empty()) base = score(baseline, req.baseline_asr_text, "baseline");

  if (encoder) {
    std::optional<eval::SimilarityResult> base_sim;
    if (base) {
      base_sim = eval::speaker_similarity_report(real_embs, base->embs, groups, rng, nullptr,
                                                 "baseline");
    }
    eval::SimilarityResult sim = eval::speaker_similarity_report(
        real_embs, gen.embs, groups, rng, base_sim ? &*base_sim : nullptr, "generated");
    eval::ReportSection section = sim.report.sections.at(0);
    if (base_sim) {
      section.rows.insert(section.rows.begin(), base_sim->report.sections.at(0).rows.begin(),
                          base_sim->report.sections.at(0).rows.end());
    }
    report.sections.push_back(section);
    warnings.insert(warnings.end(), sim.report.warnings.begin(), sim.report.warnings.end());
  }

  auto rows_for = [&](const std::string& metric, const std::map<std::string, double> Side::*field,
                      eval::ReportSection& section) {
    const auto& g = gen.*field;
    if (base && !((*base).*field).empty()) {
      const auto& b = (*base).*field;
      std::vector<double> vb_all;
      for (const auto& [k, x] : b) vb_all.push_back(x);
      section.rows.push_back(eval::summarize("baseline / " + metric, vb_all, rng));
      if (!g.empty()) {
        bool paired = false;
        auto [vb, vg] = align_values(b, g, &paired);
        section.rows.push_back(eval::summarize("generated / " + metric, vg, rng, &vb,
                                               paired ? eval::Pairing::Paired
                                                      : eval::Pairing::Unpaired));
      }
    } else if (!g.empty()) {
      std::vector<double> v;
      for (const auto& [k, x] : g) v.push_back(x);
      section.rows.push_back(eval::summarize("generated / " + metric, v, rng));
    }
  };
  eval::ReportSection wer{"Intelligibility (error rates against ground-truth text and against "
                          "the transcription of the reference audio)", {}};
  rows_for("WER, GT text", &Side::wer_gt, wer);
  rows_for("CER, GT text", &Side::cer_gt, wer);
  rows_for("WER, transcription", &Side::wer_tr, wer);
  rows_for("CER, transcription", &Side::cer_tr, wer);
  if (!wer.rows.empty()) report.sections.push_back(wer);
  eval::ReportSection f0{std::string("Pitch accuracy (F0PPC after DTW, ") +
                             (req.f0_scale == eval::F0Scale::LogHz ? "log-f0" : "f0 in Hz") + ")",
                         {}};
  rows_for("F0PPC", &Side::f0ppc, f0);
  if (!f0.rows.empty()) report.sections.push_back(f0);

  if (!req.out_dir.empty()) {
    ensure_dir(req.out_dir);
    std::ofstream tsv(fs::path(req.out_dir) / "report.tsv");
    std::ofstream txt(fs::path(req.out_dir) / "report.txt");
    if (!tsv || !txt) throw Error("cannot write report files in " + req.out_dir);
    eval::write_report_tsv(tsv, report);
    eval::write_report_table(txt, report);
  }
  eval::write_report_table(log, report);
  return report;
}

}  // namespace freesvc::pipeline
