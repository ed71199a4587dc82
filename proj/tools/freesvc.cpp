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

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "freesvc/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using freesvc::pipeline::RunConfig;

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;  // key=value
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "Configuration file (key = value with [sections])")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, out_help)->required();
  cmd->add_option("--seed", c.seed, "Random seed (overrides run.seed)");
  cmd->add_option("--set", c.overrides, "Override any config key: section.key=value");
}

// File, then --set overrides, then dedicated flags (applied by the caller).
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.load_file(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw freesvc::Error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed >= 0) cfg.set("run.seed", std::to_string(c.seed));
  return cfg;
}

// Every run prints its resolved configuration and, when it owns an output
// directory, keeps a copy there.
void log_config(const RunConfig& cfg, const std::string& dir) {
  std::cout << "# resolved configuration\n" << cfg.resolved() << "\n";
  if (dir.empty()) return;
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / "resolved_config.ini") << cfg.resolved();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"freesvc: zero-shot multilingual singing voice conversion toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // prepare
  Common prep_common;
  std::string prep_manifest;
  auto* prep = app.add_subcommand("prepare", "Split a manifest and cache training features");
  add_common(prep, prep_common, "Output directory for split manifests and models");
  prep->add_option("--manifest", prep_manifest, "Tab-separated dataset manifest")->required();

  // train-spin
  Common spin_common;
  std::string spin_manifest;
  int64_t spin_steps = -1, spin_batch = -1;
  auto* spin = app.add_subcommand("train-spin", "Fine-tune the content extractor with SPIN");
  add_common(spin, spin_common, "Output directory (writes spin.ckpt)");
  spin->add_option("--manifest", spin_manifest, "Manifest of fine-tuning clips")->required();
  spin->add_option("--steps", spin_steps, "Maximum number of updates (spin.max_steps)");
  spin->add_option("--batch-size", spin_batch, "Clips per update (spin.batch_size)");

  // train-svc
  Common svc_common;
  std::string svc_manifest, svc_variant;
  int64_t svc_steps = -1, svc_batch = -1;
  bool svc_resume = false;
  auto* train = app.add_subcommand("train-svc", "Train a conversion model variant");
  add_common(train, svc_common, "Output directory (writes svc.ckpt)");
  train->add_option("--manifest", svc_manifest, "Training manifest (default <out>/train.tsv)");
  train->add_option("--variant", svc_variant,
                    "baseline (or baseline/ContentVec), lang_emb, spin, spin_lang_emb");
  train->add_option("--steps", svc_steps, "Total optimizer steps (train.steps)");
  train->add_option("--batch-size", svc_batch, "Batch size (train.batch_size)");
  train->add_flag("--resume", svc_resume, "Continue from <out>/svc.ckpt");

  // convert
  Common conv_common;
  freesvc::pipeline::ConvertRequest conv;
  std::string conv_lang;
  double conv_shift = 0.0, conv_noise = 0.0;
  auto* convert = app.add_subcommand("convert", "Convert a source recording to a target voice");
  add_common(convert, conv_common, "Output wav file");
  convert->add_option("--checkpoint", conv.checkpoint, "Model checkpoint (svc.ckpt)")
      ->required()
      ->check(CLI::ExistingFile);
  convert->add_option("--source", conv.source, "Source wav")->required()->check(CLI::ExistingFile);
  convert->add_option("--target", conv.target, "Target speaker wav or embedding file")
      ->required()
      ->check(CLI::ExistingFile);
  auto* lang_opt = convert->add_option("--lang", conv_lang, "Language code of the output");
  auto* shift_opt = convert->add_option("--key-shift", conv_shift, "Transposition in semitones");
  auto* noise_opt = convert->add_option("--noise-scale", conv_noise, "Prior sampling noise scale");

  // evaluate
  Common eval_common;
  freesvc::pipeline::EvaluateRequest ev;
  std::string ev_scale;
  auto* evaluate = app.add_subcommand("evaluate", "Objective metrics of generated audio");
  add_common(evaluate, eval_common, "Output directory for report.tsv and report.txt");
  evaluate->add_option("--generated", ev.generated_dir, "Directory of generated wavs")->required();
  evaluate->add_option("--reference", ev.reference_dir, "Directory of reference wavs")->required();
  evaluate->add_option("--baseline", ev.baseline_dir, "Directory of baseline generated wavs");
  evaluate->add_option("--gt-text", ev.gt_text, "Ground-truth text (utterance<TAB>text)");
  evaluate->add_option("--asr-text", ev.asr_text, "Transcription of the generated audio");
  evaluate->add_option("--baseline-asr-text", ev.baseline_asr_text,
                       "Transcription of the baseline audio");
  evaluate->add_option("--reference-asr-text", ev.reference_asr_text,
                       "Transcription of the reference audio");
  evaluate->add_option("--speakers", ev.speakers,
                       "Speaker map (utterance<TAB>speaker<TAB>known-singing|known-speech|unknown)");
  evaluate->add_option("--checkpoint", ev.checkpoint, "Checkpoint holding the speaker encoder");
  evaluate->add_option("--f0-scale", ev_scale, "F0PPC scale: log (default) or hz");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (prep->parsed()) {
      const RunConfig cfg = resolve(prep_common);
      log_config(cfg, prep_common.out);
      freesvc::pipeline::cmd_prepare(cfg, prep_manifest, prep_common.out, std::cout);
    } else if (spin->parsed()) {
      RunConfig cfg = resolve(spin_common);
      if (spin_steps >= 0) cfg.set("spin.max_steps", std::to_string(spin_steps));
      if (spin_batch >= 0) cfg.set("spin.batch_size", std::to_string(spin_batch));
      log_config(cfg, spin_common.out);
      freesvc::pipeline::cmd_train_spin(cfg, spin_manifest, spin_common.out, std::cout);
    } else if (train->parsed()) {
      RunConfig cfg = resolve(svc_common);
      if (!svc_variant.empty()) cfg.set("run.variant", svc_variant);
      if (svc_steps >= 0) cfg.set("train.steps", std::to_string(svc_steps));
      if (svc_batch >= 0) cfg.set("train.batch_size", std::to_string(svc_batch));
      cfg.variant();  // validates the name before any work starts
      log_config(cfg, svc_common.out);
      freesvc::pipeline::cmd_train_svc(cfg, svc_manifest, svc_common.out, svc_resume, std::cout);
    } else if (convert->parsed()) {
      RunConfig cfg = resolve(conv_common);
      if (*lang_opt) cfg.set("convert.lang", conv_lang);
      if (*shift_opt) cfg.set("convert.key_shift", std::to_string(conv_shift));
      if (*noise_opt) cfg.set("convert.noise_scale", std::to_string(conv_noise));
      log_config(cfg, "");
      conv.out = conv_common.out;
      conv.options.key_shift = cfg.get_double("convert.key_shift");
      conv.options.noise_scale = cfg.get_double("convert.noise_scale");
      conv.options.language = cfg.get("convert.lang");
      conv.options.seed = cfg.seed();
      freesvc::pipeline::cmd_convert(conv, std::cout);
    } else if (evaluate->parsed()) {
      RunConfig cfg = resolve(eval_common);
      if (!ev_scale.empty()) cfg.set("eval.f0_scale", ev_scale);
      log_config(cfg, eval_common.out);
      ev.out_dir = eval_common.out;
      ev.seed = cfg.seed();
      ev.f0_scale = freesvc::eval::parse_f0_scale(cfg.get("eval.f0_scale"));
      freesvc::pipeline::cmd_evaluate(ev, std::cout);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg) {
      if (c == '\n') c = ' ';
    }
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}
