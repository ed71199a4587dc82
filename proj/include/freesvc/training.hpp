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
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "freesvc/data.hpp"
#include "freesvc/nn.hpp"
#include "freesvc/svc.hpp"

namespace freesvc::training {

// The four experimental variants: content extractor (stock backbone or the
// SPIN fine-tuned one) crossed with language conditioning.
enum class Variant { Baseline, LangEmb, Spin, SpinLangEmb };

// Accepts "baseline" (alias "baseline/ContentVec", "contentvec"), "lang_emb",
// "spin" and "spin_lang_emb".
Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
bool uses_spin(Variant v);
bool uses_language(Variant v);

struct TrainConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double epsilon = 1e-9;
  int batch_size = 128;
  int64_t total_steps = 225000;
  double lr_decay = 0.999875;  // per completed epoch
  // Optimizer steps per epoch; 0 derives it from the dataset size.
  int64_t steps_per_epoch = 0;
  uint64_t seed = 1234;
  Variant variant = Variant::SpinLangEmb;

  // Batch 4, 2000 steps.
  static TrainConfig desk();
  void validate() const;
  nn::AdamConfig adam() const { return {learning_rate, beta1, beta2, epsilon}; }
};

// lr * decay^epochs_completed.
double lr_schedule(int64_t step, int64_t epochs_completed, const TrainConfig& config);

struct LossReport {
  int64_t step = 0;
  double learning_rate = 0.0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double feat_match = 0.0;
  double mel_l1 = 0.0;
  double kl = 0.0;
  double g_total = 0.0;  // g_adv + 2 feat_match + 45 mel_l1 + kl
};

// Thrown before an optimizer update when a loss term is NaN or infinite.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& term, int64_t step);
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

class Trainer {
 public:
  Trainer(svc::SvcModel& model, TrainConfig config);

  // One GAN step: generator forward, discriminator update on (real, detached
  // fake), then generator update on adversarial + feature-matching + mel-L1
  // + KL. Marks the model ready.
  LossReport step(const svc::ModelInput& batch, std::mt19937_64& rng);

  void set_learning_rate(double lr);
  int64_t steps_done() const { return step_; }
  void set_steps_done(int64_t s) { step_ = s; }
  nn::Adam& generator_optimizer() { return gen_opt_; }
  nn::Adam& discriminator_optimizer() { return disc_opt_; }
  const TrainConfig& config() const { return config_; }
  svc::SvcModel& model() { return model_; }

 private:
  svc::SvcModel& model_;
  TrainConfig config_;
  nn::Adam gen_opt_, disc_opt_;
  int64_t step_ = 0;
};

// Runs `steps` optimizer steps drawing batches with weighted sampling.
// `on_step` (optional) sees every report; returning false stops early.
std::vector<LossReport> train_loop(
    Trainer& trainer, std::span<const data::Example> examples,
    std::span<const double> weights, int64_t steps, std::mt19937_64& rng,
    const std::function<bool(const LossReport&)>& on_step = {},
    std::vector<std::string>* warnings = nullptr);

// ---- checkpoints --------------------------------------------------------------

struct StoredTensor {
  ag::Shape shape;
  std::vector<double> values;
  bool operator==(const StoredTensor&) const = default;
};

// File layout: 8 magic bytes "FSVCCKP1", a little-endian u64 header length,
// a JSON header {step, config, optimizer_steps, tensors: [{name, dtype,
// shape, offset}]}, then the raw little-endian float64 arrays at the listed
// byte offsets from the start of the data block.
struct Checkpoint {
  int64_t step = 0;
  std::string config_json = "{}";  // serialized config snapshot
  std::map<std::string, StoredTensor> tensors;
  std::map<std::string, int64_t> optimizer_steps;
  bool operator==(const Checkpoint&) const = default;
};

// Parameter tensors of a set, keyed by parameter name.
void capture_params(const nn::ParameterSet& ps, Checkpoint& ckpt);
// Optimizer moments stored as "adam.<tag>.m/<param>" and "adam.<tag>.v/<param>".
void capture_optimizer(nn::Adam& opt, const std::string& tag, Checkpoint& ckpt);
void restore_optimizer(nn::Adam& opt, const std::string& tag, const Checkpoint& ckpt);

// Model parameters, both optimizers, step counter and config snapshot.
Checkpoint capture(svc::SvcModel& model, Trainer* trainer, const std::string& config_json);

// Temp file + rename, so an interrupted write leaves the old file intact.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;         // in the model, not the checkpoint
  std::vector<std::string> unexpected;      // parameters in the checkpoint only
  std::vector<std::string> shape_mismatch;  // present in both, shapes differ
  bool clean() const {
    return missing.empty() && unexpected.empty() && shape_mismatch.empty();
  }
};

// Copies every checkpoint tensor whose name and shape match a model
// parameter (generator and discriminator sets). Optimizer entries are
// ignored. With `strict`, any mismatch throws naming the parameters.
LoadReport warm_start(svc::SvcModel& model, const Checkpoint& ckpt, bool strict);
// The same for a single parameter set (for example a content backbone).
LoadReport load_params(nn::ParameterSet& ps, const Checkpoint& ckpt, bool strict);

// JSON round trip of the model configuration.
std::string model_config_json(const svc::ModelConfig& c);
svc::ModelConfig model_config_from_json(const std::string& json);

}  // namespace freesvc::training
