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

#include "freesvc/training.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace freesvc::training {

using ag::Tensor;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'S', 'V', 'C', 'C', 'K', 'P', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are written in host order, which must be little-endian");

void check_finite(double v, const char* term, int64_t step) {
  if (!std::isfinite(v)) throw NonFiniteLoss(term, step);
}

}  // namespace

// ---- variants and config ------------------------------------------------------

Variant parse_variant(const std::string& name) {
  if (name == "baseline" || name == "baseline/ContentVec" || name == "contentvec") {
    return Variant::Baseline;
  }
  if (name == "lang_emb") return Variant::LangEmb;
  if (name == "spin") return Variant::Spin;
  if (name == "spin_lang_emb") return Variant::SpinLangEmb;
  throw Error("unknown variant: " + name +
              " (expected baseline, lang_emb, spin or spin_lang_emb)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "baseline";
    case Variant::LangEmb:
      return "lang_emb";
    case Variant::Spin:
      return "spin";
    default:
      return "spin_lang_emb";
  }
}

bool uses_spin(Variant v) { return v == Variant::Spin || v == Variant::SpinLangEmb; }
bool uses_language(Variant v) {
  return v == Variant::LangEmb || v == Variant::SpinLangEmb;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 4;
  c.total_steps = 2000;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !(epsilon > 0.0) || !(lr_decay > 0.0)) {
    throw Error("train config: learning_rate, epsilon and lr_decay must be positive");
  }
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw Error("train config: betas must lie in (0, 1)");
  }
  if (batch_size <= 0 || total_steps <= 0 || steps_per_epoch < 0) {
    throw Error("train config: batch_size and total_steps must be positive");
  }
}

double lr_schedule(int64_t step, int64_t epochs_completed, const TrainConfig& config) {
  if (step < 0 || epochs_completed < 0) throw Error("lr_schedule: negative step");
  return config.learning_rate *
         std::pow(config.lr_decay, static_cast<double>(epochs_completed));
}

NonFiniteLoss::NonFiniteLoss(const std::string& term, int64_t step)
    : Error("non-finite " + term + " loss at step " + std::to_string(step) +
            "; step aborted"),
      term_(term) {}

// ---- trainer --------------------------------------------------------------------

Trainer::Trainer(svc::SvcModel& model, TrainConfig config)
    : model_(model),
      config_((config.validate(), config)),
      gen_opt_(nn::select(model.generator_params(), {""}), config_.adam()),
      disc_opt_(nn::select(model.discriminator_params(), {""}), config_.adam()) {}

void Trainer::set_learning_rate(double lr) {
  gen_opt_.set_learning_rate(lr);
  disc_opt_.set_learning_rate(lr);
}

LossReport Trainer::step(const svc::ModelInput& batch, std::mt19937_64& rng) {
  LossReport r;
  r.step = step_;
  r.learning_rate = gen_opt_.config().learning_rate;
  const svc::Discriminators& disc = model_.discriminators();

  // (1) generator forward.
  const svc::GeneratorOutput g = svc::generator_forward(model_, batch, rng);

  // (2) discriminator update on real and detached fake audio.
  const Tensor d_loss =
      svc::discriminator_loss(disc.forward(g.real), disc.forward(g.fake.detach()));
  r.d_loss = d_loss.item();
  if (!std::isfinite(r.d_loss)) {
    disc_opt_.zero_grad();
    throw NonFiniteLoss("discriminator", step_);
  }
  d_loss.backward();
  disc_opt_.step();

  // (3) generator update against the refreshed discriminators.
  const auto d_real = disc.forward(g.real);
  const auto d_fake = disc.forward(g.fake);
  const Tensor adv = svc::generator_adv_loss(d_fake);
  const Tensor fm = svc::feature_matching_loss(d_real, d_fake);
  const Tensor mel = svc::mel_l1_loss(g.real, g.fake);
  const Tensor kl = svc::kl_term(g.posterior, g.prior, g.flow.z, g.flow.log_det);
  r.g_adv = adv.item();
  r.feat_match = fm.item();
  r.mel_l1 = mel.item();
  r.kl = kl.item();
  const Tensor total = ag::add(
      ag::add(adv, ag::scale(fm, svc::kFeatureMatchingWeight)),
      ag::add(ag::scale(mel, svc::kMelWeight), kl));
  r.g_total = total.item();
  try {
    check_finite(r.g_adv, "adversarial", step_);
    check_finite(r.feat_match, "feature-matching", step_);
    check_finite(r.mel_l1, "mel-L1", step_);
    check_finite(r.kl, "KL", step_);
  } catch (const NonFiniteLoss&) {
    gen_opt_.zero_grad();
    disc_opt_.zero_grad();
    throw;
  }
  total.backward();
  disc_opt_.zero_grad();
  gen_opt_.step();
  ++step_;
  model_.set_ready(true);
  return r;
}

std::vector<LossReport> train_loop(
    Trainer& trainer, std::span<const data::Example> examples,
    std::span<const double> weights, int64_t steps, std::mt19937_64& rng,
    const std::function<bool(const LossReport&)>& on_step,
    std::vector<std::string>* warnings) {
  if (examples.empty()) throw Error("train_loop: no training examples");
  if (weights.size() != examples.size()) {
    throw Error("train_loop: one weight per example required");
  }
  const TrainConfig& cfg = trainer.config();
  const int64_t per_epoch =
      cfg.steps_per_epoch > 0
          ? cfg.steps_per_epoch
          : std::max<int64_t>(1, (static_cast<int64_t>(examples.size()) + cfg.batch_size - 1) /
                                     cfg.batch_size);
  const int64_t segment = trainer.model().config().segment_frames;
  std::vector<LossReport> history;
  std::set<std::string> seen;
  for (int64_t i = 0; i < steps; ++i) {
    const int64_t step = trainer.steps_done();
    trainer.set_learning_rate(lr_schedule(step, step / per_epoch, cfg));
    const auto idx = data::weighted_sample(weights, cfg.batch_size, rng);
    std::vector<std::string> w;
    const svc::ModelInput batch = data::make_batch(examples, idx, segment, rng, &w);
    if (warnings) {
      for (auto& m : w) {
        if (seen.insert(m).second) warnings->push_back(m);
      }
    }
    history.push_back(trainer.step(batch, rng));
    if (on_step && !on_step(history.back())) break;
  }
  return history;
}

// ---- checkpoints ------------------------------------------------------------------

void capture_params(const nn::ParameterSet& ps, Checkpoint& ckpt) {
  for (const auto& p : ps.all()) {
    if (!ckpt.tensors.emplace(p.name, StoredTensor{p.tensor.shape(), p.tensor.values()})
             .second) {
      throw Error("checkpoint: duplicate tensor name " + p.name);
    }
  }
}

void capture_optimizer(nn::Adam& opt, const std::string& tag, Checkpoint& ckpt) {
  auto& params = opt.params();
  auto& slots = opt.slots();
  for (size_t i = 0; i < params.size(); ++i) {
    const ag::Shape& shape = params[i]->tensor.shape();
    ckpt.tensors["adam." + tag + ".m/" + params[i]->name] = {shape, slots[i].m};
    ckpt.tensors["adam." + tag + ".v/" + params[i]->name] = {shape, slots[i].v};
  }
  ckpt.optimizer_steps[tag] = opt.steps();
}

void restore_optimizer(nn::Adam& opt, const std::string& tag, const Checkpoint& ckpt) {
  auto steps = ckpt.optimizer_steps.find(tag);
  if (steps == ckpt.optimizer_steps.end()) {
    throw Error("checkpoint has no optimizer state for " + tag);
  }
  auto& params = opt.params();
  auto& slots = opt.slots();
  for (size_t i = 0; i < params.size(); ++i) {
    for (const char* moment : {"m", "v"}) {
      const std::string key = "adam." + tag + "." + moment + "/" + params[i]->name;
      auto it = ckpt.tensors.find(key);
      if (it == ckpt.tensors.end()) {
        // A parameter new to this model (warm start) keeps fresh moments.
        continue;
      }
      if (static_cast<int64_t>(it->second.values.size()) != params[i]->tensor.numel()) {
        throw Error("optimizer state shape mismatch for " + params[i]->name);
      }
      (moment[0] == 'm' ? slots[i].m : slots[i].v) = it->second.values;
    }
  }
  opt.set_steps(steps->second);
}

Checkpoint capture(svc::SvcModel& model, Trainer* trainer, const std::string& config_json) {
  Checkpoint c;
  c.config_json = config_json;
  capture_params(model.generator_params(), c);
  capture_params(model.discriminator_params(), c);
  if (trainer) {
    c.step = trainer->steps_done();
    capture_optimizer(trainer->generator_optimizer(), "gen", c);
    capture_optimizer(trainer->discriminator_optimizer(), "disc", c);
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["step"] = ckpt.step;
  header["config"] = json::parse(ckpt.config_json);
  header["optimizer_steps"] = ckpt.optimizer_steps;
  json list = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (static_cast<int64_t>(t.values.size()) != ag::numel_of(t.shape)) {
      throw Error("checkpoint: tensor " + name + " does not match its shape");
    }
    list.push_back({{"name", name}, {"dtype", "f64"}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size() * sizeof(double);
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint: " + tmp);
    out.write(kMagic, sizeof kMagic);
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    }
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error("failed writing checkpoint: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot replace checkpoint " + path + ": " + ec.message());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw Error("not a checkpoint file: " + path);
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (uint64_t{1} << 32)) throw Error("corrupt checkpoint header: " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint header: " + path);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw Error("corrupt checkpoint header in " + path + ": " + e.what());
  }
  const std::streamoff data_start = in.tellg();
  Checkpoint c;
  try {
    c.step = header.at("step").get<int64_t>();
    c.config_json = header.at("config").dump();
    c.optimizer_steps = header.at("optimizer_steps").get<std::map<std::string, int64_t>>();
    for (const auto& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f64") {
        throw Error("unsupported dtype for " + name + " in " + path);
      }
      StoredTensor st;
      st.shape = t.at("shape").get<ag::Shape>();
      st.values.resize(ag::numel_of(st.shape));
      in.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<uint64_t>()));
      in.read(reinterpret_cast<char*>(st.values.data()),
              static_cast<std::streamsize>(st.values.size() * sizeof(double)));
      if (!in) throw Error("truncated checkpoint data for " + name + " in " + path);
      c.tensors.emplace(name, std::move(st));
    }
  } catch (const json::exception& e) {
    throw Error("corrupt checkpoint header in " + path + ": " + e.what());
  }
  return c;
}

namespace {

bool is_optimizer_entry(const std::string& name) { return name.rfind("adam.", 0) == 0; }

void load_into(nn::ParameterSet& ps, const Checkpoint& ckpt, LoadReport& r,
               std::set<std::string>& used) {
  for (auto& p : ps.all()) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) {
      r.missing.push_back(p.name);
      continue;
    }
    used.insert(p.name);
    if (it->second.shape != p.tensor.shape()) {
      r.shape_mismatch.push_back(p.name + " (checkpoint " + ag::shape_str(it->second.shape) +
                                 ", model " + ag::shape_str(p.tensor.shape()) + ")");
      continue;
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.tensor.data().begin());
    r.loaded.push_back(p.name);
  }
}

void finish(const Checkpoint& ckpt, const std::set<std::string>& used, LoadReport& r,
            bool strict) {
  for (const auto& [name, t] : ckpt.tensors) {
    if (!is_optimizer_entry(name) && !used.count(name)) r.unexpected.push_back(name);
  }
  if (strict && !r.clean()) {
    std::string msg = "strict load failed:";
    for (const auto& n : r.shape_mismatch) msg += " shape mismatch " + n + ";";
    for (const auto& n : r.missing) msg += " missing " + n + ";";
    for (const auto& n : r.unexpected) msg += " unexpected " + n + ";";
    throw Error(msg);
  }
}

}  // namespace

LoadReport warm_start(svc::SvcModel& model, const Checkpoint& ckpt, bool strict) {
  LoadReport r;
  std::set<std::string> used;
  // Check before mutating anything when strict.
  if (strict) {
    svc::SvcModel probe(model.config());
    LoadReport dry;
    std::set<std::string> dry_used;
    load_into(probe.generator_params(), ckpt, dry, dry_used);
    load_into(probe.discriminator_params(), ckpt, dry, dry_used);
    finish(ckpt, dry_used, dry, true);
  }
  load_into(model.generator_params(), ckpt, r, used);
  load_into(model.discriminator_params(), ckpt, r, used);
  finish(ckpt, used, r, strict);
  return r;
}

LoadReport load_params(nn::ParameterSet& ps, const Checkpoint& ckpt, bool strict) {
  LoadReport r;
  std::set<std::string> used;
  load_into(ps, ckpt, r, used);
  finish(ckpt, used, r, strict);
  return r;
}

std::string model_config_json(const svc::ModelConfig& c) {
  json j;
  j["inter_channels"] = c.inter_channels;
  j["hidden"] = c.hidden;
  j["content_dim"] = c.content_dim;
  j["speaker_dim"] = c.speaker_dim;
  j["lang_dim"] = c.lang_dim;
  j["use_language"] = c.use_language;
  j["languages"] = c.languages;
  j["kernel"] = c.kernel;
  j["posterior_layers"] = c.posterior_layers;
  j["flow_blocks"] = c.flow_blocks;
  j["flow_layers"] = c.flow_layers;
  j["prior_layers"] = c.prior_layers;
  j["upsample_rates"] = c.upsample_rates;
  j["upsample_kernels"] = c.upsample_kernels;
  j["decoder_channels"] = c.decoder_channels;
  j["resblock_kernel"] = c.resblock_kernel;
  j["resblock_dilations"] = c.resblock_dilations;
  j["mpd_periods"] = c.mpd_periods;
  j["msd_scales"] = c.msd_scales;
  j["disc_channels"] = c.disc_channels;
  j["segment_frames"] = c.segment_frames;
  j["seed"] = c.seed;
  return j.dump();
}

svc::ModelConfig model_config_from_json(const std::string& text) {
  svc::ModelConfig c;
  try {
    const json j = json::parse(text);
    j.at("inter_channels").get_to(c.inter_channels);
    j.at("hidden").get_to(c.hidden);
    j.at("content_dim").get_to(c.content_dim);
    j.at("speaker_dim").get_to(c.speaker_dim);
    j.at("lang_dim").get_to(c.lang_dim);
    j.at("use_language").get_to(c.use_language);
    j.at("languages").get_to(c.languages);
    j.at("kernel").get_to(c.kernel);
    j.at("posterior_layers").get_to(c.posterior_layers);
    j.at("flow_blocks").get_to(c.flow_blocks);
    j.at("flow_layers").get_to(c.flow_layers);
    j.at("prior_layers").get_to(c.prior_layers);
    j.at("upsample_rates").get_to(c.upsample_rates);
    j.at("upsample_kernels").get_to(c.upsample_kernels);
    j.at("decoder_channels").get_to(c.decoder_channels);
    j.at("resblock_kernel").get_to(c.resblock_kernel);
    j.at("resblock_dilations").get_to(c.resblock_dilations);
    j.at("mpd_periods").get_to(c.mpd_periods);
    j.at("msd_scales").get_to(c.msd_scales);
    j.at("disc_channels").get_to(c.disc_channels);
    j.at("segment_frames").get_to(c.segment_frames);
    j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace freesvc::training
