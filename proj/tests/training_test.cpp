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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "test_util.hpp"

namespace freesvc::training {
namespace {

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "freesvc_training_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

svc::ModelConfig small_config(bool language = true) {
  svc::ModelConfig c;
  c.inter_channels = 4;
  c.hidden = 8;
  c.content_dim = 6;
  c.speaker_dim = 5;
  c.lang_dim = 3;
  c.use_language = language;
  c.languages = {"en", "pt"};
  c.kernel = 3;
  c.posterior_layers = 2;
  c.flow_blocks = 2;
  c.flow_layers = 1;
  c.prior_layers = 1;
  c.decoder_channels = 16;
  c.resblock_dilations = {1};
  c.mpd_periods = {2, 3};
  c.msd_scales = 1;
  c.disc_channels = 4;
  c.segment_frames = 4;
  return c;
}

svc::ModelInput random_batch(const svc::ModelConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int64_t b = 2, f = 6;
  svc::ModelInput in;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> spec(b * svc::kSpecBins * f);
  for (double& v : spec) v = u(rng);
  in.spec = ag::Tensor::from({b, svc::kSpecBins, f}, spec);
  in.content = testing::random_tensor({b, cfg.content_dim, f}, rng);
  for (int64_t i = 0; i < b * f; ++i) in.pitch.push_back(static_cast<int>(rng() % 256));
  in.speaker = testing::random_tensor({b, cfg.speaker_dim, 1}, rng, 0.3);
  in.lang = {0, 1};
  in.audio = testing::random_tensor({b, 1, f * 320}, rng, 0.1);
  return in;
}

std::vector<double> all_values(const nn::ParameterSet& ps) {
  std::vector<double> out;
  for (const auto& p : ps.all()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

TEST(VariantTest, NamesAndFlags) {
  EXPECT_EQ(parse_variant("baseline"), Variant::Baseline);
  EXPECT_EQ(parse_variant("baseline/ContentVec"), Variant::Baseline);
  EXPECT_EQ(parse_variant("spin_lang_emb"), Variant::SpinLangEmb);
  EXPECT_TRUE(uses_spin(Variant::SpinLangEmb));
  EXPECT_TRUE(uses_language(Variant::SpinLangEmb));
  EXPECT_FALSE(uses_language(Variant::Baseline));
  EXPECT_FALSE(uses_spin(Variant::LangEmb));
  for (Variant v : {Variant::Baseline, Variant::LangEmb, Variant::Spin, Variant::SpinLangEmb}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_variant("hubert"), Error);
}

TEST(ScheduleTest, Examples) {
  TrainConfig c;
  EXPECT_EQ(lr_schedule(0, 0, c), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, 15, c), 2e-4 * std::pow(0.999875, 15));
  c.lr_decay = 1.0;
  EXPECT_EQ(lr_schedule(500000, 40, c), 2e-4);
  EXPECT_THROW(lr_schedule(-1, 0, c), Error);
}

TEST(TrainConfigTest, PaperDefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.learning_rate, 2e-4);
  EXPECT_EQ(c.beta1, 0.8);
  EXPECT_EQ(c.beta2, 0.99);
  EXPECT_EQ(c.epsilon, 1e-9);
  EXPECT_EQ(c.batch_size, 128);
  EXPECT_EQ(c.total_steps, 225000);
  EXPECT_EQ(TrainConfig::desk().batch_size, 4);
  TrainConfig bad;
  bad.beta2 = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(TrainerTest, OptimizersUseConfiguredHyperparameters) {
  svc::SvcModel model(small_config());
  Trainer t(model, TrainConfig{});
  for (nn::Adam* opt : {&t.generator_optimizer(), &t.discriminator_optimizer()}) {
    EXPECT_EQ(opt->config().learning_rate, 2e-4);
    EXPECT_EQ(opt->config().beta1, 0.8);
    EXPECT_EQ(opt->config().beta2, 0.99);
    EXPECT_EQ(opt->config().epsilon, 1e-9);
  }
}

TEST(TrainerTest, SameSeedSameLosses) {
  auto run = [] {
    svc::SvcModel model(small_config());
    Trainer t(model, TrainConfig{});
    std::mt19937_64 rng(3);
    const svc::ModelInput batch = random_batch(model.config(), 4);
    std::vector<double> out;
    for (int i = 0; i < 2; ++i) {
      const LossReport r = t.step(batch, rng);
      out.insert(out.end(), {r.d_loss, r.g_adv, r.feat_match, r.mel_l1, r.kl});
    }
    return out;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(TrainerTest, StepUpdatesBothNetworksAndMarksReady) {
  svc::SvcModel model(small_config());
  Trainer t(model, TrainConfig{});
  const auto gen0 = all_values(model.generator_params());
  const auto disc0 = all_values(model.discriminator_params());
  std::mt19937_64 rng(5);
  EXPECT_FALSE(model.ready());
  t.step(random_batch(model.config(), 6), rng);
  EXPECT_TRUE(model.ready());
  EXPECT_NE(all_values(model.generator_params()), gen0);
  EXPECT_NE(all_values(model.discriminator_params()), disc0);
  EXPECT_EQ(t.steps_done(), 1);
}

TEST(TrainerTest, NonFiniteLossAbortsStep) {
  svc::SvcModel model(small_config());
  Trainer t(model, TrainConfig{});
  svc::ModelInput batch = random_batch(model.config(), 7);
  for (double& v : batch.audio.data()) v = std::nan("");
  const auto gen0 = all_values(model.generator_params());
  const auto disc0 = all_values(model.discriminator_params());
  std::mt19937_64 rng(8);
  try {
    t.step(batch, rng);
    FAIL();
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.term(), "discriminator");
  }
  EXPECT_EQ(all_values(model.generator_params()), gen0);
  EXPECT_EQ(all_values(model.discriminator_params()), disc0);
  EXPECT_EQ(t.steps_done(), 0);
}

// ---- checkpoints ------------------------------------------------------------

TEST(CheckpointTest, RoundTripIsBitwise) {
  svc::SvcModel model(small_config());
  Trainer t(model, TrainConfig{});
  std::mt19937_64 rng(9);
  t.step(random_batch(model.config(), 10), rng);
  t.step(random_batch(model.config(), 11), rng);
  const Checkpoint c = capture(model, &t, model_config_json(model.config()));
  const std::string path = temp_path("rt.ckpt");
  save_checkpoint(path, c);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.step, 2);
  EXPECT_EQ(back.optimizer_steps.at("gen"), 2);

  svc::SvcModel fresh(model_config_from_json(back.config_json));
  const LoadReport r = warm_start(fresh, back, true);
  EXPECT_TRUE(r.clean());
  EXPECT_EQ(all_values(fresh.generator_params()), all_values(model.generator_params()));
  EXPECT_EQ(all_values(fresh.discriminator_params()),
            all_values(model.discriminator_params()));
}

TEST(CheckpointTest, ResumeContinuesExactly) {
  const svc::ModelConfig cfg = small_config();
  svc::SvcModel a(cfg);
  Trainer ta(a, TrainConfig{});
  std::mt19937_64 rng(12);
  ta.step(random_batch(cfg, 13), rng);
  const std::string path = temp_path("resume.ckpt");
  save_checkpoint(path, capture(a, &ta, model_config_json(cfg)));

  svc::SvcModel b(cfg);
  Trainer tb(b, TrainConfig{});
  const Checkpoint c = load_checkpoint(path);
  warm_start(b, c, true);
  restore_optimizer(tb.generator_optimizer(), "gen", c);
  restore_optimizer(tb.discriminator_optimizer(), "disc", c);
  tb.set_steps_done(c.step);
  EXPECT_EQ(tb.steps_done(), 1);

  std::mt19937_64 ra(14), rb(14);
  const svc::ModelInput batch = random_batch(cfg, 15);
  const LossReport la = ta.step(batch, ra);
  const LossReport lb = tb.step(batch, rb);
  EXPECT_EQ(la.g_total, lb.g_total);
  EXPECT_EQ(la.step, lb.step);
  EXPECT_EQ(all_values(a.generator_params()), all_values(b.generator_params()));
}

TEST(CheckpointTest, InterruptedWriteKeepsPreviousFile) {
  svc::SvcModel model(small_config());
  const std::string path = temp_path("keep.ckpt");
  const Checkpoint good = capture(model, nullptr, "{}");
  save_checkpoint(path, good);
  // A directory squatting on the temp name makes the next write fail midway.
  std::filesystem::create_directories(path + ".tmp");
  Checkpoint other = good;
  other.step = 99;
  EXPECT_THROW(save_checkpoint(path, other), Error);
  std::filesystem::remove_all(path + ".tmp");
  EXPECT_EQ(load_checkpoint(path), good);
}

TEST(CheckpointTest, RejectsGarbage) {
  const std::string path = temp_path("garbage.ckpt");
  std::ofstream(path) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(path), Error);
  EXPECT_THROW(load_checkpoint(temp_path("absent.ckpt")), Error);
}

TEST(WarmStartTest, BaselineToLanguageUpgradeListsLanguageTable) {
  svc::SvcModel base(small_config(false));
  const Checkpoint c = capture(base, nullptr, "{}");
  svc::SvcModel lang(small_config(true));
  const LoadReport r = warm_start(lang, c, false);
  std::vector<std::string> missing = r.missing;
  std::sort(missing.begin(), missing.end());
  EXPECT_EQ(missing, (std::vector<std::string>{"lang.proj.weight", "lang.table"}));
  EXPECT_TRUE(r.unexpected.empty());
  EXPECT_TRUE(r.shape_mismatch.empty());
  EXPECT_EQ(lang.generator_params().at("prior.pre.weight").tensor.values(),
            base.generator_params().at("prior.pre.weight").tensor.values());
  EXPECT_THROW(warm_start(lang, c, true), Error);

  // The reverse direction reports the language tensors as unexpected.
  const LoadReport back = warm_start(base, capture(lang, nullptr, "{}"), false);
  EXPECT_EQ(back.unexpected.size(), 2u);
}

TEST(WarmStartTest, StrictShapeMismatchNamesParameter) {
  svc::ModelConfig wide = small_config();
  wide.hidden = 12;
  svc::SvcModel a(wide), b(small_config());
  const Checkpoint c = capture(a, nullptr, "{}");
  const auto before = all_values(b.generator_params());
  try {
    warm_start(b, c, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("prior.pre.weight"), std::string::npos);
  }
  EXPECT_EQ(all_values(b.generator_params()), before);
  const LoadReport r = warm_start(b, c, false);
  EXPECT_FALSE(r.shape_mismatch.empty());
  EXPECT_FALSE(r.loaded.empty());
}

TEST(ConfigJsonTest, RoundTrip) {
  svc::ModelConfig c = svc::ModelConfig::desk();
  c.languages = {"en", "pt", "zh"};
  c.use_language = false;
  const svc::ModelConfig back = model_config_from_json(model_config_json(c));
  EXPECT_EQ(model_config_json(back), model_config_json(c));
  EXPECT_THROW(model_config_from_json("{\"hidden\": 3}"), Error);
}

// ---- toy overfit ------------------------------------------------------------------

TEST(ToyOverfitTest, MelLossHalvesOnTwoClips) {
  content::ContentBackbone backbone;
  speaker::SpeakerEncoder encoder;
  std::vector<data::Example> ex;
  ex.push_back(data::prepare_example(
      {testing::toy_melody(200, 1.0, 24000, {0, 1, 2, 3}), 24000}, backbone, encoder, 0, "a"));
  ex.push_back(data::prepare_example(
      {testing::toy_melody(140, 1.0, 24000, {4, 5, 2}, 1.2), 24000}, backbone, encoder, 0, "b"));
  svc::ModelConfig cfg = svc::ModelConfig::desk();
  svc::SvcModel model(cfg);
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 2;
  Trainer t(model, tc);
  std::mt19937_64 rng(1);
  const std::vector<double> w(2, 1.0);
  const auto h = train_loop(t, ex, w, 500, rng);
  auto window = [&](size_t end) {
    double s = 0.0;
    for (size_t i = end - 10; i < end; ++i) s += h[i].mel_l1;
    return s / 10.0;
  };
  const double start = window(10), finish = window(h.size());
  std::cout << "mel-L1 moving average: step 10 " << start << ", step 500 " << finish << "\n";
  EXPECT_LT(finish, 0.5 * start);
}

}  // namespace
}  // namespace freesvc::training
