// Copyright (c) 2026 The ModalityBank Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "mbank/experiment/config.hpp"
#include "mbank/experiment/scenarios.hpp"

namespace {

namespace ex = mbank::experiment;
namespace data = mbank::data;
namespace fs = std::filesystem;
using mbank::nn::Shape;
using mbank::nn::Tensor;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mbank_experiment_" + name);
  fs::remove_all(p);
  return p;
}

ex::ExperimentConfig tiny_config(const std::string& name) {
  ex::ExperimentConfig c;
  c.image_size = 16;
  c.cases = 40;
  c.generator.base_width = 4;
  c.generator.res_blocks = 1;
  c.discriminator.base_width = 4;
  c.discriminator.stages = 2;
  c.pretrain.cases = 8;
  c.pretrain.rounds = 2;
  c.pretrain.batch_size = 2;
  c.bank.rounds = 2;
  c.seg.width = 4;
  c.seg.epochs = 1;
  c.seg.min_steps = 0;
  c.out = scratch(name).string();
  return c;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n - 1;
}

TEST(Config, DefaultsValidateAndRoundTrip) {
  const auto c = ex::load_config("default");
  EXPECT_EQ(c.center_weights, (std::vector<std::size_t>{88, 102, 20}));
  EXPECT_EQ(c.cases, 210u);
  EXPECT_EQ(c.image_size, 32u);
  const auto text = ex::dump_config(c);
  EXPECT_EQ(ex::dump_config(ex::parse_config(text)), text);
  EXPECT_EQ(c.scenario_b_missing.at("center1"), "m2");
  EXPECT_EQ(c.scenario_b_missing.at("center2"), "m3");
  EXPECT_EQ(c.scenario_b_missing.at("center3"), "m1");
}

TEST(Config, PartialFileOverridesDefaults) {
  const auto c = ex::parse_config(R"({"seed": 7, "bank": {"rounds": 3}, "seg": {"min_steps": 0}})");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.bank.rounds, 3u);
  EXPECT_EQ(c.seg.min_steps, 0u);
  EXPECT_EQ(c.bank.batch_size, ex::ExperimentConfig{}.bank.batch_size);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(ex::parse_config("{"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"sead": 1})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"bank": {"rate": 1}})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"seed": "one"})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"image_size": 30})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"center_weights": [1, 2]})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"modalities": ["m1", "m9"]})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"transport": "udp"})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"pretrain": {"corpus": "C"}})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"bank": {"g_lr": 0}})"), mbank::ConfigError);
  EXPECT_THROW(ex::parse_config(R"({"scenario_b_missing": {"center9": "m1"}})"), mbank::ConfigError);
  EXPECT_THROW(ex::load_config("/nonexistent/config.json"), mbank::ConfigError);
}

TEST(Checkpoint, BaseAndBankRoundTripBitExactly) {
  const auto cfg = tiny_config("ckpt");
  auto gen = ex::pretrain(cfg);
  auto bank = mbank::models::new_bank(gen);
  bank.register_modality("m1");
  bank.params("m1").layers.front().gamma.value[0] += 0.5f;
  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  ex::save_base(dir / ex::kBaseCheckpoint, gen);
  ex::save_bank(dir / ex::kBankCheckpoint, gen, bank);

  auto gen2 = ex::load_base(dir / ex::kBaseCheckpoint, cfg.generator);
  auto bank2 = ex::load_bank(dir / ex::kBankCheckpoint, gen2);
  const Tensor<float> mask = data::sample_mask(4, 16, 16).reshaped(Shape{1, 3, 16, 16});
  EXPECT_EQ(gen.synthesize(mask), gen2.synthesize(mask));
  auto v1 = mbank::bank::switch_modality(bank, "m1");
  auto v2 = mbank::bank::switch_modality(bank2, "m1");
  EXPECT_EQ(gen.synthesize(mask, &v1), gen2.synthesize(mask, &v2));
  EXPECT_EQ(mbank::models::base_digest(gen), mbank::models::base_digest(gen2));

  auto other = tiny_config("ckpt");
  other.generator.base_width = 8;
  EXPECT_THROW(ex::load_base(dir / ex::kBaseCheckpoint, other.generator), mbank::Error);
  mbank::models::Generator<float> stranger(cfg.generator, 99);
  EXPECT_THROW(ex::load_bank(dir / ex::kBankCheckpoint, stranger), mbank::Error);
}

TEST(Checkpoint, SegmenterRoundTrip) {
  const auto cfg = tiny_config("seg");
  const auto holdout = ex::build_dataset(cfg, false);
  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  const auto r = ex::fit_and_score(holdout.train[0].cases, {"m1", "m3"}, holdout.test, "probe", cfg, dir);
  auto model = ex::load_segmenter(dir / "probe.ckpt");
  EXPECT_EQ(model.config().modalities, (std::vector<std::string>{"m1", "m3"}));
  const auto again = mbank::seg::evaluate(model, holdout.test, "probe");
  EXPECT_EQ(mbank::seg::csv_row("A", again, 1), mbank::seg::csv_row("A", r, 1));
}

TEST(Dataset, ExportImportRoundTrip) {
  const auto cfg = tiny_config("export");
  const auto holdout = ex::build_dataset(cfg, true);
  data::export_dataset(cfg.out, holdout.train, holdout.test);
  const auto back = data::import_dataset(cfg.out);
  ASSERT_EQ(back.test.size(), holdout.test.size());
  for (std::size_t k = 0; k < holdout.train.size(); ++k) {
    EXPECT_EQ(back.train[k].id, holdout.train[k].id);
    EXPECT_EQ(back.train[k].modalities, holdout.train[k].modalities);
    ASSERT_EQ(back.train[k].cases.size(), holdout.train[k].cases.size());
    for (std::size_t i = 0; i < holdout.train[k].cases.size(); ++i) {
      const auto& a = holdout.train[k].cases[i];
      const auto& b = back.train[k].cases[i];
      EXPECT_EQ(a.id, b.id);
      EXPECT_EQ(a.seed, b.seed);
      EXPECT_EQ(a.mask, b.mask);
      EXPECT_EQ(a.images, b.images);
      EXPECT_EQ(a.synthetic, b.synthetic);
    }
  }
  for (std::size_t i = 0; i < holdout.test.size(); ++i) EXPECT_EQ(back.test[i].images, holdout.test[i].images);
  EXPECT_THROW(data::import_dataset(scratch("missing")), mbank::IoError);
}

TEST(Dataset, ScenarioBDropsTheConfiguredModality) {
  const auto cfg = tiny_config("drop");
  const auto full = ex::build_dataset(cfg, false);
  const auto missing = ex::build_dataset(cfg, true);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string dropped = cfg.scenario_b_missing.at(missing.train[k].id);
    EXPECT_EQ(missing.train[k].modalities.count(dropped), 0u);
    EXPECT_EQ(missing.train[k].modalities.size(), 2u);
    for (std::size_t i = 0; i < missing.train[k].cases.size(); ++i)
      EXPECT_EQ(missing.train[k].cases[i].mask, full.train[k].cases[i].mask);
  }
  auto bad = cfg;
  bad.modalities = {"m1", "m2"};
  bad.scenario_b_missing = {{"center1", "m2"}, {"center2", "m2"}, {"center3", "m2"}};
  EXPECT_THROW(ex::build_dataset(bad, true), mbank::ConfigError);
}

TEST(Pretrain, CorporaGiveDifferentBases) {
  auto a = tiny_config("corpus");
  auto b = a;
  b.pretrain.corpus = "B";
  EXPECT_NE(mbank::models::base_digest(ex::pretrain(a)), mbank::models::base_digest(ex::pretrain(b)));
  EXPECT_EQ(mbank::models::base_digest(ex::pretrain(a)), mbank::models::base_digest(ex::pretrain(a)));
}

// Mean output inside the tumor must separate from the background after a
// short pretraining run.
TEST(Pretrain, OutputTracksTheMask) {
  ex::ExperimentConfig cfg;
  cfg.pretrain.rounds = 60;
  const auto gen_ok = ex::pretrain(cfg);
  auto gen = gen_ok;
  double inside = 0, outside = 0, n_in = 0, n_out = 0;
  for (std::uint64_t s = 0; s < 16; ++s) {
    const Tensor<float> mask = data::sample_mask(1000 + s, 32, 32);
    const Tensor<float> wt = data::whole_tumor(mask);
    const Tensor<float> img = gen.synthesize(mask.reshaped(Shape{1, 3, 32, 32}));
    for (std::size_t i = 0; i < wt.size(); ++i) {
      if (wt[i] > 0.5f) {
        inside += img[i];
        n_in += 1;
      } else {
        outside += img[i];
        n_out += 1;
      }
    }
  }
  EXPECT_GT(std::abs(inside / n_in - outside / n_out), 0.1);
}

TEST(Scenario, AWritesFiveRowsAndTheRunDirectory) {
  const auto cfg = tiny_config("scenario_a");
  const auto res = ex::run_scenario(cfg, "A");
  const fs::path dir = cfg.out;
  ASSERT_EQ(res.reports.size(), 5u);
  EXPECT_EQ(res.reports[0].method, ex::kRealAll);
  EXPECT_EQ(res.reports[4].method, ex::kSynthetic);
  EXPECT_EQ(csv_rows(dir / ex::kMetricsFile), 5u);
  for (const char* f : {ex::kConfigFile, ex::kBaseCheckpoint, ex::kBankCheckpoint, ex::kMetricsFile,
                        ex::kReportFile, ex::kTrainLogFile, ex::kDigestsFile, mbank::federation::kAuditLogFile,
                        mbank::federation::kRealDigestFile}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(dir / ex::kDataDir / "manifest.json"));
  EXPECT_EQ(ex::dump_config(ex::load_config((dir / ex::kConfigFile).string())), ex::dump_config(cfg));
  EXPECT_TRUE(res.audit.ok());
  EXPECT_GT(res.audit.messages, 0u);
  EXPECT_NE(read_text(dir / ex::kReportFile).find("FedML-All"), std::string::npos);
  EXPECT_EQ(res.intensity.size(), 3u);
}

TEST(Scenario, BWritesSevenRowsWithCompletedCenters) {
  const auto cfg = tiny_config("scenario_b");
  const auto res = ex::run_scenario(cfg, "B");
  ASSERT_EQ(res.reports.size(), 7u);
  EXPECT_EQ(csv_rows(fs::path(cfg.out) / ex::kMetricsFile), 7u);
  EXPECT_EQ(res.reports[0].method, "Real-center1(n/a:m2)");
  EXPECT_EQ(res.reports[3].method, ex::kSynthetic);
  EXPECT_EQ(res.reports[6].method, "Completed-center3(syn:m1)");
  EXPECT_TRUE(res.audit.ok());
}

TEST(Scenario, DeterministicRerunIsByteIdentical) {
  auto cfg = tiny_config("rerun1");
  const auto a = ex::run_scenario(cfg, "A");
  const std::string csv = read_text(fs::path(cfg.out) / ex::kMetricsFile);
  cfg.out = scratch("rerun2").string();
  const auto b = ex::run_scenario(cfg, "A");
  EXPECT_EQ(read_text(fs::path(cfg.out) / ex::kMetricsFile), csv);
  EXPECT_EQ(a.digests, b.digests);
}

TEST(Scenario, SuppliedBaseSkipsPretraining) {
  auto cfg = tiny_config("supplied");
  const auto base = ex::pretrain(cfg);
  const auto res = ex::run_scenario(cfg, "A", &base);
  auto loaded = ex::load_base(fs::path(cfg.out) / ex::kBaseCheckpoint, cfg.generator);
  EXPECT_EQ(mbank::models::base_digest(loaded), mbank::models::base_digest(base));
  auto wrong = cfg;
  wrong.generator.base_width = 8;
  EXPECT_THROW(ex::run_scenario(wrong, "A", &base), mbank::ConfigError);
  EXPECT_THROW(ex::run_scenario(cfg, "C", &base), mbank::ConfigError);
}

}  // namespace
