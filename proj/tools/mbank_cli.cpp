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

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mbank/bank/modality_bank.hpp"
#include "mbank/experiment/config.hpp"
#include "mbank/experiment/scenarios.hpp"
#include "mbank/federation/audit.hpp"

namespace fs = std::filesystem;
namespace ex = mbank::experiment;
namespace data = mbank::data;
namespace fed = mbank::federation;
using mbank::models::Generator;

namespace {

constexpr int kExitError = 2;
constexpr int kExitAuditFailed = 3;

struct Globals {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::optional<bool> deterministic;
  std::optional<std::string> transport;
  std::optional<std::string> out;
  bool quiet = false;
};

ex::ExperimentConfig resolve(const Globals& g) {
  ex::ExperimentConfig cfg = ex::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.deterministic) cfg.deterministic = *g.deterministic;
  if (g.transport) cfg.transport = *g.transport;
  if (g.out) cfg.out = *g.out;
  cfg.validate();
  return cfg;
}

ex::Progress progress(const Globals& g) {
  if (g.quiet) return {};
  const auto t0 = std::chrono::steady_clock::now();
  return [t0](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", s, msg.c_str());
  };
}

void fail(const std::string& code, const std::string& message) {
  std::string flat = message;
  for (char& c : flat)
    if (c == '\n') c = ' ';
  std::cerr << "error: code=" << code << " message=" << flat << "\n";
}

// Run-directory inputs shared by the stage commands.
Generator<float> base_from(const ex::ExperimentConfig& cfg, const std::string& base) {
  const fs::path p = base.empty() ? fs::path(cfg.out) / ex::kBaseCheckpoint : fs::path(base);
  return ex::load_base(p, cfg.generator);
}

std::vector<std::string> modalities_held(const std::vector<data::Case>& cases,
                                         const std::vector<std::string>& order) {
  std::vector<std::string> out;
  for (const auto& m : order) {
    bool all = !cases.empty();
    for (const auto& c : cases) all &= c.images.count(m) > 0;
    if (all) out.push_back(m);
  }
  return out;
}

std::vector<data::CenterDataset> nonempty(std::vector<data::CenterDataset> centers) {
  std::vector<data::CenterDataset> out;
  for (auto& c : centers)
    if (!c.cases.empty()) out.push_back(std::move(c));
  return out;
}

void print_param_count(const ex::ExperimentConfig& cfg) {
  Generator<float> gen(cfg.generator, 0);
  const auto arch = gen.architecture();
  const auto count = mbank::bank::bank_param_count(arch);
  std::size_t min_kernel = 0;
  for (const auto& l : arch.layers) {
    const std::size_t k = l.kh * l.kw;
    if (min_kernel == 0 || k < min_kernel) min_kernel = k;
  }
  std::printf("generator          %s\n", cfg.generator.describe().c_str());
  std::printf("modulated layers   %zu (smallest kernel %zu taps)\n", arch.layers.size(), min_kernel);
  std::printf("base (frozen)      %llu\n", static_cast<unsigned long long>(count.base_frozen));
  std::printf("per modality       %llu\n", static_cast<unsigned long long>(count.per_modality));
  std::printf("ratio              %.4f\n", count.ratio());
  std::printf("reference ratio    %.4f (2.5M per modality / 21M frozen)\n", mbank::bank::kReferenceRatio);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated modality bank: train, synthesize, complete and evaluate on toy data."};
  app.fallthrough();
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "config file, or 'default'");
  app.add_option("--seed", g.seed, "master seed");
  app.add_flag("--deterministic,!--no-deterministic", g.deterministic, "sequential round scheduling");
  app.add_option("--transport", g.transport, "inproc or socket")->check(CLI::IsMember({"inproc", "socket"}));
  app.add_option("--out", g.out, "run directory");
  app.add_flag("-q,--quiet", g.quiet, "no progress output");

  std::string scenario = "A", base, data_dir, model, center = "all", method;
  std::vector<std::string> mods;

  auto* pretrain = app.add_subcommand("pretrain", "train the base generator on the pretraining corpus");

  auto* train_bank = app.add_subcommand("train-bank", "train one bank entry per modality over the centers");
  train_bank->add_option("--scenario", scenario, "A (full modalities) or B (one dropped per center)")
      ->check(CLI::IsMember({"A", "B"}));
  train_bank->add_option("--base", base, "base checkpoint (default <out>/base.ckpt)");

  auto* synthesize = app.add_subcommand("synthesize", "synthesize every modality for all training masks");
  auto* complete = app.add_subcommand("complete", "fill in each center's missing modalities");
  for (auto* sub : {synthesize, complete}) {
    sub->add_option("--base", base, "base checkpoint (default <out>/base.ckpt)");
    sub->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  }

  auto* train_seg = app.add_subcommand("train-seg", "train a segmenter on an exported dataset");
  train_seg->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  train_seg->add_option("--center", center, "center id, or 'all'");
  train_seg->add_option("--modalities", mods, "input modalities (default: all held by every case)")
      ->delimiter(',');
  train_seg->add_option("--name", method, "method name (default Real-<center>)");

  auto* eval = app.add_subcommand("eval", "score a segmenter on the test split of a dataset");
  eval->add_option("--model", model, "segmenter checkpoint")->required();
  eval->add_option("--data", data_dir, "dataset directory (default <out>/data)");
  eval->add_option("--name", method, "method name for the CSV row");

  auto* scenario_a = app.add_subcommand("scenario-a", "full-modality centers: real vs synthetic training data");
  auto* scenario_b = app.add_subcommand("scenario-b", "one modality missing per center: missing vs completed");
  for (auto* sub : {scenario_a, scenario_b})
    sub->add_option("--base", base, "reuse a base checkpoint instead of pretraining");

  auto* audit_wire = app.add_subcommand("audit-wire", "check a run's wire log against its real-image digests");
  auto* param_count = app.add_subcommand("param-count", "frozen vs per-modality parameter counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    fail("usage", e.what());
    return kExitError;
  }

  try {
    const ex::ExperimentConfig cfg = resolve(g);
    const fs::path out = cfg.out;
    const auto report = progress(g);
    const fs::path data_path = data_dir.empty() ? out / ex::kDataDir : fs::path(data_dir);

    if (*param_count) {
      print_param_count(cfg);
    } else if (*pretrain) {
      fs::create_directories(out);
      mbank::io::write_text(out / ex::kConfigFile, ex::dump_config(cfg));
      ex::TrainLog log;
      const auto gen = ex::pretrain(cfg, &log, report);
      ex::save_base(out / ex::kBaseCheckpoint, gen);
      mbank::io::write_text(out / ex::kTrainLogFile, log.csv());
      std::cout << ex::kBaseCheckpoint << " " << mbank::models::base_digest(gen) << "\n";
    } else if (*train_bank) {
      auto gen = base_from(cfg, base);
      fs::create_directories(out);
      mbank::io::write_text(out / ex::kConfigFile, ex::dump_config(cfg));
      const auto holdout = ex::build_dataset(cfg, scenario == "B");
      data::export_dataset(out / ex::kDataDir, holdout.train, holdout.test);
      fed::WireAuditLog audit;
      ex::TrainLog log;
      const auto bank = ex::train_bank(gen, holdout.train, cfg, &audit, &log, report);
      ex::save_bank(out / ex::kBankCheckpoint, gen, bank);
      audit.save(out);
      mbank::io::write_text(out / ex::kTrainLogFile, log.csv());
      const auto check = audit.check();
      std::cout << "bank " << bank.modalities().size() << " modalities, wire audit " << check.messages << " messages, "
                << check.violations << " violations\n";
    } else if (*synthesize || *complete) {
      auto gen = base_from(cfg, base);
      auto bank = ex::load_bank(out / ex::kBankCheckpoint, gen);
      const auto holdout = data::import_dataset(data_path);
      const auto centers = nonempty(holdout.train);
      if (*synthesize) {
        data::CenterDataset syn;
        syn.id = "synthetic";
        syn.modalities = {cfg.modalities.begin(), cfg.modalities.end()};
        syn.cases = ex::synthesize_unified(gen, bank, centers, cfg.modalities);
        data::export_dataset(out / "synthetic", {syn}, holdout.test);
        std::cout << "synthetic " << syn.cases.size() << " cases\n";
      } else {
        std::vector<data::CenterDataset> done;
        for (const auto& c : centers) {
          done.push_back(fed::complete_missing_modalities(gen, bank, c, cfg.modalities));
          std::cout << c.id << " " << c.modalities.size() << " -> " << done.back().modalities.size()
                    << " modalities\n";
        }
        data::export_dataset(out / "completed", done, holdout.test);
      }
    } else if (*train_seg) {
      const auto holdout = data::import_dataset(data_path);
      std::vector<data::Case> train;
      for (const auto& c : holdout.train)
        if (center == "all" || c.id == center) train.insert(train.end(), c.cases.begin(), c.cases.end());
      if (train.empty()) throw mbank::DataError("no training cases for center '" + center + "'");
      const auto inputs = mods.empty() ? modalities_held(train, cfg.modalities) : mods;
      if (inputs.empty()) throw mbank::DataError("no modality is held by every training case");
      if (method.empty()) method = center == "all" ? ex::kRealAll : "Real-" + center;
      const fs::path seg_dir = out / ex::kSegDir;
      const auto r = ex::fit_and_score(train, inputs, holdout.test, method, cfg, seg_dir);
      std::cout << (seg_dir / (ex::file_slug(method) + ".ckpt")).string() << "\n";
      std::cout << mbank::seg::csv_header() << "\n" << mbank::seg::csv_row("-", r, cfg.seed) << "\n";
    } else if (*eval) {
      auto seg_model = ex::load_segmenter(model);
      const auto holdout = data::import_dataset(data_path);
      if (method.empty()) method = fs::path(model).stem().string();
      const auto r = mbank::seg::evaluate(seg_model, holdout.test, method);
      std::cout << mbank::seg::csv_header() << "\n" << mbank::seg::csv_row("-", r, cfg.seed) << "\n";
    } else if (*scenario_a || *scenario_b) {
      std::optional<Generator<float>> pre;
      if (!base.empty()) pre = ex::load_base(base, cfg.generator);
      const auto res = ex::run_scenario(cfg, *scenario_a ? "A" : "B", pre ? &*pre : nullptr, report);
      std::cout << ex::report_text(res, cfg);
      if (!res.audit.ok()) {
        fail("privacy_violation", std::to_string(res.audit.violations) + " wire messages carry real images");
        return kExitAuditFailed;
      }
    } else if (*audit_wire) {
      const auto r = fed::WireAuditLog::check_files(out);
      std::cout << "wire audit: " << r.messages << " messages, " << r.violations << " violations\n";
      for (const auto& d : r.details) std::cout << "  " << d << "\n";
      if (!r.ok()) {
        fail("privacy_violation", std::to_string(r.violations) + " wire messages carry real images");
        return kExitAuditFailed;
      }
    }
  } catch (const mbank::Error& e) {
    fail(e.code(), e.what());
    return kExitError;
  } catch (const std::exception& e) {
    fail("internal", e.what());
    return kExitError;
  }
  return 0;
}
