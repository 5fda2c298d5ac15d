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


#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mbank/bank/modality_bank.hpp"
#include "mbank/data/toy.hpp"
#include "mbank/experiment/config.hpp"
#include "mbank/federation/audit.hpp"
#include "mbank/federation/nodes.hpp"
#include "mbank/io/container.hpp"
#include "mbank/io/sha256.hpp"
#include "mbank/models/generator.hpp"
#include "mbank/models/persist.hpp"
#include "mbank/seg/metrics.hpp"
#include "mbank/seg/segmenter.hpp"

// Pretraining, bank training and the two segmentation scenarios, each
// writing a self-contained run directory.
namespace mbank::experiment {

namespace fs = std::filesystem;

inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kBaseCheckpoint = "base.ckpt";
inline constexpr const char* kBankCheckpoint = "bank.ckpt";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kReportFile = "report.txt";
inline constexpr const char* kTrainLogFile = "train_log.csv";
inline constexpr const char* kDigestsFile = "digests.txt";
inline constexpr const char* kSegDir = "seg";
inline constexpr const char* kDataDir = "data";

inline constexpr const char* kRealAll = "Real-All";
inline constexpr const char* kSynthetic = "ModalityBank-synthetic";
inline constexpr const char* kFedAvgPlaceholder = "FedML-All";

using Progress = std::function<void(const std::string&)>;

enum SeedStream : std::uint64_t {
  kDataStream = 1,
  kPretrainStream = 2,
  kBankStream = 3,
  kSegStream = 4,
  kInitStream = 5,
};

inline std::uint64_t stream_seed(const ExperimentConfig& cfg, SeedStream s) { return nn::derive_seed(cfg.seed, s); }

/// Per-round losses of every training phase, as CSV.
class TrainLog {
 public:
  void add(const std::string& phase, const federation::RoundReport& r) {
    for (const auto& [m, g] : r.g_loss) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%s,%.6f,%.6f\n", phase.c_str(),
                    static_cast<unsigned long long>(r.round), r.attempts, m.c_str(), g, r.d_loss.at(m));
      rows_ += buf;
    }
  }
  std::string csv() const { return "phase,round,attempts,modality,g_loss,d_loss\n" + rows_; }

 private:
  std::string rows_;
};

inline std::function<void(const federation::RoundReport&)> round_hook(const std::string& phase, std::size_t total,
                                                                      TrainLog* log, const Progress& progress) {
  return [=](const federation::RoundReport& r) {
    if (log) log->add(phase, r);
    if (progress && ((r.round + 1) % 25 == 0 || r.round + 1 == total)) {
      std::ostringstream os;
      os << phase << " round " << r.round + 1 << "/" << total;
      for (const auto& [m, g] : r.g_loss) os << " " << m << ":g=" << g << ",d=" << r.d_loss.at(m);
      progress(os.str());
    }
  };
}

// ---- checkpoints -----------------------------------------------------------

inline void save_base(const fs::path& path, const models::Generator<float>& gen) {
  io::save(path, models::base_container(gen));
}

inline models::Generator<float> load_base(const fs::path& path, const models::GeneratorConfig& cfg) {
  const io::Container c = io::load(path, cfg.describe());
  models::Generator<float> gen(cfg, 0);
  gen.load_named_tensors(c.tensors);
  return gen;
}

inline void save_bank(const fs::path& path, const models::Generator<float>& gen,
                      const bank::ParameterBank<float>& bank) {
  io::save(path, models::bank_container(gen, bank));
}

inline bank::ParameterBank<float> load_bank(const fs::path& path, const models::Generator<float>& gen) {
  return models::load_bank(io::load(path), gen);
}

inline void save_segmenter(const fs::path& path, seg::Segmenter<float>& model) {
  io::Container c;
  c.architecture = model.config().describe();
  c.put("", model.named_tensors());
  io::save(path, c);
}

inline seg::Segmenter<float> load_segmenter(const fs::path& path) {
  const io::Container c = io::load(path);
  seg::Segmenter<float> model(seg::SegModelConfig::parse_architecture(c.architecture), 0);
  model.load_named_tensors(c.tensors);
  return model;
}

// ---- stages ----------------------------------------------------------------

inline data::CenterDataset pretrain_center(const ExperimentConfig& cfg) {
  data::CenterDataset c;
  c.id = "pretrain";
  c.modalities = {"p0"};
  c.cases = data::pretrain_corpus(cfg.pretrain.corpus, cfg.pretrain.cases, stream_seed(cfg, kPretrainStream),
                                  cfg.image_size, cfg.image_size);
  return c;
}

/// Full-weight adversarial training of the base generator on the
/// pretraining corpus, run as a federation with a single center.
inline models::Generator<float> pretrain(const ExperimentConfig& cfg, TrainLog* log = nullptr,
                                         const Progress& progress = {}) {
  models::Generator<float> gen(cfg.generator, stream_seed(cfg, kInitStream));
  federation::run_federated(gen, nullptr, federation::Phase::kPretrain, {pretrain_center(cfg)},
                            cfg.federation(federation::Phase::kPretrain), stream_seed(cfg, kPretrainStream), nullptr,
                            round_hook("pretrain", cfg.pretrain.rounds, log, progress));
  return gen;
}

/// Center shards and shared test split; with `missing`, each center listed
/// in scenario_b_missing loses that modality from its training shard.
inline data::Holdout build_dataset(const ExperimentConfig& cfg, bool missing) {
  data::RenderSpec spec = data::default_render_spec();
  std::map<std::string, data::ModalityStyle> used;
  for (const auto& m : cfg.modalities) used[m] = spec.modalities.at(m);
  spec.modalities = used;
  auto cases = data::sample_cases(cfg.cases, stream_seed(cfg, kDataStream), cfg.image_size, cfg.image_size);
  auto holdout = data::split_train_test(data::split_centers(std::move(cases), spec, cfg.center_weights),
                                        cfg.train_weight, cfg.test_weight);
  if (missing) {
    for (auto& c : holdout.train) {
      auto it = cfg.scenario_b_missing.find(c.id);
      if (it != cfg.scenario_b_missing.end()) data::drop_modality(c, it->second);
    }
    for (const auto& m : cfg.modalities) {
      bool held = false;
      for (const auto& c : holdout.train) held |= c.modalities.count(m) > 0;
      if (!held) throw ConfigError("no center keeps modality '" + m + "' in scenario B");
    }
  }
  return holdout;
}

inline bank::ParameterBank<float> train_bank(models::Generator<float>& gen,
                                             const std::vector<data::CenterDataset>& centers,
                                             const ExperimentConfig& cfg, federation::WireAuditLog* audit = nullptr,
                                             TrainLog* log = nullptr, const Progress& progress = {}) {
  auto bank = models::new_bank(gen);
  for (const auto& m : cfg.modalities) bank.register_modality(m);
  federation::run_bank_training(gen, bank, centers, cfg.federation(federation::Phase::kBank),
                                stream_seed(cfg, kBankStream), audit,
                                round_hook("bank", cfg.bank.rounds, log, progress));
  return bank;
}

/// One synthetic case per training mask of every center, with all
/// modalities generated from the bank.
inline std::vector<data::Case> synthesize_unified(models::Generator<float>& gen, bank::ParameterBank<float>& bank,
                                                  const std::vector<data::CenterDataset>& centers,
                                                  const std::vector<std::string>& modalities) {
  std::vector<const data::Case*> sources;
  for (const auto& c : centers)
    for (const auto& cs : c.cases) sources.push_back(&cs);
  std::vector<data::Case> out(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    out[i].id = "syn-" + sources[i]->id;
    out[i].seed = sources[i]->seed;
    out[i].mask = sources[i]->mask;
    out[i].center = sources[i]->center;
  }
  for (const auto& m : modalities) {
    auto images = federation::synthesize_for(gen, bank, m, sources);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].images[m] = std::move(images[i]);
      out[i].synthetic[m] = true;
    }
  }
  return out;
}

inline std::string file_slug(const std::string& method) {
  std::string s;
  for (char ch : method) s.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' ? ch : '_');
  return s;
}

/// Trains one segmenter and scores it on the shared test split.
inline seg::MetricsReport fit_and_score(const std::vector<data::Case>& train, const std::vector<std::string>& mods,
                                        const std::vector<data::Case>& test, const std::string& method,
                                        const ExperimentConfig& cfg, const fs::path& seg_dir = {}) {
  auto model = seg::train_segmenter(train, cfg.segmenter(mods), stream_seed(cfg, kSegStream));
  if (!seg_dir.empty()) save_segmenter(seg_dir / (file_slug(method) + ".ckpt"), model);
  return seg::evaluate(model, test, method);
}

/// Mean absolute gap between the mean intensity inside each label plane and
/// the renderer's constant for that plane, for bank synthetics and for the
/// unmodulated base.
struct IntensityFit {
  double synthetic = 0;
  double base = 0;
};

inline std::map<std::string, IntensityFit> tumor_intensity_fit(models::Generator<float>& gen,
                                                               bank::ParameterBank<float>& bank,
                                                               const std::vector<data::Case>& cases,
                                                               const std::vector<std::string>& modalities) {
  std::vector<const data::Case*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  const auto masks =
      federation::stack_planes(ptrs, [](const data::Case& c) -> const nn::Tensor<float>& { return c.mask; });
  const nn::Tensor<float> base = gen.synthesize(masks);
  const auto spec = data::default_render_spec();
  const std::size_t plane = cases.front().mask.size() / data::kLabelPlanes;
  auto gap = [&](auto image_at, const data::ModalityStyle& style) {
    double total = 0;
    for (std::size_t l = 0; l < data::kLabelPlanes; ++l) {
      double sum = 0, n = 0;
      for (std::size_t i = 0; i < cases.size(); ++i) {
        const float* mask = cases[i].mask.ptr() + l * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          // the renderer paints later planes over earlier ones
          bool top = mask[p] > 0.5f;
          for (std::size_t k = l + 1; k < data::kLabelPlanes && top; ++k)
            top = cases[i].mask.ptr()[k * plane + p] <= 0.5f;
          if (!top) continue;
          sum += image_at(i, p);
          n += 1;
        }
      }
      if (n > 0) total += std::abs(sum / n - style.tumor[l]);
    }
    return total / data::kLabelPlanes;
  };
  std::map<std::string, IntensityFit> out;
  for (const auto& m : modalities) {
    const auto syn = federation::synthesize_for(gen, bank, m, ptrs);
    IntensityFit f;
    f.synthetic = gap([&](std::size_t i, std::size_t p) { return syn[i][p]; }, spec.modalities.at(m));
    f.base = gap([&](std::size_t i, std::size_t p) { return base[i * plane + p]; }, spec.modalities.at(m));
    out[m] = f;
  }
  return out;
}

// ---- scenarios -------------------------------------------------------------

struct ScenarioResult {
  std::string scenario;
  fs::path dir;
  std::vector<seg::MetricsReport> reports;
  std::map<std::string, IntensityFit> intensity;
  federation::AuditReport audit;
  std::map<std::string, std::string> digests;  // artifact -> sha256

  const seg::MetricsReport& at(const std::string& method) const {
    for (const auto& r : reports)
      if (r.method == method) return r;
    throw MetricError("no result for method '" + method + "'");
  }
};

inline std::string metrics_csv(const std::string& scenario, const std::vector<seg::MetricsReport>& reports,
                               std::uint64_t seed) {
  std::string out = std::string(seg::csv_header()) + "\n";
  for (const auto& r : reports) out += seg::csv_row(scenario, r, seed) + "\n";
  return out;
}

// Left-justifies to `width` display columns; "±" is two bytes in UTF-8.
inline std::string pad(const std::string& s, std::size_t width) {
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  return s + std::string(width > cols ? width - cols : 0, ' ');
}

inline std::string report_text(const ScenarioResult& res, const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "scenario " << res.scenario << ", seed " << cfg.seed << ", " << res.reports.front().cases.size()
     << " test cases\n\n";
  os << pad("method", 29) << pad("Dice(%)", 13) << pad("Sens(%)", 13) << pad("Spec(%)", 13) << "HD95\n";
  for (const auto& r : res.reports) {
    os << pad(r.method, 29) << pad(seg::format_pm(r.dice), 13) << pad(seg::format_pm(r.sens), 13)
       << pad(seg::format_pm(r.spec), 13) << seg::format_pm(r.hd95) << "\n";
  }
  os << pad(kFedAvgPlaceholder, 29) << "not implemented\n";
  char line[200];
  os << "\ntumor intensity gap to renderer constants (synthetic / base):\n";
  for (const auto& [m, f] : res.intensity) {
    std::snprintf(line, sizeof line, "  %s %.4f / %.4f\n", m.c_str(), f.synthetic, f.base);
    os << line;
  }
  os << "\nwire audit: " << res.audit.messages << " messages, " << res.audit.violations << " violations\n";
  return os.str();
}

inline std::string file_digest(const fs::path& p) { return io::sha256_hex(io::read_file(p)); }

/// Runs scenario "A" (full-modality centers) or "B" (one modality dropped
/// per center) into cfg.out. A supplied base skips pretraining; it must have
/// been pretrained from the same config.
inline ScenarioResult run_scenario(const ExperimentConfig& cfg, const std::string& scenario,
                                   const models::Generator<float>* base = nullptr, const Progress& progress = {}) {
  if (scenario != "A" && scenario != "B") throw ConfigError("unknown scenario '" + scenario + "'");
  cfg.validate();
  const bool missing = scenario == "B";
  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  io::write_text(dir / kConfigFile, dump_config(cfg));

  TrainLog log;
  models::Generator<float> gen = base ? *base : pretrain(cfg, &log, progress);
  if (gen.config() != cfg.generator) throw ConfigError("supplied base generator does not match the config");
  save_base(dir / kBaseCheckpoint, gen);

  const data::Holdout data = build_dataset(cfg, missing);
  data::export_dataset(dir / kDataDir, data.train, data.test);

  federation::WireAuditLog audit;
  auto bank = train_bank(gen, data.train, cfg, &audit, &log, progress);
  save_bank(dir / kBankCheckpoint, gen, bank);
  audit.save(dir);

  ScenarioResult res;
  res.scenario = scenario;
  res.dir = dir;
  res.audit = audit.check();
  const fs::path seg_dir = dir / kSegDir;
  auto run = [&](const std::vector<data::Case>& train, const std::vector<std::string>& mods,
                 const std::string& method) {
    if (progress) progress("segmenter " + method + " on " + std::to_string(train.size()) + " cases");
    res.reports.push_back(fit_and_score(train, mods, data.test, method, cfg, seg_dir));
  };

  if (!missing) {
    std::vector<data::Case> all;
    for (const auto& c : data.train) all.insert(all.end(), c.cases.begin(), c.cases.end());
    run(all, cfg.modalities, kRealAll);
    for (const auto& c : data.train) run(c.cases, cfg.modalities, "Real-" + c.id);
    run(synthesize_unified(gen, bank, data.train, cfg.modalities), cfg.modalities, kSynthetic);
  } else {
    for (const auto& c : data.train) {
      std::vector<std::string> mods;
      for (const auto& m : cfg.modalities)
        if (c.modalities.count(m)) mods.push_back(m);
      auto it = cfg.scenario_b_missing.find(c.id);
      run(c.cases, mods, "Real-" + c.id + (it == cfg.scenario_b_missing.end() ? "" : "(n/a:" + it->second + ")"));
    }
    run(synthesize_unified(gen, bank, data.train, cfg.modalities), cfg.modalities, kSynthetic);
    for (const auto& c : data.train) {
      auto done = federation::complete_missing_modalities(gen, bank, c, cfg.modalities);
      auto it = cfg.scenario_b_missing.find(c.id);
      run(done.cases, cfg.modalities,
          "Completed-" + c.id + (it == cfg.scenario_b_missing.end() ? "" : "(syn:" + it->second + ")"));
    }
  }
  res.intensity = tumor_intensity_fit(gen, bank, data.test, cfg.modalities);

  io::write_text(dir / kMetricsFile, metrics_csv(scenario, res.reports, cfg.seed));
  io::write_text(dir / kTrainLogFile, log.csv());
  std::vector<fs::path> artifacts{dir / kBaseCheckpoint, dir / kBankCheckpoint, dir / kMetricsFile,
                                  dir / federation::kAuditLogFile};
  for (const auto& r : res.reports) artifacts.push_back(seg_dir / (file_slug(r.method) + ".ckpt"));
  std::string digests;
  for (const auto& p : artifacts) {
    const std::string rel = fs::relative(p, dir).generic_string();
    res.digests[rel] = file_digest(p);
    digests += res.digests[rel] + "  " + rel + "\n";
  }
  io::write_text(dir / kDigestsFile, digests);
  io::write_text(dir / kReportFile, report_text(res, cfg));
  return res;
}

}  // namespace mbank::experiment
