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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mbank/error.hpp"
#include "mbank/federation/nodes.hpp"
#include "mbank/io/container.hpp"
#include "mbank/models/generator.hpp"
#include "mbank/seg/segmenter.hpp"

namespace mbank::experiment {

using nlohmann::json;

struct PretrainSettings {
  std::string corpus = "A";
  std::size_t cases = 120;
  std::size_t rounds = 150;
  std::size_t batch_size = 8;
  double g_lr = 2e-3;
  double d_lr = 2e-4;
  double l1_weight = 100;
};

// Modulation parameters diverge above ~1e-3 at this scale; small batches with
// more rounds beat larger batches for the same wall time.
struct BankSettings {
  std::size_t rounds = 240;
  std::size_t batch_size = 2;
  double g_lr = 5e-4;
  double d_lr = 2e-4;
  double l1_weight = 100;
};

struct SegSettings {
  std::size_t width = 8;
  std::size_t epochs = 12;
  std::size_t min_steps = 300;  // the 20-weight center has only ~16 training cases
  std::size_t batch_size = 8;
  double lr = 2e-3;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t image_size = 32;
  std::size_t cases = 210;
  std::vector<std::size_t> center_weights{88, 102, 20};
  std::size_t train_weight = 170;
  std::size_t test_weight = 40;
  std::vector<std::string> modalities{"m1", "m2", "m3"};
  std::map<std::string, std::string> scenario_b_missing{{"center1", "m2"}, {"center2", "m3"}, {"center3", "m1"}};
  models::GeneratorConfig generator{};
  models::DiscriminatorConfig discriminator{};
  PretrainSettings pretrain{};
  BankSettings bank{};
  SegSettings seg{};
  std::string transport = "inproc";
  bool deterministic = true;
  std::uint64_t timeout_ms = 60000;
  std::string out = "runs/run";

  void validate() const;
  json to_json() const;
  static ExperimentConfig from_json(const json& j);

  federation::FederationConfig federation(federation::Phase phase) const {
    federation::FederationConfig f;
    f.discriminator = discriminator;
    f.discriminator.label_channels = generator.label_channels;
    f.transport = federation::parse_transport(transport);
    f.deterministic = deterministic;
    f.timeout = federation::Millis(static_cast<std::int64_t>(timeout_ms));
    if (phase == federation::Phase::kPretrain) {
      f.rounds = pretrain.rounds;
      f.batch_size = pretrain.batch_size;
      f.generator_opt.lr = pretrain.g_lr;
      f.discriminator_opt.lr = pretrain.d_lr;
      f.l1_weight = pretrain.l1_weight;
    } else {
      f.rounds = bank.rounds;
      f.batch_size = bank.batch_size;
      f.generator_opt.lr = bank.g_lr;
      f.discriminator_opt.lr = bank.d_lr;
      f.l1_weight = bank.l1_weight;
    }
    return f;
  }

  seg::SegModelConfig segmenter(std::vector<std::string> mods) const {
    seg::SegModelConfig s;
    s.modalities = std::move(mods);
    s.width = seg.width;
    s.epochs = seg.epochs;
    s.min_steps = seg.min_steps;
    s.batch = seg.batch_size;
    s.lr = seg.lr;
    return s;
  }
};

namespace detail {

inline void need(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

/// Reads the keys of an object into fields, rejecting unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    need(j.is_object(), path_ + " must be an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + "." + k + "'");
  }

  template <typename V>
  void get(const std::string& key, V& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + path_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void ExperimentConfig::validate() const {
  using detail::need;
  need(image_size >= data::kMinImageSize, "image_size must be at least " + std::to_string(data::kMinImageSize));
  const std::size_t gen_div = std::size_t{1} << generator.down_stages;
  const std::size_t disc_div = std::size_t{1} << discriminator.stages;
  need(image_size % gen_div == 0 && image_size % disc_div == 0,
       "image_size must be divisible by 2^down_stages and 2^discriminator stages");
  need(cases >= 10, "cases must be at least 10");
  need(!center_weights.empty(), "center_weights must not be empty");
  for (auto w : center_weights) need(w > 0, "center_weights must be positive");
  need(center_weights.size() == data::default_render_spec().centers.size(),
       "center_weights must list " + std::to_string(data::default_render_spec().centers.size()) + " centers");
  need(train_weight > 0 && test_weight > 0, "train_weight and test_weight must be positive");
  need(!modalities.empty(), "modalities must not be empty");
  const auto spec = data::default_render_spec();
  std::set<std::string> mods(modalities.begin(), modalities.end());
  need(mods.size() == modalities.size(), "modalities must be unique");
  for (const auto& m : modalities) need(spec.modalities.count(m), "modality '" + m + "' has no renderer");
  need(generator.label_channels == data::kLabelPlanes, "generator.label_channels must be 3");
  need(generator.base_width >= 1 && generator.res_blocks >= 1, "generator width and res_blocks must be positive");
  need(discriminator.base_width >= 1 && discriminator.stages >= 1, "discriminator width and stages must be positive");
  for (const auto& [c, m] : scenario_b_missing) {
    bool known = false;
    for (std::size_t k = 0; k < center_weights.size(); ++k) known |= data::center_name(k) == c;
    need(known, "scenario_b_missing names unknown center '" + c + "'");
    need(mods.count(m), "scenario_b_missing drops unknown modality '" + m + "'");
  }
  need(modalities.size() >= 2 || scenario_b_missing.empty(), "scenario B needs at least 2 modalities");
  need(pretrain.corpus == "A" || pretrain.corpus == "B", "pretrain.corpus must be \"A\" or \"B\"");
  need(pretrain.cases >= 1 && pretrain.rounds >= 1 && pretrain.batch_size >= 1, "pretrain sizes must be positive");
  need(bank.rounds >= 1 && bank.batch_size >= 1, "bank sizes must be positive");
  need(seg.width >= 1 && seg.epochs >= 1 && seg.batch_size >= 1, "seg sizes must be positive");
  for (double lr : {pretrain.g_lr, pretrain.d_lr, bank.g_lr, bank.d_lr, seg.lr}) {
    need(lr > 0 && lr < 1, "learning rates must lie in (0, 1)");
  }
  for (double w : {pretrain.l1_weight, bank.l1_weight}) need(w >= 0, "l1_weight must be non-negative");
  need(transport == "inproc" || transport == "socket", "transport must be \"inproc\" or \"socket\"");
  need(timeout_ms >= 1, "timeout_ms must be positive");
  need(!out.empty(), "out must not be empty");
}

inline json ExperimentConfig::to_json() const {
  return json{
      {"seed", seed},
      {"image_size", image_size},
      {"cases", cases},
      {"center_weights", center_weights},
      {"train_weight", train_weight},
      {"test_weight", test_weight},
      {"modalities", modalities},
      {"scenario_b_missing", scenario_b_missing},
      {"generator",
       {{"width", generator.base_width}, {"down_stages", generator.down_stages}, {"res_blocks", generator.res_blocks}}},
      {"discriminator", {{"width", discriminator.base_width}, {"stages", discriminator.stages}}},
      {"pretrain",
       {{"corpus", pretrain.corpus},
        {"cases", pretrain.cases},
        {"rounds", pretrain.rounds},
        {"batch_size", pretrain.batch_size},
        {"g_lr", pretrain.g_lr},
        {"d_lr", pretrain.d_lr},
        {"l1_weight", pretrain.l1_weight}}},
      {"bank",
       {{"rounds", bank.rounds},
        {"batch_size", bank.batch_size},
        {"g_lr", bank.g_lr},
        {"d_lr", bank.d_lr},
        {"l1_weight", bank.l1_weight}}},
      {"seg",
       {{"width", seg.width},
        {"epochs", seg.epochs},
        {"min_steps", seg.min_steps},
        {"batch_size", seg.batch_size},
        {"lr", seg.lr}}},
      {"transport", transport},
      {"deterministic", deterministic},
      {"timeout_ms", timeout_ms},
      {"out", out},
  };
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "config");
  r.get("seed", c.seed);
  r.get("image_size", c.image_size);
  r.get("cases", c.cases);
  r.get("center_weights", c.center_weights);
  r.get("train_weight", c.train_weight);
  r.get("test_weight", c.test_weight);
  r.get("modalities", c.modalities);
  r.get("scenario_b_missing", c.scenario_b_missing);
  if (const json* g = r.child("generator")) {
    detail::ObjectReader s(*g, "config.generator");
    s.get("width", c.generator.base_width);
    s.get("down_stages", c.generator.down_stages);
    s.get("res_blocks", c.generator.res_blocks);
  }
  if (const json* d = r.child("discriminator")) {
    detail::ObjectReader s(*d, "config.discriminator");
    s.get("width", c.discriminator.base_width);
    s.get("stages", c.discriminator.stages);
  }
  if (const json* p = r.child("pretrain")) {
    detail::ObjectReader s(*p, "config.pretrain");
    s.get("corpus", c.pretrain.corpus);
    s.get("cases", c.pretrain.cases);
    s.get("rounds", c.pretrain.rounds);
    s.get("batch_size", c.pretrain.batch_size);
    s.get("g_lr", c.pretrain.g_lr);
    s.get("d_lr", c.pretrain.d_lr);
    s.get("l1_weight", c.pretrain.l1_weight);
  }
  if (const json* b = r.child("bank")) {
    detail::ObjectReader s(*b, "config.bank");
    s.get("rounds", c.bank.rounds);
    s.get("batch_size", c.bank.batch_size);
    s.get("g_lr", c.bank.g_lr);
    s.get("d_lr", c.bank.d_lr);
    s.get("l1_weight", c.bank.l1_weight);
  }
  if (const json* s2 = r.child("seg")) {
    detail::ObjectReader s(*s2, "config.seg");
    s.get("width", c.seg.width);
    s.get("epochs", c.seg.epochs);
    s.get("min_steps", c.seg.min_steps);
    s.get("batch_size", c.seg.batch_size);
    s.get("lr", c.seg.lr);
  }
  r.get("transport", c.transport);
  r.get("deterministic", c.deterministic);
  r.get("timeout_ms", c.timeout_ms);
  r.get("out", c.out);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = ExperimentConfig::from_json(j);
  c.validate();
  return c;
}

/// "default" (or empty) selects the built-in defaults; anything else is a path.
inline ExperimentConfig load_config(const std::string& source) {
  if (source.empty() || source == "default") {
    ExperimentConfig c;
    c.validate();
    return c;
  }
  std::ifstream in(source);
  if (!in) throw ConfigError("cannot open config file '" + source + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string dump_config(const ExperimentConfig& c) { return c.to_json().dump(2) + "\n"; }

}  // namespace mbank::experiment
