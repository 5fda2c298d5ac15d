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

#include <map>
#include <string>

#include "mbank/bank/modality_bank.hpp"
#include "mbank/io/container.hpp"
#include "mbank/models/generator.hpp"

// Checkpoint sections for the base generator and the modality bank.
namespace mbank::models {

inline io::Container base_container(const Generator<float>& gen) {
  io::Container c;
  c.architecture = gen.config().describe();
  c.put("", gen.named_tensors());
  return c;
}

/// Identity of a frozen base: the content digest of its weights.
inline std::string base_digest(const Generator<float>& gen) {
  return io::content_digest(base_container(gen));
}

/// Empty bank bound to the current weights of gen.
inline bank::ParameterBank<float> new_bank(const Generator<float>& gen) {
  return bank::ParameterBank<float>(base_digest(gen), gen.architecture(), gen.kernel_stats());
}

inline void put_bank(io::Container& c, const bank::ParameterBank<float>& bank) {
  for (const auto& id : bank.modalities()) {
    for (const auto& layer : bank.params(id).layers) {
      for (const auto* p : {&layer.gamma, &layer.beta, &layer.bias}) c.tensors[p->name] = p->value;
    }
  }
}

inline io::Container bank_container(const Generator<float>& gen, const bank::ParameterBank<float>& bank) {
  io::Container c;
  c.architecture = gen.config().describe() + "+bank(base=" + bank.base_digest() + ")";
  put_bank(c, bank);
  return c;
}

/// Rebuilds a bank for gen from "bank/<id>/<layer>/{gamma,beta,bias}" entries.
inline bank::ParameterBank<float> load_bank(const io::Container& c, const Generator<float>& gen) {
  const std::string expect = gen.config().describe() + "+bank(base=" + base_digest(gen) + ")";
  if (c.architecture != expect) {
    throw BankError("bank checkpoint was trained on a different base generator");
  }
  auto bank = new_bank(gen);
  std::map<std::string, bool> ids;
  for (const auto& [name, _] : c.section("bank/")) ids[name.substr(0, name.find('/'))] = true;
  for (const auto& [id, _] : ids) {
    bank.register_modality(id);
    bank::ModalityParams<float> p = bank.params(id);
    for (auto* param : p.params()) param->value = c.at(param->name);
    bank.set_modality(id, std::move(p));
  }
  return bank;
}

}  // namespace mbank::models
