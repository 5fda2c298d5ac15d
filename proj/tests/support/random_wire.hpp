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

#include <random>
#include <string>

#include "mbank/federation/wire.hpp"
#include "mbank/nn/init.hpp"

// Random instances of every wire message variant.
namespace mbank::testing {

namespace fed = federation;
using federation::WireMessage;
using nn::Rng;
using nn::Shape;
using nn::Tensor;

inline Tensor<float> random_tensor(Rng& rng, std::size_t max_rank = 4) {
  std::uniform_int_distribution<std::size_t> rank(1, max_rank), dim(1, 4);
  Shape s;
  for (std::size_t i = 0, r = rank(rng); i < r; ++i) s.push_back(dim(rng));
  return mbank::nn::normal_tensor<float>(s, 1.0, rng);
}

inline std::string random_name(Rng& rng) {
  std::uniform_int_distribution<int> len(0, 6), ch('a', 'z');
  std::string s;
  for (int i = 0, n = len(rng); i < n; ++i) s.push_back(static_cast<char>(ch(rng)));
  return s;
}

inline WireMessage random_message(Rng& rng) {
  WireMessage m;
  m.round_id = rng();
  std::uniform_int_distribution<int> kind(0, 3), count(0, 3);
  switch (kind(rng)) {
    case 0: {
      fed::MaskBatchRequest b{random_name(rng), random_tensor(rng), {}};
      for (int i = 0, n = count(rng); i < n; ++i) b.modalities.push_back(random_name(rng));
      m.body = b;
      break;
    }
    case 1: {
      fed::SyntheticBatch b{random_tensor(rng), {}};
      for (int i = 0, n = count(rng); i < n; ++i) b.images["m" + random_name(rng)] = random_tensor(rng);
      m.body = b;
      break;
    }
    case 2: {
      fed::FeedbackBatch b;
      b.center_id = random_name(rng);
      for (int i = 0, n = count(rng); i < n; ++i) {
        const std::string k = "m" + random_name(rng);
        b.g_losses[k] = std::normal_distribution<float>()(rng);
        b.d_losses[k] = std::normal_distribution<float>()(rng);
        b.gradients[k] = random_tensor(rng);
      }
      b.batch_size = rng() % 100;
      b.case_count = rng() % 1000;
      m.body = b;
      break;
    }
    default:
      m.body = fed::Control{static_cast<fed::ControlOp>(1 + rng() % 3), random_name(rng)};
  }
  return m;
}

}  // namespace mbank::testing
