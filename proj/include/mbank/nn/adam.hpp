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

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "mbank/error.hpp"
#include "mbank/nn/parameter.hpp"
#include "mbank/nn/tensor.hpp"

namespace mbank::nn {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers for one parameter.
template <typename T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
};

/// One bias-corrected Adam update of a single tensor. `step` is the 1-based
/// step index after increment.
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamMoments<T>& mom,
                 const AdamConfig& cfg, std::uint64_t step) {
  param.require_same_shape(grad, "adam_update");
  if (mom.m.shape() != param.shape()) {
    mom.m = Tensor<T>(param.shape());
    mom.v = Tensor<T>(param.shape());
  }
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * mom.m[i] + (1.0 - b1) * g;
    const double v = b2 * mom.v[i] + (1.0 - b2) * g * g;
    mom.m[i] = static_cast<T>(m);
    mom.v[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    param[i] = static_cast<T>(param[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Adam over a set of named parameters. Parameters without a gradient in a
/// given step are skipped and their moments left untouched.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const ParamList<T>& params) {
    ++step_;
    for (auto* p : params) {
      if (!p->has_grad) continue;
      if (!p->grad.all_finite()) {
        throw NumericalError("non-finite gradient for parameter '" + p->name + "'");
      }
      adam_update(p->value, p->grad, state_[p->name], cfg_, step_);
    }
  }

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::map<std::string, AdamMoments<T>>& state() const { return state_; }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, AdamMoments<T>> state_;
};

}  // namespace mbank::nn
