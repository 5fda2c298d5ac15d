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

#include <string>
#include <utility>
#include <vector>

#include "mbank/nn/tensor.hpp"

namespace mbank::nn {

/// A named trainable (or frozen) tensor with an optional gradient buffer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // same shape as value once has_grad is set
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    has_grad = false;
    grad = Tensor<T>();
  }

  void accumulate(const Tensor<T>& g) {
    if (!has_grad) {
      value.require_same_shape(g, "Parameter::accumulate");
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }

  std::size_t numel() const { return value.size(); }
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
std::size_t count_params(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->numel();
  return n;
}

}  // namespace mbank::nn
