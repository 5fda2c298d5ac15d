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

#include "mbank/nn/graph.hpp"

// Least-squares adversarial objectives and the L1 reconstruction term.
namespace mbank::models {

/// 0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)
template <typename T>
nn::Var lsgan_d_loss(nn::Graph<T>& g, nn::Var real_scores, nn::Var fake_scores) {
  nn::Var r = g.mean(g.square(g.affine(real_scores, T{1}, T{-1})));
  nn::Var f = g.mean(g.square(fake_scores));
  return g.affine(g.add(r, f), T{0.5}, T{0});
}

/// 0.5 * mean((fake - 1)^2)
template <typename T>
nn::Var lsgan_g_loss(nn::Graph<T>& g, nn::Var fake_scores) {
  return g.affine(g.mean(g.square(g.affine(fake_scores, T{1}, T{-1}))), T{0.5}, T{0});
}

template <typename T>
nn::Var l1_loss(nn::Graph<T>& g, nn::Var a, nn::Var b) {
  return g.mean(g.abs(g.sub(a, b)));
}

template <typename T>
T lsgan_d_loss(const nn::Tensor<T>& real_scores, const nn::Tensor<T>& fake_scores) {
  nn::Graph<T> g;
  return g.value(lsgan_d_loss(g, g.constant(real_scores), g.constant(fake_scores))).item();
}

template <typename T>
T lsgan_g_loss(const nn::Tensor<T>& fake_scores) {
  nn::Graph<T> g;
  return g.value(lsgan_g_loss(g, g.constant(fake_scores))).item();
}

}  // namespace mbank::models
