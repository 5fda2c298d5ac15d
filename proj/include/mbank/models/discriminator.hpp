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

#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/nn/graph.hpp"
#include "mbank/nn/init.hpp"

namespace mbank::models {

using nn::Graph;
using nn::Parameter;
using nn::ParamList;
using nn::Shape;
using nn::Tensor;
using nn::Var;

struct DiscriminatorConfig {
  std::size_t label_channels = 3;  // input = 1 image channel + label channels
  std::size_t base_width = 16;
  std::size_t stages = 3;          // 4x4 stride-2 convs

  std::string describe() const {
    std::ostringstream os;
    os << "discriminator(labels=" << label_channels << ",width=" << base_width
       << ",stages=" << stages << ")";
    return os.str();
  }
};

/// Conditional patch discriminator. Input is concat(image, mask) in that
/// channel order; output is a score map of size H/2^stages x W/2^stages.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;

  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed, std::string prefix = "disc")
      : cfg_(cfg) {
    nn::Rng rng(seed);
    std::size_t in = 1 + cfg.label_channels, w = cfg.base_width;
    for (std::size_t s = 0; s < cfg.stages; ++s) {
      add_layer(prefix + "/stage" + std::to_string(s), in, w, 4, 2, 1, s > 0, rng);
      in = w;
      w *= 2;
    }
    add_layer(prefix + "/score", in, 1, 3, 1, 1, false, rng);
  }

  const DiscriminatorConfig& config() const { return cfg_; }

  Var forward(Graph<T>& g, Var image, Var mask, bool trainable) {
    const Shape& is = g.value(image).shape();
    const Shape& ms = g.value(mask).shape();
    if (is.size() != 4 || ms.size() != 4 || is[1] != 1 || ms[1] != cfg_.label_channels ||
        is[0] != ms[0] || is[2] != ms[2] || is[3] != ms[3]) {
      throw ShapeError("discriminator: image " + nn::shape_str(is) + " and mask " +
                       nn::shape_str(ms) + " are incompatible");
    }
    const std::size_t div = std::size_t{1} << cfg_.stages;
    if (is[2] % div || is[3] % div) {
      throw ShapeError("discriminator: spatial size not divisible by " + std::to_string(div));
    }
    auto bind = [&](Parameter<T>& p) { return trainable ? g.param(p) : g.constant(p.value); };
    Var h = g.concat_channels(image, mask);
    for (auto& l : layers_) {
      h = g.conv2d(h, bind(l.weight), bind(l.bias), l.stride, l.pad);
      if (l.normalized) h = g.instance_norm(h, bind(l.scale), bind(l.shift));
      if (&l != &layers_.back()) h = g.activation(nn::Activation::kLeakyRelu, h);
    }
    return h;
  }

  Tensor<T> score(const Tensor<T>& image, const Tensor<T>& mask) {
    Graph<T> g;
    return g.value(forward(g, g.constant(image), g.constant(mask), false));
  }

  ParamList<T> params() {
    ParamList<T> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
      if (l.normalized) {
        out.push_back(&l.scale);
        out.push_back(&l.shift);
      }
    }
    return out;
  }

  std::map<std::string, Tensor<T>> named_tensors() {
    std::map<std::string, Tensor<T>> out;
    for (auto* p : params()) out.emplace(p->name, p->value);
    return out;
  }

 private:
  struct Layer {
    Parameter<T> weight, bias, scale, shift;
    std::size_t stride = 1, pad = 0;
    bool normalized = false;
  };

  void add_layer(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t stride, std::size_t pad, bool normalized, nn::Rng& rng) {
    Layer l;
    l.weight = Parameter<T>(name + "/weight", nn::normal_tensor<T>(Shape{out, in, k, k}, 0.02, rng));
    l.bias = Parameter<T>(name + "/bias", Tensor<T>(Shape{out}));
    if (normalized) {
      l.scale = Parameter<T>(name + "/norm_scale", Tensor<T>::ones(Shape{out}));
      l.shift = Parameter<T>(name + "/norm_shift", Tensor<T>(Shape{out}));
    }
    l.stride = stride;
    l.pad = pad;
    l.normalized = normalized;
    layers_.push_back(std::move(l));
  }

  DiscriminatorConfig cfg_;
  std::vector<Layer> layers_;
};

}  // namespace mbank::models
