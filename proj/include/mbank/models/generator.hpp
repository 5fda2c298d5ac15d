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

#include "mbank/bank/modality_bank.hpp"
#include "mbank/error.hpp"
#include "mbank/nn/graph.hpp"
#include "mbank/nn/init.hpp"
#include "mbank/nn/parameter.hpp"

namespace mbank::models {

using nn::Graph;
using nn::Parameter;
using nn::ParamList;
using nn::Shape;
using nn::Tensor;
using nn::Var;

struct GeneratorConfig {
  std::size_t label_channels = 3;
  std::size_t base_width = 16;
  std::size_t down_stages = 2;
  std::size_t res_blocks = 3;

  std::string describe() const {
    std::ostringstream os;
    os << "generator(labels=" << label_channels << ",width=" << base_width
       << ",down=" << down_stages << ",res=" << res_blocks << ")";
    return os.str();
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

/// How a forward pass treats the generator's parameters.
enum class GenMode {
  kTrainBase,      // full-weight training (pretraining)
  kFrozenBase,     // plain base network, no gradients
  kTrainModality,  // modulated by a bank view; only the view's parameters train
  kEvalModality,   // modulated by a bank view, no gradients
};

/// Encoder / residual / decoder image-translation generator:
///   7x7 conv -> [3x3 stride-2 conv] x down -> residual blocks ->
///   [4x4 stride-2 transposed conv] x down -> 7x7 conv -> tanh.
/// Every conv except the last is followed by instance norm and ReLU.
template <typename T>
class Generator {
 public:
  struct ConvLayer {
    std::string name;
    Parameter<T> weight;
    Parameter<T> bias;
    std::size_t stride = 1, pad = 0;
    bool transposed = false;
  };
  struct NormLayer {
    Parameter<T> scale;
    Parameter<T> shift;
  };

  Generator() = default;

  Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.label_channels == 0 || cfg.base_width == 0) {
      throw ModelError("generator: label channels and width must be positive");
    }
    nn::Rng rng(seed);
    std::size_t w = cfg.base_width;
    add_conv("enc0", cfg.label_channels, w, 7, 1, 3, false, rng);
    for (std::size_t i = 0; i < cfg.down_stages; ++i) {
      add_conv("down" + std::to_string(i + 1), w, 2 * w, 3, 2, 1, false, rng);
      w *= 2;
    }
    for (std::size_t r = 0; r < cfg.res_blocks; ++r) {
      add_conv("res" + std::to_string(r) + "a", w, w, 3, 1, 1, false, rng);
      add_conv("res" + std::to_string(r) + "b", w, w, 3, 1, 1, false, rng);
    }
    for (std::size_t i = 0; i < cfg.down_stages; ++i) {
      add_conv("up" + std::to_string(i + 1), w, w / 2, 4, 2, 1, true, rng);
      w /= 2;
    }
    add_conv("out", w, 1, 7, 1, 3, false, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }
  std::size_t divisor() const { return std::size_t{1} << cfg_.down_stages; }

  /// mask [N,L,H,W] -> image [N,1,H,W] in [-1,1].
  Var forward(Graph<T>& g, Var mask, GenMode mode, const bank::ModalityView<T>* view = nullptr) {
    check_input(g.value(mask).shape());
    const bool modulated = mode == GenMode::kTrainModality || mode == GenMode::kEvalModality;
    if (modulated && (!view || !view->params || !view->stats)) {
      throw ModelError("generator: modality mode needs a bank view");
    }
    if (modulated && view->params->layers.size() != convs_.size()) {
      throw ModelError("generator: bank view does not match generator architecture");
    }
    std::size_t li = 0;
    auto conv = [&](Var x) {
      ConvLayer& c = convs_[li];
      Var w, b;
      if (mode == GenMode::kTrainBase) {
        w = g.param(c.weight);
        b = g.param(c.bias);
      } else if (!modulated) {
        w = g.constant(c.weight.value);
        b = g.constant(c.bias.value);
      } else {
        auto& mod = view->params->layers[li];
        const bool train = mode == GenMode::kTrainModality;
        Var gamma = train ? g.param(mod.gamma) : g.constant(mod.gamma.value);
        Var beta = train ? g.param(mod.beta) : g.constant(mod.beta.value);
        Var bmod = train ? g.param(mod.bias) : g.constant(mod.bias.value);
        w = bank::modulate_kernel(g, c.weight.value, (*view->stats)[li], gamma, beta);
        b = g.add(bmod, g.constant(c.bias.value));
      }
      ++li;
      return c.transposed ? g.conv_transpose2d(x, w, b, c.stride, c.pad)
                          : g.conv2d(x, w, b, c.stride, c.pad);
    };
    std::size_t ni = 0;
    auto norm = [&](Var x) {
      NormLayer& n = norms_[ni++];
      const bool train = mode == GenMode::kTrainBase;
      Var s = train ? g.param(n.scale) : g.constant(n.scale.value);
      Var t = train ? g.param(n.shift) : g.constant(n.shift.value);
      return g.instance_norm(x, s, t);
    };
    auto block = [&](Var x) { return g.activation(nn::Activation::kRelu, norm(conv(x))); };

    Var h = block(mask);
    for (std::size_t i = 0; i < cfg_.down_stages; ++i) h = block(h);
    for (std::size_t r = 0; r < cfg_.res_blocks; ++r) {
      Var y = block(h);
      y = norm(conv(y));
      h = g.add(h, y);
    }
    for (std::size_t i = 0; i < cfg_.down_stages; ++i) h = block(h);
    return g.activation(nn::Activation::kTanh, conv(h));
  }

  /// Gradient-free synthesis for one modality (or the base when view is null).
  Tensor<T> synthesize(const Tensor<T>& mask, const bank::ModalityView<T>* view = nullptr) {
    Graph<T> g;
    Var m = g.constant(mask);
    return g.value(forward(g, m, view ? GenMode::kEvalModality : GenMode::kFrozenBase, view));
  }

  ParamList<T> base_params() {
    ParamList<T> out;
    for (auto& c : convs_) {
      out.push_back(&c.weight);
      out.push_back(&c.bias);
    }
    for (auto& n : norms_) {
      out.push_back(&n.scale);
      out.push_back(&n.shift);
    }
    return out;
  }

  std::vector<ConvLayer>& convs() { return convs_; }
  const std::vector<ConvLayer>& convs() const { return convs_; }
  std::vector<NormLayer>& norms() { return norms_; }
  const std::vector<NormLayer>& norms() const { return norms_; }

  bank::Architecture architecture() const {
    bank::Architecture a;
    for (const auto& c : convs_) {
      const auto& s = c.weight.value.shape();
      a.layers.push_back({c.name, s[0], s[1], s[2], s[3], c.bias.value.size()});
    }
    for (const auto& n : norms_) a.frozen_other += n.scale.numel() + n.shift.numel();
    return a;
  }

  std::vector<bank::KernelStats<T>> kernel_stats() const {
    std::vector<bank::KernelStats<T>> s;
    for (const auto& c : convs_) s.push_back(bank::compute_kernel_stats(c.weight.value));
    return s;
  }

  std::map<std::string, Tensor<T>> named_tensors() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& c : convs_) {
      out.emplace(c.weight.name, c.weight.value);
      out.emplace(c.bias.name, c.bias.value);
    }
    for (const auto& n : norms_) {
      out.emplace(n.scale.name, n.scale.value);
      out.emplace(n.shift.name, n.shift.value);
    }
    return out;
  }

  void load_named_tensors(const std::map<std::string, Tensor<T>>& tensors) {
    for (auto* p : base_params()) {
      auto it = tensors.find(p->name);
      if (it == tensors.end()) throw ModelError("generator checkpoint lacks '" + p->name + "'");
      if (it->second.shape() != p->value.shape()) {
        throw ModelError("generator checkpoint shape mismatch for '" + p->name + "'");
      }
      p->value = it->second;
    }
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != cfg_.label_channels) {
      throw ModelError("generator: expected mask [N," + std::to_string(cfg_.label_channels) +
                       ",H,W], got " + nn::shape_str(s));
    }
    if (s[2] % divisor() != 0 || s[3] % divisor() != 0) {
      throw ModelError("generator: spatial size " + std::to_string(s[2]) + "x" +
                       std::to_string(s[3]) + " not divisible by " + std::to_string(divisor()));
    }
  }

 private:
  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                std::size_t stride, std::size_t pad, bool transposed, nn::Rng& rng) {
    ConvLayer c;
    c.name = name;
    const Shape ks = transposed ? Shape{in, out, k, k} : Shape{out, in, k, k};
    c.weight = Parameter<T>("base/" + name + "/weight", nn::kaiming_kernel<T>(ks, transposed, rng));
    c.bias = Parameter<T>("base/" + name + "/bias", Tensor<T>(Shape{out}));
    c.stride = stride;
    c.pad = pad;
    c.transposed = transposed;
    convs_.push_back(std::move(c));
    if (name != "out") {
      NormLayer n;
      n.scale = Parameter<T>("base/" + name + "/norm_scale", Tensor<T>::ones(Shape{out}));
      n.shift = Parameter<T>("base/" + name + "/norm_shift", Tensor<T>(Shape{out}));
      norms_.push_back(std::move(n));
    }
  }

  GeneratorConfig cfg_;
  std::vector<ConvLayer> convs_;
  std::vector<NormLayer> norms_;
};

}  // namespace mbank::models
