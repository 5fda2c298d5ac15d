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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mbank/data/toy.hpp"
#include "mbank/error.hpp"
#include "mbank/nn/adam.hpp"
#include "mbank/nn/graph.hpp"
#include "mbank/nn/init.hpp"
#include "mbank/seg/metrics.hpp"

// Whole-tumor segmenter: a small U-shaped network trained with Dice + BCE.
namespace mbank::seg {

using nn::Graph;
using nn::Parameter;
using nn::ParamList;
using nn::Shape;
using nn::Tensor;
using nn::Var;

/// Mean binary cross-entropy on logits.
template <typename T>
Var bce_with_logits(Graph<T>& g, Var logits, Var target) {
  const Tensor<T>& x = g.value(logits);
  const Tensor<T>& t = g.value(target);
  x.require_same_shape(t, "bce_with_logits");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    s += std::max(v, 0.0) - v * t[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(x.size());
  return g.apply("bce_with_logits", {logits, target}, Tensor<T>::scalar(static_cast<T>(s / n)),
                 [logits, target, n](Graph<T>& gr, std::size_t self) {
                   const T dy = gr.grad_of(self)[0];
                   Tensor<T>* dx = gr.grad_slot(logits);
                   if (!dx) return;
                   const Tensor<T>& xv = gr.value(logits);
                   const Tensor<T>& tv = gr.value(target);
                   for (std::size_t i = 0; i < xv.size(); ++i) {
                     const T sig = T{1} / (T{1} + std::exp(-xv[i]));
                     (*dx)[i] += dy * (sig - tv[i]) / static_cast<T>(n);
                   }
                 });
}

/// 1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s) per sample, averaged over
/// the batch.
template <typename T>
Var soft_dice_loss(Graph<T>& g, Var prob, Var target, T smooth = T{1}) {
  const Tensor<T>& p = g.value(prob);
  const Tensor<T>& t = g.value(target);
  p.require_same_shape(t, "soft_dice_loss");
  const std::size_t n = p.dim(0), per = p.size() / n;
  auto sums = std::make_shared<std::vector<std::array<double, 3>>>(n);  // I, P, T
  double loss = 0;
  for (std::size_t b = 0; b < n; ++b) {
    auto& s = (*sums)[b];
    s = {0, 0, 0};
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      s[0] += p[i] * t[i];
      s[1] += p[i];
      s[2] += t[i];
    }
    loss += 1 - (2 * s[0] + smooth) / (s[1] + s[2] + smooth);
  }
  return g.apply("soft_dice_loss", {prob, target}, Tensor<T>::scalar(static_cast<T>(loss / n)),
                 [prob, target, sums, n, per, smooth](Graph<T>& gr, std::size_t self) {
                   const double dy = gr.grad_of(self)[0];
                   Tensor<T>* dp = gr.grad_slot(prob);
                   if (!dp) return;
                   const Tensor<T>& tv = gr.value(target);
                   for (std::size_t b = 0; b < n; ++b) {
                     const auto& s = (*sums)[b];
                     const double num = 2 * s[0] + smooth, den = s[1] + s[2] + smooth;
                     for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
                       const double d = -(2 * tv[i] * den - num) / (den * den);
                       (*dp)[i] += static_cast<T>(dy * d / static_cast<double>(n));
                     }
                   }
                 });
}

template <typename T>
Var dice_bce_loss(Graph<T>& g, Var logits, Var target) {
  Var prob = g.activation(nn::Activation::kSigmoid, logits);
  return g.add(bce_with_logits(g, logits, target), soft_dice_loss(g, prob, target));
}

struct SegModelConfig {
  std::vector<std::string> modalities{"m1", "m2", "m3"};  // input channel order
  std::size_t width = 8;
  std::size_t epochs = 12;
  std::size_t min_steps = 0;  // small datasets train extra epochs up to this many updates
  std::size_t batch = 8;
  double lr = 2e-3;

  std::size_t in_channels() const { return modalities.size(); }

  /// Architecture string stored in checkpoints; parse_architecture inverts it.
  std::string describe() const {
    std::string mods;
    for (const auto& m : modalities) mods += (mods.empty() ? "" : "+") + m;
    return "segmenter(in=" + mods + ",width=" + std::to_string(width) + ")";
  }

  static SegModelConfig parse_architecture(const std::string& arch) {
    const std::string head = "segmenter(in=", mid = ",width=";
    const auto w = arch.find(mid);
    if (arch.rfind(head, 0) != 0 || w == std::string::npos || arch.back() != ')') {
      throw IoError("not a segmenter checkpoint: '" + arch + "'");
    }
    SegModelConfig c;
    c.modalities.clear();
    std::string mods = arch.substr(head.size(), w - head.size());
    for (std::size_t start = 0;;) {
      const auto plus = mods.find('+', start);
      c.modalities.push_back(mods.substr(start, plus - start));
      if (plus == std::string::npos) break;
      start = plus + 1;
    }
    try {
      c.width = std::stoul(arch.substr(w + mid.size(), arch.size() - 1 - w - mid.size()));
    } catch (const std::exception&) {
      throw IoError("bad segmenter width in '" + arch + "'");
    }
    return c;
  }
};

/// Two-level U-Net: [conv x2] -> down -> [conv] -> down -> [conv] -> up ->
/// skip-concat -> [conv] -> up -> skip-concat -> [conv] -> 1x1 logit.
template <typename T>
class Segmenter {
 public:
  Segmenter() = default;

  Segmenter(const SegModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.modalities.empty()) throw ModelError("segmenter needs at least one input modality");
    nn::Rng rng(seed);
    const std::size_t w = cfg.width, c = cfg.in_channels();
    add("enc1a", c, w, 3, false, rng);
    add("enc1b", w, w, 3, false, rng);
    add("down1", w, 2 * w, 3, false, rng);
    add("enc2", 2 * w, 2 * w, 3, false, rng);
    add("down2", 2 * w, 4 * w, 3, false, rng);
    add("mid", 4 * w, 4 * w, 3, false, rng);
    add("up2", 4 * w, 2 * w, 4, true, rng);
    add("dec2", 4 * w, 2 * w, 3, false, rng);
    add("up1", 2 * w, w, 4, true, rng);
    add("dec1", 2 * w, w, 3, false, rng);
    add("head", w, 1, 1, false, rng);
  }

  const SegModelConfig& config() const { return cfg_; }

  /// x [N,C,H,W] -> foreground logits [N,1,H,W].
  Var forward(Graph<T>& g, Var x, bool trainable) {
    const Shape& s = g.value(x).shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels() || s[2] % 4 || s[3] % 4) {
      throw ModelError("segmenter: expected [N," + std::to_string(cfg_.in_channels()) +
                       ",H,W] with H,W divisible by 4, got " + nn::shape_str(s));
    }
    auto bind = [&](Parameter<T>& p) { return trainable ? g.param(p) : g.constant(p.value); };
    auto layer = [&](const std::string& name, Var in, bool act) {
      Layer& l = layers_.at(name);
      Var y = l.transposed ? g.conv_transpose2d(in, bind(l.weight), bind(l.bias), l.stride, l.pad)
                           : g.conv2d(in, bind(l.weight), bind(l.bias), l.stride, l.pad);
      return act ? g.activation(nn::Activation::kLeakyRelu, y) : y;
    };
    Var e1 = layer("enc1b", layer("enc1a", x, true), true);
    Var e2 = layer("enc2", layer("down1", e1, true), true);
    Var m = layer("mid", layer("down2", e2, true), true);
    Var d2 = layer("dec2", g.concat_channels(layer("up2", m, true), e2), true);
    Var d1 = layer("dec1", g.concat_channels(layer("up1", d2, true), e1), true);
    return layer("head", d1, false);
  }

  /// Foreground probabilities for a batch.
  Tensor<T> predict(const Tensor<T>& x) {
    Graph<T> g;
    return g.value(g.activation(nn::Activation::kSigmoid, forward(g, g.constant(x), false)));
  }

  ParamList<T> params() {
    ParamList<T> out;
    for (auto& name : order_) {
      out.push_back(&layers_.at(name).weight);
      out.push_back(&layers_.at(name).bias);
    }
    return out;
  }

  std::map<std::string, Tensor<T>> named_tensors() {
    std::map<std::string, Tensor<T>> out;
    for (auto* p : params()) out.emplace(p->name, p->value);
    return out;
  }

  void load_named_tensors(const std::map<std::string, Tensor<T>>& tensors) {
    for (auto* p : params()) {
      auto it = tensors.find(p->name);
      if (it == tensors.end() || it->second.shape() != p->value.shape()) {
        throw ModelError("segmenter checkpoint lacks a matching '" + p->name + "'");
      }
      p->value = it->second;
    }
  }

 private:
  struct Layer {
    Parameter<T> weight, bias;
    std::size_t stride = 1, pad = 0;
    bool transposed = false;
  };

  void add(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool transposed,
           nn::Rng& rng) {
    Layer l;
    const Shape ks = transposed ? Shape{in, out, k, k} : Shape{out, in, k, k};
    l.weight = Parameter<T>("seg/" + name + "/weight", nn::kaiming_kernel<T>(ks, transposed, rng));
    l.bias = Parameter<T>("seg/" + name + "/bias", Tensor<T>(Shape{out}));
    const bool down = name.rfind("down", 0) == 0;
    l.stride = transposed || down ? 2 : 1;
    l.pad = k == 1 ? 0 : 1;
    l.transposed = transposed;
    layers_.emplace(name, std::move(l));
    order_.push_back(name);
  }

  SegModelConfig cfg_;
  std::map<std::string, Layer> layers_;
  std::vector<std::string> order_;
};

/// Stacks the configured modalities of each case into [N,C,H,W] inputs and
/// whole-tumor targets [N,1,H,W].
inline std::pair<Tensor<float>, Tensor<float>> stack_cases(const std::vector<const data::Case*>& cases,
                                                           const std::vector<std::string>& modalities) {
  if (cases.empty()) throw DataError("stack_cases: no cases");
  const std::size_t h = cases[0]->mask.dim(1), w = cases[0]->mask.dim(2), plane = h * w;
  const std::size_t c = modalities.size();
  Tensor<float> x(Shape{cases.size(), c, h, w}), y(Shape{cases.size(), 1, h, w});
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const data::Case& cs = *cases[i];
    for (std::size_t k = 0; k < c; ++k) {
      auto it = cs.images.find(modalities[k]);
      if (it == cs.images.end()) {
        throw DataError("case " + cs.id + " lacks modality '" + modalities[k] + "'");
      }
      if (it->second.size() != plane) throw DataError("case " + cs.id + " has a mis-sized image");
      std::copy(it->second.ptr(), it->second.ptr() + plane, x.ptr() + (i * c + k) * plane);
    }
    const Tensor<float> wt = data::whole_tumor(cs.mask);
    std::copy(wt.ptr(), wt.ptr() + plane, y.ptr() + i * plane);
  }
  return {std::move(x), std::move(y)};
}

/// Fixed-budget training; returns the final-epoch model.
inline Segmenter<float> train_segmenter(const std::vector<data::Case>& cases, const SegModelConfig& cfg,
                                        std::uint64_t seed) {
  if (cases.empty()) throw DataError("train_segmenter: empty dataset");
  for (const auto& cs : cases)
    for (const auto& m : cfg.modalities)
      if (!cs.images.count(m)) throw DataError("case " + cs.id + " lacks modality '" + m + "'");
  Segmenter<float> model(cfg, nn::derive_seed(seed, 1));
  nn::Adam<float> opt(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  nn::Rng rng(nn::derive_seed(seed, 2));
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = (cases.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t epochs = std::max(cfg.epochs, (cfg.min_steps + per_epoch - 1) / per_epoch);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<const data::Case*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i)
        batch.push_back(&cases[order[i]]);
      auto [x, y] = stack_cases(batch, cfg.modalities);
      Graph<float> g;
      Var loss = dice_bce_loss(g, model.forward(g, g.constant(std::move(x)), true),
                               g.constant(std::move(y)));
      nn::zero_grads(model.params());
      g.backward(loss);
      opt.step(model.params());
    }
  }
  return model;
}

/// Thresholds foreground probability at 0.5 and scores every test case.
inline MetricsReport evaluate(Segmenter<float>& model, const std::vector<data::Case>& test,
                              const std::string& method, std::size_t batch = 16) {
  if (test.empty()) throw MetricError("evaluate: empty test set");
  std::vector<CaseMetrics> out;
  for (std::size_t start = 0; start < test.size(); start += batch) {
    std::vector<const data::Case*> cases;
    for (std::size_t i = start; i < std::min(test.size(), start + batch); ++i) cases.push_back(&test[i]);
    auto [x, y] = stack_cases(cases, model.config().modalities);
    const Tensor<float> prob = model.predict(x);
    for (std::size_t i = 0; i < cases.size(); ++i) {
      out.push_back(case_metrics(BinaryMask::from_tensor(prob.slice0(i, 1)),
                                 BinaryMask::from_tensor(y.slice0(i, 1))));
    }
  }
  return MetricsReport::aggregate(method, std::move(out));
}

}  // namespace mbank::seg
