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
#include <string>
#include <utility>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/nn/graph.hpp"
#include "mbank/nn/parameter.hpp"
#include "mbank/nn/tensor.hpp"

// Per-modality kernel modulation (mAdaFM) over a frozen base generator:
//   W_hat = Gamma * (W - M) / S + B      (broadcast over kernel positions)
//   b_hat = b + b_conv
// M and S are the spatial mean and (population) std of each [o, i] kernel
// slice, so Gamma = S, B = M, b = 0 reproduces the frozen layer.
namespace mbank::bank {

using nn::Parameter;
using nn::ParamList;
using nn::Shape;
using nn::Tensor;

inline constexpr double kStatsEps = 1e-5;

/// Spatial statistics of a kernel, one entry per leading-two-dims slice.
template <typename T>
struct KernelStats {
  Tensor<T> mean;    // [d0, d1]
  Tensor<T> stddev;  // [d0, d1], >= eps
};

template <typename T>
KernelStats<T> compute_kernel_stats(const Tensor<T>& kernel, double eps = kStatsEps) {
  if (kernel.rank() != 4 || kernel.dim(2) * kernel.dim(3) == 0) {
    throw ShapeError("compute_kernel_stats: expected a 4-d kernel, got " +
                     nn::shape_str(kernel.shape()));
  }
  const std::size_t rows = kernel.dim(0), cols = kernel.dim(1);
  const std::size_t area = kernel.dim(2) * kernel.dim(3);
  KernelStats<T> s{Tensor<T>(Shape{rows, cols}), Tensor<T>(Shape{rows, cols})};
  for (std::size_t k = 0; k < rows * cols; ++k) {
    const T* p = kernel.ptr() + k * area;
    double mean = 0;
    for (std::size_t j = 0; j < area; ++j) mean += p[j];
    mean /= static_cast<double>(area);
    double var = 0;
    for (std::size_t j = 0; j < area; ++j) var += (p[j] - mean) * (p[j] - mean);
    var /= static_cast<double>(area);
    s.mean[k] = static_cast<T>(mean);
    s.stddev[k] = static_cast<T>(std::max(std::sqrt(var), eps));
  }
  return s;
}

namespace detail {

inline void check_modulation_shapes(const Shape& kernel, const Shape& stats, const Shape& gamma,
                                    const Shape& beta) {
  if (kernel.size() != 4 || stats != Shape{kernel[0], kernel[1]} || gamma != stats ||
      beta != stats) {
    throw ShapeError("modulate_kernel: kernel " + nn::shape_str(kernel) + ", stats " +
                     nn::shape_str(stats) + ", gamma " + nn::shape_str(gamma) + ", beta " +
                     nn::shape_str(beta));
  }
}

// Slices whose gain and shift equal their own statistics are copied through,
// so identity parameters reproduce W bit-exactly rather than to rounding.
template <typename T>
Tensor<T> modulate(const Tensor<T>& w, const KernelStats<T>& s, const Tensor<T>& gamma,
                   const Tensor<T>& beta) {
  check_modulation_shapes(w.shape(), s.mean.shape(), gamma.shape(), beta.shape());
  const std::size_t area = w.dim(2) * w.dim(3);
  Tensor<T> out(w.shape());
  for (std::size_t k = 0; k < s.mean.size(); ++k) {
    const T m = s.mean[k], sd = s.stddev[k];
    const T gk = gamma[k], bk = beta[k];
    const T* src = w.ptr() + k * area;
    T* dst = out.ptr() + k * area;
    if (gk == sd && bk == m) {
      std::copy(src, src + area, dst);
      continue;
    }
    for (std::size_t j = 0; j < area; ++j) dst[j] = gk * ((src[j] - m) / sd) + bk;
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> modulate_kernel(const Tensor<T>& w, const KernelStats<T>& s, const Tensor<T>& gamma,
                          const Tensor<T>& beta) {
  return detail::modulate(w, s, gamma, beta);
}

template <typename T>
Tensor<T> modulated_bias(const Tensor<T>& b_modality, const Tensor<T>& b_conv) {
  if (b_modality.shape() != b_conv.shape() || b_conv.rank() != 1) {
    throw ShapeError("modulated_bias: " + nn::shape_str(b_modality.shape()) + " vs " +
                     nn::shape_str(b_conv.shape()));
  }
  Tensor<T> out = b_conv;
  out += b_modality;
  return out;
}

/// Differentiable modulation. The frozen kernel enters by value, so no
/// gradient with respect to it is ever formed.
template <typename T>
nn::Var modulate_kernel(nn::Graph<T>& g, const Tensor<T>& w, const KernelStats<T>& s,
                        nn::Var gamma, nn::Var beta) {
  Tensor<T> out = detail::modulate(w, s, g.value(gamma), g.value(beta));
  // The normalized kernel is the only saved activation.
  auto normalized = std::make_shared<Tensor<T>>(w.shape());
  const std::size_t area = w.dim(2) * w.dim(3);
  for (std::size_t k = 0; k < s.mean.size(); ++k)
    for (std::size_t j = 0; j < area; ++j)
      (*normalized)[k * area + j] = (w[k * area + j] - s.mean[k]) / s.stddev[k];
  return g.apply("modulate_kernel", {gamma, beta}, std::move(out),
                 [gamma, beta, normalized, area](nn::Graph<T>& gr, std::size_t self) {
                   const Tensor<T>& dy = gr.grad_of(self);
                   Tensor<T>* dg = gr.grad_slot(gamma);
                   Tensor<T>* db = gr.grad_slot(beta);
                   const std::size_t slices = dy.size() / area;
                   for (std::size_t k = 0; k < slices; ++k) {
                     T sg{0}, sb{0};
                     for (std::size_t j = 0; j < area; ++j) {
                       sg += dy[k * area + j] * (*normalized)[k * area + j];
                       sb += dy[k * area + j];
                     }
                     if (dg) (*dg)[k] += sg;
                     if (db) (*db)[k] += sb;
                   }
                 });
}

/// Trainable modulation of one conv layer for one modality.
template <typename T>
struct LayerModulation {
  Parameter<T> gamma;  // [d0, d1]
  Parameter<T> beta;   // [d0, d1]
  Parameter<T> bias;   // [out_channels]
};

template <typename T>
struct ModalityParams {
  std::vector<LayerModulation<T>> layers;

  ParamList<T> params() {
    ParamList<T> out;
    for (auto& l : layers) {
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.gamma.numel() + l.beta.numel() + l.bias.numel();
    return n;
  }
};

/// Geometry of one modulated (conv or transposed-conv) layer.
struct ModulatedLayerSpec {
  std::string name;
  std::size_t rows = 0;  // kernel dim 0
  std::size_t cols = 0;  // kernel dim 1
  std::size_t kh = 0, kw = 0;
  std::size_t out_channels = 0;

  friend bool operator==(const ModulatedLayerSpec&, const ModulatedLayerSpec&) = default;
};

struct Architecture {
  std::vector<ModulatedLayerSpec> layers;
  std::uint64_t frozen_other = 0;  // frozen parameters outside conv kernels/biases

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ParamCount {
  std::uint64_t base_frozen = 0;
  std::uint64_t per_modality = 0;

  double ratio() const {
    return base_frozen ? static_cast<double>(per_modality) / static_cast<double>(base_frozen) : 0.0;
  }
};

inline ParamCount bank_param_count(const Architecture& arch) {
  ParamCount c;
  for (const auto& l : arch.layers) {
    c.per_modality += 2 * l.rows * l.cols + l.out_channels;
    c.base_frozen += l.rows * l.cols * l.kh * l.kw + l.out_channels;
  }
  c.base_frozen += arch.frozen_other;
  return c;
}

// Reference figures for the full-size model: 2.5M per modality, 21M frozen.
inline constexpr double kReferencePerModalityParams = 2.5e6;
inline constexpr double kReferenceFrozenParams = 21e6;
inline constexpr double kReferenceRatio = kReferencePerModalityParams / kReferenceFrozenParams;

template <typename T>
LayerModulation<T> identity_params(const KernelStats<T>& stats, const ModulatedLayerSpec& spec,
                                   const std::string& prefix) {
  LayerModulation<T> l;
  l.gamma = Parameter<T>(prefix + "/gamma", stats.stddev);
  l.beta = Parameter<T>(prefix + "/beta", stats.mean);
  l.bias = Parameter<T>(prefix + "/bias", Tensor<T>(Shape{spec.out_channels}));
  return l;
}

/// The modality bank: frozen-base identity plus one modulation set per modality.
template <typename T>
class ParameterBank {
 public:
  ParameterBank() = default;
  ParameterBank(std::string base_digest, Architecture arch, std::vector<KernelStats<T>> stats)
      : base_digest_(std::move(base_digest)), arch_(std::move(arch)), stats_(std::move(stats)) {
    if (stats_.size() != arch_.layers.size()) {
      throw BankError("bank: " + std::to_string(stats_.size()) + " kernel stats for " +
                      std::to_string(arch_.layers.size()) + " modulated layers");
    }
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const auto& l = arch_.layers[i];
      if (stats_[i].mean.shape() != Shape{l.rows, l.cols}) {
        throw BankError("bank: stats shape mismatch for layer " + l.name);
      }
    }
  }

  const std::string& base_digest() const { return base_digest_; }
  const Architecture& architecture() const { return arch_; }
  const std::vector<KernelStats<T>>& stats() const { return stats_; }

  void register_modality(const std::string& id) {
    if (id.empty()) throw BankError("modality id must be non-empty");
    if (entries_.count(id)) throw BankError("modality '" + id + "' already registered");
    ModalityParams<T> p;
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      p.layers.push_back(
          identity_params(stats_[i], arch_.layers[i], "bank/" + id + "/" + arch_.layers[i].name));
    }
    entries_.emplace(id, std::move(p));
  }

  // Installs trained values (e.g. from a checkpoint); shapes must match.
  void set_modality(const std::string& id, ModalityParams<T> params) {
    validate(params);
    entries_[id] = std::move(params);
  }

  bool has(const std::string& id) const { return entries_.count(id) > 0; }

  ModalityParams<T>& params(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw BankError("unknown modality '" + id + "'");
    return it->second;
  }
  const ModalityParams<T>& params(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw BankError("unknown modality '" + id + "'");
    return it->second;
  }

  std::vector<std::string> modalities() const {
    std::vector<std::string> ids;
    for (const auto& [k, _] : entries_) ids.push_back(k);
    return ids;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += p.numel();
    return n;
  }

 private:
  void validate(const ModalityParams<T>& p) const {
    if (p.layers.size() != arch_.layers.size()) throw BankError("modality params layer count mismatch");
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      const auto& spec = arch_.layers[i];
      const Shape s{spec.rows, spec.cols};
      if (p.layers[i].gamma.value.shape() != s || p.layers[i].beta.value.shape() != s ||
          p.layers[i].bias.value.shape() != Shape{spec.out_channels}) {
        throw BankError("modality params shape mismatch at layer " + spec.name);
      }
    }
  }

  std::string base_digest_;
  Architecture arch_;
  std::vector<KernelStats<T>> stats_;
  std::map<std::string, ModalityParams<T>> entries_;
};

/// A generator configured for one modality: which modulation set to apply.
/// Holds non-owning pointers into the bank.
template <typename T>
struct ModalityView {
  std::string modality;
  ModalityParams<T>* params = nullptr;
  const std::vector<KernelStats<T>>* stats = nullptr;
};

template <typename T>
ModalityView<T> switch_modality(ParameterBank<T>& bank, const std::string& id) {
  return ModalityView<T>{id, &bank.params(id), &bank.stats()};
}

}  // namespace mbank::bank
