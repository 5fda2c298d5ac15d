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
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/nn/kernels.hpp"
#include "mbank/nn/parameter.hpp"
#include "mbank/nn/tensor.hpp"

namespace mbank::nn {

/// Handle to a node of a computation record.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

enum class Activation { kLeakyRelu, kRelu, kTanh, kSigmoid };

inline constexpr double kLeakySlope = 0.2;

/// Gradients of the leaves that were reachable from the loss, keyed by node id.
template <typename T>
using GradientMap = std::map<std::size_t, Tensor<T>>;

/// Reverse-mode computation record. Nodes are appended in execution order, so
/// the node list is a topological order and backward walks it in reverse.
/// One instance per forward pass; backward may run once.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // Leaf that never receives a gradient.
  Var constant(Tensor<T> v) { return push_leaf("constant", std::move(v), false, nullptr); }
  // Leaf whose gradient is reported by backward().
  Var leaf(Tensor<T> v) { return push_leaf("leaf", std::move(v), true, nullptr); }
  // Leaf bound to a parameter; backward() accumulates into p.grad.
  Var param(Parameter<T>& p) { return push_leaf(p.name, p.value, true, &p); }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Tensor<T>* grad(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? &n.grad : nullptr;
  }
  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(Var v) const { return node(v).op; }

  /// Records a node computed by the caller. backward receives the graph and
  /// this node's id; it reads grad_of(self) and adds into grad_slot(input).
  Var apply(std::string op, const std::vector<Var>& inputs, Tensor<T> value, BackwardFn backward) {
    bool rg = false;
    for (Var in : inputs) rg = rg || node(in).requires_grad;
    if (!value.all_finite()) throw NumericalError("non-finite output from op '" + op + "'");
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // Gradient buffer for an input, or null when that input needs none.
  Tensor<T>* grad_slot(Var v) {
    Node& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }

  // ---- primitives -------------------------------------------------------

  Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Tensor<T>* bias = b.valid() ? &value(b) : nullptr;
    Tensor<T> y = kernels::conv2d_forward(value(x), value(w), bias, stride, pad);
    return apply("conv2d", inputs_of(x, w, b), std::move(y),
                 [x, w, b, stride, pad](Graph& g, std::size_t self) {
                   kernels::conv2d_backward(g.value(x), g.value(w), g.grad_of(self), stride, pad,
                                            g.grad_slot(x), g.grad_slot(w),
                                            b.valid() ? g.grad_slot(b) : nullptr);
                 });
  }

  Var conv_transpose2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Tensor<T>* bias = b.valid() ? &value(b) : nullptr;
    Tensor<T> y = kernels::conv_transpose2d_forward(value(x), value(w), bias, stride, pad);
    return apply("conv_transpose2d", inputs_of(x, w, b), std::move(y),
                 [x, w, b, stride, pad](Graph& g, std::size_t self) {
                   kernels::conv_transpose2d_backward(g.value(x), g.value(w), g.grad_of(self),
                                                      stride, pad, g.grad_slot(x), g.grad_slot(w),
                                                      b.valid() ? g.grad_slot(b) : nullptr);
                 });
  }

  Var instance_norm(Var x, Var scale, Var shift, T eps = T(1e-5)) {
    auto cache = std::make_shared<kernels::InstanceNormCache<T>>();
    Tensor<T> y = kernels::instance_norm_forward(value(x), value(scale), value(shift), eps, *cache);
    return apply("instance_norm", {x, scale, shift}, std::move(y),
                 [x, scale, shift, cache](Graph& g, std::size_t self) {
                   kernels::instance_norm_backward(*cache, g.value(scale), g.grad_of(self),
                                                   g.grad_slot(x), g.grad_slot(scale),
                                                   g.grad_slot(shift));
                 });
  }

  Var activation(Activation kind, Var x) {
    const Tensor<T>& in = value(x);
    Tensor<T> y(in.shape());
    const T slope = static_cast<T>(kLeakySlope);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const T v = in[i];
      switch (kind) {
        case Activation::kLeakyRelu: y[i] = v > T{0} ? v : slope * v; break;
        case Activation::kRelu: y[i] = v > T{0} ? v : T{0}; break;
        case Activation::kTanh: y[i] = std::tanh(v); break;
        case Activation::kSigmoid: y[i] = T{1} / (T{1} + std::exp(-v)); break;
      }
    }
    return apply(activation_name(kind), {x}, std::move(y), [x, kind, slope](Graph& g, std::size_t self) {
      Tensor<T>* dx = g.grad_slot(x);
      const Tensor<T>& dy = g.grad_of(self);
      const Tensor<T>& in = g.value(x);
      const Tensor<T>& out = g.value_of(self);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        T d{0};
        switch (kind) {
          case Activation::kLeakyRelu: d = in[i] > T{0} ? T{1} : slope; break;
          case Activation::kRelu: d = in[i] > T{0} ? T{1} : T{0}; break;
          case Activation::kTanh: d = T{1} - out[i] * out[i]; break;
          case Activation::kSigmoid: d = out[i] * (T{1} - out[i]); break;
        }
        (*dx)[i] += d * dy[i];
      }
    });
  }

  Var add(Var a, Var b) { return binary("add", a, b, 0); }
  Var sub(Var a, Var b) { return binary("sub", a, b, 1); }
  Var mul(Var a, Var b) { return binary("mul", a, b, 2); }

  // a * s + c, elementwise.
  Var affine(Var a, T s, T c) {
    Tensor<T> y = value(a);
    for (auto& v : y.data()) v = v * s + c;
    return apply("affine", {a}, std::move(y), [a, s](Graph& g, std::size_t self) {
      g.grad_slot(a)->add_scaled(g.grad_of(self), s);
    });
  }

  Var square(Var a) {
    Tensor<T> y = value(a);
    for (auto& v : y.data()) v = v * v;
    return apply("square", {a}, std::move(y), [a](Graph& g, std::size_t self) {
      Tensor<T>* da = g.grad_slot(a);
      const Tensor<T>& x = g.value(a);
      const Tensor<T>& dy = g.grad_of(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += T{2} * x[i] * dy[i];
    });
  }

  // Subgradient 0 at the kink.
  Var abs(Var a) {
    Tensor<T> y = value(a);
    for (auto& v : y.data()) v = std::abs(v);
    return apply("abs", {a}, std::move(y), [a](Graph& g, std::size_t self) {
      Tensor<T>* da = g.grad_slot(a);
      const Tensor<T>& x = g.value(a);
      const Tensor<T>& dy = g.grad_of(self);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T s = x[i] > T{0} ? T{1} : (x[i] < T{0} ? T{-1} : T{0});
        (*da)[i] += s * dy[i];
      }
    });
  }

  Var sum(Var a) { return reduce(a, false); }
  Var mean(Var a) { return reduce(a, true); }

  Var concat_channels(Var a, Var b) {
    Tensor<T> y = nn::concat_channels(value(a), value(b));
    return apply("concat_channels", {a, b}, std::move(y), [a, b](Graph& g, std::size_t self) {
      const Tensor<T>& dy = g.grad_of(self);
      const std::size_t n = dy.dim(0), ca = g.value(a).dim(1), cb = g.value(b).dim(1);
      const std::size_t hw = dy.dim(2) * dy.dim(3);
      Tensor<T>* da = g.grad_slot(a);
      Tensor<T>* db = g.grad_slot(b);
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = dy.ptr() + i * (ca + cb) * hw;
        if (da)
          for (std::size_t k = 0; k < ca * hw; ++k) (*da)[i * ca * hw + k] += src[k];
        if (db)
          for (std::size_t k = 0; k < cb * hw; ++k) (*db)[i * cb * hw + k] += src[ca * hw + k];
      }
    });
  }

  // ---- backward ---------------------------------------------------------

  /// Backpropagates a scalar loss.
  GradientMap<T> backward(Var loss) {
    if (value(loss).size() != 1) {
      throw GraphError("backward(loss) needs a scalar, got " + shape_str(value(loss).shape()));
    }
    return backward(loss, Tensor<T>::ones(value(loss).shape()));
  }

  /// Backpropagates an upstream gradient (vector-Jacobian product) seeded at out.
  GradientMap<T> backward(Var out, const Tensor<T>& seed) {
    if (backward_done_) {
      throw GraphError("backward already ran on this computation record; re-run forward first");
    }
    backward_done_ = true;
    value(out).require_same_shape(seed, "backward seed");
    if (!seed.all_finite()) throw NumericalError("non-finite backward seed");
    GradientMap<T> grads;
    Node& root = node(out);
    if (!root.requires_grad) return grads;
    *grad_slot(out) += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (!n.grad.all_finite()) {
        throw NumericalError("non-finite gradient at node " + std::to_string(i) + " ('" + n.op +
                             "')");
      }
      if (n.backward) {
        n.backward(*this, i);
      } else if (n.requires_grad) {
        if (n.param) n.param->accumulate(n.grad);
        grads.emplace(i, n.grad);
      }
    }
    return grads;
  }

  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  static const char* activation_name(Activation k) {
    switch (k) {
      case Activation::kLeakyRelu: return "leaky_relu";
      case Activation::kRelu: return "relu";
      case Activation::kTanh: return "tanh";
      case Activation::kSigmoid: return "sigmoid";
    }
    return "activation";
  }

  static std::vector<Var> inputs_of(Var x, Var w, Var b) {
    std::vector<Var> v{x, w};
    if (b.valid()) v.push_back(b);
    return v;
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[v.id];
  }

  Var push_leaf(std::string op, Tensor<T> v, bool rg, Parameter<T>* p) {
    if (!v.all_finite()) throw NumericalError("non-finite leaf '" + op + "'");
    Node n;
    n.op = std::move(op);
    n.value = std::move(v);
    n.requires_grad = rg;
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // kind: 0 add, 1 sub, 2 mul
  Var binary(const char* name, Var a, Var b, int kind) {
    const Tensor<T>& x = value(a);
    const Tensor<T>& y = value(b);
    x.require_same_shape(y, name);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] = kind == 0 ? x[i] + y[i] : kind == 1 ? x[i] - y[i] : x[i] * y[i];
    }
    return apply(name, {a, b}, std::move(out), [a, b, kind](Graph& g, std::size_t self) {
      const Tensor<T>& dy = g.grad_of(self);
      if (Tensor<T>* da = g.grad_slot(a)) {
        if (kind == 2) {
          const Tensor<T>& yb = g.value(b);
          for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * yb[i];
        } else {
          *da += dy;
        }
      }
      if (Tensor<T>* db = g.grad_slot(b)) {
        if (kind == 2) {
          const Tensor<T>& xa = g.value(a);
          for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * xa[i];
        } else if (kind == 1) {
          db->add_scaled(dy, T{-1});
        } else {
          *db += dy;
        }
      }
    });
  }

  Var reduce(Var a, bool average) {
    const Tensor<T>& x = value(a);
    T s{0};
    for (T v : x.data()) s += v;
    const T scale = average ? T{1} / static_cast<T>(x.size()) : T{1};
    return apply(average ? "mean" : "sum", {a}, Tensor<T>::scalar(s * scale),
                 [a, scale](Graph& g, std::size_t self) {
                   const T d = g.grad_of(self)[0] * scale;
                   for (auto& v : g.grad_slot(a)->data()) v += d;
                 });
  }

  std::deque<Node> nodes_;  // stable element addresses across push_back
  bool backward_done_ = false;
};

}  // namespace mbank::nn
