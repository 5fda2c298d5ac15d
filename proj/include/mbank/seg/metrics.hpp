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
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/nn/tensor.hpp"

// Whole-tumor overlap and surface-distance metrics.
namespace mbank::seg {

struct BinaryMask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> px;

  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width) : h(height), w(width), px(height * width, 0) {}

  /// Accepts [H,W], [1,H,W] or [1,1,H,W]; pixels above threshold are set.
  static BinaryMask from_tensor(const nn::Tensor<float>& t, float threshold = 0.5f) {
    if (t.rank() < 2) throw MetricError("mask tensor must have rank >= 2");
    for (std::size_t i = 0; i + 2 < t.rank(); ++i)
      if (t.dim(i) != 1) throw MetricError("mask tensor " + nn::shape_str(t.shape()) + " is not a single plane");
    BinaryMask m(t.dim(t.rank() - 2), t.dim(t.rank() - 1));
    for (std::size_t i = 0; i < t.size(); ++i) m.px[i] = t[i] > threshold;
    return m;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : px) n += v;
    return n;
  }
  bool empty() const { return count() == 0; }
  bool operator()(std::size_t y, std::size_t x) const { return px[y * w + x] != 0; }
};

inline void check_pair(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) {
    throw MetricError("mask size mismatch: " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                      " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  }
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt);
  Confusion c;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    const bool p = pred.px[i], g = gt.px[i];
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
inline double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// (TP/(TP+FN), TN/(TN+FP)); an empty denominator yields 1.
inline std::pair<double, double> sens_spec(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  const double sens = c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  const double spec = c.tn + c.fp == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return {sens, spec};
}

/// Foreground pixels with at least one background 4-neighbor. Pixels
/// outside the image count as background.
inline BinaryMask boundary(const BinaryMask& m) {
  BinaryMask b(m.h, m.w);
  for (std::size_t y = 0; y < m.h; ++y) {
    for (std::size_t x = 0; x < m.w; ++x) {
      if (!m(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.h || x + 1 == m.w || !m(y - 1, x) ||
                        !m(y + 1, x) || !m(y, x - 1) || !m(y, x + 1);
      b.px[y * m.w + x] = edge;
    }
  }
  return b;
}

namespace detail {

// Exact 1-d squared distance transform of sampled function f (lower envelope
// of parabolas).
inline void edt_1d(const double* f, std::size_t n, double* d, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < kInf) {
      first = q;
      break;
    }
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s;
    while (true) {
      const double p = static_cast<double>(v[k]), qq = static_cast<double>(q);
      s = ((f[q] + qq * qq) - (f[v[k]] + p * p)) / (2 * qq - 2 * p);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest set pixel.
inline std::vector<double> squared_distance_map(const BinaryMask& m) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> g(m.h * m.w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.px[i] ? 0.0 : kInf;
  std::vector<std::size_t> v;
  std::vector<double> z, f(std::max(m.h, m.w)), d(std::max(m.h, m.w));
  for (std::size_t x = 0; x < m.w; ++x) {
    for (std::size_t y = 0; y < m.h; ++y) f[y] = g[y * m.w + x];
    detail::edt_1d(f.data(), m.h, d.data(), v, z);
    for (std::size_t y = 0; y < m.h; ++y) g[y * m.w + x] = d[y];
  }
  for (std::size_t y = 0; y < m.h; ++y) {
    detail::edt_1d(g.data() + y * m.w, m.w, d.data(), v, z);
    std::copy(d.begin(), d.begin() + static_cast<long>(m.w), g.begin() + static_cast<long>(y * m.w));
  }
  return g;
}

/// Percentile with linear interpolation between closest ranks.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw MetricError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Hd95 {
  double value = 0;
  bool sentinel = false;  // an input was empty; value is the image diagonal
};

/// max(d95(pred -> gt), d95(gt -> pred)) over 4-connected boundaries.
inline Hd95 hd95(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt);
  if (pred.empty() || gt.empty()) {
    return {std::hypot(static_cast<double>(pred.h), static_cast<double>(pred.w)), true};
  }
  const BinaryMask bp = boundary(pred), bg = boundary(gt);
  auto directed = [](const BinaryMask& from, const BinaryMask& to) {
    const auto dist = squared_distance_map(to);
    std::vector<double> d;
    for (std::size_t i = 0; i < from.px.size(); ++i)
      if (from.px[i]) d.push_back(std::sqrt(dist[i]));
    return percentile(std::move(d), 0.95);
  };
  return {std::max(directed(bp, bg), directed(bg, bp)), false};
}

struct CaseMetrics {
  double dice = 0, sens = 0, spec = 0, hd95 = 0;
  bool hd95_sentinel = false;
};

inline CaseMetrics case_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  CaseMetrics m;
  m.dice = dice(pred, gt);
  std::tie(m.sens, m.spec) = sens_spec(pred, gt);
  const Hd95 h = hd95(pred, gt);
  m.hd95 = h.value;
  m.hd95_sentinel = h.sentinel;
  return m;
}

struct Summary {
  double mean = 0, std = 0;  // population std
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

/// Per-case metrics plus aggregates; Dice/Sens/Spec in percent, HD95 in pixels.
struct MetricsReport {
  std::string method;
  std::vector<CaseMetrics> cases;
  Summary dice, sens, spec, hd95;
  std::size_t hd95_sentinels = 0;

  static MetricsReport aggregate(std::string method, std::vector<CaseMetrics> cases) {
    if (cases.empty()) throw MetricError("cannot aggregate an empty test set");
    MetricsReport r;
    r.method = std::move(method);
    std::vector<double> d, se, sp, h;
    for (const auto& c : cases) {
      d.push_back(100 * c.dice);
      se.push_back(100 * c.sens);
      sp.push_back(100 * c.spec);
      h.push_back(c.hd95);
      r.hd95_sentinels += c.hd95_sentinel;
    }
    r.dice = summarize(d);
    r.sens = summarize(se);
    r.spec = summarize(sp);
    r.hd95 = summarize(h);
    r.cases = std::move(cases);
    return r;
  }
};

inline std::string format_pm(const Summary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f", s.mean, s.std);
  return buf;
}

inline const char* csv_header() {
  return "scenario,method,seed,dice_mean,dice_std,sens_mean,sens_std,spec_mean,spec_std,hd95_mean,"
         "hd95_std";
}

inline std::string csv_row(const std::string& scenario, const MetricsReport& r, std::uint64_t seed) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                scenario.c_str(), r.method.c_str(), static_cast<unsigned long long>(seed),
                r.dice.mean, r.dice.std, r.sens.mean, r.sens.std, r.spec.mean, r.spec.std,
                r.hd95.mean, r.hd95.std);
  return buf;
}

}  // namespace mbank::seg
