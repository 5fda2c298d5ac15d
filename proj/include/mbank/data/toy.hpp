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
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "mbank/error.hpp"
#include "mbank/io/container.hpp"
#include "mbank/io/sha256.hpp"
#include "mbank/nn/init.hpp"
#include "mbank/nn/tensor.hpp"

// Procedural multi-modality tumor dataset: a blob partitioned into three
// nested sub-region bands, rendered per modality with a smooth background,
// noise and a per-center intensity shift.
namespace mbank::data {

using nn::Shape;
using nn::Tensor;

inline constexpr std::size_t kMinImageSize = 16;
inline constexpr std::size_t kLabelPlanes = 3;

enum class ShapeFamily { kEllipse, kRectangle, kDiamond };

struct MaskBounds {
  double min_area = 0.05;  // fraction of the image
  double max_area = 0.20;
  double min_aspect = 0.6;
  double max_aspect = 1.0;
  double inner_band = 0.4;  // normalized radius splitting planes 0 / 1
  double outer_band = 0.7;  // normalized radius splitting planes 1 / 2
};

// Clears every foreground pixel outside the largest 4-connected component of
// the union, so thin tips of a rasterized shape cannot form separate islands.
inline void keep_largest_component(Tensor<float>& mask) {
  const std::size_t planes = mask.dim(0), h = mask.dim(1), w = mask.dim(2), n = h * w;
  std::vector<int> label(n, 0);
  auto on = [&](std::size_t i) {
    for (std::size_t p = 0; p < planes; ++p)
      if (mask[p * n + i] > 0.5f) return true;
    return false;
  };
  int next = 0, best = 0;
  std::size_t best_size = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] || !on(s)) continue;
    label[s] = ++next;
    std::size_t size = 0;
    stack.assign(1, s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t y = i / w, x = i % w;
      auto visit = [&](std::size_t j) {
        if (!label[j] && on(j)) {
          label[j] = next;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
    if (size > best_size) {
      best_size = size;
      best = next;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (label[i] != best)
      for (std::size_t p = 0; p < planes; ++p) mask[p * n + i] = 0.0f;
}

/// mask [3,H,W]: one binary plane per sub-region, nested from the core out.
inline Tensor<float> sample_mask(std::uint64_t seed, std::size_t h, std::size_t w,
                                 ShapeFamily family = ShapeFamily::kEllipse,
                                 const MaskBounds& bounds = {}) {
  if (h < kMinImageSize || w < kMinImageSize) {
    throw DataError("sample_mask: image " + std::to_string(h) + "x" + std::to_string(w) +
                    " below minimum " + std::to_string(kMinImageSize));
  }
  nn::Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double frac = bounds.min_area + (bounds.max_area - bounds.min_area) * unit(rng);
  const double aspect = bounds.min_aspect + (bounds.max_aspect - bounds.min_aspect) * unit(rng);
  const double theta = std::numbers::pi * unit(rng);
  const double area = frac * static_cast<double>(h * w);
  // Area of the unit shape with semi-axes (1, aspect).
  double unit_area = std::numbers::pi * aspect;
  if (family == ShapeFamily::kRectangle) unit_area = 4 * aspect;
  if (family == ShapeFamily::kDiamond) unit_area = 2 * aspect;
  const double a = std::sqrt(area / unit_area), b = a * aspect;
  const double reach = family == ShapeFamily::kRectangle ? std::hypot(a, b) : a;
  auto place = [&](std::size_t extent) {
    const double lo = reach + 1, hi = static_cast<double>(extent) - reach - 1;
    return lo < hi ? lo + (hi - lo) * unit(rng) : static_cast<double>(extent) / 2;
  };
  const double cy = place(h), cx = place(w);
  const double c = std::cos(theta), s = std::sin(theta);

  Tensor<float> mask(Shape{kLabelPlanes, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
      double r = std::hypot(u, v);
      if (family == ShapeFamily::kRectangle) r = std::max(std::abs(u), std::abs(v));
      if (family == ShapeFamily::kDiamond) r = std::abs(u) + std::abs(v);
      if (r >= 1.0) continue;
      const std::size_t plane = r < bounds.inner_band ? 0 : (r < bounds.outer_band ? 1 : 2);
      mask[(plane * h + y) * w + x] = 1.0f;
    }
  }
  keep_largest_component(mask);
  return mask;
}

/// Union of the label planes as a [1,H,W] binary map.
inline Tensor<float> whole_tumor(const Tensor<float>& mask) {
  const std::size_t h = mask.dim(1), w = mask.dim(2), plane = h * w;
  Tensor<float> out(Shape{1, h, w});
  for (std::size_t p = 0; p < mask.dim(0); ++p)
    for (std::size_t i = 0; i < plane; ++i) out[i] = std::max(out[i], mask[p * plane + i]);
  return out;
}

struct ModalityStyle {
  std::array<float, 3> tumor;     // intensity per label plane
  float background_gain = 1;      // scales the shared background field
  std::vector<float> distractors;  // intensity per distractor type
};

/// Per-center acquisition differences: a signed power curve
/// v -> sign(v)|v|^gamma followed by an affine map.
struct CenterShift {
  float contrast = 1;
  float brightness = 0;
  float gamma = 1;
};

struct RenderSpec {
  std::map<std::string, ModalityStyle> modalities;
  float background = -0.5f;
  float noise_sigma = 0.05f;
  std::size_t bumps = 3;
  float bump_amplitude = 0.3f;
  // Non-tumor disks touching the tumor boundary, one optional disk per type.
  float distractor_prob = 0.75f;
  float distractor_radius_min = 0.06f;  // fraction of the shorter image side
  float distractor_radius_max = 0.12f;
  std::vector<CenterShift> centers;

  std::size_t distractor_types() const {
    return modalities.empty() ? 0 : modalities.begin()->second.distractors.size();
  }

  void validate() const {
    if (modalities.empty()) throw DataError("render spec has no modalities");
    if (centers.empty()) throw DataError("render spec has no centers");
    if (noise_sigma < 0) throw DataError("noise sigma must be non-negative");
    for (const auto& [m, style] : modalities) {
      if (style.distractors.size() != distractor_types()) {
        throw DataError("modality '" + m + "' lists a different number of distractor types");
      }
    }
    if (distractor_prob < 0 || distractor_prob > 1 || distractor_radius_min <= 0 ||
        distractor_radius_max < distractor_radius_min) {
      throw DataError("bad distractor settings");
    }
    for (auto i = modalities.begin(); i != modalities.end(); ++i) {
      for (auto j = std::next(i); j != modalities.end(); ++j) {
        float dist = 0;
        for (std::size_t k = 0; k < 3; ++k)
          dist = std::max(dist, std::abs(i->second.tumor[k] - j->second.tumor[k]));
        if (dist <= 3 * noise_sigma) {
          throw DataError("modalities '" + i->first + "' and '" + j->first +
                          "' are not separable above noise");
        }
      }
    }
  }
};

/// Three modalities and three centers with distinct scanner-like shifts. The
/// outer label plane, which sets the whole-tumor boundary, is faint in m1.
inline RenderSpec default_render_spec() {
  RenderSpec s;
  s.modalities = {{"m1", {{-0.1f, 0.6f, -0.4f}, 1.0f, {}}},
                  {"m2", {{0.5f, 0.1f, 0.2f}, -0.6f, {}}},
                  {"m3", {{-0.2f, 0.3f, 0.65f}, 0.8f, {}}}};
  s.centers = {{1.0f, 0.0f}, {0.8f, 0.15f}, {1.15f, -0.1f}};
  return s;
}

/// Single-modality style used by the pretraining corpora.
inline RenderSpec pretrain_render_spec() {
  RenderSpec s;
  s.modalities = {{"p0", {{0.3f, -0.1f, 0.4f}, 0.5f, {}}}};
  s.centers = {{1.0f, 0.0f}};
  return s;
}

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

/// image [1,H,W] in [-1,1]. The background field depends only on the case
/// seed; noise depends on the seed and the modality.
struct Disk {
  double y, x, r;
  std::size_t type;
};

/// Distractor geometry for one case, shared by all its modalities: each
/// type is present with distractor_prob, centred on a random whole-tumor
/// boundary pixel so that it extends the apparent tumor outline.
inline std::vector<Disk> distractor_disks(const Tensor<float>& mask, std::uint64_t seed, const RenderSpec& spec) {
  const std::size_t types = spec.distractor_types();
  if (types == 0) return {};
  const Tensor<float> wt = whole_tumor(mask);
  const std::size_t h = wt.dim(1), w = wt.dim(2);
  std::vector<std::pair<std::size_t, std::size_t>> edge;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (wt[y * w + x] <= 0.5f) continue;
      const bool inner = y > 0 && x > 0 && y + 1 < h && x + 1 < w && wt[(y - 1) * w + x] > 0.5f &&
                         wt[(y + 1) * w + x] > 0.5f && wt[y * w + x - 1] > 0.5f && wt[y * w + x + 1] > 0.5f;
      if (!inner) edge.emplace_back(y, x);
    }
  }
  std::vector<Disk> out;
  if (edge.empty()) return out;
  nn::Rng rng(nn::derive_seed(seed, 3));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double side = static_cast<double>(std::min(h, w));
  for (std::size_t t = 0; t < types; ++t) {
    const bool present = unit(rng) < spec.distractor_prob;
    const auto& at = edge[std::min(edge.size() - 1, static_cast<std::size_t>(unit(rng) * edge.size()))];
    const double r = side * (spec.distractor_radius_min +
                             (spec.distractor_radius_max - spec.distractor_radius_min) * unit(rng));
    if (present) out.push_back({at.first + 0.5, at.second + 0.5, r, t});
  }
  return out;
}

inline Tensor<float> render_modality(const Tensor<float>& mask, const std::string& modality,
                                     std::size_t center, std::uint64_t seed,
                                     const RenderSpec& spec) {
  auto style_it = spec.modalities.find(modality);
  if (style_it == spec.modalities.end()) throw DataError("unknown modality '" + modality + "'");
  if (center >= spec.centers.size()) throw DataError("unknown center " + std::to_string(center));
  if (mask.rank() != 3 || mask.dim(0) != kLabelPlanes) {
    throw DataError("render_modality: expected a [3,H,W] mask, got " + nn::shape_str(mask.shape()));
  }
  const ModalityStyle& style = style_it->second;
  if (style.distractors.size() != spec.distractor_types()) {
    throw DataError("modality '" + modality + "' lists a different number of distractor types");
  }
  const CenterShift& shift = spec.centers[center];
  const std::size_t h = mask.dim(1), w = mask.dim(2), plane = h * w;

  struct Bump {
    double y, x, inv2s2, amp;
  };
  std::vector<Bump> bumps;
  {
    nn::Rng rng(nn::derive_seed(seed, 1));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < spec.bumps; ++i) {
      const double sigma = (0.1 + 0.2 * unit(rng)) * static_cast<double>(std::min(h, w));
      bumps.push_back({unit(rng) * h, unit(rng) * w, 1.0 / (2 * sigma * sigma),
                       spec.bump_amplitude * (2 * unit(rng) - 1)});
    }
  }
  const auto disks = distractor_disks(mask, seed, spec);
  nn::Rng noise_rng(nn::derive_seed(seed, 2 + name_hash(modality)));
  std::normal_distribution<float> noise(0.0f, 1.0f);

  Tensor<float> img(Shape{1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      double v = spec.background;
      for (const auto& b : bumps) {
        const double dy = y + 0.5 - b.y, dx = x + 0.5 - b.x;
        v += style.background_gain * b.amp * std::exp(-(dx * dx + dy * dy) * b.inv2s2);
      }
      for (const auto& d : disks) {
        const double dy = y + 0.5 - d.y, dx = x + 0.5 - d.x;
        if (dx * dx + dy * dy < d.r * d.r) v = style.distractors[d.type];
      }
      for (std::size_t p = 0; p < kLabelPlanes; ++p) {
        if (mask[p * plane + i] > 0.5f) v = style.tumor[p];
      }
      float out = static_cast<float>(v);
      if (spec.noise_sigma > 0) out += spec.noise_sigma * noise(noise_rng);
      if (shift.gamma != 1) out = std::copysign(std::pow(std::abs(out), shift.gamma), out);
      out = shift.contrast * out + shift.brightness;
      img[i] = std::clamp(out, -1.0f, 1.0f);
    }
  }
  return img;
}

struct Case {
  std::string id;
  std::uint64_t seed = 0;
  Tensor<float> mask;                              // [3,H,W]
  std::map<std::string, Tensor<float>> images;     // modality -> [1,H,W]
  std::map<std::string, bool> synthetic;           // modality -> generated by the bank
  std::size_t center = 0;
  bool test = false;
};

/// One data center's private shard.
struct CenterDataset {
  std::string id;
  std::size_t index = 0;
  std::set<std::string> modalities;
  std::vector<Case> cases;

  std::size_t case_count() const { return cases.size(); }
};

inline std::vector<Case> sample_cases(std::size_t n, std::uint64_t master_seed, std::size_t h,
                                      std::size_t w, ShapeFamily family = ShapeFamily::kEllipse,
                                      const std::string& id_prefix = "case") {
  std::vector<Case> cases(n);
  for (std::size_t i = 0; i < n; ++i) {
    Case& c = cases[i];
    const std::string num = std::to_string(i);
    c.id = id_prefix + std::string(num.size() < 4 ? 4 - num.size() : 0, '0') + num;
    c.seed = nn::derive_seed(master_seed, i);
    c.mask = sample_mask(nn::derive_seed(c.seed, 0), h, w, family);
  }
  return cases;
}

/// Largest-remainder apportionment of total over integer weights.
inline std::vector<std::size_t> proportional_counts(std::size_t total,
                                                    const std::vector<std::size_t>& weights) {
  std::size_t wsum = 0;
  for (auto w : weights) wsum += w;
  if (weights.empty() || wsum == 0) throw DataError("proportional_counts: empty weights");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, index)
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out[i] = total * weights[i] / wsum;
    assigned += out[i];
    rem.push_back({total * weights[i] % wsum, i});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[rem[k % rem.size()].second];
  return out;
}

inline const std::vector<std::size_t>& default_center_weights() {
  static const std::vector<std::size_t> w{88, 102, 20};
  return w;
}

inline std::string center_name(std::size_t i) { return "center" + std::to_string(i + 1); }

/// Splits cases into contiguous per-center blocks and renders every modality
/// of the spec with that center's shift.
inline std::vector<CenterDataset> split_centers(
    std::vector<Case> cases, const RenderSpec& spec,
    const std::vector<std::size_t>& weights = default_center_weights()) {
  if (cases.size() < 10) {
    throw DataError("split_centers: need at least 10 cases, got " + std::to_string(cases.size()));
  }
  if (weights.size() != spec.centers.size()) {
    throw DataError("split_centers: " + std::to_string(weights.size()) + " weights for " +
                    std::to_string(spec.centers.size()) + " centers");
  }
  spec.validate();
  const auto counts = proportional_counts(cases.size(), weights);
  std::vector<CenterDataset> centers(counts.size());
  std::size_t next = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    CenterDataset& c = centers[k];
    c.id = center_name(k);
    c.index = k;
    for (const auto& [m, _] : spec.modalities) c.modalities.insert(m);
    for (std::size_t i = 0; i < counts[k]; ++i) {
      Case cs = std::move(cases[next++]);
      cs.center = k;
      for (const auto& m : c.modalities) {
        cs.images[m] = render_modality(cs.mask, m, k, cs.seed, spec);
        cs.synthetic[m] = false;
      }
      c.cases.push_back(std::move(cs));
    }
  }
  return centers;
}

struct Holdout {
  std::vector<CenterDataset> train;
  std::vector<Case> test;
};

/// Moves the trailing test_weight/(train_weight+test_weight) share of cases
/// out of the centers, apportioned by center size.
inline Holdout split_train_test(std::vector<CenterDataset> centers, std::size_t train_weight = 170,
                                std::size_t test_weight = 40) {
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& c : centers) {
    total += c.case_count();
    sizes.push_back(c.case_count());
  }
  const std::size_t n_test =
      (total * test_weight + (train_weight + test_weight) / 2) / (train_weight + test_weight);
  const auto per_center = proportional_counts(n_test, sizes);
  Holdout out;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    auto& cs = centers[k].cases;
    if (per_center[k] >= cs.size()) throw DataError("holdout leaves " + centers[k].id + " empty");
    for (std::size_t i = cs.size() - per_center[k]; i < cs.size(); ++i) {
      cs[i].test = true;
      out.test.push_back(std::move(cs[i]));
    }
    cs.resize(cs.size() - per_center[k]);
  }
  out.train = std::move(centers);
  return out;
}

inline void drop_modality(CenterDataset& center, const std::string& modality) {
  if (!center.modalities.count(modality)) {
    throw DataError(center.id + " has no modality '" + modality + "' to drop");
  }
  if (center.modalities.size() == 1) {
    throw DataError("dropping '" + modality + "' would leave " + center.id + " with no modality");
  }
  center.modalities.erase(modality);
  for (auto& c : center.cases) {
    c.images.erase(modality);
    c.synthetic.erase(modality);
  }
}

/// Rendered single-modality corpus for base-generator pretraining. Corpus
/// "A" uses rectangular blobs, "B" diamond-shaped ones; both differ from
/// the elliptical family of the center data.
inline std::vector<Case> pretrain_corpus(const std::string& corpus, std::size_t n,
                                         std::uint64_t seed, std::size_t h, std::size_t w) {
  ShapeFamily family;
  if (corpus == "A") {
    family = ShapeFamily::kRectangle;
  } else if (corpus == "B") {
    family = ShapeFamily::kDiamond;
  } else {
    throw DataError("unknown pretraining corpus '" + corpus + "'");
  }
  const RenderSpec spec = pretrain_render_spec();
  auto cases = sample_cases(n, nn::derive_seed(seed, name_hash("corpus" + corpus)), h, w, family,
                            "pre" + corpus);
  for (auto& c : cases) {
    c.images["p0"] = render_modality(c.mask, "p0", 0, c.seed, spec);
    c.synthetic["p0"] = false;
  }
  return cases;
}

inline void hash_case(io::Sha256& h, const Case& c) {
  io::ByteWriter w;
  w.str(c.id);
  w.tensor(c.mask);
  for (const auto& [m, img] : c.images) {
    w.str(m);
    w.tensor(img);
  }
  h.update(w.bytes());
}

inline std::string dataset_digest(const std::vector<CenterDataset>& centers,
                                  const std::vector<Case>& test = {}) {
  io::Sha256 h;
  for (const auto& c : centers) {
    h.update(c.id);
    for (const auto& cs : c.cases) hash_case(h, cs);
  }
  h.update("test");
  for (const auto& cs : test) hash_case(h, cs);
  return io::to_hex(h.finish());
}

/// One directory per center with a container per case, plus manifest.json.
inline void export_dataset(const std::filesystem::path& dir, const std::vector<CenterDataset>& centers,
                           const std::vector<Case>& test) {
  nlohmann::json manifest = nlohmann::json::array();
  auto write_case = [&](const Case& c, const std::string& center_id) {
    io::Container box;
    box.architecture = "toy-case";
    box.tensors["mask"] = c.mask;
    for (const auto& [m, img] : c.images) box.tensors["image/" + m] = img;
    io::save(dir / center_id / (c.id + ".mbt"), box);
    nlohmann::json mods = nlohmann::json::object();
    for (const auto& [m, syn] : c.synthetic) mods[m] = syn ? "synthetic" : "real";
    manifest.push_back({{"case", c.id},
                        {"seed", c.seed},
                        {"center", center_id},
                        {"split", c.test ? "test" : "train"},
                        {"modalities", mods}});
  };
  for (const auto& c : centers)
    for (const auto& cs : c.cases) write_case(cs, c.id);
  for (const auto& cs : test) write_case(cs, center_name(cs.center));
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reads back a directory written by export_dataset.
inline Holdout import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing " + (dir / "manifest.json").string());
  Holdout out;
  std::map<std::string, std::size_t> slot;
  try {
    const nlohmann::json manifest = nlohmann::json::parse(in);
    for (const auto& e : manifest) {
      Case c;
      c.id = e.at("case").get<std::string>();
      c.seed = e.at("seed").get<std::uint64_t>();
      const auto center_id = e.at("center").get<std::string>();
      c.test = e.at("split").get<std::string>() == "test";
      const io::Container box = io::load(dir / center_id / (c.id + ".mbt"), std::string("toy-case"));
      c.mask = box.at("mask");
      for (const auto& [m, tag] : e.at("modalities").items()) {
        c.images[m] = box.at("image/" + m);
        c.synthetic[m] = tag.get<std::string>() == "synthetic";
      }
      auto it = slot.find(center_id);
      if (it == slot.end()) {
        it = slot.emplace(center_id, slot.size()).first;
        CenterDataset d;
        d.id = center_id;
        d.index = it->second;
        out.train.push_back(std::move(d));
      }
      c.center = it->second;
      CenterDataset& d = out.train[it->second];
      if (c.test) {
        out.test.push_back(std::move(c));
      } else {
        if (d.cases.empty()) {
          for (const auto& [m, _] : c.images) d.modalities.insert(m);
        }
        d.cases.push_back(std::move(c));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
  return out;
}

}  // namespace mbank::data
