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


#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <map>
#include <queue>

#include "mbank/data/toy.hpp"

namespace {

using namespace mbank::data;
using mbank::nn::Shape;
using mbank::nn::Tensor;

std::size_t count_on(const Tensor<float>& t) {
  std::size_t n = 0;
  for (float v : t.data()) n += v > 0.5f;
  return n;
}

// Number of 4-connected foreground components of a [1,H,W] map.
std::size_t components(const Tensor<float>& t) {
  const std::size_t h = t.dim(1), w = t.dim(2);
  std::vector<int> seen(h * w, 0);
  std::size_t n = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (t[s] < 0.5f || seen[s]) continue;
    ++n;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop();
      const std::size_t y = i / w, x = i % w;
      const std::size_t nb[4] = {y > 0 ? i - w : i, y + 1 < h ? i + w : i, x > 0 ? i - 1 : i,
                                 x + 1 < w ? i + 1 : i};
      for (std::size_t j : nb) {
        if (t[j] > 0.5f && !seen[j]) {
          seen[j] = 1;
          q.push(j);
        }
      }
    }
  }
  return n;
}

TEST(SampleMask, Deterministic) {
  EXPECT_EQ(sample_mask(7, 32, 32), sample_mask(7, 32, 32));
  EXPECT_FALSE(sample_mask(7, 32, 32) == sample_mask(8, 32, 32));
}

TEST(SampleMask, RejectsSmallImages) {
  EXPECT_THROW(sample_mask(1, 15, 32), mbank::DataError);
  EXPECT_NO_THROW(sample_mask(1, 16, 16));
}

TEST(SampleMask, PlanesPartitionOneBlob) {
  for (auto family : {ShapeFamily::kEllipse, ShapeFamily::kRectangle, ShapeFamily::kDiamond}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto m = sample_mask(seed, 32, 32, family);
      const std::size_t plane = 32 * 32;
      for (std::size_t i = 0; i < plane; ++i) {
        EXPECT_LE(m[i] + m[plane + i] + m[2 * plane + i], 1.0f);
      }
      const auto wt = whole_tumor(m);
      EXPECT_EQ(count_on(wt), count_on(m));
      EXPECT_EQ(components(wt), 1u) << "seed " << seed;
    }
  }
}

TEST(SampleMask, AreaWithinBounds) {
  for (std::size_t size : {16, 32}) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const double frac = static_cast<double>(count_on(sample_mask(seed, size, size))) / (size * size);
      EXPECT_GE(frac, 0.03) << seed;
      EXPECT_LE(frac, 0.25) << seed;
    }
  }
}

TEST(Render, NoiseFreeFlatBackgroundHitsConstants) {
  RenderSpec spec = default_render_spec();
  spec.noise_sigma = 0;
  spec.bumps = 0;
  const auto mask = sample_mask(3, 32, 32);
  const std::size_t plane = 32 * 32;
  const auto disks = distractor_disks(mask, 11, spec);
  for (const auto& [m, style] : spec.modalities) {
    const auto img = render_modality(mask, m, 0, 11, spec);
    for (std::size_t i = 0; i < plane; ++i) {
      float expect = spec.background;
      const double y = i / 32 + 0.5, x = i % 32 + 0.5;
      for (const auto& d : disks)
        if ((y - d.y) * (y - d.y) + (x - d.x) * (x - d.x) < d.r * d.r)
          expect = static_cast<float>(style.distractors[d.type]);
      for (std::size_t p = 0; p < 3; ++p)
        if (mask[p * plane + i] > 0.5f) expect = style.tumor[p];
      EXPECT_EQ(img[i], expect);
    }
  }
}

TEST(Render, DistractorsSitOnTumorBoundary) {
  RenderSpec spec = default_render_spec();
  EXPECT_EQ(spec.distractor_types(), 0u);
  for (auto& [m, style] : spec.modalities) style.distractors = {0.0f, 0.5f};
  spec.distractor_prob = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mask = sample_mask(seed, 32, 32);
    const auto wt = whole_tumor(mask);
    const auto disks = distractor_disks(mask, seed, spec);
    ASSERT_EQ(disks.size(), spec.distractor_types());
    for (const auto& d : disks) {
      const auto cy = static_cast<std::size_t>(d.y), cx = static_cast<std::size_t>(d.x);
      EXPECT_GT(wt[cy * 32 + cx], 0.5f);
      EXPECT_GE(d.r, spec.distractor_radius_min * 32 - 1e-9);
      EXPECT_LE(d.r, spec.distractor_radius_max * 32 + 1e-9);
    }
  }
  const auto mask = sample_mask(2, 32, 32);
  const auto disks = distractor_disks(mask, 2, spec);
  const auto img = render_modality(mask, "m1", 0, 2, spec);
  const auto wt = whole_tumor(mask);
  bool painted = false;
  for (std::size_t i = 0; i < wt.size(); ++i) {
    const double y = i / 32 + 0.5, x = i % 32 + 0.5, dy = y - disks[1].y, dx = x - disks[1].x;
    if (wt[i] < 0.5f && dy * dy + dx * dx < disks[1].r * disks[1].r) {
      EXPECT_NEAR(img[i], 0.5f, 4 * spec.noise_sigma);
      painted = true;
    }
  }
  EXPECT_TRUE(painted);
  spec.distractor_prob = 0;
  EXPECT_TRUE(distractor_disks(mask, 1, spec).empty());
  spec.modalities["m2"].distractors = {0.1f};
  EXPECT_THROW(spec.validate(), mbank::DataError);
  EXPECT_THROW(render_modality(mask, "m2", 0, 2, spec), mbank::DataError);
}

// Some sub-region must differ between any two modalities by more than the
// noise level, otherwise translation between them is trivial.
TEST(Render, ModalitiesSeparateAboveNoise) {
  RenderSpec spec = default_render_spec();
  spec.distractor_prob = 0;
  const auto mask = sample_mask(5, 32, 32);
  const std::size_t plane = 32 * 32;
  std::map<std::string, std::array<double, 3>> means;
  for (const auto& [m, _] : spec.modalities) {
    const auto img = render_modality(mask, m, 0, 9, spec);
    std::array<double, 3> sum{}, n{};
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t top = 3;
      for (std::size_t p = 0; p < 3; ++p)
        if (mask[p * plane + i] > 0.5f) top = p;
      if (top == 3) continue;
      sum[top] += img[i];
      n[top] += 1;
    }
    for (std::size_t p = 0; p < 3; ++p) {
      ASSERT_GT(n[p], 0);
      means[m][p] = sum[p] / n[p];
    }
  }
  for (const auto& [a, ma] : means) {
    for (const auto& [b, mb] : means) {
      if (a >= b) continue;
      double gap = 0;
      for (std::size_t p = 0; p < 3; ++p) gap = std::max(gap, std::abs(ma[p] - mb[p]));
      EXPECT_GT(gap, 3 * spec.noise_sigma) << a << " vs " << b;
    }
  }
}

TEST(Render, DeterministicAndValidated) {
  const RenderSpec spec = default_render_spec();
  const auto mask = sample_mask(5, 32, 32);
  const auto a = render_modality(mask, "m2", 1, 4, spec);
  EXPECT_EQ(a, render_modality(mask, "m2", 1, 4, spec));
  for (float v : a.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(render_modality(mask, "m9", 0, 4, spec), mbank::DataError);
  EXPECT_THROW(render_modality(mask, "m1", 3, 4, spec), mbank::DataError);
  RenderSpec close = spec;
  close.modalities["m4"] = {{-0.1f, 0.6f, -0.3f}, 1.0f, {0.0f, 0.0f}};
  EXPECT_THROW(close.validate(), mbank::DataError);
}

TEST(Split, ProportionalCounts) {
  EXPECT_EQ(proportional_counts(210, default_center_weights()), (std::vector<std::size_t>{88, 102, 20}));
  EXPECT_EQ(proportional_counts(40, {88, 102, 20}), (std::vector<std::size_t>{17, 19, 4}));
  auto c = split_centers(sample_cases(210, 1, 16, 16), default_render_spec());
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[0].case_count(), 88u);
  EXPECT_EQ(c[1].case_count(), 102u);
  EXPECT_EQ(c[2].case_count(), 20u);
  std::set<std::string> ids;
  for (const auto& center : c)
    for (const auto& cs : center.cases) ids.insert(cs.id);
  EXPECT_EQ(ids.size(), 210u);
  EXPECT_THROW(split_centers(sample_cases(9, 1, 16, 16), default_render_spec()), mbank::DataError);
}

TEST(Split, CentersAreHeterogeneous) {
  const RenderSpec spec = default_render_spec();
  auto c = split_centers(sample_cases(210, 2, 32, 32), spec);
  std::vector<double> means;
  for (const auto& center : c) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& cs : center.cases)
      for (const auto& [m, img] : cs.images) {
        for (float v : img.data()) s += v;
        n += img.size();
      }
    means.push_back(s / n);
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) EXPECT_GT(std::abs(means[i] - means[j]), spec.noise_sigma);
}

TEST(Split, HoldoutIsDisjointAndProportional) {
  auto h = split_train_test(split_centers(sample_cases(210, 3, 16, 16), default_render_spec()));
  EXPECT_EQ(h.test.size(), 40u);
  EXPECT_EQ(h.train[0].case_count() + h.train[1].case_count() + h.train[2].case_count(), 170u);
  std::set<std::string> train_ids;
  for (const auto& c : h.train)
    for (const auto& cs : c.cases) {
      EXPECT_FALSE(cs.test);
      train_ids.insert(cs.id);
    }
  for (const auto& cs : h.test) {
    EXPECT_TRUE(cs.test);
    EXPECT_FALSE(train_ids.count(cs.id));
  }
}

TEST(DropModality, RemovesExactlyOne) {
  auto c = split_centers(sample_cases(20, 4, 16, 16), default_render_spec());
  const auto mask_before = c[0].cases[0].mask;
  drop_modality(c[0], "m2");
  EXPECT_EQ(c[0].modalities, (std::set<std::string>{"m1", "m3"}));
  for (const auto& cs : c[0].cases) {
    EXPECT_EQ(cs.images.size(), 2u);
    EXPECT_FALSE(cs.images.count("m2"));
  }
  EXPECT_EQ(c[0].cases[0].mask, mask_before);
  EXPECT_THROW(drop_modality(c[0], "m2"), mbank::DataError);
  drop_modality(c[0], "m1");
  EXPECT_THROW(drop_modality(c[0], "m3"), mbank::DataError);
}

TEST(Dataset, DigestIsPureFunctionOfSeed) {
  auto make = [](std::uint64_t seed) {
    auto h = split_train_test(split_centers(sample_cases(30, seed, 16, 16), default_render_spec()));
    return dataset_digest(h.train, h.test);
  };
  EXPECT_EQ(make(5), make(5));
  EXPECT_NE(make(5), make(6));
}

TEST(Pretrain, CorporaDiffer) {
  auto a = pretrain_corpus("A", 4, 1, 32, 32), b = pretrain_corpus("B", 4, 1, 32, 32);
  EXPECT_FALSE(a[0].mask == b[0].mask);
  EXPECT_TRUE(a[0].images.count("p0"));
  EXPECT_THROW(pretrain_corpus("C", 4, 1, 32, 32), mbank::DataError);
}

TEST(Dataset, ExportWritesManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "mbank_test_export";
  std::filesystem::remove_all(dir);
  auto h = split_train_test(split_centers(sample_cases(12, 5, 16, 16), default_render_spec()));
  export_dataset(dir, h.train, h.test);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  const auto& first = h.train[0].cases[0];
  auto box = mbank::io::load(dir / "center1" / (first.id + ".mbt"));
  EXPECT_EQ(box.at("mask"), first.mask);
  EXPECT_EQ(box.at("image/m1"), first.images.at("m1"));
  std::filesystem::remove_all(dir);
}

}  // namespace
