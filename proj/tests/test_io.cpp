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

#include <filesystem>

#include "mbank/io/container.hpp"
#include "mbank/nn/init.hpp"

namespace {

using mbank::io::Container;
using mbank::nn::Shape;
using mbank::nn::Tensor;

Container sample_container() {
  mbank::nn::Rng rng(1);
  Container c;
  c.architecture = "generator(test)";
  c.tensors["base/a/weight"] = mbank::nn::normal_tensor<float>(Shape{4, 3, 3, 3}, 1.0, rng);
  c.tensors["base/a/bias"] = Tensor<float>(Shape{4});
  c.tensors["bank/m1/a/gamma"] = mbank::nn::normal_tensor<float>(Shape{4, 3}, 1.0, rng);
  c.tensors["empty"] = Tensor<float>(Shape{0});
  return c;
}

TEST(Sha256, KnownVector) {
  const std::string abc = "abc";
  EXPECT_EQ(mbank::io::sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Container, RoundTrip) {
  const Container c = sample_container();
  const Container back = mbank::io::decode(mbank::io::encode(c));
  EXPECT_EQ(back.architecture, c.architecture);
  EXPECT_EQ(back.tensors, c.tensors);
  EXPECT_EQ(mbank::io::content_digest(back), mbank::io::content_digest(c));
}

TEST(Container, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mbank_test_io";
  std::filesystem::remove_all(dir);
  const Container c = sample_container();
  mbank::io::save(dir / "x.ckpt", c);
  EXPECT_EQ(mbank::io::load(dir / "x.ckpt", c.architecture).tensors, c.tensors);
  EXPECT_THROW(mbank::io::load(dir / "x.ckpt", std::string("other")), mbank::IoError);
  EXPECT_THROW(mbank::io::load(dir / "missing.ckpt"), mbank::IoError);
  std::filesystem::remove_all(dir);
}

TEST(Container, DetectsCorruption) {
  auto bytes = mbank::io::encode(sample_container());
  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  EXPECT_THROW(mbank::io::decode(flipped), mbank::IoError);
  for (std::size_t cut : {0ul, 3ul, 10ul, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(mbank::io::decode(t), mbank::IoError) << cut;
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(mbank::io::decode(bad_magic), mbank::IoError);
}

TEST(Container, Sections) {
  const Container c = sample_container();
  auto base = c.section("base/");
  EXPECT_EQ(base.size(), 2u);
  EXPECT_TRUE(base.count("a/weight"));
  EXPECT_THROW(c.at("nope"), mbank::IoError);
}

}  // namespace
