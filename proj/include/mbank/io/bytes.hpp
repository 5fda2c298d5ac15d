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

#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "mbank/nn/tensor.hpp"

// Little-endian byte encoding shared by the checkpoint container and the
// wire codec. Tensors are written as u32 rank, u64 extents, then f32 values.
namespace mbank::io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const std::uint8_t* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }

  // A rank-0 entry stands for the default (empty) tensor.
  void tensor(const nn::Tensor<float>& t) {
    if (t.rank() == 0) {
      u32(0);
      return;
    }
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    if constexpr (std::endian::native == std::endian::little) {
      raw(reinterpret_cast<const std::uint8_t*>(t.ptr()), t.size() * 4);
    } else {
      for (float v : t.data()) f32(v);
    }
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; every overrun throws Err instead of reading past
/// the buffer.
template <typename Err>
class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), n_(size) {}

  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{p_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{p_[pos_++]} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }

  nn::Tensor<float> tensor() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw Err("tensor rank " + std::to_string(rank) + " exceeds limit");
    if (rank == 0) return {};
    nn::Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      const std::uint64_t v = u64();
      if (v != 0 && count > remaining() / v) throw Err("tensor extent overruns buffer");
      count *= v;
      d = static_cast<std::size_t>(v);
    }
    if (count > remaining() / 4) throw Err("tensor data overruns buffer");
    nn::Tensor<float> t(shape);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(t.ptr(), p_ + pos_, t.size() * 4);
      pos_ += t.size() * 4;
    } else {
      for (auto& v : t.data()) v = f32();
    }
    return t;
  }

  std::size_t remaining() const { return n_ - pos_; }
  std::size_t position() const { return pos_; }
  void expect_end() const {
    if (pos_ != n_) throw Err(std::to_string(n_ - pos_) + " trailing bytes");
  }

 private:
  void need(std::size_t k) const {
    if (k > n_ - pos_) throw Err("truncated input: need " + std::to_string(k) + " bytes, have " +
                                 std::to_string(n_ - pos_));
  }

  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace mbank::io
