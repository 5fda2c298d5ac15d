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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/io/bytes.hpp"
#include "mbank/io/sha256.hpp"
#include "mbank/nn/tensor.hpp"

// Named-tensor container used for checkpoints and dataset exports.
//
//   "MBCK" | u32 version | str architecture | 32-byte SHA-256 of body |
//   u64 body length | body
//   body = u32 count, then per entry: str name, tensor
namespace mbank::io {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'M', 'B', 'C', 'K'};

struct Container {
  std::string architecture;
  std::map<std::string, nn::Tensor<float>> tensors;

  void put(const std::string& prefix, const std::map<std::string, nn::Tensor<float>>& named) {
    for (const auto& [k, v] : named) tensors[prefix + k] = v;
  }

  /// Entries under a name prefix, with the prefix stripped.
  std::map<std::string, nn::Tensor<float>> section(const std::string& prefix) const {
    std::map<std::string, nn::Tensor<float>> out;
    for (auto it = tensors.lower_bound(prefix); it != tensors.end(); ++it) {
      if (it->first.compare(0, prefix.size(), prefix) != 0) break;
      out.emplace(it->first.substr(prefix.size()), it->second);
    }
    return out;
  }

  const nn::Tensor<float>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("container has no entry '" + name + "'");
    return it->second;
  }
};

inline std::vector<std::uint8_t> encode_body(const Container& c) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.tensor(t);
  }
  return w.take();
}

inline std::string content_digest(const Container& c) { return sha256_hex(encode_body(c)); }

inline std::vector<std::uint8_t> encode(const Container& c) {
  const auto body = encode_body(c);
  ByteWriter w;
  w.raw(reinterpret_cast<const std::uint8_t*>(kContainerMagic), 4);
  w.u32(kContainerVersion);
  w.str(c.architecture);
  const Digest d = sha256(body);
  w.raw(d.data(), d.size());
  w.u64(body.size());
  w.raw(body.data(), body.size());
  return w.take();
}

inline Container decode(const std::vector<std::uint8_t>& bytes,
                        const std::optional<std::string>& expected_architecture = std::nullopt) {
  ByteReader<IoError> r(bytes.data(), bytes.size());
  char magic[4];
  for (char& m : magic) m = static_cast<char>(r.u8());
  if (!std::equal(magic, magic + 4, kContainerMagic)) throw IoError("not a tensor container");
  if (const auto v = r.u32(); v != kContainerVersion) {
    throw IoError("unsupported container version " + std::to_string(v));
  }
  Container c;
  c.architecture = r.str();
  if (expected_architecture && c.architecture != *expected_architecture) {
    throw IoError("architecture mismatch: container has '" + c.architecture + "', expected '" +
                  *expected_architecture + "'");
  }
  Digest stored;
  for (auto& b : stored) b = r.u8();
  const std::uint64_t len = r.u64();
  if (len != r.remaining()) throw IoError("container body length mismatch");
  const std::uint8_t* body = bytes.data() + r.position();
  if (sha256({body, static_cast<std::size_t>(len)}) != stored) {
    throw IoError("container digest mismatch");
  }
  ByteReader<IoError> b(body, static_cast<std::size_t>(len));
  const std::uint32_t count = b.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = b.str();
    c.tensors[name] = b.tensor();
  }
  b.expect_end();
  return c;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, text.data(), text.size());
}

inline void save(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode(c);
  write_file(path, bytes.data(), bytes.size());
}

inline Container load(const std::filesystem::path& path,
                      const std::optional<std::string>& expected_architecture = std::nullopt) {
  return decode(read_file(path), expected_architecture);
}

}  // namespace mbank::io
