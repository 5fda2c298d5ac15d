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

#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/io/bytes.hpp"
#include "mbank/nn/tensor.hpp"

// Messages exchanged between the generator node and the data centers, and
// their framed binary encoding.
//
//   frame   = u8 version | u32 big-endian payload length | payload
//   payload = u8 kind | u64 round id | u32 field count | fields
//   field   = str name | u8 type | value
//
// Fields are self-describing; integers and floats are little-endian, tensors
// carry an explicit shape prefix (see io::ByteWriter::tensor).
namespace mbank::federation {

using nn::Tensor;
using Frame = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 5;
inline constexpr std::size_t kDefaultMaxFrameBytes = 64u << 20;

/// A center's request: masks to synthesize for, and the modalities it holds.
struct MaskBatchRequest {
  std::string center_id;
  Tensor<float> masks;  // [N,L,H,W]
  std::vector<std::string> modalities;

  friend bool operator==(const MaskBatchRequest&, const MaskBatchRequest&) = default;
};

struct SyntheticBatch {
  Tensor<float> masks;                          // echo of the request
  std::map<std::string, Tensor<float>> images;  // modality -> [N,1,H,W]

  friend bool operator==(const SyntheticBatch&, const SyntheticBatch&) = default;
};

/// Per-modality losses and loss gradients with respect to the synthetic
/// images; never pixel data.
struct FeedbackBatch {
  std::string center_id;
  std::map<std::string, float> g_losses;
  std::map<std::string, float> d_losses;
  std::map<std::string, Tensor<float>> gradients;  // modality -> [N,1,H,W]
  std::uint64_t batch_size = 0;
  std::uint64_t case_count = 0;  // size of the center's training shard

  friend bool operator==(const FeedbackBatch&, const FeedbackBatch&) = default;
};

enum class ControlOp : std::uint8_t { kRegister = 1, kSync = 2, kShutdown = 3 };

struct Control {
  ControlOp op = ControlOp::kSync;
  std::string center_id;

  friend bool operator==(const Control&, const Control&) = default;
};

using MessageBody = std::variant<MaskBatchRequest, SyntheticBatch, FeedbackBatch, Control>;

struct WireMessage {
  std::uint8_t version = kProtocolVersion;
  std::uint64_t round_id = 0;
  MessageBody body;

  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

enum class MessageKind : std::uint8_t {
  kMaskBatchRequest = 1,
  kSyntheticBatch = 2,
  kFeedbackBatch = 3,
  kControl = 4,
};

inline MessageKind kind_of(const WireMessage& m) {
  return static_cast<MessageKind>(m.body.index() + 1);
}

inline const char* kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::kMaskBatchRequest: return "MaskBatchRequest";
    case MessageKind::kSyntheticBatch: return "SyntheticBatch";
    case MessageKind::kFeedbackBatch: return "FeedbackBatch";
    case MessageKind::kControl: return "Control";
  }
  return "unknown";
}

template <typename T>
const T& body_as(const WireMessage& m, const char* context) {
  if (!std::holds_alternative<T>(m.body)) {
    throw ProtocolError(std::string(context) + ": unexpected " + kind_name(kind_of(m)) + " message");
  }
  return std::get<T>(m.body);
}

namespace detail {

enum class FieldType : std::uint8_t { kU64 = 1, kStr = 2, kTensor = 3, kF32 = 4, kStrList = 5 };

using FieldValue = std::variant<std::uint64_t, std::string, Tensor<float>, float, std::vector<std::string>>;

class FieldWriter {
 public:
  void u64(const std::string& name, std::uint64_t v) { put(name, FieldType::kU64).u64(v); }
  void str(const std::string& name, const std::string& v) { put(name, FieldType::kStr).str(v); }
  void f32(const std::string& name, float v) { put(name, FieldType::kF32).f32(v); }
  void tensor(const std::string& name, const Tensor<float>& v) { put(name, FieldType::kTensor).tensor(v); }
  void str_list(const std::string& name, const std::vector<std::string>& v) {
    auto& w = put(name, FieldType::kStrList);
    w.u32(static_cast<std::uint32_t>(v.size()));
    for (const auto& s : v) w.str(s);
  }

  std::vector<std::uint8_t> finish(MessageKind kind, std::uint64_t round_id) {
    io::ByteWriter head;
    head.u8(static_cast<std::uint8_t>(kind));
    head.u64(round_id);
    head.u32(count_);
    auto out = head.take();
    const auto& b = body_.bytes();
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

 private:
  io::ByteWriter& put(const std::string& name, FieldType t) {
    ++count_;
    body_.str(name);
    body_.u8(static_cast<std::uint8_t>(t));
    return body_;
  }

  io::ByteWriter body_;
  std::uint32_t count_ = 0;
};

class Fields {
 public:
  std::map<std::string, FieldValue> values;

  template <typename V>
  const V& get(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ProtocolError("missing field '" + name + "'");
    if (!std::holds_alternative<V>(it->second)) throw ProtocolError("field '" + name + "' has the wrong type");
    return std::get<V>(it->second);
  }

  /// Fields named prefix + key, keyed by key.
  template <typename V>
  std::map<std::string, V> with_prefix(const std::string& prefix) const {
    std::map<std::string, V> out;
    for (const auto& [k, v] : values) {
      if (k.compare(0, prefix.size(), prefix) != 0) continue;
      if (!std::holds_alternative<V>(v)) throw ProtocolError("field '" + k + "' has the wrong type");
      out.emplace(k.substr(prefix.size()), std::get<V>(v));
    }
    return out;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_payload(const WireMessage& m) {
  detail::FieldWriter w;
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, MaskBatchRequest>) {
          w.str("center_id", b.center_id);
          w.tensor("masks", b.masks);
          w.str_list("modalities", b.modalities);
        } else if constexpr (std::is_same_v<B, SyntheticBatch>) {
          w.tensor("masks", b.masks);
          for (const auto& [k, v] : b.images) w.tensor("image/" + k, v);
        } else if constexpr (std::is_same_v<B, FeedbackBatch>) {
          w.str("center_id", b.center_id);
          for (const auto& [k, v] : b.g_losses) w.f32("g_loss/" + k, v);
          for (const auto& [k, v] : b.d_losses) w.f32("d_loss/" + k, v);
          for (const auto& [k, v] : b.gradients) w.tensor("grad/" + k, v);
          w.u64("batch_size", b.batch_size);
          w.u64("case_count", b.case_count);
        } else {
          w.u64("op", static_cast<std::uint64_t>(b.op));
          w.str("center_id", b.center_id);
        }
      },
      m.body);
  return w.finish(kind_of(m), m.round_id);
}

/// Decodes a payload; the version comes from the enclosing frame.
inline WireMessage decode_payload(const std::uint8_t* data, std::size_t size,
                                  std::uint8_t version = kProtocolVersion) {
  io::ByteReader<ProtocolError> r(data, size);
  const std::uint8_t kind = r.u8();
  WireMessage m;
  m.version = version;
  m.round_id = r.u64();
  const std::uint32_t count = r.u32();
  detail::Fields f;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto type = static_cast<detail::FieldType>(r.u8());
    detail::FieldValue v;
    switch (type) {
      case detail::FieldType::kU64: v = r.u64(); break;
      case detail::FieldType::kStr: v = r.str(); break;
      case detail::FieldType::kTensor: v = r.tensor(); break;
      case detail::FieldType::kF32: v = r.f32(); break;
      case detail::FieldType::kStrList: {
        const std::uint32_t n = r.u32();
        if (n > r.remaining()) throw ProtocolError("string list longer than payload");
        std::vector<std::string> list;
        for (std::uint32_t k = 0; k < n; ++k) list.push_back(r.str());
        v = std::move(list);
        break;
      }
      default: throw ProtocolError("unknown field type " + std::to_string(static_cast<int>(type)));
    }
    if (!f.values.emplace(std::move(name), std::move(v)).second) throw ProtocolError("duplicate field");
  }
  r.expect_end();

  switch (static_cast<MessageKind>(kind)) {
    case MessageKind::kMaskBatchRequest:
      m.body = MaskBatchRequest{f.get<std::string>("center_id"), f.get<Tensor<float>>("masks"),
                                f.get<std::vector<std::string>>("modalities")};
      break;
    case MessageKind::kSyntheticBatch:
      m.body = SyntheticBatch{f.get<Tensor<float>>("masks"), f.with_prefix<Tensor<float>>("image/")};
      break;
    case MessageKind::kFeedbackBatch:
      m.body = FeedbackBatch{f.get<std::string>("center_id"), f.with_prefix<float>("g_loss/"),
                             f.with_prefix<float>("d_loss/"), f.with_prefix<Tensor<float>>("grad/"),
                             f.get<std::uint64_t>("batch_size"), f.get<std::uint64_t>("case_count")};
      break;
    case MessageKind::kControl: {
      const std::uint64_t op = f.get<std::uint64_t>("op");
      if (op < 1 || op > 3) throw ProtocolError("unknown control op " + std::to_string(op));
      m.body = Control{static_cast<ControlOp>(op), f.get<std::string>("center_id")};
      break;
    }
    default: throw ProtocolError("unknown message kind " + std::to_string(kind));
  }
  return m;
}

inline WireMessage decode_payload(const std::vector<std::uint8_t>& payload) {
  return decode_payload(payload.data(), payload.size());
}

inline std::vector<std::uint8_t> encode_frame(const WireMessage& m,
                                              std::size_t max_bytes = kDefaultMaxFrameBytes) {
  const auto payload = encode_payload(m);
  if (payload.size() > max_bytes) {
    throw ProtocolError("payload of " + std::to_string(payload.size()) + " bytes exceeds limit " +
                        std::to_string(max_bytes));
  }
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderBytes + payload.size());
  out.push_back(m.version);
  const auto n = static_cast<std::uint32_t>(payload.size());
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(n >> s));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

/// Parses a frame header, validating version and length limit.
inline std::uint32_t frame_payload_length(const std::uint8_t* header, std::size_t max_bytes) {
  if (header[0] != kProtocolVersion) {
    throw ProtocolError("protocol version " + std::to_string(header[0]) + " unsupported (expected " +
                        std::to_string(kProtocolVersion) + ")");
  }
  std::uint32_t n = 0;
  for (int i = 1; i <= 4; ++i) n = (n << 8) | header[i];
  if (n > max_bytes) {
    throw ProtocolError("frame length " + std::to_string(n) + " exceeds limit " + std::to_string(max_bytes));
  }
  return n;
}

inline WireMessage decode_frame(const std::vector<std::uint8_t>& frame,
                                std::size_t max_bytes = kDefaultMaxFrameBytes) {
  if (frame.size() < kFrameHeaderBytes) throw ProtocolError("truncated frame header");
  const std::uint32_t n = frame_payload_length(frame.data(), max_bytes);
  if (frame.size() != kFrameHeaderBytes + n) {
    throw ProtocolError("frame holds " + std::to_string(frame.size() - kFrameHeaderBytes) +
                        " payload bytes, header says " + std::to_string(n));
  }
  return decode_payload(frame.data() + kFrameHeaderBytes, n, frame[0]);
}

}  // namespace mbank::federation
