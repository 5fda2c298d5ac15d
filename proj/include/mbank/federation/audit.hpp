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
#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "mbank/error.hpp"
#include "mbank/federation/wire.hpp"
#include "mbank/io/container.hpp"
#include "mbank/io/sha256.hpp"

// Append-only record of every frame put on the wire, checked against a
// registry of digests of the centers' real images.
namespace mbank::federation {

inline constexpr const char* kAuditLogFile = "wire_audit.jsonl";
inline constexpr const char* kRealDigestFile = "real_digests.txt";

/// SHA-256 of every trailing [H,W] plane (little-endian f32 bytes) of a
/// tensor of rank >= 2.
inline std::vector<std::string> plane_digests(const Tensor<float>& t) {
  std::vector<std::string> out;
  if (t.rank() < 2 || t.empty()) return out;
  const std::size_t plane = t.dim(t.rank() - 2) * t.dim(t.rank() - 1);
  if (plane == 0) return out;
  std::vector<std::uint8_t> bytes(plane * 4);
  for (std::size_t p = 0; p < t.size() / plane; ++p) {
    for (std::size_t i = 0; i < plane; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(t[p * plane + i]);
      for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(u >> (8 * b));
    }
    out.push_back(io::sha256_hex(bytes));
  }
  return out;
}

inline std::vector<std::string> message_digests(const WireMessage& m) {
  std::vector<const Tensor<float>*> tensors;
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, MaskBatchRequest>) {
          tensors.push_back(&b.masks);
        } else if constexpr (std::is_same_v<B, SyntheticBatch>) {
          tensors.push_back(&b.masks);
          for (const auto& [_, v] : b.images) tensors.push_back(&v);
        } else if constexpr (std::is_same_v<B, FeedbackBatch>) {
          for (const auto& [_, v] : b.gradients) tensors.push_back(&v);
        }
      },
      m.body);
  std::vector<std::string> out;
  for (const auto* t : tensors) {
    auto d = plane_digests(*t);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

struct AuditRecord {
  std::uint64_t seq = 0;
  std::uint64_t round_id = 0;
  std::string kind, from, to;
  std::size_t frame_bytes = 0;
  std::string frame_sha256;
  std::vector<std::string> content_digests;
};

struct AuditReport {
  std::size_t messages = 0;
  std::size_t violations = 0;  // messages carrying a registered real-image digest
  std::vector<std::string> details;

  bool ok() const { return violations == 0; }
};

class WireAuditLog {
 public:
  void register_real(const Tensor<float>& image) {
    std::lock_guard lock(mu_);
    for (auto& d : plane_digests(image)) real_.insert(std::move(d));
  }

  void record(const std::string& from, const std::string& to, const Frame& frame, const WireMessage& m) {
    AuditRecord r;
    r.round_id = m.round_id;
    r.kind = kind_name(kind_of(m));
    r.from = from;
    r.to = to;
    r.frame_bytes = frame.size();
    r.frame_sha256 = io::sha256_hex(frame);
    r.content_digests = message_digests(m);
    std::lock_guard lock(mu_);
    r.seq = records_.size();
    records_.push_back(std::move(r));
  }

  AuditReport check() const {
    std::lock_guard lock(mu_);
    return intersect(records_, real_);
  }

  std::vector<AuditRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  std::size_t real_count() const {
    std::lock_guard lock(mu_);
    return real_.size();
  }

  void save(const std::filesystem::path& dir) const {
    std::lock_guard lock(mu_);
    std::ostringstream log;
    for (const auto& r : records_) {
      nlohmann::json j = {{"seq", r.seq},         {"round", r.round_id},
                          {"kind", r.kind},       {"from", r.from},
                          {"to", r.to},           {"frame_bytes", r.frame_bytes},
                          {"frame_sha256", r.frame_sha256}, {"content", r.content_digests}};
      log << j.dump() << '\n';
    }
    io::write_text(dir / kAuditLogFile, log.str());
    std::ostringstream reg;
    for (const auto& d : real_) reg << d << '\n';
    io::write_text(dir / kRealDigestFile, reg.str());
  }

  /// Re-checks a saved run directory from its files alone.
  static AuditReport check_files(const std::filesystem::path& dir) {
    std::ifstream log(dir / kAuditLogFile), reg(dir / kRealDigestFile);
    if (!log) throw IoError("missing " + (dir / kAuditLogFile).string());
    if (!reg) throw IoError("missing " + (dir / kRealDigestFile).string());
    std::set<std::string> real;
    for (std::string line; std::getline(reg, line);)
      if (!line.empty()) real.insert(line);
    std::vector<AuditRecord> records;
    for (std::string line; std::getline(log, line);) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
        AuditRecord r;
        r.seq = j.at("seq").get<std::uint64_t>();
        r.round_id = j.at("round").get<std::uint64_t>();
        r.kind = j.at("kind").get<std::string>();
        r.from = j.at("from").get<std::string>();
        r.to = j.at("to").get<std::string>();
        r.content_digests = j.at("content").get<std::vector<std::string>>();
        records.push_back(std::move(r));
      } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed audit record: " + std::string(e.what()));
      }
    }
    return intersect(records, real);
  }

 private:
  static AuditReport intersect(const std::vector<AuditRecord>& records, const std::set<std::string>& real) {
    AuditReport rep;
    rep.messages = records.size();
    for (const auto& r : records) {
      for (const auto& d : r.content_digests) {
        if (real.count(d)) {
          ++rep.violations;
          rep.details.push_back("seq " + std::to_string(r.seq) + " " + r.kind + " " + r.from + "->" +
                                r.to + " round " + std::to_string(r.round_id) + " carries real image " + d);
          break;
        }
      }
    }
    return rep;
  }

  mutable std::mutex mu_;
  std::vector<AuditRecord> records_;
  std::set<std::string> real_;
};

}  // namespace mbank::federation
