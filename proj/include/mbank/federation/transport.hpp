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

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mbank/error.hpp"
#include "mbank/federation/wire.hpp"

// Frame transports between the generator node and one center: an
// in-process queue pair and a TCP loopback stream. Both move the same
// framed bytes, so payloads are identical across transports.
namespace mbank::federation {

using Millis = std::chrono::milliseconds;

class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual void send_frame(const Frame& frame) = 0;
  /// nullopt on timeout.
  virtual std::optional<Frame> recv_frame(Millis timeout) = 0;
};

namespace detail {

struct FrameQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Frame> frames;
  bool closed = false;
};

}  // namespace detail

class InprocEndpoint : public Endpoint {
 public:
  InprocEndpoint(std::shared_ptr<detail::FrameQueue> out, std::shared_ptr<detail::FrameQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~InprocEndpoint() override {
    std::lock_guard lock(out_->mu);
    out_->closed = true;
    out_->cv.notify_all();
  }

  void send_frame(const Frame& frame) override {
    std::lock_guard lock(out_->mu);
    out_->frames.push_back(frame);
    out_->cv.notify_all();
  }

  std::optional<Frame> recv_frame(Millis timeout) override {
    std::unique_lock lock(in_->mu);
    if (!in_->cv.wait_for(lock, timeout, [&] { return !in_->frames.empty() || in_->closed; })) {
      return std::nullopt;
    }
    if (in_->frames.empty()) throw ProtocolError("peer closed the in-process channel");
    Frame f = std::move(in_->frames.front());
    in_->frames.pop_front();
    return f;
  }

 private:
  std::shared_ptr<detail::FrameQueue> out_, in_;
};

inline std::pair<std::unique_ptr<Endpoint>, std::unique_ptr<Endpoint>> make_inproc_pair() {
  auto ab = std::make_shared<detail::FrameQueue>(), ba = std::make_shared<detail::FrameQueue>();
  return {std::make_unique<InprocEndpoint>(ab, ba), std::make_unique<InprocEndpoint>(ba, ab)};
}

class SocketEndpoint : public Endpoint {
 public:
  SocketEndpoint(int fd, std::size_t max_frame_bytes) : fd_(fd), max_(max_frame_bytes) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~SocketEndpoint() override {
    if (fd_ >= 0) ::close(fd_);
  }
  SocketEndpoint(const SocketEndpoint&) = delete;
  SocketEndpoint& operator=(const SocketEndpoint&) = delete;

  void send_frame(const Frame& frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t k = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (k < 0 && errno == EINTR) continue;
      if (k <= 0) throw ProtocolError(std::string("socket send failed: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(k);
    }
  }

  std::optional<Frame> recv_frame(Millis timeout) override {
    if (!wait_readable(timeout)) return std::nullopt;
    std::uint8_t header[kFrameHeaderBytes];
    read_exact(header, kFrameHeaderBytes);
    const std::uint32_t n = frame_payload_length(header, max_);
    Frame f(kFrameHeaderBytes + n);
    std::memcpy(f.data(), header, kFrameHeaderBytes);
    read_exact(f.data() + kFrameHeaderBytes, n);
    return f;
  }

 private:
  // Once a frame has started, its remainder must arrive within this bound.
  static constexpr int kFrameBodyTimeoutMs = 30000;

  bool wait_readable(Millis timeout) {
    pollfd p{fd_, POLLIN, 0};
    while (true) {
      const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
      return r > 0;
    }
  }

  void read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      if (!wait_readable(Millis(kFrameBodyTimeoutMs))) throw ProtocolError("truncated frame: peer stalled");
      const ssize_t k = ::recv(fd_, dst + got, n - got, 0);
      if (k < 0 && errno == EINTR) continue;
      if (k == 0) throw ProtocolError("peer closed the socket mid-frame");
      if (k < 0) throw ProtocolError(std::string("socket recv failed: ") + std::strerror(errno));
      got += static_cast<std::size_t>(k);
    }
  }

  int fd_;
  std::size_t max_;
};

/// Connected TCP pair over 127.0.0.1 (an ephemeral port).
inline std::pair<std::unique_ptr<Endpoint>, std::unique_ptr<Endpoint>> make_socket_pair(
    std::size_t max_frame_bytes = kDefaultMaxFrameBytes) {
  auto fail = [](const char* what, int fd) {
    const std::string msg = std::string(what) + ": " + std::strerror(errno);
    if (fd >= 0) ::close(fd);
    throw ProtocolError(msg);
  };
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) fail("socket", -1);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) fail("bind", listener);
  if (::listen(listener, 1) < 0) fail("listen", listener);
  socklen_t len = sizeof addr;
  if (::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len) < 0) fail("getsockname", listener);
  const int client = ::socket(AF_INET, SOCK_STREAM, 0);
  if (client < 0) fail("socket", listener);
  if (::connect(client, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    ::close(client);
    fail("connect", listener);
  }
  const int server = ::accept(listener, nullptr, nullptr);
  if (server < 0) {
    ::close(client);
    fail("accept", listener);
  }
  ::close(listener);
  return {std::make_unique<SocketEndpoint>(server, max_frame_bytes),
          std::make_unique<SocketEndpoint>(client, max_frame_bytes)};
}

enum class TransportKind { kInproc, kSocket };

inline TransportKind parse_transport(const std::string& s) {
  if (s == "inproc") return TransportKind::kInproc;
  if (s == "socket") return TransportKind::kSocket;
  throw ConfigError("unknown transport '" + s + "' (expected inproc or socket)");
}

inline std::pair<std::unique_ptr<Endpoint>, std::unique_ptr<Endpoint>> make_endpoint_pair(
    TransportKind kind, std::size_t max_frame_bytes = kDefaultMaxFrameBytes) {
  return kind == TransportKind::kSocket ? make_socket_pair(max_frame_bytes) : make_inproc_pair();
}

}  // namespace mbank::federation
