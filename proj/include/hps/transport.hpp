/*
 * Copyright (c) 2026, the hps authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <any>
#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <utility>

#include "hps/common.hpp"

namespace hps {

// In-process stand-in for NVLink/RDMA/network links: typed point-to-point
// channels between (node, device) endpoints, one lane per message kind
// (tag-matched queue pairs), with exactly-once per-channel FIFO delivery, per-kind counters, Lamport clocks and an optional
// constant + per-byte delay model.
struct Endpoint {
  int node = 0;
  int device = -1;  // -1 = the node's mem-ps endpoint

  auto operator<=>(const Endpoint&) const = default;
  std::string str() const {
    return "(" + std::to_string(node) + "," + std::to_string(device) + ")";
  }
};

enum class MsgKind : int {
  kParamPullReq = 0,
  kParamPullResp,
  kAccum,
  kSyncExchange,
  kMemPullReq,
  kMemPullResp,
  kKindCount
};

struct Envelope {
  Endpoint src, dst;
  MsgKind kind = MsgKind::kAccum;
  std::uint64_t logical_ts = 0;
  std::uint64_t round = 0;  // schedule tag for sync_exchange
  std::size_t payload_bytes = 0;
  std::any payload;
  std::chrono::steady_clock::time_point deliver_at{};
};

template <class T>
Envelope make_envelope(Endpoint src, Endpoint dst, MsgKind kind, T payload,
                       std::size_t payload_bytes, std::uint64_t round = 0) {
  Envelope e;
  e.src = src;
  e.dst = dst;
  e.kind = kind;
  e.round = round;
  e.payload_bytes = payload_bytes;
  e.payload = std::make_shared<const T>(std::move(payload));
  return e;
}

template <class T>
const T& payload_as(const Envelope& e) {
  return *std::any_cast<std::shared_ptr<const T>>(e.payload);
}

class Transport {
 public:
  struct DelayModel {
    std::chrono::microseconds constant{0};
    double per_byte_us = 0.0;
  };

  struct Counters {
    std::array<std::uint64_t, std::size_t(MsgKind::kKindCount)> messages{};
    std::array<std::uint64_t, std::size_t(MsgKind::kKindCount)> bytes{};
    std::uint64_t total_sent = 0;
    std::uint64_t total_received = 0;

    std::uint64_t msgs(MsgKind k) const { return messages[std::size_t(k)]; }
    std::uint64_t byte_count(MsgKind k) const { return bytes[std::size_t(k)]; }
  };

  void register_endpoint(Endpoint ep) {
    std::lock_guard lk(reg_mu_);
    auto it = clocks_.find(ep);
    if (it == clocks_.end())
      clocks_.emplace(ep, std::make_unique<std::atomic<std::uint64_t>>(0));
  }

  bool registered(Endpoint ep) const {
    std::lock_guard lk(reg_mu_);
    return clocks_.count(ep) > 0;
  }

  void set_delay(DelayModel m) { delay_ = m; }

  // Test hook: return true to fail this send with a retryable error.
  void set_fault_hook(std::function<bool(const Envelope&)> hook) {
    fault_hook_ = std::move(hook);
  }

  void send(Envelope e) {
    require_registered(e.src);
    require_registered(e.dst);
    if (fault_hook_ && fault_hook_(e))
      throw TransportError("transport: injected send failure on channel " +
                           e.src.str() + "->" + e.dst.str());
    e.logical_ts = tick(e.src, 0);
    const auto now = std::chrono::steady_clock::now();
    const auto extra = std::chrono::microseconds(
        std::int64_t(delay_.per_byte_us * double(e.payload_bytes)));
    e.deliver_at = now + delay_.constant + extra;
    {
      std::lock_guard lk(counters_mu_);
      counters_.messages[std::size_t(e.kind)]++;
      counters_.bytes[std::size_t(e.kind)] += e.payload_bytes;
      counters_.total_sent++;
    }
    Channel& ch = channel(e.src, e.dst, e.kind);
    {
      std::lock_guard lk(ch.mu);
      ch.queue.push_back(std::move(e));
    }
    ch.cv.notify_all();
  }

  // Blocking FIFO receive on the (src, dst) channel.
  Envelope recv(Endpoint dst, Endpoint src, MsgKind kind) {
    require_registered(dst);
    require_registered(src);
    Channel& ch = channel(src, dst, kind);
    std::unique_lock lk(ch.mu);
    for (;;) {
      ch.cv.wait(lk, [&] { return !ch.queue.empty() || aborted_.load(); });
      if (aborted_.load())
        throw TransportError("transport: aborted");
      const auto now = std::chrono::steady_clock::now();
      if (ch.queue.front().deliver_at <= now) break;
      ch.cv.wait_until(lk, ch.queue.front().deliver_at);
    }
    Envelope e = std::move(ch.queue.front());
    ch.queue.pop_front();
    lk.unlock();
    finish_recv(e);
    return e;
  }

  // Wakes every blocked receiver with an error; part of orderly shutdown.
  void abort() {
    aborted_.store(true);
    std::lock_guard lk(channels_mu_);
    for (auto& [key, ch] : channels_) ch->cv.notify_all();
  }

  // Non-blocking: pops only if a deliverable message is pending.
  bool try_recv(Endpoint dst, Endpoint src, MsgKind kind, Envelope* out) {
    require_registered(dst);
    require_registered(src);
    Channel& ch = channel(src, dst, kind);
    {
      std::unique_lock lk(ch.mu);
      if (ch.queue.empty()) return false;
      if (ch.queue.front().deliver_at > std::chrono::steady_clock::now()) {
        // Simulated wire latency: wait it out rather than reporting empty.
        ch.cv.wait_until(lk, ch.queue.front().deliver_at);
        if (ch.queue.empty()) return false;
      }
      *out = std::move(ch.queue.front());
      ch.queue.pop_front();
    }
    finish_recv(*out);
    return true;
  }

  Counters counters() const {
    std::lock_guard lk(counters_mu_);
    return counters_;
  }

  std::uint64_t in_flight() const {
    std::lock_guard lk(counters_mu_);
    return counters_.total_sent - counters_.total_received;
  }

  std::uint64_t clock(Endpoint ep) const {
    std::lock_guard lk(reg_mu_);
    auto it = clocks_.find(ep);
    check(it != clocks_.end(), "transport: unregistered endpoint " + ep.str());
    return it->second->load();
  }

 private:
  struct Channel {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Envelope> queue;
  };

  void require_registered(Endpoint ep) const {
    std::lock_guard lk(reg_mu_);
    check(clocks_.count(ep) > 0,
          "transport: unregistered endpoint " + ep.str());
  }

  std::atomic<std::uint64_t>& clock_ref(Endpoint ep) {
    std::lock_guard lk(reg_mu_);
    auto it = clocks_.find(ep);
    check(it != clocks_.end(), "transport: unregistered endpoint " + ep.str());
    return *it->second;
  }

  // Lamport step: advance past `seen` and return the new local time.
  std::uint64_t tick(Endpoint ep, std::uint64_t seen) {
    auto& c = clock_ref(ep);
    std::uint64_t cur = c.load();
    for (;;) {
      const std::uint64_t next = std::max(cur, seen) + 1;
      if (c.compare_exchange_weak(cur, next)) return next;
    }
  }

  void finish_recv(const Envelope& e) {
    tick(e.dst, e.logical_ts);
    std::lock_guard lk(counters_mu_);
    counters_.total_received++;
  }

  Channel& channel(Endpoint src, Endpoint dst, MsgKind kind) {
    std::lock_guard lk(channels_mu_);
    auto& ptr = channels_[{src, dst, kind}];
    if (!ptr) ptr = std::make_unique<Channel>();
    return *ptr;
  }

  mutable std::mutex reg_mu_;
  std::map<Endpoint, std::unique_ptr<std::atomic<std::uint64_t>>> clocks_;

  std::mutex channels_mu_;
  std::map<std::tuple<Endpoint, Endpoint, MsgKind>, std::unique_ptr<Channel>>
      channels_;

  mutable std::mutex counters_mu_;
  Counters counters_;

  DelayModel delay_;
  std::function<bool(const Envelope&)> fault_hook_;
  std::atomic<bool> aborted_{false};
};

}  // namespace hps
