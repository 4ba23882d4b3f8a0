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

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <future>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hps/cache.hpp"
#include "hps/ssd_ps.hpp"
#include "hps/topology.hpp"
#include "hps/transport.hpp"
#include "hps/types.hpp"

namespace hps {

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds backoff{1};
};

struct MemPullRequest {
  std::int64_t step = 0;
  std::vector<ParamKey> keys;
};

// The memory tier of one simulated node. Owns the node's key shard
// (key mod num_nodes == node_id): pulls owned parameters from the cache or
// the disk store, pulls remote parameters from their owner's mem tier over
// the transport, pins every working key for its batch, and flushes cache
// overflow down to disk after the batch's updates are collected.
//
// Pipelining discipline: prepare/serve for step t block until the cache
// reflects the updates of step t-2 (collect phase A); values for keys shared
// with step t-1 are repaired at device-table build time from the previous
// tables, so nothing here ever waits on step t-1.
class MemPs {
 public:
  struct Counters {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t remote_pull_keys = 0;
    std::uint64_t remote_pull_requests = 0;
    std::uint64_t served_pull_keys = 0;
    std::uint64_t retries = 0;
  };

  MemPs(int node_id, const Topology& topo, SsdStore* store,
        Transport* transport, std::size_t lru_capacity,
        std::size_t lfu_capacity, RetryPolicy retry = {})
      : node_id_(node_id),
        topo_(topo),
        shard_{node_id, topo.num_nodes},
        store_(store),
        transport_(transport),
        retry_(retry),
        cache_(lru_capacity, lfu_capacity) {
    if (transport_) transport_->register_endpoint(topo_.mem_endpoint(node_id));
  }

  MemPs(const MemPs&) = delete;
  MemPs& operator=(const MemPs&) = delete;

  // Peer registry for remote pulls; index = node id.
  void set_peers(std::vector<MemPs*> peers) { peers_ = std::move(peers); }

  // Wakes every blocked waiter with an error; part of orderly shutdown.
  void abort() {
    {
      std::lock_guard lk(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

  int node_id() const { return node_id_; }
  std::size_t width() const { return store_->embedding_dim(); }

  static std::vector<ParamKey> extract_working_set(const Batch& batch) {
    std::vector<ParamKey> keys;
    for (const Example& ex : batch.examples)
      keys.insert(keys.end(), ex.features.begin(), ex.features.end());
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
  }

  // Materializes the full working map in memory: owned keys from cache/disk
  // (missing on disk => zero-initialized), remote keys pulled from their
  // owner nodes. Local and remote pulls proceed concurrently. Every returned
  // key ends up pinned in the lru until collect for this step runs.
  std::map<ParamKey, SparseParam> prepare_parameters(
      std::int64_t step, const std::vector<ParamKey>& working) {
    wait_collected(step - 2);

    std::map<int, std::vector<ParamKey>> remote;
    std::vector<ParamKey> local;
    for (ParamKey k : working) {
      const int owner = shard_.owner_of(k);
      if (owner == node_id_)
        local.push_back(k);
      else
        remote[owner].push_back(k);
    }
    // A (possibly empty) request still goes to every peer: it doubles as the
    // rendezvous telling the owner the full working set of this step.
    std::future<std::map<ParamKey, SparseParam>> remote_future;
    if (topo_.num_nodes > 1) {
      remote_future = std::async(std::launch::async, [&]() {
        std::map<ParamKey, SparseParam> got;
        for (int peer = 0; peer < topo_.num_nodes; ++peer) {
          if (peer == node_id_) continue;
          auto it = remote.find(peer);
          const std::vector<ParamKey> keys =
              it == remote.end() ? std::vector<ParamKey>{} : it->second;
          auto part = pull_remote(peer, step, keys);
          got.insert(part.begin(), part.end());
        }
        return got;
      });
    }

    std::map<ParamKey, SparseParam> out = materialize_owned(step, local, true);
    if (remote_future.valid()) {
      auto got = remote_future.get();
      std::lock_guard lk(mu_);
      for (auto& [k, v] : got) {
        std::vector<ParamCache::Evicted> flushed;
        cache_.insert_visit(k, v, &flushed, /*pin=*/true);
        stash_flushed(flushed);
        pins_by_step_[step].push_back(k);
        remote_by_step_[step].push_back(k);
        out.emplace(k, std::move(v));
      }
    }
    return out;
  }

  // Owner-side read of a peer's request. Executes on the requester's thread
  // (the transport models the wire, not a server loop); the cache mutex makes
  // that safe. Requested keys are materialized, pinned for `step`, and
  // recorded so this node's device tables include them.
  std::map<ParamKey, SparseParam> serve_pull(int from_node, std::int64_t step,
                                             const std::vector<ParamKey>& keys) {
    wait_collected(step - 2);
    for (ParamKey k : keys)
      check(shard_.owns(k), "mem-ps: peer requested non-owned key");
    auto out = materialize_owned(step, keys, false);
    std::lock_guard lk(mu_);
    auto& reg = peer_keys_by_step_[step];
    reg.insert(reg.end(), keys.begin(), keys.end());
    peer_arrivals_[step].insert(from_node);
    counters_.served_pull_keys += keys.size();
    cv_.notify_all();
    return out;
  }

  // Blocks until every peer's request for `step` arrived, then returns the
  // union of keys they asked for (this node must host them on its devices).
  std::vector<ParamKey> take_peer_keys(std::int64_t step) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] {
      return aborted_ ||
             int(peer_arrivals_[step].size()) == topo_.num_nodes - 1;
    });
    check(!aborted_, "mem-ps: aborted");
    auto keys = std::move(peer_keys_by_step_[step]);
    peer_keys_by_step_.erase(step);
    peer_arrivals_.erase(step);
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
  }

  // Pinned value lookup for device-table building.
  std::vector<float> host_embedding(ParamKey key) const {
    std::lock_guard lk(mu_);
    const SparseParam* p = cache_.peek(key);
    check(p != nullptr, "mem-ps: host value for unprepared key " +
                            std::to_string(key));
    return p->embedding;
  }

  // Collect phase A: overwrite owned cache values with the devices' updated
  // embeddings, drop this step's remote copies, release its pins, re-apply
  // capacity, and make the step visible to prepare(step+2). Cheap and
  // synchronous; the disk flush is phase B.
  std::map<ParamKey, SparseParam> collect_updates(
      std::int64_t step, const std::map<ParamKey, std::vector<float>>& updates) {
    std::map<ParamKey, SparseParam> flush_set;
    {
      std::lock_guard lk(mu_);
      for (const auto& [k, emb] : updates) {
        check(shard_.owns(k),
              "mem-ps: update for non-owned key " + std::to_string(k) +
                  " (sync bug)");
        std::vector<ParamCache::Evicted> flushed;
        SparseParam* p = cache_.find_visit(k, &flushed);
        check(p != nullptr, "mem-ps: update for unprepared key");
        p->embedding = emb;
        stash_flushed(flushed);
      }
      auto pins = pins_by_step_.find(step);
      if (pins != pins_by_step_.end()) {
        for (ParamKey k : pins->second) cache_.unpin(k);
        pins_by_step_.erase(pins);
      }
      auto rem = remote_by_step_.find(step);
      if (rem != remote_by_step_.end()) {
        for (ParamKey k : rem->second)
          if (!cache_.is_pinned(k)) cache_.erase(k);
        remote_by_step_.erase(rem);
      }
      std::vector<ParamCache::Evicted> flushed;
      cache_.enforce_capacity(&flushed);
      stash_flushed(flushed);
      for (const auto& [k, entry] : pending_flush_)
        flush_set.emplace(k, entry.value);
      collected_ = std::max(collected_, step);
      cv_.notify_all();
    }
    return flush_set;
  }

  // Collect phase B: dump everything pending to the disk store.
  void flush_pending() {
    std::map<ParamKey, SparseParam> batch;
    std::map<ParamKey, std::uint64_t> gens;
    {
      std::lock_guard lk(mu_);
      for (const auto& [k, entry] : pending_flush_) {
        batch.emplace(k, entry.value);
        gens[k] = entry.gen;
      }
    }
    if (batch.empty()) return;
    store_->dump(batch);
    std::lock_guard lk(mu_);
    for (const auto& [k, gen] : gens) {
      auto it = pending_flush_.find(k);
      if (it != pending_flush_.end() && it->second.gen == gen)
        pending_flush_.erase(it);
    }
  }

  std::map<ParamKey, SparseParam> collect_and_flush(
      std::int64_t step, const std::map<ParamKey, std::vector<float>>& updates) {
    auto flush_set = collect_updates(step, updates);
    flush_pending();
    return flush_set;
  }

  Counters counters() const {
    std::lock_guard lk(mu_);
    return counters_;
  }

  std::uint64_t pinned_eviction_violations() const {
    std::lock_guard lk(mu_);
    return cache_.pinned_eviction_violations();
  }

  std::size_t cache_entries() const {
    std::lock_guard lk(mu_);
    return cache_.size();
  }

  // Owned parameters as a flat map: cache wins over pending flush wins over
  // disk. Used for model export and verification.
  std::map<ParamKey, SparseParam> snapshot_all() {
    std::map<ParamKey, SparseParam> out;
    std::vector<ParamKey> disk_keys = store_->all_keys();
    {
      std::lock_guard lk(mu_);
      cache_.for_each([&](ParamKey k, const SparseParam& v) {
        if (shard_.owns(k)) out.emplace(k, v);
      });
      for (const auto& [k, entry] : pending_flush_) out.emplace(k, entry.value);
    }
    std::vector<ParamKey> need;
    for (ParamKey k : disk_keys)
      if (!out.count(k)) need.push_back(k);
    if (!need.empty()) {
      auto got = store_->load(need);
      check(got.missing.empty(), "mem-ps: store lost keys");
      for (auto& [k, v] : got.found) out.emplace(k, std::move(v));
    }
    return out;
  }

 private:
  struct Pending {
    SparseParam value;
    std::uint64_t gen = 0;
  };

  void wait_collected(std::int64_t step) {
    if (step < 0) return;
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return aborted_ || collected_ >= step; });
    check(!aborted_, "mem-ps: aborted");
  }

  void stash_flushed(std::vector<ParamCache::Evicted>& flushed) {
    for (auto& ev : flushed) {
      auto& slot = pending_flush_[ev.key];
      slot.value = std::move(ev.value);
      slot.gen = ++flush_gen_;
    }
    flushed.clear();
  }

  // Cache -> pending-flush buffer -> disk -> zero-init; pins when asked.
  std::map<ParamKey, SparseParam> materialize_owned(
      std::int64_t step, const std::vector<ParamKey>& keys, bool count_stats) {
    std::map<ParamKey, SparseParam> out;
    std::vector<ParamKey> disk_misses;
    {
      std::lock_guard lk(mu_);
      for (ParamKey k : keys) {
        std::vector<ParamCache::Evicted> flushed;
        SparseParam* p = cache_.find_visit(k, &flushed, /*pin=*/true);
        if (p == nullptr) {
          auto pend = pending_flush_.find(k);
          if (pend != pending_flush_.end()) {
            p = cache_.insert_visit(k, pend->second.value, &flushed,
                                    /*pin=*/true);
            if (count_stats) counters_.hits++;
          } else {
            disk_misses.push_back(k);
          }
        } else if (count_stats) {
          counters_.hits++;
        }
        if (p != nullptr) {
          pins_by_step_[step].push_back(k);
          out.emplace(k, *p);
        }
        stash_flushed(flushed);
      }
      if (count_stats) counters_.misses += disk_misses.size();
    }
    if (disk_misses.empty()) return out;

    auto loaded = store_->load(disk_misses);
    std::lock_guard lk(mu_);
    for (ParamKey k : disk_misses) {
      std::vector<ParamCache::Evicted> flushed;
      SparseParam* p = cache_.find_visit(k, &flushed, /*pin=*/true);
      if (p == nullptr) {
        auto it = loaded.found.find(k);
        SparseParam v = it != loaded.found.end()
                            ? it->second
                            : SparseParam(store_->embedding_dim());
        p = cache_.insert_visit(k, std::move(v), &flushed, /*pin=*/true);
      }
      pins_by_step_[step].push_back(k);
      out.emplace(k, *p);
      stash_flushed(flushed);
    }
    return out;
  }

  // One batched round trip to the owner node, with retry on transport
  // failures. The request/response envelopes traverse the channels; the
  // owner's serve path runs here on the requester's thread.
  std::map<ParamKey, SparseParam> pull_remote(int peer, std::int64_t step,
                                              const std::vector<ParamKey>& keys) {
    check(peer >= 0 && peer < int(peers_.size()) && peers_[peer] != nullptr,
          "mem-ps: unknown peer node");
    const Endpoint me = topo_.mem_endpoint(node_id_);
    const Endpoint them = topo_.mem_endpoint(peer);
    int attempt = 0;
    for (;;) {
      try {
        transport_->send(make_envelope(
            me, them, MsgKind::kMemPullReq, MemPullRequest{step, keys},
            keys.size() * sizeof(ParamKey) + sizeof(std::int64_t)));
        break;
      } catch (const TransportError&) {
        if (++attempt > retry_.max_retries) throw;
        {
          std::lock_guard lk(mu_);
          counters_.retries++;
        }
        std::this_thread::sleep_for(retry_.backoff * attempt);
      }
    }
    const Envelope req = transport_->recv(them, me, MsgKind::kMemPullReq);
    const auto& body = payload_as<MemPullRequest>(req);
    auto values = peers_[peer]->serve_pull(node_id_, body.step, body.keys);
    const std::size_t width = store_->embedding_dim();
    transport_->send(make_envelope(
        them, me, MsgKind::kMemPullResp, values,
        values.size() * (sizeof(ParamKey) + 2 * width * sizeof(float))));
    const Envelope resp = transport_->recv(me, them, MsgKind::kMemPullResp);
    auto out = payload_as<std::map<ParamKey, SparseParam>>(resp);
    {
      std::lock_guard lk(mu_);
      counters_.remote_pull_requests++;
      counters_.remote_pull_keys += keys.size();
    }
    return out;
  }

  int node_id_;
  Topology topo_;
  NodeShard shard_;
  SsdStore* store_;
  Transport* transport_;
  RetryPolicy retry_;
  std::vector<MemPs*> peers_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  ParamCache cache_;
  std::unordered_map<ParamKey, Pending> pending_flush_;
  std::uint64_t flush_gen_ = 0;
  std::map<std::int64_t, std::vector<ParamKey>> pins_by_step_;
  std::map<std::int64_t, std::vector<ParamKey>> remote_by_step_;
  std::map<std::int64_t, std::vector<ParamKey>> peer_keys_by_step_;
  std::map<std::int64_t, std::set<int>> peer_arrivals_;
  std::int64_t collected_ = -1;
  bool aborted_ = false;
  Counters counters_;
};

}  // namespace hps
