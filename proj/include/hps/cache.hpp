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

#include <cstdint>
#include <list>
#include <optional>
#include <set>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// LRU -> LFU cascade with pinning. Every visit lands the key at the LRU
// front. LRU overflow demotes the least-recent unpinned entry into the LFU,
// keeping its accumulated frequency. LFU overflow emits the least-frequent
// entry (ties: oldest LFU insertion) for flushing to disk. Pinned keys are
// never demoted or emitted; if the LRU holds only pinned entries it may
// temporarily exceed capacity. Not thread-safe; the owning tier serializes.
class ParamCache {
 public:
  struct Evicted {
    ParamKey key;
    SparseParam value;
  };

  ParamCache(std::size_t lru_capacity, std::size_t lfu_capacity)
      : lru_cap_(lru_capacity), lfu_cap_(lfu_capacity) {}

  // Visit an existing key; returns nullptr when absent. `pin` takes effect
  // before any demotion, so a visit-and-pin is atomic.
  SparseParam* find_visit(ParamKey key, std::vector<Evicted>* out_flush,
                          bool pin = false) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    visit_entry(key, it->second, out_flush, pin);
    return &it->second.value;
  }

  // Insert or overwrite, with visit semantics.
  SparseParam* insert_visit(ParamKey key, SparseParam value,
                            std::vector<Evicted>* out_flush,
                            bool pin = false) {
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      it->second.value = std::move(value);
      visit_entry(key, it->second, out_flush, pin);
      return &it->second.value;
    }
    Entry e;
    e.value = std::move(value);
    e.freq = 1;
    auto [ins, ok] = entries_.emplace(key, std::move(e));
    (void)ok;
    lru_.push_front(key);
    ins->second.lru_it = lru_.begin();
    if (pin) pinned_[key]++;
    trim(out_flush);
    return &ins->second.value;
  }

  bool contains(ParamKey key) const { return entries_.count(key) > 0; }

  const SparseParam* peek(ParamKey key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second.value;
  }

  void erase(ParamKey key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    check(pinned_.count(key) == 0, "cache: erase of pinned key");
    detach(key, it->second);
    entries_.erase(it);
  }

  // Pins nest: overlapping batches may hold the same key.
  void pin(ParamKey key) {
    auto it = entries_.find(key);
    check(it != entries_.end() && !it->second.in_lfu,
          "cache: pin requires the key in the lru");
    pinned_[key]++;
  }

  void unpin(ParamKey key) {
    auto it = pinned_.find(key);
    if (it == pinned_.end()) return;
    if (--it->second == 0) pinned_.erase(it);
  }

  bool is_pinned(ParamKey key) const { return pinned_.count(key) > 0; }
  std::size_t pinned_count() const { return pinned_.size(); }

  // Drop every pin, then re-apply the capacity bound.
  void release_pins(std::vector<Evicted>* out_flush) {
    pinned_.clear();
    trim(out_flush);
  }

  // Re-apply the capacity bound (after unpinning a batch).
  void enforce_capacity(std::vector<Evicted>* out_flush) { trim(out_flush); }

  std::size_t lru_size() const { return lru_.size(); }
  std::size_t lfu_size() const { return lfu_order_.size(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t lru_capacity() const { return lru_cap_; }
  std::size_t lfu_capacity() const { return lfu_cap_; }

  std::vector<ParamKey> lru_keys() const {  // most-recent first
    return std::vector<ParamKey>(lru_.begin(), lru_.end());
  }

  std::vector<ParamKey> lfu_keys() const {  // eviction order
    std::vector<ParamKey> out;
    for (const auto& [f, s, k] : lfu_order_) out.push_back(k);
    return out;
  }

  // Eviction-path instrumentation: stays 0 unless a pinned key was ever
  // selected as a victim.
  std::uint64_t pinned_eviction_violations() const { return violations_; }

  // Structural check used by tests: no key may sit in both lists.
  bool disjoint() const {
    std::unordered_set<ParamKey> lru_set(lru_.begin(), lru_.end());
    for (const auto& [f, s, k] : lfu_order_)
      if (lru_set.count(k)) return false;
    return lru_.size() + lfu_order_.size() == entries_.size();
  }

  template <class Fn>  // Fn(ParamKey, const SparseParam&)
  void for_each(Fn&& fn) const {
    for (const auto& [k, e] : entries_) fn(k, e.value);
  }

 private:
  struct Entry {
    SparseParam value;
    std::uint64_t freq = 0;
    bool in_lfu = false;
    std::uint64_t lfu_seq = 0;
    std::list<ParamKey>::iterator lru_it;
  };

  void visit_entry(ParamKey key, Entry& e, std::vector<Evicted>* out_flush,
                   bool pin) {
    e.freq++;
    if (e.in_lfu) {
      lfu_order_.erase({e.freq - 1, e.lfu_seq, key});
      e.in_lfu = false;
      lru_.push_front(key);
      e.lru_it = lru_.begin();
      if (pin) pinned_[key]++;
      trim(out_flush);
    } else {
      lru_.splice(lru_.begin(), lru_, e.lru_it);
      if (pin) pinned_[key]++;
    }
  }

  void detach(ParamKey key, Entry& e) {
    if (e.in_lfu)
      lfu_order_.erase({e.freq, e.lfu_seq, key});
    else
      lru_.erase(e.lru_it);
  }

  void trim(std::vector<Evicted>* out_flush) {
    while (lru_.size() > lru_cap_) {
      // Walk from the tail to the least-recent unpinned entry.
      auto it = lru_.end();
      bool demoted = false;
      while (it != lru_.begin()) {
        --it;
        if (pinned_.count(*it) == 0) {
          const ParamKey victim = *it;
          Entry& e = entries_.at(victim);
          if (pinned_.count(victim)) {
            ++violations_;
            throw Error("cache: pinned key selected for demotion");
          }
          lru_.erase(it);
          e.in_lfu = true;
          e.lfu_seq = next_seq_++;
          lfu_order_.insert({e.freq, e.lfu_seq, victim});
          demoted = true;
          break;
        }
      }
      if (!demoted) break;  // entirely pinned: allow temporary overflow
    }
    while (lfu_order_.size() > lfu_cap_) {
      const auto [freq, seq, victim] = *lfu_order_.begin();
      if (pinned_.count(victim)) {
        ++violations_;
        throw Error("cache: pinned key selected for flush");
      }
      lfu_order_.erase(lfu_order_.begin());
      auto it = entries_.find(victim);
      if (out_flush)
        out_flush->push_back({victim, std::move(it->second.value)});
      entries_.erase(it);
    }
  }

  std::size_t lru_cap_;
  std::size_t lfu_cap_;
  std::list<ParamKey> lru_;
  std::set<std::tuple<std::uint64_t, std::uint64_t, ParamKey>> lfu_order_;
  std::unordered_map<ParamKey, Entry> entries_;
  std::unordered_map<ParamKey, int> pinned_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t violations_ = 0;
};

}  // namespace hps
