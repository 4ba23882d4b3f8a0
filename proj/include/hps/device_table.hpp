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

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

#include "hps/common.hpp"

namespace hps {

// Fixed-capacity open-addressing hash table holding one batch's working
// parameters on one device. Linear probing over a power-of-two slot array;
// capacity never changes after construction. Per-slot spinlocks make
// accumulate linearizable per key and reads tear-free.
class DeviceTable {
 public:
  static constexpr ParamKey kEmpty = ~ParamKey{0};
  static constexpr double kLoadFactor = 0.75;

  // capacity = next power of two >= expected / load_factor
  DeviceTable(std::size_t expected_keys, std::size_t value_width)
      : width_(value_width),
        capacity_(next_pow2(
            std::max<std::size_t>(1, (expected_keys * 4 + 2) / 3))),
        max_occupancy_(std::size_t(double(capacity_) * kLoadFactor)),
        keys_(capacity_, kEmpty),
        values_(capacity_ * value_width, 0.0f),
        locks_(std::make_unique<std::atomic_flag[]>(capacity_)) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t occupancy() const { return occupancy_.load(); }
  std::size_t value_width() const { return width_; }

  void insert(ParamKey key, const float* value) {
    check(key != kEmpty, "device table: reserved key");
    std::size_t idx = slot_of(key);
    for (std::size_t probes = 0; probes < capacity_; ++probes) {
      SlotLock lk(locks_[idx]);
      if (keys_[idx] == key)
        throw Error("device table: duplicate insert of key " +
                    std::to_string(key));
      if (keys_[idx] == kEmpty) {
        const std::size_t occ = occupancy_.fetch_add(1) + 1;
        if (occ > max_occupancy_) {
          occupancy_.fetch_sub(1);
          throw Error("device table: capacity overflow (sizing bug)");
        }
        keys_[idx] = key;
        float* v = values_.data() + idx * width_;
        for (std::size_t i = 0; i < width_; ++i) v[i] = value[i];
        return;
      }
      idx = (idx + 1) & (capacity_ - 1);
    }
    throw Error("device table: capacity overflow (sizing bug)");
  }

  bool contains(ParamKey key) const { return find_slot(key) != kNotFound; }

  // Tear-free copy; throws if the key was never inserted.
  std::vector<float> get(ParamKey key) const {
    const std::size_t idx = find_slot(key);
    check(idx != kNotFound,
          "device table: missing key " + std::to_string(key));
    SlotLock lk(locks_[idx]);
    const float* v = values_.data() + idx * width_;
    return std::vector<float>(v, v + width_);
  }

  // value += delta, elementwise, atomic per key.
  void accumulate(ParamKey key, const float* delta) {
    const std::size_t idx = find_slot(key);
    check(idx != kNotFound,
          "device table: accumulate to missing key " + std::to_string(key));
    SlotLock lk(locks_[idx]);
    float* v = values_.data() + idx * width_;
    for (std::size_t i = 0; i < width_; ++i) v[i] += delta[i];
  }

  template <class Fn>  // Fn(ParamKey, const float*)
  void for_each(Fn&& fn) const {
    for (std::size_t idx = 0; idx < capacity_; ++idx)
      if (keys_[idx] != kEmpty) fn(keys_[idx], values_.data() + idx * width_);
  }

 private:
  static constexpr std::size_t kNotFound = ~std::size_t{0};

  struct SlotLock {
    explicit SlotLock(std::atomic_flag& f) : flag(f) {
      while (flag.test_and_set(std::memory_order_acquire)) {
      }
    }
    ~SlotLock() { flag.clear(std::memory_order_release); }
    std::atomic_flag& flag;
  };

  std::size_t slot_of(ParamKey key) const {
    return std::size_t(mix64(key)) & (capacity_ - 1);
  }

  std::size_t find_slot(ParamKey key) const {
    std::size_t idx = slot_of(key);
    for (std::size_t probes = 0; probes < capacity_; ++probes) {
      const ParamKey k = keys_[idx];
      if (k == key) return idx;
      if (k == kEmpty) return kNotFound;
      idx = (idx + 1) & (capacity_ - 1);
    }
    return kNotFound;
  }

  std::size_t width_;
  std::size_t capacity_;
  std::size_t max_occupancy_;
  std::atomic<std::size_t> occupancy_{0};
  std::vector<ParamKey> keys_;
  std::vector<float> values_;
  std::unique_ptr<std::atomic_flag[]> locks_;
};

}  // namespace hps
