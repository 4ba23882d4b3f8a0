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
#include <functional>
#include <map>
#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// One permutation + one sign random projection. Maps p-dimensional sparse
// binary inputs to sparse binary outputs in [0, 2k):
//   1. permute the p columns (once),
//   2. break the permuted columns uniformly into k bins,
//   3. z(bin) = sum of +-1 signs of the bin's present columns,
//   4. z>0 emits id 2b+1, z<0 emits 2b, z=0 emits nothing.
struct OsrpPlan {
  std::uint64_t p = 0;
  std::uint64_t k = 0;
  std::uint64_t seed = 0;
  std::function<std::uint64_t(std::uint64_t)> permute;  // bijection on [0,p)
  std::function<int(ParamKey)> sign_of;                 // -1 or +1

  // Permutation via a seeded invertible mixer on [0, 2^m), 2^m >= p,
  // cycle-walked back into [0, p). Signs hash the original column id.
  static OsrpPlan seeded(std::uint64_t p, std::uint64_t k,
                         std::uint64_t seed) {
    check(p >= 1 && k >= 1 && k <= p, "osrp: need 1 <= k <= p");
    check(p <= (1ULL << 32), "osrp: p too large");
    OsrpPlan plan;
    plan.p = p;
    plan.k = k;
    plan.seed = seed;

    std::uint64_t m = 0;
    while ((1ULL << m) < p) ++m;
    const std::uint64_t mask = (m == 0) ? 0 : ((1ULL << m) - 1);
    const std::uint64_t mul = (seeded_u64(seed, 0) | 1ULL) & (mask | 1ULL);
    const std::uint64_t add = seeded_u64(seed, 1) & mask;
    const std::uint64_t s1 = m / 2 + 1;
    const std::uint64_t s2 = m / 3 + 1;
    auto step = [=](std::uint64_t x) {
      // Every stage is invertible mod 2^m, so `step` is a bijection.
      x = (x + add) & mask;
      x ^= x >> s1;
      x = (x * mul) & mask;
      x ^= x >> s2;
      return x & mask;
    };
    plan.permute = [=](std::uint64_t x) {
      if (m == 0) return std::uint64_t{0};
      std::uint64_t y = step(x);
      while (y >= p) y = step(y);
      return y;
    };
    const std::uint64_t sign_seed = seeded_u64(seed, 2);
    plan.sign_of = [=](ParamKey key) {
      return (mix64(key ^ sign_seed) & 1) ? 1 : -1;
    };
    return plan;
  }

  // Explicit permutation/signs, for controlled setups.
  static OsrpPlan with(std::uint64_t p, std::uint64_t k,
                       std::function<std::uint64_t(std::uint64_t)> permute,
                       std::function<int(ParamKey)> sign_of) {
    check(p >= 1 && k >= 1 && k <= p, "osrp: need 1 <= k <= p");
    OsrpPlan plan;
    plan.p = p;
    plan.k = k;
    plan.permute = std::move(permute);
    plan.sign_of = std::move(sign_of);
    return plan;
  }

  std::uint64_t bin_of(std::uint64_t column) const {
    return permute(column) * k / p;
  }
};

inline std::vector<ParamKey> hash_example(const OsrpPlan& plan,
                                          const std::vector<ParamKey>& features) {
  std::map<std::uint64_t, std::int64_t> z;
  for (ParamKey f : features) {
    check(f < plan.p, "osrp: feature id " + std::to_string(f) +
                          " out of range p=" + std::to_string(plan.p));
    z[plan.bin_of(f)] += plan.sign_of(f);
  }
  std::vector<ParamKey> out;
  out.reserve(z.size());
  for (const auto& [bin, s] : z) {
    if (s > 0)
      out.push_back(2 * bin + 1);
    else if (s < 0)
      out.push_back(2 * bin);
  }
  return out;
}

inline Batch hash_batch(const OsrpPlan& plan, const Batch& in) {
  Batch out;
  out.batch_id = in.batch_id;
  out.examples.reserve(in.examples.size());
  for (const Example& ex : in.examples)
    out.examples.push_back({ex.label, hash_example(plan, ex.features)});
  return out;
}

inline std::vector<Batch> hash_dataset(const OsrpPlan& plan,
                                       const std::vector<Batch>& batches) {
  std::vector<Batch> out;
  out.reserve(batches.size());
  for (const Batch& b : batches) out.push_back(hash_batch(plan, b));
  return out;
}

}  // namespace hps
