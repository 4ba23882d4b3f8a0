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

#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "hps/dataset.hpp"
#include "hps/osrp.hpp"

using namespace hps;

namespace {

OsrpPlan fixed_plan_p4k2() {
  // Identity permutation, signs [+1,-1,+1,+1].
  return OsrpPlan::with(
      4, 2, [](std::uint64_t x) { return x; },
      [](ParamKey k) { return k == 1 ? -1 : 1; });
}

}  // namespace

TEST_CASE("hash_example: empty input gives empty output") {
  auto plan = OsrpPlan::seeded(64, 8, 7);
  CHECK(hash_example(plan, {}).empty());
}

TEST_CASE("hash_example: hand-evaluated p=4 k=2 cases") {
  auto plan = fixed_plan_p4k2();
  // {0,1}: bin0 z = +1-1 = 0 -> nothing; bin1 untouched.
  CHECK(hash_example(plan, {0, 1}).empty());
  // {0,2}: bin0 z=+1 -> id 1; bin1 z=+1 -> id 3.
  CHECK(hash_example(plan, {0, 2}) == std::vector<ParamKey>{1, 3});
  // Negative z picks the first slot 2b.
  auto neg = OsrpPlan::with(
      4, 2, [](std::uint64_t x) { return x; },
      [](ParamKey) { return -1; });
  CHECK(hash_example(neg, {0}) == std::vector<ParamKey>{0});
}

TEST_CASE("hash_example: out-of-range feature id is an error") {
  auto plan = OsrpPlan::seeded(16, 4, 1);
  CHECK_THROWS_AS(hash_example(plan, {16}), Error);
}

TEST_CASE("permutation is a bijection for assorted p up to 2^16") {
  for (std::uint64_t p : {1ull, 2ull, 3ull, 5ull, 100ull, 1000ull, 65536ull}) {
    auto plan = OsrpPlan::seeded(p, std::max<std::uint64_t>(1, p / 4), 99);
    std::set<std::uint64_t> seen;
    for (std::uint64_t x = 0; x < p; ++x) {
      const std::uint64_t y = plan.permute(x);
      REQUIRE(y < p);
      seen.insert(y);
    }
    REQUIRE(seen.size() == p);
  }
}

TEST_CASE("slots 2b and 2b+1 are mutually exclusive; ids < 2k") {
  auto plan = OsrpPlan::seeded(512, 16, 3);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<ParamKey> feats;
    const std::size_t n = 1 + rng() % 40;
    while (feats.size() < n) feats.insert(rng() % 512);
    std::vector<ParamKey> f(feats.begin(), feats.end());
    auto out = hash_example(plan, f);
    std::set<std::uint64_t> bins;
    for (ParamKey id : out) {
      REQUIRE(id < 2 * plan.k);
      REQUIRE(bins.insert(id / 2).second);  // one slot per bin
    }
    // Pigeonhole: |output| <= min(|input|, k).
    REQUIRE(out.size() <= std::min<std::size_t>(f.size(), plan.k));
    REQUIRE(std::is_sorted(out.begin(), out.end()));
  }
}

TEST_CASE("nonzero-count bound verified exhaustively at small p") {
  auto plan = OsrpPlan::seeded(8, 4, 17);
  for (unsigned mask = 0; mask < 256; ++mask) {
    std::vector<ParamKey> f;
    for (unsigned b = 0; b < 8; ++b)
      if (mask & (1u << b)) f.push_back(b);
    auto out = hash_example(plan, f);
    REQUIRE(out.size() <= std::min<std::size_t>(f.size(), plan.k));
  }
}

TEST_CASE("hash_dataset: determinism and label preservation") {
  GenSpec spec;
  spec.dims = 256;
  spec.num_examples = 300;
  spec.nnz = 6;
  spec.seed = 2;
  auto ds = gen_dataset(spec);
  auto batches = to_batches(ds, 64);
  auto plan = OsrpPlan::seeded(256, 32, 11);
  auto h1 = hash_dataset(plan, batches);
  auto h2 = hash_dataset(plan, batches);
  REQUIRE(h1.size() == h2.size());
  for (std::size_t b = 0; b < h1.size(); ++b) {
    REQUIRE(h1[b].examples.size() == h2[b].examples.size());
    for (std::size_t i = 0; i < h1[b].examples.size(); ++i) {
      CHECK(h1[b].examples[i].features == h2[b].examples[i].features);
      CHECK(h1[b].examples[i].label == batches[b].examples[i].label);
      for (ParamKey id : h1[b].examples[i].features) CHECK(id < 2 * plan.k);
    }
  }
}

TEST_CASE("different seeds produce different mappings") {
  GenSpec spec;
  spec.dims = 4096;
  spec.num_examples = 1000;
  spec.nnz = 8;
  spec.seed = 3;
  auto ds = gen_dataset(spec);
  auto batches = to_batches(ds, 1000);
  auto a = hash_dataset(OsrpPlan::seeded(4096, 512, 1), batches);
  auto b = hash_dataset(OsrpPlan::seeded(4096, 512, 2), batches);
  bool any_diff = false;
  for (std::size_t i = 0; i < a[0].examples.size(); ++i)
    if (a[0].examples[i].features != b[0].examples[i].features)
      any_diff = true;
  CHECK(any_diff);
}
