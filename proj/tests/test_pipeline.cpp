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
#include <filesystem>
#include <random>
#include <set>

#include "hps/dataset.hpp"
#include "hps/pipeline.hpp"

using namespace hps;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("hps_pipe_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig base_config(const fs::path& store) {
  RunConfig cfg;
  cfg.store_dir = store.string();
  cfg.embedding_dim = 4;
  cfg.layer_dims = {4, 1};
  cfg.batch_size = 64;
  cfg.minibatches_per_batch = 2;
  cfg.seed = 7;
  return cfg;
}

std::pair<std::vector<Batch>, std::uint64_t> small_dataset(
    std::size_t examples, std::size_t batch_size, std::uint64_t seed = 3) {
  GenSpec spec;
  spec.dims = 500;
  spec.num_examples = examples;
  spec.nnz = 5;
  spec.dist = KeyDist::kZipf;
  spec.seed = seed;
  auto ds = gen_dataset(spec);
  return {to_batches(ds, batch_size), ds.dims};
}

double max_rel_diff(const FlatStore& a, const FlatStore& b) {
  double worst = 0.0;
  REQUIRE(a.dense.weights.size() == b.dense.weights.size());
  for (std::size_t i = 0; i < a.dense.weights.size(); ++i) {
    const double denom =
        std::max({std::abs(double(a.dense.weights[i])),
                  std::abs(double(b.dense.weights[i])), 1e-6});
    worst = std::max(
        worst, std::abs(double(a.dense.weights[i]) - double(b.dense.weights[i])) /
                   denom);
  }
  for (const auto& [k, v] : b.sparse) {
    auto it = a.sparse.find(k);
    if (it == a.sparse.end()) {
      bool all_zero = true;
      for (float x : v.embedding) all_zero &= (x == 0.0f);
      REQUIRE(all_zero);
      continue;
    }
    for (std::size_t i = 0; i < v.embedding.size(); ++i) {
      const double denom = std::max({std::abs(double(v.embedding[i])),
                                     std::abs(double(it->second.embedding[i])),
                                     1e-6});
      worst = std::max(worst, std::abs(double(v.embedding[i]) -
                                       double(it->second.embedding[i])) /
                                  denom);
    }
  }
  return worst;
}

bool bit_identical(const FlatStore& a, const FlatStore& b) {
  if (a.dense.weights != b.dense.weights) return false;
  for (const auto& [k, v] : b.sparse) {
    auto it = a.sparse.find(k);
    if (it == a.sparse.end()) {
      for (float x : v.embedding)
        if (x != 0.0f) return false;
      continue;
    }
    if (it->second.embedding != v.embedding) return false;
  }
  for (const auto& [k, v] : a.sparse) {
    if (!b.sparse.count(k)) {
      for (float x : v.embedding)
        if (x != 0.0f) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("shard_batch: 8 examples over 2 devices x 2 mini-batches") {
  Batch b;
  for (ParamKey i = 0; i < 8; ++i) b.examples.push_back({1, {i}});
  auto shards = shard_batch(b, 2, 2);
  std::multiset<ParamKey> seen;
  for (int d = 0; d < 2; ++d)
    for (int j = 0; j < 2; ++j) {
      CHECK(shards[d][j].size() == 2);
      for (const auto& ex : shards[d][j]) seen.insert(ex.features[0]);
    }
  CHECK(seen.size() == 8);  // disjoint cover
}

TEST_CASE("shard_batch: 5 examples leave a trailing shard of 1, none dropped") {
  Batch b;
  for (ParamKey i = 0; i < 5; ++i) b.examples.push_back({0, {i}});
  auto shards = shard_batch(b, 2, 2);
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (int d = 0; d < 2; ++d)
    for (int j = 0; j < 2; ++j) {
      sizes.push_back(shards[d][j].size());
      total += shards[d][j].size();
    }
  CHECK(total == 5);
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{1, 1, 1, 2});
}

TEST_CASE("shard_batch: deterministic") {
  Batch b;
  for (ParamKey i = 0; i < 13; ++i) b.examples.push_back({1, {i, i + 20}});
  auto a = shard_batch(b, 4, 2);
  auto c = shard_batch(b, 4, 2);
  for (int d = 0; d < 4; ++d)
    for (int j = 0; j < 2; ++j) {
      REQUIRE(a[d][j].size() == c[d][j].size());
      for (std::size_t i = 0; i < a[d][j].size(); ++i)
        CHECK(a[d][j][i].features == c[d][j][i].features);
    }
}

TEST_CASE("pipeline: empty dataset completes immediately with zero metrics") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  auto out = run_training(cfg, {}, 100);
  CHECK(out.metrics.rows.empty());
  CHECK(out.model.sparse.empty());
  CHECK(out.model.dense.weights == init_dense(cfg.model()).weights);
}

TEST_CASE("pipeline: 1x1 deterministic run is bit-exact vs the oracle") {
  TempDir tmp;
  auto cfg = base_config(tmp.path / "a");
  cfg.deterministic = true;
  cfg.queue_depth = 1;
  auto [batches, dims] = small_dataset(400, 64);
  auto out = run_training(cfg, batches, dims);
  auto oracle = train_reference(cfg, batches);
  CHECK(bit_identical(out.model, oracle));

  // Default queue depth overlaps prepare with training; still bit-exact.
  auto cfg2 = base_config(tmp.path / "b");
  cfg2.deterministic = true;
  cfg2.queue_depth = 3;
  auto out2 = run_training(cfg2, batches, dims);
  CHECK(bit_identical(out2.model, oracle));
}

TEST_CASE("pipeline: 1x1 with tiny caches still matches the oracle") {
  // Forces heavy lru/lfu cascade and disk traffic mid-run.
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.deterministic = true;
  cfg.lru_capacity = 24;
  cfg.lfu_capacity = 32;
  auto [batches, dims] = small_dataset(600, 50, 5);
  auto out = run_training(cfg, batches, dims);
  auto oracle = train_reference(cfg, batches);
  CHECK(bit_identical(out.model, oracle));
  // The disk tier really participated.
  std::uint64_t writes = 0;
  for (const auto& row : out.metrics.rows) writes += row.ssd_writes;
  CHECK(writes > 0);
}

TEST_CASE("pipeline: 2x2 deterministic run matches oracle within 1e-5") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.nodes = 2;
  cfg.devices_per_node = 2;
  cfg.deterministic = true;
  auto [batches, dims] = small_dataset(600, 60, 11);
  auto out = run_training(cfg, batches, dims);
  auto oracle = train_reference(cfg, batches);
  CHECK(max_rel_diff(out.model, oracle) < 1e-5);
  // Remote parameter pulls actually happened between the two nodes.
  std::uint64_t remote = 0;
  for (const auto& row : out.metrics.rows) remote += row.remote_pull_keys;
  CHECK(remote > 0);
}

TEST_CASE("pipeline: trailing uneven node coverage stays lossless") {
  // 5 batches over 2 nodes: the final step pads node 1 with an empty batch.
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.nodes = 2;
  cfg.devices_per_node = 1;
  cfg.deterministic = true;
  auto [batches, dims] = small_dataset(5 * 40, 40, 13);
  REQUIRE(batches.size() == 5);
  auto out = run_training(cfg, batches, dims);
  auto oracle = train_reference(cfg, batches);
  CHECK(max_rel_diff(out.model, oracle) < 1e-5);
  CHECK(out.metrics.rows.size() == 5);
}

TEST_CASE("pipeline: exactly-once batch ledger") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.nodes = 2;
  cfg.devices_per_node = 1;
  auto [batches, dims] = small_dataset(420, 60, 17);
  auto out = run_training(cfg, batches, dims);
  std::set<std::int64_t> ids;
  for (const auto& row : out.metrics.rows)
    REQUIRE(ids.insert(row.batch_id).second);
  CHECK(ids.size() == batches.size());
}

TEST_CASE("pipeline: backpressure bounds in-flight batches") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.queue_depth = 2;
  // Slow train stage, fast ingest: upstream queues must cap at depth.
  cfg.stage_delay_ms = {0, 0, 5, 0};
  auto [batches, dims] = small_dataset(600, 30, 19);
  auto out = run_training(cfg, batches, dims);
  CHECK(out.metrics.queue_high_water <= 2);
}

TEST_CASE("pipeline: stage overlap beats the serial stage sum") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.stage_delay_ms = {4, 4, 4, 4};
  auto [batches, dims] = small_dataset(20 * 30, 30, 23);
  REQUIRE(batches.size() == 20);
  auto out = run_training(cfg, batches, dims);
  // Serial sum would be 20 batches * 16 ms; the pipeline must do better.
  CHECK(out.metrics.wall_ms < 20 * 16.0);
}

TEST_CASE("pipeline: no staleness across mini-batches (logical clocks)") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  cfg.nodes = 2;
  cfg.devices_per_node = 2;
  cfg.deterministic = true;
  auto [batches, dims] = small_dataset(240, 60, 29);
  auto out = run_training(cfg, batches, dims);
  REQUIRE_FALSE(out.metrics.trace.empty());
  // Index stamps by (step, minibatch).
  std::map<std::pair<std::int64_t, int>, std::vector<MinibatchTrace>> by_mb;
  for (const auto& tr : out.metrics.trace)
    by_mb[{tr.step, tr.minibatch}].push_back(tr);
  const int J = cfg.minibatches_per_batch;
  for (const auto& [key, stamps] : by_mb) {
    const auto next =
        key.second + 1 < J
            ? std::make_pair(key.first, key.second + 1)
            : std::make_pair(key.first + 1, 0);
    auto it = by_mb.find(next);
    if (it == by_mb.end()) continue;
    // Every device starts the next mini-batch causally after every device's
    // push of this one: sync made the updates visible before anyone moved on.
    for (const auto& later : it->second)
      for (const auto& earlier : stamps)
        REQUIRE(later.pull_start_clock > earlier.push_done_clock);
  }
}

TEST_CASE("pipeline: poisoned batch shuts down cleanly with an error") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  auto [batches, dims] = small_dataset(200, 40, 31);
  batches[2].examples[5].features = {dims + 7};  // out of declared range
  CHECK_THROWS_AS(run_training(cfg, batches, dims), Error);
}

TEST_CASE("pipeline: deterministic rerun reproduces the model exactly") {
  TempDir tmp;
  auto [batches, dims] = small_dataset(300, 50, 37);
  auto cfg1 = base_config(tmp.path / "x");
  cfg1.deterministic = true;
  auto a = run_training(cfg1, batches, dims);
  auto cfg2 = base_config(tmp.path / "y");
  cfg2.deterministic = true;
  auto b = run_training(cfg2, batches, dims);
  CHECK(bit_identical(a.model, b.model));
}

TEST_CASE("pipeline: skipping one sync injects detectable divergence") {
  TempDir tmp;
  auto [batches, dims] = small_dataset(300, 50, 41);
  auto cfg = base_config(tmp.path / "x");
  cfg.deterministic = true;
  cfg.inject_skip_sync = 0;
  auto out = run_training(cfg, batches, dims);
  auto oracle = train_reference(cfg, batches);
  CHECK_FALSE(bit_identical(out.model, oracle));
}

TEST_CASE("stage queue: blocking bounded fifo with high-water mark") {
  StageQueue<int> q(2);
  REQUIRE(q.push(1));
  REQUIRE(q.push(2));
  std::thread t([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    CHECK(q.pop().value() == 1);
  });
  const auto t0 = std::chrono::steady_clock::now();
  REQUIRE(q.push(3));  // blocks until the pop frees a slot
  const auto blocked_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
  t.join();
  CHECK(blocked_ms >= 15.0);
  CHECK(q.high_water() == 2);
  CHECK(q.pop().value() == 2);
  CHECK(q.pop().value() == 3);
  q.close();
  CHECK_FALSE(q.pop().has_value());
  CHECK_FALSE(q.push(9));
}

TEST_CASE("oracle: deterministic and tier-free") {
  TempDir tmp;
  auto cfg = base_config(tmp.path);
  auto [batches, dims] = small_dataset(200, 50, 43);
  Transport probe;  // the oracle touches no transport and no store
  auto a = train_reference(cfg, batches);
  auto b = train_reference(cfg, batches);
  CHECK(a.dense.weights == b.dense.weights);
  REQUIRE(a.sparse.size() == b.sparse.size());
  for (auto& [k, v] : a.sparse) REQUIRE(b.sparse.at(k) == v);
  CHECK(probe.counters().total_sent == 0);
  CHECK_FALSE(fs::exists(tmp.path / "node0"));
}
