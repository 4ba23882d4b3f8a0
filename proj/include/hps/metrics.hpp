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
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace hps {

struct BatchMetrics {
  std::int64_t batch_id = 0;
  int node = 0;
  std::int64_t step = 0;
  std::size_t examples = 0;
  double ingest_ms = 0;
  double prepare_ms = 0;
  double train_ms = 0;
  double collect_ms = 0;
  double done_at_ms = 0;  // batch completion on the run clock
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t ssd_reads = 0;
  std::uint64_t ssd_writes = 0;
  std::uint64_t remote_pull_keys = 0;

  double hit_rate() const {
    const auto total = cache_hits + cache_misses;
    return total == 0 ? 0.0 : double(cache_hits) / double(total);
  }
};

// Per-device logical-clock stamps around each global mini-batch; the
// staleness assertions compare them across devices.
struct MinibatchTrace {
  std::int64_t step = 0;
  int minibatch = 0;
  int global_device = 0;
  std::uint64_t pull_start_clock = 0;
  std::uint64_t push_done_clock = 0;
  std::uint64_t sync_done_clock = 0;
};

struct MetricsReport {
  std::vector<BatchMetrics> rows;  // one per batch, append-only
  std::vector<MinibatchTrace> trace;
  double wall_ms = 0;
  std::size_t total_examples = 0;
  int sync_rounds_per_minibatch = 0;
  std::uint64_t compactions = 0;
  std::uint64_t queue_high_water = 0;
  std::uint64_t pinned_eviction_violations = 0;
  double final_auc = -1.0;  // filled by the caller when a test set exists

  double examples_per_sec() const {
    return wall_ms > 0 ? 1000.0 * double(total_examples) / wall_ms : 0.0;
  }

  void write_csv(std::ostream& os) const {
    os << "batch_id,node,step,examples,ingest_ms,prepare_ms,train_ms,"
          "collect_ms,done_at_ms,cache_hits,cache_misses,hit_rate,"
          "ssd_reads,ssd_writes,remote_pull_keys\n";
    for (const auto& r : rows) {
      os << r.batch_id << ',' << r.node << ',' << r.step << ',' << r.examples
         << ',' << r.ingest_ms << ',' << r.prepare_ms << ',' << r.train_ms
         << ',' << r.collect_ms << ',' << r.done_at_ms << ',' << r.cache_hits
         << ',' << r.cache_misses << ',' << r.hit_rate() << ',' << r.ssd_reads
         << ',' << r.ssd_writes << ',' << r.remote_pull_keys << '\n';
    }
  }
};

}  // namespace hps
