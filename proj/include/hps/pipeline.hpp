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
#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "hps/config.hpp"
#include "hps/hbm_ps.hpp"
#include "hps/mem_ps.hpp"
#include "hps/metrics.hpp"
#include "hps/model.hpp"
#include "hps/oracle.hpp"
#include "hps/sharding.hpp"
#include "hps/ssd_ps.hpp"
#include "hps/transport.hpp"

namespace hps {

// Bounded FIFO between two pipeline stages; push blocks when full.
template <class T>
class StageQueue {
 public:
  explicit StageQueue(std::size_t capacity) : cap_(capacity) {}

  bool push(T item) {
    std::unique_lock lk(mu_);
    cv_free_.wait(lk, [&] { return q_.size() < cap_ || closed_; });
    if (closed_) return false;
    q_.push_back(std::move(item));
    hwm_ = std::max(hwm_, q_.size());
    cv_item_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lk(mu_);
    cv_item_.wait(lk, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return std::nullopt;
    T item = std::move(q_.front());
    q_.pop_front();
    cv_free_.notify_one();
    return item;
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_item_.notify_all();
    cv_free_.notify_all();
  }

  std::size_t high_water() const {
    std::lock_guard lk(mu_);
    return hwm_;
  }

 private:
  std::size_t cap_;
  mutable std::mutex mu_;
  std::condition_variable cv_item_, cv_free_;
  std::deque<T> q_;
  std::size_t hwm_ = 0;
  bool closed_ = false;
};

// Reusable barrier whose waiters can be released early on failure.
class AbortableBarrier {
 public:
  explicit AbortableBarrier(int parties) : parties_(parties) {}

  // Returns false when the barrier was aborted.
  bool arrive_and_wait() {
    std::unique_lock lk(mu_);
    if (aborted_) return false;
    const std::uint64_t gen = gen_;
    if (++count_ == parties_) {
      count_ = 0;
      ++gen_;
      cv_.notify_all();
      return true;
    }
    cv_.wait(lk, [&] { return gen_ != gen || aborted_; });
    return !aborted_;
  }

  void abort() {
    {
      std::lock_guard lk(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

 private:
  int parties_;
  std::mutex mu_;
  std::condition_variable cv_;
  int count_ = 0;
  std::uint64_t gen_ = 0;
  bool aborted_ = false;
};

namespace pipe {

struct RawJob {
  std::int64_t step = 0;
  bool real = false;  // false = lockstep padding when the stream ran dry
  Batch batch;
  double ingest_ms = 0;
};

struct PreparedJob {
  std::int64_t step = 0;
  bool real = false;
  Batch batch;
  std::vector<ParamKey> working;
  std::map<ParamKey, SparseParam> prepared;
  double ingest_ms = 0, prepare_ms = 0;
  std::uint64_t hits = 0, misses = 0, remote_keys = 0, ssd_reads = 0;
};

struct TrainedJob {
  std::int64_t step = 0;
  bool real = false;
  std::int64_t batch_id = 0;
  std::size_t examples = 0;
  std::map<ParamKey, std::vector<float>> updates;
  double ingest_ms = 0, prepare_ms = 0, train_ms = 0;
  std::uint64_t hits = 0, misses = 0, remote_keys = 0, ssd_reads = 0;
};

// Per-node jobs for one global step, released to the device workers only
// when every node has submitted (the nodes train in lockstep at mini-batch
// granularity).
class StepBoard {
 public:
  StepBoard(int nodes, int workers) : nodes_(nodes), workers_(workers) {
    jobs_.resize(nodes);
    pending_.resize(nodes);
  }

  void submit(int node, std::int64_t step,
              std::vector<std::vector<std::vector<Example>>> shards) {
    std::unique_lock lk(mu_);
    pending_[node] = std::move(shards);
    if (++submitted_ == nodes_) {
      submitted_ = 0;
      jobs_.swap(pending_);
      ready_ = step;
      done_count_ = 0;
      cv_.notify_all();
    }
  }

  // Device worker: block until the step's jobs are ready; nullptr on abort.
  const std::vector<std::vector<std::vector<Example>>>* wait_ready(
      int node, std::int64_t step) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return ready_ >= step || aborted_; });
    if (aborted_) return nullptr;
    return &jobs_[node];
  }

  void worker_done(std::int64_t step) {
    std::unique_lock lk(mu_);
    if (++done_count_ == workers_) {
      completed_ = step;
      cv_.notify_all();
    }
  }

  bool wait_completed(std::int64_t step) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return completed_ >= step || aborted_; });
    return !aborted_;
  }

  void abort() {
    {
      std::lock_guard lk(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

 private:
  int nodes_, workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::vector<std::vector<std::vector<Example>>>> jobs_, pending_;
  int submitted_ = 0;
  int done_count_ = 0;
  std::int64_t ready_ = -1;
  std::int64_t completed_ = -1;
  bool aborted_ = false;
};

}  // namespace pipe

struct TrainOutput {
  FlatStore model;
  MetricsReport metrics;
};

// Algorithm: per node, a 4-stage pipeline (ingest -> prepare -> device
// load/train -> collect/flush) over bounded prefetch queues. Nodes process
// their own batches but train in global lockstep: every mini-batch ends with
// sparse deltas accumulated on owner devices, a dense all-reduce, and a
// rendezvous, so no device ever computes on another mini-batch's stale
// values. See MemPs for the cross-batch freshness discipline.
class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<Batch> batches, std::uint64_t dims)
      : cfg_(std::move(cfg)), batches_(std::move(batches)), dims_(dims) {
    cfg_.validate();
  }

  TrainOutput run() {
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutput out;
    const Topology topo = cfg_.topology();
    const ModelConfig mc = cfg_.model();

    if (batches_.empty()) {
      out.model.dense = init_dense(mc);
      return out;
    }

    // Auto-sized cache: 2x / 8x the first batch's working set.
    std::size_t lru_cap = cfg_.lru_capacity, lfu_cap = cfg_.lfu_capacity;
    {
      const auto ws0 = MemPs::extract_working_set(batches_.front()).size();
      if (lru_cap == 0) lru_cap = std::max<std::size_t>(1, 2 * ws0);
      if (lfu_cap == 0) lfu_cap = std::max<std::size_t>(1, 8 * ws0);
    }

    const int num_nodes = topo.num_nodes;
    const int devices = topo.devices_per_node;
    const int workers = topo.total_devices();
    const std::int64_t total_steps =
        std::int64_t((batches_.size() + num_nodes - 1) / num_nodes);

    Transport transport;
    transport.set_delay(
        {std::chrono::microseconds(std::int64_t(cfg_.transport_delay_us)),
         cfg_.transport_per_byte_us});

    std::vector<std::unique_ptr<SsdStore>> stores;
    std::vector<std::unique_ptr<MemPs>> memps;
    for (int n = 0; n < num_nodes; ++n) {
      StoreConfig sc;
      sc.dir = std::filesystem::path(cfg_.effective_store_dir()) /
               ("node" + std::to_string(n));
      sc.embedding_dim = mc.embedding_dim;
      sc.file_capacity = cfg_.file_capacity;
      sc.usage_threshold = cfg_.usage_threshold;
      sc.fsync_writes = cfg_.fsync_writes;
      stores.push_back(std::make_unique<SsdStore>(sc));
    }
    RetryPolicy retry{cfg_.max_retries,
                      std::chrono::milliseconds(cfg_.retry_backoff_ms)};
    for (int n = 0; n < num_nodes; ++n)
      memps.push_back(std::make_unique<MemPs>(n, topo, stores[n].get(),
                                              &transport, lru_cap, lfu_cap,
                                              retry));
    {
      std::vector<MemPs*> peers;
      for (auto& m : memps) peers.push_back(m.get());
      for (auto& m : memps) m->set_peers(peers);
    }

    HbmTier hbm(topo, PartitionPolicy::modulo(topo), mc.embedding_dim,
                &transport);
    std::vector<DenseParams> replicas = replicate_dense(init_dense(mc), topo);
    SyncSession sync(topo, &transport, cfg_.deterministic);

    pipe::StepBoard board(num_nodes, workers);
    AbortableBarrier barrier(workers);

    using RawQ = StageQueue<pipe::RawJob>;
    using PrepQ = StageQueue<pipe::PreparedJob>;
    using TrainQ = StageQueue<pipe::TrainedJob>;
    std::vector<std::unique_ptr<RawQ>> q_raw;
    std::vector<std::unique_ptr<PrepQ>> q_prep;
    std::vector<std::unique_ptr<TrainQ>> q_train;
    for (int n = 0; n < num_nodes; ++n) {
      q_raw.push_back(std::make_unique<RawQ>(cfg_.queue_depth_at(0)));
      q_prep.push_back(std::make_unique<PrepQ>(cfg_.queue_depth_at(1)));
      q_train.push_back(std::make_unique<TrainQ>(cfg_.queue_depth_at(2)));
    }

    std::mutex fail_mu;
    std::exception_ptr first_error;
    auto fail = [&](std::exception_ptr e) {
      {
        std::lock_guard lk(fail_mu);
        if (!first_error) first_error = e;
      }
      board.abort();
      barrier.abort();
      transport.abort();
      for (auto& m : memps) m->abort();
      for (auto& q : q_raw) q->close();
      for (auto& q : q_prep) q->close();
      for (auto& q : q_train) q->close();
    };

    std::mutex metrics_mu;
    MetricsReport report;
    report.sync_rounds_per_minibatch = sync.rounds();

    auto sleep_ms = [](double ms) {
      if (ms > 0)
        std::this_thread::sleep_for(
            std::chrono::microseconds(std::int64_t(ms * 1000)));
    };
    auto now_ms = [&t0] {
      return std::chrono::duration<double, std::milli>(
                 std::chrono::steady_clock::now() - t0)
          .count();
    };

    std::vector<std::thread> threads;

    // --- ingest: reads this node's batch stream, validates, pads lockstep
    for (int n = 0; n < num_nodes; ++n) {
      threads.emplace_back([&, n] {
        try {
          for (std::int64_t t = 0; t < total_steps; ++t) {
            pipe::RawJob job;
            job.step = t;
            const std::size_t idx = std::size_t(t) * num_nodes + n;
            const double w0 = now_ms();
            if (idx < batches_.size()) {
              job.real = true;
              job.batch = batches_[idx];
              for (const Example& ex : job.batch.examples)
                for (ParamKey k : ex.features)
                  check(k < dims_, "ingest: feature key " + std::to_string(k) +
                                       " out of range for dims=" +
                                       std::to_string(dims_));
              sleep_ms(cfg_.stage_delay_ms[0]);
            }
            job.ingest_ms = now_ms() - w0;
            if (!q_raw[n]->push(std::move(job))) return;
          }
          q_raw[n]->close();
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }

    // --- prepare: working-set extraction + local/remote parameter pulls
    for (int n = 0; n < num_nodes; ++n) {
      threads.emplace_back([&, n] {
        try {
          for (;;) {
            auto raw = q_raw[n]->pop();
            if (!raw) break;
            const double w0 = now_ms();
            const auto c0 = memps[n]->counters();
            const auto s0 = stores[n]->stats();
            pipe::PreparedJob job;
            job.step = raw->step;
            job.real = raw->real;
            job.ingest_ms = raw->ingest_ms;
            job.batch = std::move(raw->batch);
            if (job.real) sleep_ms(cfg_.stage_delay_ms[1]);
            job.working = MemPs::extract_working_set(job.batch);
            job.prepared =
                memps[n]->prepare_parameters(job.step, job.working);
            const auto c1 = memps[n]->counters();
            const auto s1 = stores[n]->stats();
            job.hits = c1.hits - c0.hits;
            job.misses = c1.misses - c0.misses;
            job.remote_keys = c1.remote_pull_keys - c0.remote_pull_keys;
            job.ssd_reads = s1.files_read - s0.files_read;
            job.prepare_ms = now_ms() - w0;
            if (!q_prep[n]->push(std::move(job))) return;
          }
          q_prep[n]->close();
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }

    // --- train: build device tables (carry-over from the previous step's
    // tables), release the step to the device workers, gather the updated
    // values afterwards
    for (int n = 0; n < num_nodes; ++n) {
      threads.emplace_back([&, n] {
        try {
          for (;;) {
            auto prep = q_prep[n]->pop();
            if (!prep) break;
            const double w0 = now_ms();
            if (prep->real) sleep_ms(cfg_.stage_delay_ms[2]);
            const auto peer_keys = memps[n]->take_peer_keys(prep->step);
            std::vector<std::vector<ParamKey>> key_sets;
            key_sets.push_back(prep->working);
            key_sets.push_back(peer_keys);
            const auto& prepared = prep->prepared;
            hbm.build_node(n, key_sets, [&](ParamKey k) {
              auto it = prepared.find(k);
              if (it != prepared.end()) return it->second.embedding;
              return memps[n]->host_embedding(k);
            });
            board.submit(n, prep->step,
                         shard_batch(prep->batch, devices,
                                     cfg_.minibatches_per_batch));
            if (!board.wait_completed(prep->step)) return;

            pipe::TrainedJob job;
            job.step = prep->step;
            job.real = prep->real;
            job.batch_id = prep->batch.batch_id;
            job.examples = prep->batch.examples.size();
            job.updates = hbm.dump_node(n);
            job.ingest_ms = prep->ingest_ms;
            job.prepare_ms = prep->prepare_ms;
            job.hits = prep->hits;
            job.misses = prep->misses;
            job.remote_keys = prep->remote_keys;
            job.ssd_reads = prep->ssd_reads;
            job.train_ms = now_ms() - w0;
            if (!q_train[n]->push(std::move(job))) return;
          }
          q_train[n]->close();
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }

    // --- collect: phase A updates the cache and releases pins (making the
    // step visible to prepare of step+2), phase B flushes overflow to disk
    for (int n = 0; n < num_nodes; ++n) {
      threads.emplace_back([&, n] {
        try {
          for (;;) {
            auto job = q_train[n]->pop();
            if (!job) break;
            const double w0 = now_ms();
            const auto s0 = stores[n]->stats();
            memps[n]->collect_updates(job->step, job->updates);
            if (job->real) sleep_ms(cfg_.stage_delay_ms[3]);
            memps[n]->flush_pending();
            const auto s1 = stores[n]->stats();
            if (job->real) {
              BatchMetrics row;
              row.batch_id = job->batch_id;
              row.node = n;
              row.step = job->step;
              row.examples = job->examples;
              row.ingest_ms = job->ingest_ms;
              row.prepare_ms = job->prepare_ms;
              row.train_ms = job->train_ms;
              row.collect_ms = now_ms() - w0;
              row.done_at_ms = now_ms();
              row.cache_hits = job->hits;
              row.cache_misses = job->misses;
              row.ssd_reads = job->ssd_reads;
              row.ssd_writes = s1.files_written - s0.files_written;
              row.remote_pull_keys = job->remote_keys;
              std::lock_guard lk(metrics_mu);
              report.rows.push_back(row);
            }
          }
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }

    // --- device workers: one per (node, device), global lockstep
    std::vector<std::vector<MinibatchTrace>> traces(workers);
    for (int g = 0; g < workers; ++g) {
      threads.emplace_back([&, g] {
        try {
          const int node = topo.node_of(g);
          const Endpoint ep = topo.endpoint_of(g);
          DenseParams& dense = replicas[g];
          const int J = cfg_.minibatches_per_batch;
          for (std::int64_t t = 0; t < total_steps; ++t) {
            const auto* shards = board.wait_ready(node, t);
            if (!shards) return;
            const auto& mine = (*shards)[topo.device_of(g)];
            for (int j = 0; j < J; ++j) {
              const auto& examples = mine[j];
              MinibatchTrace tr;
              tr.step = t;
              tr.minibatch = j;
              tr.global_device = g;
              tr.pull_start_clock = transport.clock(ep);

              std::vector<ParamKey> keys;
              for (const Example& ex : examples)
                keys.insert(keys.end(), ex.features.begin(),
                            ex.features.end());
              std::sort(keys.begin(), keys.end());
              keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
              auto params = hbm.get(keys, ep);
              if (!barrier.arrive_and_wait()) return;  // pull phase done

              std::vector<float> dense_grad(dense.weights.size(), 0.0f);
              if (!examples.empty()) {
                auto emb_of = [&](ParamKey k) -> const float* {
                  auto it = params.find(k);
                  return it == params.end() ? nullptr : it->second.data();
                };
                const auto preds = forward(examples, emb_of, dense);
                auto grad = backward(examples, emb_of, dense, preds);
                dense_grad = std::move(grad.dense);
                std::map<ParamKey, std::vector<float>> deltas;
                for (auto& [k, gk] : grad.sparse)
                  deltas.emplace(k, sgd_delta(gk, cfg_.learning_rate));
                hbm.push_deltas(deltas, ep);
              }
              tr.push_done_clock = transport.clock(ep);
              if (!barrier.arrive_and_wait()) return;  // push phase done

              hbm.drain_accums(ep);
              const std::int64_t global_mb = t * J + j;
              if (global_mb != cfg_.inject_skip_sync) {
                sync.run(g, dense_grad);
                apply_update(dense, average_by(dense_grad, workers),
                             cfg_.learning_rate);
              }
              tr.sync_done_clock = transport.clock(ep);
              traces[g].push_back(tr);
              if (!barrier.arrive_and_wait()) return;  // mini-batch done
            }
            board.worker_done(t);
          }
        } catch (...) {
          fail(std::current_exception());
        }
      });
    }

    for (auto& th : threads) th.join();
    if (first_error) std::rethrow_exception(first_error);

    // Final model: every node's owned parameters plus replica 0's dense.
    for (int n = 0; n < num_nodes; ++n) {
      auto snap = memps[n]->snapshot_all();
      for (auto& [k, v] : snap) out.model.sparse.emplace(k, std::move(v));
    }
    out.model.dense = replicas[0];

    report.wall_ms = now_ms();
    for (const auto& row : report.rows) report.total_examples += row.examples;
    for (auto& tr : traces)
      report.trace.insert(report.trace.end(), tr.begin(), tr.end());
    for (auto& s : stores) {
      s->wait_compaction_idle();
      report.compactions += s->stats().compactions;
    }
    for (auto& m : memps)
      report.pinned_eviction_violations += m->pinned_eviction_violations();
    for (auto& q : q_raw)
      report.queue_high_water =
          std::max<std::uint64_t>(report.queue_high_water, q->high_water());
    for (auto& q : q_prep)
      report.queue_high_water =
          std::max<std::uint64_t>(report.queue_high_water, q->high_water());
    for (auto& q : q_train)
      report.queue_high_water =
          std::max<std::uint64_t>(report.queue_high_water, q->high_water());
    std::sort(report.rows.begin(), report.rows.end(),
              [](const BatchMetrics& a, const BatchMetrics& b) {
                return a.batch_id < b.batch_id;
              });
    out.metrics = std::move(report);
    return out;
  }

 private:
  RunConfig cfg_;
  std::vector<Batch> batches_;
  std::uint64_t dims_;
};

// Algorithm entry point: config + dataset stream -> final model + metrics.
inline TrainOutput run_training(const RunConfig& cfg,
                                const std::vector<Batch>& batches,
                                std::uint64_t dims) {
  Trainer trainer(cfg, batches, dims);
  return trainer.run();
}

}  // namespace hps
