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
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "hps/device_table.hpp"
#include "hps/topology.hpp"
#include "hps/transport.hpp"
#include "hps/types.hpp"

namespace hps {

using KeyValueList = std::vector<std::pair<ParamKey, std::vector<float>>>;

// The device tier: one fixed-capacity hash table per device holding the
// current batch's working parameters, partitioned without overlap (a key
// lives on exactly one device). Cross-device traffic flows through the
// transport channels; remote reads/accumulates execute on the requester's
// thread against the owner's thread-safe table, standing in for zero-copy
// peer-to-peer access.
class HbmTier {
 public:
  using HostValue = std::function<std::vector<float>(ParamKey)>;

  HbmTier(const Topology& topo, PartitionPolicy policy, std::size_t width,
          Transport* transport)
      : topo_(topo),
        policy_(std::move(policy)),
        width_(width),
        transport_(transport),
        tables_(topo.total_devices()),
        self_pending_(topo.total_devices()) {
    if (transport_)
      for (int g = 0; g < topo_.total_devices(); ++g)
        transport_->register_endpoint(topo_.endpoint_of(g));
  }

  const Topology& topology() const { return topo_; }
  std::size_t value_width() const { return width_; }

  // Builds this node's device tables for the next batch step from the union
  // of all nodes' working key sets. Keys present in the node's previous
  // tables keep the device-resident value (it is fresher than any host copy
  // prepared while the previous batch was still training).
  void build_node(int node,
                  const std::vector<std::vector<ParamKey>>& keys_per_node,
                  const HostValue& host_value) {
    std::vector<std::vector<ParamKey>> partitions(topo_.devices_per_node);
    {
      std::vector<ParamKey> merged;
      for (const auto& ks : keys_per_node)
        merged.insert(merged.end(), ks.begin(), ks.end());
      std::sort(merged.begin(), merged.end());
      merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
      for (ParamKey k : merged) {
        const int g = policy_(k);
        if (topo_.node_of(g) == node)
          partitions[topo_.device_of(g)].push_back(k);
      }
    }
    for (int d = 0; d < topo_.devices_per_node; ++d) {
      const int g = topo_.global_index(node, d);
      auto fresh = std::make_shared<DeviceTable>(partitions[d].size(), width_);
      std::shared_ptr<DeviceTable> prev;
      {
        std::lock_guard lk(mu_);
        prev = tables_[g];
      }
      for (ParamKey k : partitions[d]) {
        if (prev && prev->contains(k)) {
          const auto v = prev->get(k);
          fresh->insert(k, v.data());
        } else {
          const auto v = host_value(k);
          check(v.size() == width_, "hbm: host value width mismatch");
          fresh->insert(k, v.data());
        }
      }
      std::lock_guard lk(mu_);
      tables_[g] = std::move(fresh);
    }
  }

  void build_all(const std::vector<std::vector<ParamKey>>& keys_per_node,
                 const HostValue& host_value) {
    for (int n = 0; n < topo_.num_nodes; ++n)
      build_node(n, keys_per_node, host_value);
  }

  // Gathered view of `keys`, order-normalized by key. Local keys read the
  // requester's own table; remote keys do a pull round-trip per owner device.
  std::map<ParamKey, std::vector<float>> get(const std::vector<ParamKey>& keys,
                                             Endpoint requester) {
    std::map<ParamKey, std::vector<float>> out;
    std::map<int, std::vector<ParamKey>> remote;
    for (ParamKey k : keys) {
      const int g = policy_(k);
      if (topo_.endpoint_of(g) == requester)
        out.emplace(k, table_at(g)->get(k));
      else
        remote[g].push_back(k);
    }
    for (auto& [g, ks] : remote) {
      const Endpoint owner = topo_.endpoint_of(g);
      transport_->send(make_envelope(requester, owner, MsgKind::kParamPullReq,
                                     ks, ks.size() * sizeof(ParamKey)));
      const Envelope req =
          transport_->recv(owner, requester, MsgKind::kParamPullReq);
      const auto& req_keys = payload_as<std::vector<ParamKey>>(req);
      KeyValueList kvs;
      kvs.reserve(req_keys.size());
      const auto table = table_at(g);
      for (ParamKey k : req_keys) kvs.emplace_back(k, table->get(k));
      transport_->send(make_envelope(
          owner, requester, MsgKind::kParamPullResp, kvs,
          kvs.size() * (sizeof(ParamKey) + width_ * sizeof(float))));
      const Envelope resp =
          transport_->recv(requester, owner, MsgKind::kParamPullResp);
      for (const auto& [k, v] : payload_as<KeyValueList>(resp))
        out.emplace(k, v);
    }
    return out;
  }

  // Partitions deltas by owner and ships each partition to its device.
  // Deltas owned by `src` itself are queued locally. Nothing is applied
  // until the owner drains.
  void push_deltas(const std::map<ParamKey, std::vector<float>>& deltas,
                   Endpoint src) {
    std::map<int, KeyValueList> parts;
    for (const auto& [k, v] : deltas) {
      check(v.size() == width_, "hbm: delta width mismatch");
      parts[policy_(k)].emplace_back(k, v);
    }
    for (auto& [g, kvs] : parts) {
      const Endpoint owner = topo_.endpoint_of(g);
      if (owner == src) {
        std::lock_guard lk(mu_);
        auto& pending = self_pending_[g];
        pending.insert(pending.end(), kvs.begin(), kvs.end());
      } else {
        transport_->send(make_envelope(
            src, owner, MsgKind::kAccum, kvs,
            kvs.size() * (sizeof(ParamKey) + width_ * sizeof(float))));
      }
    }
  }

  // Applies every pending delta addressed to `me`, walking senders in
  // canonical node-major, device-major order so the per-key application
  // order is reproducible.
  void drain_accums(Endpoint me) {
    const int mine = topo_.global_index(me.node, me.device);
    const auto table = table_at(mine);
    for (int sn = 0; sn < topo_.num_nodes; ++sn)
    for (int sd = 0; sd < topo_.devices_per_node; ++sd) {
      const int src = topo_.global_index(sn, sd);
      if (src == mine) {
        KeyValueList pending;
        {
          std::lock_guard lk(mu_);
          pending.swap(self_pending_[mine]);
        }
        for (const auto& [k, v] : pending) table->accumulate(k, v.data());
        continue;
      }
      Envelope e;
      while (transport_->try_recv(me, topo_.endpoint_of(src),
                                  MsgKind::kAccum, &e)) {
        check(e.kind == MsgKind::kAccum, "hbm: unexpected message in drain");
        for (const auto& [k, v] : payload_as<KeyValueList>(e))
          table->accumulate(k, v.data());
      }
    }
  }

  // Synchronous accumulate: partition, ship, and apply everywhere. The
  // concurrent path splits this into push_deltas + per-owner drain.
  void accumulate(const std::map<ParamKey, std::vector<float>>& deltas,
                  Endpoint src) {
    push_deltas(deltas, src);
    for (int g = 0; g < topo_.total_devices(); ++g)
      drain_accums(topo_.endpoint_of(g));
  }

  std::shared_ptr<DeviceTable> table_at(int global_device) const {
    std::lock_guard lk(mu_);
    auto t = tables_[global_device];
    check(t != nullptr, "hbm: tables not built");
    return t;
  }

  std::shared_ptr<DeviceTable> table_at(int node, int device) const {
    return table_at(topo_.global_index(node, device));
  }

  bool built() const {
    std::lock_guard lk(mu_);
    return tables_[0] != nullptr;
  }

  // Post-training values held by this node's devices (the owned slice of the
  // global working set), order-normalized by key.
  std::map<ParamKey, std::vector<float>> dump_node(int node) const {
    std::map<ParamKey, std::vector<float>> out;
    for (int d = 0; d < topo_.devices_per_node; ++d) {
      table_at(node, d)->for_each([&](ParamKey k, const float* v) {
        out.emplace(k, std::vector<float>(v, v + width_));
      });
    }
    return out;
  }

 private:
  Topology topo_;
  PartitionPolicy policy_;
  std::size_t width_;
  Transport* transport_;
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<DeviceTable>> tables_;
  std::vector<KeyValueList> self_pending_;
};

inline std::vector<DenseParams> replicate_dense(const DenseParams& dense,
                                                const Topology& topo) {
  return std::vector<DenseParams>(topo.total_devices(), dense);
}

// Averaging of an all-reduced gradient by replica count; shared by the
// device workers and the reference trainer so the arithmetic is identical.
inline std::vector<float> average_by(const std::vector<float>& sum,
                                     int count) {
  std::vector<float> out(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = sum[i] / float(count);
  return out;
}

// Canonical reduction order: replicas sorted node-major, device-major, summed
// per coordinate with 64-bit accumulation. The deterministic synchronize and
// the reference trainer share this exact function.
inline std::vector<float> canonical_sum(
    std::vector<std::pair<int, const std::vector<float>*>> parts,
    const Topology& topo) {
  check(!parts.empty(), "canonical_sum: no parts");
  std::sort(parts.begin(), parts.end(), [&](const auto& a, const auto& b) {
    return std::make_pair(topo.node_of(a.first), topo.device_of(a.first)) <
           std::make_pair(topo.node_of(b.first), topo.device_of(b.first));
  });
  const std::size_t len = parts[0].second->size();
  std::vector<float> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    double acc = 0.0;
    for (const auto& [g, buf] : parts) acc += double((*buf)[i]);
    out[i] = static_cast<float>(acc);
  }
  return out;
}

// Pairwise exchange schedule (Lg(total) rounds): first across nodes between
// same-index devices, then across devices within each node. Every replica
// ends with the elementwise sum of all replicas' buffers. In deterministic
// mode the raw per-replica buffers travel the same schedule and each replica
// reduces them locally in canonical order, which is bit-reproducible; the
// default mode exchanges float partial sums.
class SyncSession {
 public:
  SyncSession(const Topology& topo, Transport* transport, bool deterministic)
      : topo_(topo), transport_(transport), det_(deterministic) {
    inter_rounds_ = log2i(topo.num_nodes);
    intra_rounds_ = log2i(topo.devices_per_node);
  }

  int rounds() const { return inter_rounds_ + intra_rounds_; }

  int partner_of(int g, int round) const {
    const int n = topo_.node_of(g), d = topo_.device_of(g);
    if (round < inter_rounds_)
      return topo_.global_index(n ^ (1 << round), d);
    return topo_.global_index(n, d ^ (1 << (round - inter_rounds_)));
  }

  // Collective; call from one thread per global device.
  void run(int g, std::vector<float>& buf) {
    State st = init(g, buf);
    for (int r = 0; r < rounds(); ++r) {
      send_round(g, r, st);
      recv_round(g, r, st);
    }
    finalize(st, buf);
  }

  // Sequential driver over all replicas; identical messages and results.
  static void run_all(const Topology& topo, Transport* transport, bool det,
                      std::vector<std::vector<float>>& bufs) {
    SyncSession s(topo, transport, det);
    check(int(bufs.size()) == topo.total_devices(),
          "synchronize: one buffer per device required");
    std::vector<State> st;
    st.reserve(bufs.size());
    for (int g = 0; g < int(bufs.size()); ++g) st.push_back(s.init(g, bufs[g]));
    for (int r = 0; r < s.rounds(); ++r) {
      for (int g = 0; g < int(bufs.size()); ++g) s.send_round(g, r, st[g]);
      for (int g = 0; g < int(bufs.size()); ++g) s.recv_round(g, r, st[g]);
    }
    for (int g = 0; g < int(bufs.size()); ++g) s.finalize(st[g], bufs[g]);
  }

 private:
  struct State {
    std::vector<std::pair<int, std::vector<float>>> parts;  // det mode
    std::vector<float> partial;                             // default mode
  };

  static int log2i(int x) {
    int r = 0;
    while ((1 << r) < x) ++r;
    return r;
  }

  State init(int g, const std::vector<float>& buf) const {
    State st;
    if (det_)
      st.parts.emplace_back(g, buf);
    else
      st.partial = buf;
    return st;
  }

  void send_round(int g, int r, const State& st) {
    const Endpoint me = topo_.endpoint_of(g);
    const Endpoint partner = topo_.endpoint_of(partner_of(g, r));
    if (det_) {
      std::size_t bytes = 0;
      for (const auto& [og, b] : st.parts)
        bytes += sizeof(int) + b.size() * sizeof(float);
      transport_->send(make_envelope(me, partner, MsgKind::kSyncExchange,
                                     st.parts, bytes, std::uint64_t(r)));
    } else {
      transport_->send(make_envelope(me, partner, MsgKind::kSyncExchange,
                                     st.partial,
                                     st.partial.size() * sizeof(float),
                                     std::uint64_t(r)));
    }
  }

  void recv_round(int g, int r, State& st) {
    const Endpoint me = topo_.endpoint_of(g);
    const Endpoint partner = topo_.endpoint_of(partner_of(g, r));
    const Envelope e = transport_->recv(me, partner, MsgKind::kSyncExchange);
    check(e.kind == MsgKind::kSyncExchange && e.round == std::uint64_t(r),
          "synchronize: schedule misalignment");
    if (det_) {
      const auto& parts =
          payload_as<std::vector<std::pair<int, std::vector<float>>>>(e);
      st.parts.insert(st.parts.end(), parts.begin(), parts.end());
    } else {
      const auto& partial = payload_as<std::vector<float>>(e);
      check(partial.size() == st.partial.size(),
            "synchronize: buffer length mismatch");
      for (std::size_t i = 0; i < partial.size(); ++i)
        st.partial[i] += partial[i];
    }
  }

  void finalize(State& st, std::vector<float>& buf) const {
    if (det_) {
      std::vector<std::pair<int, const std::vector<float>*>> view;
      view.reserve(st.parts.size());
      for (const auto& [og, b] : st.parts) view.emplace_back(og, &b);
      buf = canonical_sum(std::move(view), topo_);
    } else {
      buf = std::move(st.partial);
    }
  }

  Topology topo_;
  Transport* transport_;
  bool det_;
  int inter_rounds_ = 0;
  int intra_rounds_ = 0;
};

// Every buffer ends holding the elementwise sum of all buffers.
inline void synchronize(std::vector<std::vector<float>>& replica_bufs,
                        const Topology& topo, Transport* transport,
                        bool deterministic = false) {
  SyncSession::run_all(topo, transport, deterministic, replica_bufs);
}

}  // namespace hps
