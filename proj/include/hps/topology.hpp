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

#include <functional>

#include "hps/common.hpp"
#include "hps/transport.hpp"

namespace hps {

// Node x device layout. Both counts must be powers of two: the pairwise
// exchange schedule partners endpoints by XOR on their index.
struct Topology {
  int num_nodes = 1;
  int devices_per_node = 1;

  Topology() = default;
  Topology(int nodes, int devices)
      : num_nodes(nodes), devices_per_node(devices) {
    check(nodes >= 1 && is_pow2(std::uint64_t(nodes)),
          "topology: num_nodes must be a power of two");
    check(devices >= 1 && is_pow2(std::uint64_t(devices)),
          "topology: devices_per_node must be a power of two");
  }

  int total_devices() const { return num_nodes * devices_per_node; }

  // Global device index g in [0, N*D): node = g mod N, device = g div N.
  // This keeps a key's device-tier owner on its mem-tier owner node when
  // g = key mod (N*D).
  int node_of(int global_device) const { return global_device % num_nodes; }
  int device_of(int global_device) const { return global_device / num_nodes; }
  int global_index(int node, int device) const {
    return device * num_nodes + node;
  }
  Endpoint endpoint_of(int global_device) const {
    return Endpoint{node_of(global_device), device_of(global_device)};
  }
  Endpoint mem_endpoint(int node) const { return Endpoint{node, -1}; }
};

// Total function ParamKey -> global device index, stable for the run.
struct PartitionPolicy {
  std::function<int(ParamKey)> device_of_key;

  static PartitionPolicy modulo(const Topology& topo) {
    const int total = topo.total_devices();
    return PartitionPolicy{
        [total](ParamKey key) { return int(key % std::uint64_t(total)); }};
  }

  // Two-way range split; keys <= threshold go to device 0.
  static PartitionPolicy range_split(ParamKey threshold) {
    return PartitionPolicy{
        [threshold](ParamKey key) { return key <= threshold ? 0 : 1; }};
  }

  int operator()(ParamKey key) const { return device_of_key(key); }
};

// Node-level shard predicate of the memory tier.
struct NodeShard {
  int node_id = 0;
  int num_nodes = 1;

  bool owns(ParamKey key) const {
    return int(key % std::uint64_t(num_nodes)) == node_id;
  }
  int owner_of(ParamKey key) const {
    return int(key % std::uint64_t(num_nodes));
  }
};

}  // namespace hps
