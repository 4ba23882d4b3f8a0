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

#include <array>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hps/common.hpp"
#include "hps/model.hpp"
#include "hps/topology.hpp"

namespace hps {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Every tunable of a run, as a flat key=value file plus overrides.
struct RunConfig {
  // topology
  int nodes = 1;
  int devices_per_node = 1;
  // model
  std::size_t embedding_dim = 8;
  std::vector<std::size_t> layer_dims = {8, 16, 1};
  float learning_rate = 0.05f;
  std::uint64_t seed = 42;
  // batching
  std::size_t batch_size = 2000;
  int minibatches_per_batch = 4;
  // mem tier; 0 = auto-size from the first batch (2x / 8x its working set)
  std::size_t lru_capacity = 0;
  std::size_t lfu_capacity = 0;
  // disk tier
  std::string store_dir = "hps_store";
  std::size_t file_capacity = 4096;
  double usage_threshold = 1.5;
  bool fsync_writes = false;
  // pipeline: one prefetch queue per stage boundary (ingest->prepare,
  // prepare->train, train->collect); 0 in queue_depths falls back to
  // queue_depth
  int queue_depth = 2;
  std::array<int, 3> queue_depths = {0, 0, 0};
  bool deterministic = false;
  std::array<double, 4> stage_delay_ms = {0, 0, 0, 0};
  // transport
  double transport_delay_us = 0.0;
  double transport_per_byte_us = 0.0;
  int max_retries = 3;
  int retry_backoff_ms = 1;
  // fault injection (verification tooling): skip the dense synchronization
  // of one global mini-batch; -1 = off
  std::int64_t inject_skip_sync = -1;

  ModelConfig model() const {
    return ModelConfig{embedding_dim, layer_dims, learning_rate, seed};
  }

  Topology topology() const { return Topology(nodes, devices_per_node); }

  int queue_depth_at(int boundary) const {
    return queue_depths[boundary] > 0 ? queue_depths[boundary] : queue_depth;
  }

  void validate() const {
    try {
      (void)topology();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (layer_dims.empty() || layer_dims.back() != 1)
      throw ConfigError("config: layer_dims must end in 1");
    if (embedding_dim == 0) throw ConfigError("config: embedding_dim > 0");
    if (batch_size == 0) throw ConfigError("config: batch_size > 0");
    if (minibatches_per_batch < 1)
      throw ConfigError("config: minibatches_per_batch >= 1");
    if (queue_depth < 1) throw ConfigError("config: queue_depth >= 1");
    for (int d : queue_depths)
      if (d < 0) throw ConfigError("config: queue_depths entries >= 0");
    if (file_capacity < 1 || file_capacity > 0xffff)
      throw ConfigError("config: file_capacity in [1, 65535]");
    if (usage_threshold <= 1.0)
      throw ConfigError("config: usage_threshold must exceed 1.0");
    if (!(learning_rate > 0.0f))
      throw ConfigError("config: learning_rate must be positive");
    if (store_dir.empty()) throw ConfigError("config: store_dir required");
  }

  // HPS_STORE_DIR overrides the configured store directory.
  std::string effective_store_dir() const {
    if (const char* env = std::getenv("HPS_STORE_DIR"); env && *env)
      return env;
    return store_dir;
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    m["nodes"] = std::to_string(nodes);
    m["devices_per_node"] = std::to_string(devices_per_node);
    m["embedding_dim"] = std::to_string(embedding_dim);
    {
      std::ostringstream os;
      for (std::size_t i = 0; i < layer_dims.size(); ++i)
        os << (i ? "," : "") << layer_dims[i];
      m["layer_dims"] = os.str();
    }
    m["learning_rate"] = format_double(learning_rate);
    m["seed"] = std::to_string(seed);
    m["batch_size"] = std::to_string(batch_size);
    m["minibatches_per_batch"] = std::to_string(minibatches_per_batch);
    m["lru_capacity"] = std::to_string(lru_capacity);
    m["lfu_capacity"] = std::to_string(lfu_capacity);
    m["store_dir"] = store_dir;
    m["file_capacity"] = std::to_string(file_capacity);
    m["usage_threshold"] = format_double(usage_threshold);
    m["fsync_writes"] = fsync_writes ? "true" : "false";
    m["queue_depth"] = std::to_string(queue_depth);
    {
      std::ostringstream os;
      for (int i = 0; i < 3; ++i) os << (i ? "," : "") << queue_depths[i];
      m["queue_depths"] = os.str();
    }
    m["deterministic"] = deterministic ? "true" : "false";
    {
      std::ostringstream os;
      for (int i = 0; i < 4; ++i) os << (i ? "," : "") << stage_delay_ms[i];
      m["stage_delay_ms"] = os.str();
    }
    m["transport_delay_us"] = format_double(transport_delay_us);
    m["transport_per_byte_us"] = format_double(transport_per_byte_us);
    m["max_retries"] = std::to_string(max_retries);
    m["retry_backoff_ms"] = std::to_string(retry_backoff_ms);
    m["inject_skip_sync"] = std::to_string(inject_skip_sync);
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    try {
      if (key == "nodes") nodes = std::stoi(value);
      else if (key == "devices_per_node") devices_per_node = std::stoi(value);
      else if (key == "embedding_dim") embedding_dim = std::stoul(value);
      else if (key == "layer_dims") layer_dims = parse_dims(value);
      else if (key == "learning_rate") learning_rate = std::stof(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "batch_size") batch_size = std::stoul(value);
      else if (key == "minibatches_per_batch")
        minibatches_per_batch = std::stoi(value);
      else if (key == "lru_capacity") lru_capacity = std::stoul(value);
      else if (key == "lfu_capacity") lfu_capacity = std::stoul(value);
      else if (key == "store_dir") store_dir = value;
      else if (key == "file_capacity") file_capacity = std::stoul(value);
      else if (key == "usage_threshold") usage_threshold = std::stod(value);
      else if (key == "fsync_writes") fsync_writes = parse_bool(value);
      else if (key == "queue_depth") queue_depth = std::stoi(value);
      else if (key == "queue_depths") queue_depths = parse_depths(value);
      else if (key == "deterministic") deterministic = parse_bool(value);
      else if (key == "stage_delay_ms") stage_delay_ms = parse_delays(value);
      else if (key == "transport_delay_us")
        transport_delay_us = std::stod(value);
      else if (key == "transport_per_byte_us")
        transport_per_byte_us = std::stod(value);
      else if (key == "max_retries") max_retries = std::stoi(value);
      else if (key == "retry_backoff_ms") retry_backoff_ms = std::stoi(value);
      else if (key == "inject_skip_sync") inject_skip_sync = std::stoll(value);
      else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for '" + key + "': " + value);
    }
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw ConfigError("config: cannot read " + path);
    RunConfig cfg;
    std::string line;
    while (std::getline(f, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    check(f.good(), "config: cannot write " + path);
    for (const auto& [k, v] : to_map()) f << k << "=" << v << "\n";
  }

 private:
  static std::string trim(std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
  }

  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad bool: " + v);
  }

  static std::string format_double(double d) {
    std::ostringstream os;
    os << d;
    return os.str();
  }

  static std::vector<std::size_t> parse_dims(const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
    return out;
  }

  static std::array<int, 3> parse_depths(const std::string& v) {
    std::array<int, 3> out = {0, 0, 0};
    std::stringstream ss(v);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',') && i < 3) out[i++] = std::stoi(tok);
    return out;
  }

  static std::array<double, 4> parse_delays(const std::string& v) {
    std::array<double, 4> out = {0, 0, 0, 0};
    std::stringstream ss(v);
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',') && i < 4) out[i++] = std::stod(tok);
    return out;
  }
};

}  // namespace hps
