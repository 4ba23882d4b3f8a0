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

#include <map>
#include <unordered_map>
#include <vector>

#include "hps/config.hpp"
#include "hps/hbm_ps.hpp"
#include "hps/model.hpp"
#include "hps/sharding.hpp"
#include "hps/types.hpp"

namespace hps {

// Tier-free model state: one flat map, no eviction, zero-init on first touch
// (the same rule the memory tier applies to keys absent from disk).
struct FlatStore {
  std::unordered_map<ParamKey, SparseParam> sparse;
  DenseParams dense;

  SparseParam& get_or_init(ParamKey key, std::size_t width) {
    auto [it, fresh] = sparse.try_emplace(key, width);
    (void)fresh;
    return it->second;
  }

  const float* embedding_or_null(ParamKey key) const {
    auto it = sparse.find(key);
    return it == sparse.end() ? nullptr : it->second.embedding.data();
  }
};

// Single-process, single-map trainer with the identical math and the
// identical update contract as the distributed path: per global mini-batch,
// every (node, device) shard's gradients are computed against the same
// snapshot; sparse deltas apply in canonical node-major, device-major order;
// dense gradients are canonically summed and averaged by replica count.
// Ground truth for the lossless-training acceptance.
inline FlatStore train_reference(const RunConfig& cfg,
                                 const std::vector<Batch>& batches) {
  const Topology topo = cfg.topology();
  const ModelConfig mc = cfg.model();
  const std::size_t width = mc.embedding_dim;
  const int num_nodes = topo.num_nodes;
  const int devices = topo.devices_per_node;
  const int replicas = topo.total_devices();
  const int J = cfg.minibatches_per_batch;
  const float lr = mc.learning_rate;

  FlatStore store;
  store.dense = init_dense(mc);

  const std::size_t steps =
      (batches.size() + std::size_t(num_nodes) - 1) / std::size_t(num_nodes);
  for (std::size_t t = 0; t < steps; ++t) {
    // shards[n][d][j]
    std::vector<std::vector<std::vector<std::vector<Example>>>> shards(
        num_nodes);
    for (int n = 0; n < num_nodes; ++n) {
      const std::size_t idx = t * std::size_t(num_nodes) + std::size_t(n);
      Batch b;
      if (idx < batches.size()) b = batches[idx];
      shards[n] = shard_batch(b, devices, J);
      // Zero-init every referenced key up front, mirroring the tiers'
      // prepare phase (zero vector == parameter not yet materialized).
      for (const Example& ex : b.examples)
        for (ParamKey k : ex.features) store.get_or_init(k, width);
    }
    for (int j = 0; j < J; ++j) {
      std::vector<GradientUpdate> grads(replicas);
      auto emb_of = [&](ParamKey k) { return store.embedding_or_null(k); };
      for (int n = 0; n < num_nodes; ++n) {
        for (int d = 0; d < devices; ++d) {
          const auto& examples = shards[n][d][j];
          GradientUpdate g;
          if (!examples.empty()) {
            const auto preds = forward(examples, emb_of, store.dense);
            g = backward(examples, emb_of, store.dense, preds);
          } else {
            g.dense.assign(store.dense.weights.size(), 0.0f);
          }
          grads[topo.global_index(n, d)] = std::move(g);
        }
      }
      // Sparse: summed per owner key via additive deltas, canonical order.
      for (int n = 0; n < num_nodes; ++n) {
        for (int d = 0; d < devices; ++d) {
          const auto& g = grads[topo.global_index(n, d)];
          for (const auto& [k, gk] : g.sparse) {
            auto& p = store.get_or_init(k, width);
            const auto delta = sgd_delta(gk, lr);
            for (std::size_t i = 0; i < width; ++i)
              p.embedding[i] += delta[i];
          }
        }
      }
      // Dense: canonical sum over all replicas, averaged by replica count.
      std::vector<std::pair<int, const std::vector<float>*>> parts;
      parts.reserve(replicas);
      for (int g = 0; g < replicas; ++g) parts.emplace_back(g, &grads[g].dense);
      const auto sum = canonical_sum(std::move(parts), topo);
      apply_update(store.dense, average_by(sum, replicas), lr);
    }
  }
  return store;
}

// Held-out scoring; keys never touched in training evaluate as zero vectors.
inline std::vector<double> score_examples(const FlatStore& model,
                                          const std::vector<Example>& examples) {
  const std::vector<float> zeros(model.dense.input_dim, 0.0f);
  auto emb_of = [&](ParamKey k) {
    const float* p = model.embedding_or_null(k);
    return p ? p : zeros.data();
  };
  return forward(examples, emb_of, model.dense);
}

inline double evaluate_auc(const FlatStore& model,
                           const std::vector<Example>& examples) {
  std::vector<int> labels;
  labels.reserve(examples.size());
  for (const Example& ex : examples) labels.push_back(ex.label);
  return auc(labels, score_examples(model, examples));
}

}  // namespace hps
