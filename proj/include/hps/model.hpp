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
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// CTR model: embedding lookup-and-sum per example, then a fully-connected
// stack with ReLU hidden activations and a sigmoid output. Parameters and
// gradients are f32; all intermediate math and reductions run in f64.
struct ModelConfig {
  std::size_t embedding_dim = 8;
  std::vector<std::size_t> layer_dims = {8, 16, 1};
  float learning_rate = 0.05f;
  std::uint64_t seed = 42;
};

inline DenseParams init_dense(const ModelConfig& cfg) {
  check(!cfg.layer_dims.empty() && cfg.layer_dims.back() == 1,
        "model: last layer width must be 1");
  DenseParams d;
  d.input_dim = cfg.embedding_dim;
  d.layer_dims = cfg.layer_dims;
  d.weights.resize(DenseParams::weight_count(d.input_dim, d.layer_dims));
  std::mt19937_64 rng(cfg.seed);
  for (float& w : d.weights)
    w = static_cast<float>((u64_to_unit(rng()) * 2.0 - 1.0) * 0.05);
  return d;
}

namespace detail {

// Runs the stack on one summed-embedding input; fills per-layer
// pre-activations when acts != nullptr (needed by backward).
inline double run_stack(const DenseParams& d, const std::vector<double>& x,
                        std::vector<std::vector<double>>* acts) {
  std::vector<double> h = x;
  std::size_t off = 0, in = d.input_dim;
  for (std::size_t l = 0; l < d.layer_dims.size(); ++l) {
    const std::size_t out = d.layer_dims[l];
    std::vector<double> z(out);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = d.weights[off + in * out + o];  // bias
      const float* row = d.weights.data() + off + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += double(row[i]) * h[i];
      check(std::isfinite(acc), "model: non-finite pre-activation");
      z[o] = acc;
    }
    if (acts) acts->push_back(z);
    const bool last = (l + 1 == d.layer_dims.size());
    if (last) return z[0];
    h.resize(out);
    for (std::size_t o = 0; o < out; ++o) h[o] = z[o] > 0.0 ? z[o] : 0.0;
    off += (in + 1) * out;
    in = out;
  }
  return 0.0;  // unreachable; layer_dims validated non-empty
}

template <class EmbLookup>
std::vector<double> embed_sum(const Example& ex, EmbLookup&& emb_of,
                              std::size_t width) {
  std::vector<double> x(width, 0.0);
  for (ParamKey k : ex.features) {
    const float* e = emb_of(k);
    check(e != nullptr, "model: feature key " + std::to_string(k) +
                            " missing from sparse view");
    for (std::size_t i = 0; i < width; ++i) x[i] += double(e[i]);
  }
  return x;
}

}  // namespace detail

// emb_of: callable ParamKey -> const float* (length = input_dim), nullptr if
// the key is not resolvable (which is a hard error here).
template <class EmbLookup>
std::vector<double> forward(const std::vector<Example>& examples,
                            EmbLookup&& emb_of, const DenseParams& dense) {
  check(dense.weights.size() ==
            DenseParams::weight_count(dense.input_dim, dense.layer_dims),
        "model: dense weight vector length mismatch");
  check(!dense.layer_dims.empty() && dense.layer_dims.back() == 1,
        "model: output layer width must be 1");
  std::vector<double> preds;
  preds.reserve(examples.size());
  for (const Example& ex : examples) {
    const auto x = detail::embed_sum(ex, emb_of, dense.input_dim);
    const double z = detail::run_stack(dense, x, nullptr);
    preds.push_back(sigmoid(z));
  }
  return preds;
}

// Gradients of the mean logistic loss over `examples`. `preds` must come from
// forward() on the same inputs. The sparse map covers exactly the union of
// the examples' features.
template <class EmbLookup>
GradientUpdate backward(const std::vector<Example>& examples,
                        EmbLookup&& emb_of, const DenseParams& dense,
                        const std::vector<double>& preds) {
  check(preds.size() == examples.size(),
        "model: predictions/examples size mismatch");
  const std::size_t width = dense.input_dim;
  const std::size_t nlayers = dense.layer_dims.size();
  std::vector<double> dense_acc(dense.weights.size(), 0.0);
  std::map<ParamKey, std::vector<double>> sparse_acc;

  // Per-layer weight offsets.
  std::vector<std::size_t> offs(nlayers), ins(nlayers);
  {
    std::size_t off = 0, in = width;
    for (std::size_t l = 0; l < nlayers; ++l) {
      offs[l] = off;
      ins[l] = in;
      off += (in + 1) * dense.layer_dims[l];
      in = dense.layer_dims[l];
    }
  }

  for (std::size_t n = 0; n < examples.size(); ++n) {
    const Example& ex = examples[n];
    const auto x = detail::embed_sum(ex, emb_of, width);
    std::vector<std::vector<double>> zs;
    detail::run_stack(dense, x, &zs);

    // Hidden activations per layer input.
    std::vector<std::vector<double>> hs(nlayers);
    hs[0] = x;
    for (std::size_t l = 1; l < nlayers; ++l) {
      hs[l].resize(zs[l - 1].size());
      for (std::size_t o = 0; o < zs[l - 1].size(); ++o)
        hs[l][o] = zs[l - 1][o] > 0.0 ? zs[l - 1][o] : 0.0;
    }

    std::vector<double> delta = {preds[n] - double(ex.label)};
    for (std::size_t li = nlayers; li-- > 0;) {
      const std::size_t out = dense.layer_dims[li], in = ins[li];
      const std::size_t off = offs[li];
      std::vector<double> dprev(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double dl = delta[o];
        double* gw = dense_acc.data() + off + o * in;
        const float* row = dense.weights.data() + off + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          gw[i] += dl * hs[li][i];
          dprev[i] += double(row[i]) * dl;
        }
        dense_acc[off + in * out + o] += dl;  // bias
      }
      if (li > 0) {
        for (std::size_t i = 0; i < in; ++i)
          if (zs[li - 1][i] <= 0.0) dprev[i] = 0.0;  // ReLU gate
      }
      delta = std::move(dprev);
    }

    // Sum-combine: each feature's embedding receives the full input grad.
    for (ParamKey k : ex.features) {
      auto [it, fresh] = sparse_acc.try_emplace(k, width, 0.0);
      (void)fresh;
      for (std::size_t i = 0; i < width; ++i) it->second[i] += delta[i];
    }
  }

  const double inv_n = examples.empty() ? 0.0 : 1.0 / double(examples.size());
  GradientUpdate g;
  g.dense.resize(dense_acc.size());
  for (std::size_t i = 0; i < dense_acc.size(); ++i)
    g.dense[i] = static_cast<float>(dense_acc[i] * inv_n);
  for (auto& [k, acc] : sparse_acc) {
    std::vector<float> v(width);
    for (std::size_t i = 0; i < width; ++i)
      v[i] = static_cast<float>(acc[i] * inv_n);
    g.sparse.emplace(k, std::move(v));
  }
  return g;
}

// Plain SGD. opt_state is reserved for per-coordinate scaling and untouched.
inline void apply_update(std::vector<float>& w, const std::vector<float>& g,
                         float lr) {
  check(w.size() == g.size(), "apply_update: shape mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] -= lr * g[i];
    check(std::isfinite(w[i]), "apply_update: non-finite result");
  }
}

inline void apply_update(SparseParam& p, const std::vector<float>& g,
                         float lr) {
  apply_update(p.embedding, g, lr);
}

inline void apply_update(DenseParams& d, const std::vector<float>& g,
                         float lr) {
  apply_update(d.weights, g, lr);
}

// The additive delta the device tier accumulates; bit-identical to what
// apply_update subtracts.
inline std::vector<float> sgd_delta(const std::vector<float>& g, float lr) {
  std::vector<float> d(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = -(lr * g[i]);
  return d;
}

inline double mean_log_loss(const std::vector<int>& labels,
                            const std::vector<double>& preds) {
  check(labels.size() == preds.size() && !labels.empty(),
        "loss: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(preds[i], 1e-12, 1.0 - 1e-12);
    acc += labels[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return acc / double(labels.size());
}

// Probability that a random positive outranks a random negative; ties 0.5.
inline double auc(const std::vector<int>& labels,
                  const std::vector<double>& scores) {
  check(labels.size() == scores.size(), "auc: size mismatch");
  std::size_t npos = 0;
  for (int y : labels) npos += (y != 0);
  const std::size_t nneg = labels.size() - npos;
  check(npos > 0 && nneg > 0, "auc: both classes required");

  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]]) pos_rank_sum += avg_rank;
    i = j;
  }
  return (pos_rank_sum - 0.5 * double(npos) * double(npos + 1)) /
         (double(npos) * double(nneg));
}

}  // namespace hps
