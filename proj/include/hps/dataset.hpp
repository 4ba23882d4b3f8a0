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
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// Text dataset: a "#dims=<p>" header line, then one example per line as
// "<label>\t<key>,<key>,...". Keys ascending decimal; a hashed dataset may
// carry an empty key list.
struct Dataset {
  std::uint64_t dims = 0;
  std::vector<Example> examples;
};

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "#dims=" << ds.dims << "\n";
  for (const Example& ex : ds.examples) {
    os << ex.label << '\t';
    for (std::size_t i = 0; i < ex.features.size(); ++i) {
      if (i) os << ',';
      os << ex.features[i];
    }
    os << '\n';
  }
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "dataset: cannot write " + path);
  write_dataset(f, ds);
  check(f.good(), "dataset: write failed for " + path);
}

inline Dataset read_dataset(std::istream& is) {
  Dataset ds;
  std::string line;
  check(static_cast<bool>(std::getline(is, line)), "dataset: empty file");
  check(line.rfind("#dims=", 0) == 0, "dataset: missing #dims header");
  ds.dims = std::stoull(line.substr(6));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    check(tab != std::string::npos, "dataset: malformed line: " + line);
    Example ex;
    ex.label = std::stoi(line.substr(0, tab));
    check(ex.label == 0 || ex.label == 1, "dataset: label must be 0/1");
    std::size_t pos = tab + 1;
    while (pos < line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      ex.features.push_back(std::stoull(line.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    check(std::is_sorted(ex.features.begin(), ex.features.end()) &&
              std::adjacent_find(ex.features.begin(), ex.features.end()) ==
                  ex.features.end(),
          "dataset: features must be sorted and unique");
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "dataset: cannot read " + path);
  return read_dataset(f);
}

inline std::vector<Batch> to_batches(const Dataset& ds,
                                     std::size_t batch_size) {
  check(batch_size > 0, "dataset: batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < ds.examples.size(); i += batch_size) {
    Batch b;
    b.batch_id = static_cast<std::int64_t>(out.size());
    const std::size_t end = std::min(i + batch_size, ds.examples.size());
    b.examples.assign(ds.examples.begin() + i, ds.examples.begin() + end);
    out.push_back(std::move(b));
  }
  return out;
}

inline Dataset to_dataset(const std::vector<Batch>& batches,
                          std::uint64_t dims) {
  Dataset ds;
  ds.dims = dims;
  for (const Batch& b : batches)
    ds.examples.insert(ds.examples.end(), b.examples.begin(),
                       b.examples.end());
  return ds;
}

enum class KeyDist { kUniform, kZipf };

struct GenSpec {
  std::uint64_t dims = 1 << 16;
  std::size_t num_examples = 10000;
  std::size_t nnz = 20;  // features per example
  KeyDist dist = KeyDist::kUniform;
  double zipf_s = 1.0;
  std::uint64_t seed = 1;
  double signal_scale = 6.0;  // std-dev of the planted logit
  // 0: every key carries an independent planted weight. >0: keys fall into
  // `clusters` interleaved groups (key mod clusters); an example draws all
  // its keys from one group and the label depends only on that group's
  // logit, so keys within a group are interchangeable signal carriers.
  std::uint64_t clusters = 0;
};

// Planted per-key weight, derived from the seed so it needs no storage.
inline double planted_weight(const GenSpec& spec, ParamKey key) {
  const ParamKey unit = spec.clusters > 0 ? key % spec.clusters : key;
  const std::uint64_t a = mix64(unit ^ seeded_u64(spec.seed, 100));
  const std::uint64_t b = mix64(unit ^ seeded_u64(spec.seed, 101));
  const double u1 = std::max(u64_to_unit(a), 1e-300);
  const double u2 = u64_to_unit(b);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline double planted_logit(const GenSpec& spec, const Example& ex) {
  if (spec.clusters > 0) {
    check(!ex.features.empty(), "planted_logit: empty example");
    return spec.signal_scale * planted_weight(spec, ex.features.front());
  }
  double z = 0.0;
  for (ParamKey k : ex.features) z += planted_weight(spec, k);
  return z * spec.signal_scale / std::sqrt(double(spec.nnz));
}

// Zipf(s) sampler over [0, n) via inverse CDF.
class ZipfSampler {
 public:
  ZipfSampler(std::uint64_t n, double s) : cdf_(n) {
    check(n > 0, "zipf: empty support");
    double acc = 0.0;
    for (std::uint64_t r = 0; r < n; ++r) {
      acc += 1.0 / std::pow(double(r + 1), s);
      cdf_[r] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }

  std::uint64_t sample(double u) const {
    auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return std::uint64_t(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

// Labels are Bernoulli draws of a planted logistic model over the sparse
// features, so the data is learnable and the planted weights form an oracle.
inline Dataset gen_dataset(const GenSpec& spec) {
  check(spec.dims >= spec.nnz && spec.nnz > 0, "gen: need nnz <= dims");
  check(spec.clusters == 0 || spec.dims / spec.clusters >= spec.nnz,
        "gen: cluster key pools must hold nnz keys");
  Dataset ds;
  ds.dims = spec.dims;
  ds.examples.reserve(spec.num_examples);
  std::mt19937_64 rng(spec.seed);
  ZipfSampler zipf(spec.clusters > 0 ? spec.clusters : spec.dims,
                   spec.zipf_s);
  for (std::size_t n = 0; n < spec.num_examples; ++n) {
    std::set<ParamKey> keys;
    if (spec.clusters > 0) {
      // Pick the example's cluster, then keys from its interleaved pool.
      const double uc = u64_to_unit(rng());
      const std::uint64_t c =
          spec.dist == KeyDist::kZipf
              ? zipf.sample(uc)
              : std::min<std::uint64_t>(
                    std::uint64_t(uc * double(spec.clusters)),
                    spec.clusters - 1);
      const std::uint64_t pool = spec.dims / spec.clusters;
      while (keys.size() < spec.nnz) {
        const std::uint64_t slot =
            std::min<std::uint64_t>(
                std::uint64_t(u64_to_unit(rng()) * double(pool)), pool - 1);
        keys.insert(slot * spec.clusters + c);
      }
    } else {
      while (keys.size() < spec.nnz) {
        const double u = u64_to_unit(rng());
        if (spec.dist == KeyDist::kZipf)
          keys.insert(zipf.sample(u));
        else
          keys.insert(std::min<std::uint64_t>(
              std::uint64_t(u * double(spec.dims)), spec.dims - 1));
      }
    }
    Example ex;
    ex.features.assign(keys.begin(), keys.end());
    const double p = sigmoid(planted_logit(spec, ex));
    ex.label = (u64_to_unit(rng()) < p) ? 1 : 0;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace hps
