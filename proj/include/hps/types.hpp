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
#include <vector>

#include "hps/common.hpp"

namespace hps {

// Embedding vector plus per-coordinate optimizer accumulator. Both always
// have length = the configured embedding width. opt_state is carried through
// every tier but unused by plain SGD.
struct SparseParam {
  std::vector<float> embedding;
  std::vector<float> opt_state;

  SparseParam() = default;
  explicit SparseParam(std::size_t width)
      : embedding(width, 0.0f), opt_state(width, 0.0f) {}

  bool operator==(const SparseParam&) const = default;
};

// Flat weight vector of the fully-connected stack. Layout per layer l:
// row-major W[out][in] followed by bias[out], where in = input_dim for l=0
// and layer_dims[l-1] otherwise. The last layer width must be 1.
struct DenseParams {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_dims;
  std::vector<float> weights;

  static std::size_t weight_count(std::size_t input_dim,
                                  const std::vector<std::size_t>& dims) {
    std::size_t n = 0, in = input_dim;
    for (std::size_t out : dims) {
      n += (in + 1) * out;
      in = out;
    }
    return n;
  }

  bool operator==(const DenseParams&) const = default;
};

struct Example {
  int label = 0;                    // {0,1}
  std::vector<ParamKey> features;   // sorted, unique
};

struct Batch {
  std::vector<Example> examples;
  std::int64_t batch_id = 0;
};

// Gradients of the mean logistic loss over one mini-batch shard. The sparse
// map holds exactly the union of the shard's referenced keys.
struct GradientUpdate {
  std::map<ParamKey, std::vector<float>> sparse;
  std::vector<float> dense;
};

}  // namespace hps
