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

#include <vector>

#include "hps/common.hpp"
#include "hps/types.hpp"

namespace hps {

// Round-robin by example index: example i lands in slot i mod (D*J), device
// slot/J, mini-batch slot%J. Disjoint cover, deterministic, trailing shards
// may be smaller. Result indexed [device][minibatch].
inline std::vector<std::vector<std::vector<Example>>> shard_batch(
    const Batch& batch, int num_devices, int num_minibatches) {
  check(num_devices >= 1, "shard_batch: need at least one device");
  check(num_minibatches >= 1, "shard_batch: need at least one mini-batch");
  std::vector<std::vector<std::vector<Example>>> shards(
      num_devices, std::vector<std::vector<Example>>(num_minibatches));
  const std::size_t slots = std::size_t(num_devices) * num_minibatches;
  for (std::size_t i = 0; i < batch.examples.size(); ++i) {
    const std::size_t slot = i % slots;
    shards[slot / num_minibatches][slot % num_minibatches].push_back(
        batch.examples[i]);
  }
  return shards;
}

}  // namespace hps
