// Copyright 2026 The flatkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FLATKIT_PRUNE_MHA_HPP_
#define FLATKIT_PRUNE_MHA_HPP_

#include <span>
#include <vector>

#include "flatkit/flatten.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

using HeadImportance = std::vector<double>;

// Per-head score: for every calibration token, the head's attention output
// row (before W_O) is scaled elementwise by the L2 norms of the matching
// rows of W_O,i; the score is the mean L2 norm of that product over tokens.
// `inputs` are LN_a-normalized layer inputs, one matrix per sequence.
HeadImportance head_importance(const LayerWeights& layer, const ArchSpec& spec,
                               std::span<const Matrix> inputs,
                               double rope_base = 10000.0);

// Keeps the k highest-scoring heads (ties toward the smaller index) in their
// original order. Only for layers with one kv group per head.
LayerWithSpec prune_heads(const LayerWeights& layer, const ArchSpec& spec,
                          std::size_t k, const HeadImportance& importance);

// Sum of member-head scores for each kv group.
std::vector<double> group_importance(const ArchSpec& spec,
                                     const HeadImportance& importance);

// Keeps the k_groups highest-scoring kv groups with all their query heads.
LayerWithSpec prune_kv_groups(const LayerWeights& layer, const ArchSpec& spec,
                              std::size_t k_groups,
                              const HeadImportance& importance);

// Heads whose slabs survive, in order, for a kept-group selection.
std::vector<std::size_t> heads_of_groups(const ArchSpec& spec,
                                         std::span<const std::size_t> groups);

}  // namespace flatkit

#endif  // FLATKIT_PRUNE_MHA_HPP_
