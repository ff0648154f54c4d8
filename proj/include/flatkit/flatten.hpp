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

// Layer flattening: two sequential Pre-LN blocks become one wide block whose
// heads and MLP channels are the concatenation of both, so the two branches
// run in parallel on a shared input. Merges are chosen greedily from the
// cross-layer similarity matrix.

#ifndef FLATKIT_FLATTEN_HPP_
#define FLATKIT_FLATTEN_HPP_

#include <vector>

#include "flatkit/calibration.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

struct MergeEvent {
  std::size_t step = 0;
  std::size_t position = 0;  // reduced index of the left group
  LayerRange left;
  LayerRange right;
  LayerRange merged;
};

struct MergePlan {
  std::vector<MergeEvent> events;
  std::vector<LayerRange> groups;  // final partition of the original layers

  // Final groups spanning more than one original layer.
  std::vector<LayerRange> merged_groups() const;
};

struct LayerWithSpec {
  LayerWeights weights;
  ArchSpec spec;
};

bool is_affine_fused(const LayerWeights& layer);

// Folds the norm gains into the projections they feed and resets them to 1.
LayerWeights fuse_norm_affine(const LayerWeights& layer);

// Concatenates heads (Q/K/V columns, O rows) and MLP channels (up/gate
// columns, down rows). Both layers must already be affine-fused and share
// head_dim and the query/kv ratio.
LayerWithSpec flatten_pair(const LayerWeights& a, const ArchSpec& spec_a,
                           const LayerWeights& b, const ArchSpec& spec_b,
                           std::size_t d_model);

// Reduced index g of the adjacent pair (g, g+1) with the largest similarity;
// ties go to the smaller index.
std::size_t select_merge(const SimilarityMatrix& s);

// Applies the deletion rule after merging reduced groups (left, right).
void update_similarity(SimilarityMatrix& s, std::size_t left, std::size_t right);

struct FlattenResult {
  TransformerModel model;
  MergePlan plan;
};

FlattenResult iterative_flatten(const TransformerModel& model,
                                SimilarityMatrix s, std::size_t n_merges);

}  // namespace flatkit

#endif  // FLATKIT_FLATTEN_HPP_
