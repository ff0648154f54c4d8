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

#ifndef FLATKIT_CALIBRATION_HPP_
#define FLATKIT_CALIBRATION_HPP_

#include <iosfwd>
#include <vector>

#include "flatkit/model.hpp"
#include "flatkit/model_io.hpp"

namespace flatkit {

// One traced forward pass per calibration sequence, in stream order.
struct TraceSet {
  std::vector<TracedOutput> sequences;

  std::size_t n_layers() const {
    return sequences.empty() ? 0 : sequences.front().layers.size();
  }
};

TraceSet record_traces(const TransformerModel& model, const TokenStream& calib);

// Contiguous, inclusive range of original layer indices.
struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const { return last - first + 1; }
  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

// Cross-layer similarity: values(i, j) is the cosine similarity between the
// input of original layer i and the output of original layer j, i < j.
//
// The reduced matrix seen by the merge loop has one row and one column per
// current group. Row g is the input of the group's first layer and column g
// is the output of its last layer, so deleting row l and column l-1 after
// merging groups (l-1, l) is the same as joining the two ranges; survivors
// are read from `values`, never recomputed.
struct SimilarityMatrix {
  std::size_t n_layers = 0;
  std::vector<double> values;  // n_layers x n_layers, row-major
  std::vector<LayerRange> groups;

  // Singleton groups over a full n x n table (entries at or below the
  // diagonal are ignored).
  static SimilarityMatrix from_values(std::size_t n, std::vector<double> values);

  std::size_t group_count() const { return groups.size(); }
  double original(std::size_t i, std::size_t j) const {
    return values[i * n_layers + j];
  }
  // Reduced-index entry, requires i < j < group_count().
  double entry(std::size_t i, std::size_t j) const;
  std::size_t entry_count() const;
};

SimilarityMatrix similarity_matrix(const TraceSet& traces);

struct LayerStats {
  std::vector<double> sigma;          // std of all entries of H^l
  std::vector<double> residual_norm;  // mean token norm of H^{l-1}
  std::vector<double> attn_norm;      // mean token norm of H~ - H
  std::vector<double> mlp_norm;       // mean token norm of H' - H~
};

LayerStats layer_stats(const TraceSet& traces);

// LN_a-normalized inputs of `layer_index`, one matrix per sequence.
std::vector<Matrix> attention_inputs(const TraceSet& traces,
                                     std::size_t layer_index,
                                     const LayerWeights& layer, double norm_eps);
// LN_p-normalized post-attention states of `layer_index`.
std::vector<Matrix> mlp_inputs(const TraceSet& traces, std::size_t layer_index,
                               const LayerWeights& layer, double norm_eps);

// Header row and column are layer indices; cells at or below the diagonal
// are blank.
void write_similarity_csv(std::ostream& out, const SimilarityMatrix& s);
void write_layer_stats_csv(std::ostream& out, const LayerStats& stats);

}  // namespace flatkit

#endif  // FLATKIT_CALIBRATION_HPP_
