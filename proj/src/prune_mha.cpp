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

#include "flatkit/prune_mha.hpp"

#include <cmath>

namespace flatkit {
namespace {

// Column indices of the given slabs of width `width`.
std::vector<std::size_t> slab_columns(std::span<const std::size_t> slabs,
                                      std::size_t width) {
  std::vector<std::size_t> cols;
  cols.reserve(slabs.size() * width);
  for (std::size_t s : slabs) {
    for (std::size_t j = 0; j < width; ++j) cols.push_back(s * width + j);
  }
  return cols;
}

LayerWeights keep_slabs(const LayerWeights& layer, std::size_t head_dim,
                        std::span<const std::size_t> heads,
                        std::span<const std::size_t> groups) {
  const auto q_cols = slab_columns(heads, head_dim);
  const auto kv_cols = slab_columns(groups, head_dim);
  LayerWeights out = layer;
  out.wq = select_cols(layer.wq, q_cols);
  out.wk = select_cols(layer.wk, kv_cols);
  out.wv = select_cols(layer.wv, kv_cols);
  out.wo = select_rows(layer.wo, q_cols);
  return out;
}

}  // namespace

HeadImportance head_importance(const LayerWeights& layer, const ArchSpec& spec,
                               std::span<const Matrix> inputs,
                               double rope_base) {
  if (inputs.empty()) throw Error("head_importance: no calibration inputs");
  const std::size_t dh = spec.head_dim;

  // diag(W_O,i W_O,i^T)^{1/2}: L2 norm of each row of the head's W_O slab.
  std::vector<double> wo_row_norm(layer.wo.rows());
  for (std::size_t r = 0; r < layer.wo.rows(); ++r) {
    double s = 0.0;
    for (float v : layer.wo.row(r)) s += double(v) * v;
    wo_row_norm[r] = std::sqrt(s);
  }

  // Per-sequence partial sums, reduced in sequence order.
  std::vector<std::vector<double>> partial(inputs.size(),
                                           std::vector<double>(spec.n_heads));
  std::vector<double> tokens(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const Matrix heads = attention_heads(inputs[i], layer, spec, rope_base);
    for (std::size_t t = 0; t < heads.rows(); ++t) {
      auto row = heads.row(t);
      for (std::size_t h = 0; h < spec.n_heads; ++h) {
        double s = 0.0;
        for (std::size_t j = 0; j < dh; ++j) {
          const double v = row[h * dh + j] * wo_row_norm[h * dh + j];
          s += v * v;
        }
        partial[i][h] += std::sqrt(s);
      }
    }
    tokens[i] = double(heads.rows());
  });

  HeadImportance f(spec.n_heads, 0.0);
  double total_tokens = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t h = 0; h < spec.n_heads; ++h) f[h] += partial[i][h];
    total_tokens += tokens[i];
  }
  for (double& v : f) v /= total_tokens;
  return f;
}

LayerWithSpec prune_heads(const LayerWeights& layer, const ArchSpec& spec,
                          std::size_t k, const HeadImportance& importance) {
  if (spec.is_gqa()) {
    throw Error("prune_heads: layer uses grouped kv heads, use prune_kv_groups");
  }
  if (k < 1 || k > spec.n_heads) {
    throw Error("prune_heads: target " + std::to_string(k) +
                " outside [1, " + std::to_string(spec.n_heads) + "]");
  }
  if (importance.size() != spec.n_heads) {
    throw DimensionError("prune_heads: one importance score per head required");
  }
  if (k == spec.n_heads) return {layer, spec};
  const auto keep = top_k_indices(importance, k);
  ArchSpec s = spec;
  s.n_heads = k;
  s.n_kv_groups = k;
  return {keep_slabs(layer, spec.head_dim, keep, keep), s};
}

std::vector<double> group_importance(const ArchSpec& spec,
                                     const HeadImportance& importance) {
  if (importance.size() != spec.n_heads) {
    throw DimensionError("group_importance: one score per head required");
  }
  std::vector<double> g(spec.n_kv_groups, 0.0);
  for (std::size_t h = 0; h < spec.n_heads; ++h) {
    g[h / spec.heads_per_group()] += importance[h];
  }
  return g;
}

std::vector<std::size_t> heads_of_groups(const ArchSpec& spec,
                                         std::span<const std::size_t> groups) {
  std::vector<std::size_t> heads;
  const std::size_t per = spec.heads_per_group();
  for (std::size_t g : groups) {
    for (std::size_t j = 0; j < per; ++j) heads.push_back(g * per + j);
  }
  return heads;
}

LayerWithSpec prune_kv_groups(const LayerWeights& layer, const ArchSpec& spec,
                              std::size_t k_groups,
                              const HeadImportance& importance) {
  if (k_groups < 1 || k_groups > spec.n_kv_groups) {
    throw Error("prune_kv_groups: target " + std::to_string(k_groups) +
                " outside [1, " + std::to_string(spec.n_kv_groups) + "]");
  }
  const auto scores = group_importance(spec, importance);
  if (k_groups == spec.n_kv_groups) return {layer, spec};
  const auto keep = top_k_indices(scores, k_groups);
  const auto heads = heads_of_groups(spec, keep);
  ArchSpec s = spec;
  s.n_kv_groups = k_groups;
  s.n_heads = heads.size();
  return {keep_slabs(layer, spec.head_dim, heads, keep), s};
}

}  // namespace flatkit
