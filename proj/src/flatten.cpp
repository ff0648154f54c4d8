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

#include "flatkit/flatten.hpp"

#include <algorithm>

namespace flatkit {

std::vector<LayerRange> MergePlan::merged_groups() const {
  std::vector<LayerRange> out;
  std::copy_if(groups.begin(), groups.end(), std::back_inserter(out),
               [](const LayerRange& g) { return g.size() > 1; });
  return out;
}

bool is_affine_fused(const LayerWeights& layer) {
  auto ones = [](const Vector& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x == 1.0f; });
  };
  return ones(layer.alpha_attn) && ones(layer.alpha_mlp);
}

LayerWeights fuse_norm_affine(const LayerWeights& layer) {
  if (is_affine_fused(layer)) return layer;
  LayerWeights out = layer;
  out.wq = scale_rows(layer.wq, layer.alpha_attn);
  out.wk = scale_rows(layer.wk, layer.alpha_attn);
  out.wv = scale_rows(layer.wv, layer.alpha_attn);
  out.wu = scale_rows(layer.wu, layer.alpha_mlp);
  out.wg = scale_rows(layer.wg, layer.alpha_mlp);
  std::fill(out.alpha_attn.begin(), out.alpha_attn.end(), 1.0f);
  std::fill(out.alpha_mlp.begin(), out.alpha_mlp.end(), 1.0f);
  return out;
}

LayerWithSpec flatten_pair(const LayerWeights& a, const ArchSpec& spec_a,
                           const LayerWeights& b, const ArchSpec& spec_b,
                           std::size_t d_model) {
  validate_layer(a, spec_a, d_model);
  validate_layer(b, spec_b, d_model);
  if (spec_a.head_dim != spec_b.head_dim) {
    throw DimensionError("flatten_pair: head_dim " +
                         std::to_string(spec_a.head_dim) + " vs " +
                         std::to_string(spec_b.head_dim));
  }
  if (spec_a.heads_per_group() != spec_b.heads_per_group()) {
    throw DimensionError("flatten_pair: layers use different query/kv ratios");
  }
  if (!is_affine_fused(a) || !is_affine_fused(b)) {
    throw Error("flatten_pair: norm gains must be fused first");
  }
  LayerWithSpec out;
  auto& w = out.weights;
  w.wq = hconcat(a.wq, b.wq);
  w.wk = hconcat(a.wk, b.wk);
  w.wv = hconcat(a.wv, b.wv);
  w.wo = vconcat(a.wo, b.wo);
  w.wu = hconcat(a.wu, b.wu);
  w.wg = hconcat(a.wg, b.wg);
  w.wd = vconcat(a.wd, b.wd);
  w.alpha_attn = a.alpha_attn;
  w.alpha_mlp = a.alpha_mlp;
  out.spec = {spec_a.n_heads + spec_b.n_heads,
              spec_a.n_kv_groups + spec_b.n_kv_groups, spec_a.head_dim,
              spec_a.intermediate + spec_b.intermediate};
  return out;
}

std::size_t select_merge(const SimilarityMatrix& s) {
  if (s.group_count() < 2) {
    throw Error("select_merge: fewer than two groups remain");
  }
  std::size_t best = 0;
  double best_value = s.entry(0, 1);
  for (std::size_t g = 1; g + 1 < s.group_count(); ++g) {
    const double v = s.entry(g, g + 1);
    if (v > best_value) {
      best = g;
      best_value = v;
    }
  }
  return best;
}

void update_similarity(SimilarityMatrix& s, std::size_t left,
                       std::size_t right) {
  if (right != left + 1 || right >= s.group_count()) {
    throw Error("update_similarity: groups " + std::to_string(left) + " and " +
                std::to_string(right) + " are not an adjacent pair");
  }
  // Deleting row `right` and column `left` leaves row `left` (first layer's
  // input) and column `right` (last layer's output) for the merged group.
  s.groups[left].last = s.groups[right].last;
  s.groups.erase(s.groups.begin() + static_cast<std::ptrdiff_t>(right));
}

FlattenResult iterative_flatten(const TransformerModel& model,
                                SimilarityMatrix s, std::size_t n_merges) {
  const std::size_t n = model.n_layers();
  if (s.group_count() != n) {
    throw DimensionError("similarity matrix has " +
                         std::to_string(s.group_count()) +
                         " groups for a model with " + std::to_string(n) +
                         " layers");
  }
  if (n_merges > 0 && n_merges > n - 1) {
    throw Error("cannot perform " + std::to_string(n_merges) +
                " merges on a " + std::to_string(n) + "-layer model");
  }
  FlattenResult out;
  out.model = model;
  auto& layers = out.model.layers;
  auto& specs = out.model.config.layers;
  const std::size_t d = model.config.d_model;

  for (std::size_t step = 0; step < n_merges; ++step) {
    const std::size_t g = select_merge(s);
    MergeEvent ev;
    ev.step = step;
    ev.position = g;
    ev.left = s.groups[g];
    ev.right = s.groups[g + 1];

    LayerWithSpec merged =
        flatten_pair(fuse_norm_affine(layers[g]), specs[g],
                     fuse_norm_affine(layers[g + 1]), specs[g + 1], d);
    layers[g] = std::move(merged.weights);
    specs[g] = merged.spec;
    layers.erase(layers.begin() + static_cast<std::ptrdiff_t>(g + 1));
    specs.erase(specs.begin() + static_cast<std::ptrdiff_t>(g + 1));

    update_similarity(s, g, g + 1);
    ev.merged = s.groups[g];
    out.plan.events.push_back(ev);
  }
  out.plan.groups = s.groups;
  return out;
}

}  // namespace flatkit
