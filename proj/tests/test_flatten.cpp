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


#include <cmath>

#include <doctest.h>

#include "flatkit/flatten.hpp"
#include "oracles.hpp"

using namespace flatkit;

namespace {

const ArchSpec kSpec{4, 4, 8, 24};
const ArchSpec kGqa{4, 2, 8, 24};

double rel_diff(const Matrix& a, const Matrix& b) {
  return std::sqrt(squared_distance(a, b)) / std::max(frobenius_norm(a), 1e-30);
}

// Reduced 4-group matrix whose adjacent entries are (x, y, z).
SimilarityMatrix adjacent(double x, double y, double z) {
  std::vector<double> v(16, 0.0);
  v[0 * 4 + 1] = x;
  v[1 * 4 + 2] = y;
  v[2 * 4 + 3] = z;
  return SimilarityMatrix::from_values(4, v);
}

// Similarity table that merges the pair (g, g+1) first.
SimilarityMatrix prefer(std::size_t n, std::size_t g) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) v[i * n + i + 1] = i == g ? 0.9 : 0.1;
  return SimilarityMatrix::from_values(n, v);
}

void kill(LayerWeights& l) {
  l.wo = Matrix(l.wo.rows(), l.wo.cols());
  l.wd = Matrix(l.wd.rows(), l.wd.cols());
}

}  // namespace

TEST_CASE("affine fusion: idempotent on unit gains") {
  oracle::Rng rng(1);
  LayerWeights l = oracle::random_layer(kSpec, 16, rng, 0.2, 0.0);
  CHECK(is_affine_fused(l));
  CHECK(fuse_norm_affine(l) == l);
  LayerWeights g = oracle::random_layer(kSpec, 16, rng);
  CHECK_FALSE(is_affine_fused(g));
  const LayerWeights f = fuse_norm_affine(g);
  CHECK(is_affine_fused(f));
  CHECK(fuse_norm_affine(f) == f);
  CHECK(f.wo == g.wo);
  CHECK(f.wd == g.wd);
}

TEST_CASE("affine fusion preserves block outputs") {
  oracle::Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const ArchSpec& s = trial % 2 ? kGqa : kSpec;
    const LayerWeights l = oracle::random_layer(s, 16, rng);
    const Matrix x = oracle::random_matrix(6, 16, rng);
    const BlockOutput a = block_forward(x, l, s);
    const BlockOutput b = block_forward(x, fuse_norm_affine(l), s);
    CHECK(rel_diff(a.h_next, b.h_next) <= 1e-5);
  }
}

TEST_CASE("flatten_pair runs both branches on the shared input") {
  oracle::Rng rng(3);
  const LayerWeights a = fuse_norm_affine(oracle::random_layer(kSpec, 16, rng));
  const LayerWeights b = fuse_norm_affine(oracle::random_layer(kGqa, 16, rng));
  // Same ratio is required; use a second MHA layer for b.
  CHECK_THROWS_AS(flatten_pair(a, kSpec, b, kGqa, 16), DimensionError);
  const ArchSpec sb{2, 2, 8, 40};
  const LayerWeights c = fuse_norm_affine(oracle::random_layer(sb, 16, rng));
  const LayerWithSpec m = flatten_pair(a, kSpec, c, sb, 16);
  CHECK(m.spec == ArchSpec{6, 6, 8, 64});
  CHECK_NOTHROW(validate_layer(m.weights, m.spec, 16));

  const Matrix x = oracle::random_matrix(7, 16, rng);
  const Matrix ln = rms_norm(x, m.weights.alpha_attn, 1e-6);
  const Matrix want_attn = add(mha_forward(ln, a, kSpec), mha_forward(ln, c, sb));
  CHECK(max_abs(subtract(mha_forward(ln, m.weights, m.spec), want_attn)) <= 1e-5);
  const Matrix want_mlp = add(mlp_forward(ln, a), mlp_forward(ln, c));
  CHECK(max_abs(subtract(mlp_forward(ln, m.weights), want_mlp)) <= 1e-5);

  const ArchSpec bad_dh{4, 4, 4, 24};
  const LayerWeights d = fuse_norm_affine(oracle::random_layer(bad_dh, 16, rng));
  CHECK_THROWS_AS(flatten_pair(a, kSpec, d, bad_dh, 16), DimensionError);
  CHECK_THROWS_AS(flatten_pair(a, kSpec, oracle::random_layer(kSpec, 16, rng), kSpec, 16),
                  Error);
}

TEST_CASE("flatten_pair keeps GQA grouping") {
  oracle::Rng rng(4);
  const LayerWeights a = fuse_norm_affine(oracle::random_layer(kGqa, 16, rng));
  const LayerWeights b = fuse_norm_affine(oracle::random_layer(kGqa, 16, rng));
  const LayerWithSpec m = flatten_pair(a, kGqa, b, kGqa, 16);
  CHECK(m.spec == ArchSpec{8, 4, 8, 48});
  const Matrix x = oracle::random_matrix(5, 16, rng);
  const Matrix want = add(mha_forward(x, a, kGqa), mha_forward(x, b, kGqa));
  CHECK(max_abs(subtract(mha_forward(x, m.weights, m.spec), want)) <= 1e-5);
}

TEST_CASE("zero second branch: merged block equals the first block") {
  oracle::Rng rng(5);
  const LayerWeights a = fuse_norm_affine(oracle::random_layer(kSpec, 16, rng));
  LayerWeights b = fuse_norm_affine(oracle::random_layer(kSpec, 16, rng));
  kill(b);
  const LayerWithSpec m = flatten_pair(a, kSpec, b, kSpec, 16);
  const Matrix x = oracle::random_matrix(9, 16, rng);
  CHECK(block_forward(x, m.weights, m.spec).h_next == block_forward(x, a, kSpec).h_next);
}

TEST_CASE("select_merge") {
  CHECK(select_merge(adjacent(0.2, 0.9, 0.5)) == 1);
  CHECK(select_merge(adjacent(0.7, 0.7, 0.7)) == 0);
  CHECK(select_merge(adjacent(0.1, 0.3, 0.3)) == 1);
  CHECK(select_merge(adjacent(-0.5, -0.7, -0.2)) == 2);
  SimilarityMatrix one = SimilarityMatrix::from_values(1, {0.0});
  CHECK_THROWS(select_merge(one));
}

TEST_CASE("update_similarity: deletion rule") {
  // L = 3: S01 = 0.1, S02 = 0.2, S12 = 0.3.
  SimilarityMatrix s = SimilarityMatrix::from_values(
      3, {0, 0.1, 0.2, 0, 0, 0.3, 0, 0, 0});
  update_similarity(s, 0, 1);
  REQUIRE(s.group_count() == 2);
  CHECK(s.entry_count() == 1);
  CHECK(s.entry(0, 1) == 0.2);
  CHECK((s.groups[0] == LayerRange{0, 1}));

  update_similarity(s, 0, 1);
  CHECK(s.group_count() == 1);
  CHECK(s.entry_count() == 0);

  SimilarityMatrix t = prefer(4, 0);
  CHECK_THROWS(update_similarity(t, 0, 2));
}

TEST_CASE("update_similarity matches explicit row/column deletion") {
  oracle::Rng rng(6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t n = 7;
  std::vector<double> v(n * n, 0.0);
  for (auto& x : v) x = u(rng);
  SimilarityMatrix s = SimilarityMatrix::from_values(n, v);
  // Explicit reduced table plus the original index of every row/column.
  std::vector<std::vector<double>> table(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) table[i][j] = v[i * n + j];
  }
  for (int step = 0; step < 5; ++step) {
    const std::size_t g = select_merge(s);
    double best = -2.0;
    std::size_t want = 0;
    for (std::size_t i = 0; i + 1 < table.size(); ++i) {
      if (table[i][i + 1] > best) {
        best = table[i][i + 1];
        want = i;
      }
    }
    CHECK(g == want);
    update_similarity(s, g, g + 1);
    table.erase(table.begin() + std::ptrdiff_t(g) + 1);
    for (auto& row : table) row.erase(row.begin() + std::ptrdiff_t(g));
    for (std::size_t i = 0; i < table.size(); ++i) {
      for (std::size_t j = i + 1; j < table.size(); ++j) CHECK(s.entry(i, j) == table[i][j]);
    }
  }
}

TEST_CASE("iterative_flatten: zero merges leaves the model untouched") {
  const TransformerModel m = oracle::random_model(4, kSpec, 16, 20, 7);
  const FlattenResult r = iterative_flatten(m, prefer(4, 1), 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.model.layers[i] == m.layers[i]);
  CHECK(r.plan.events.empty());
  CHECK(r.plan.groups.size() == 4);
}

TEST_CASE("iterative_flatten: pure-residual logits and parameter count") {
  TransformerModel m = oracle::random_model(5, kSpec, 16, 20, 8);
  for (auto& l : m.layers) kill(l);
  const std::vector<TokenId> toks{1, 4, 9, 16, 2, 3};
  const Matrix base = model_forward(m, toks);
  for (std::size_t n = 1; n <= 4; ++n) {
    const FlattenResult r = iterative_flatten(m, prefer(5, 2), n);
    CHECK(r.model.n_layers() == 5 - n);
    CHECK(parameter_count(r.model) == parameter_count(m));
    CHECK(model_forward(r.model, toks) == base);
  }
  CHECK_THROWS(iterative_flatten(m, prefer(5, 2), 5));
}

TEST_CASE("iterative_flatten: plan bookkeeping and lazy fusion") {
  const TransformerModel m = oracle::random_model(6, kGqa, 16, 20, 9);
  const FlattenResult r = iterative_flatten(m, prefer(6, 3), 3);
  CHECK(parameter_count(r.model) == parameter_count(m));
  REQUIRE(r.plan.events.size() == 3);
  CHECK((r.plan.events[0].merged == LayerRange{3, 4}));
  std::size_t next = 0;
  for (const auto& g : r.plan.groups) {
    CHECK(g.first == next);
    next = g.last + 1;
  }
  CHECK(next == 6);
  for (std::size_t i = 0; i < r.plan.groups.size(); ++i) {
    const auto& g = r.plan.groups[i];
    if (g.size() == 1) {
      CHECK(r.model.layers[i] == m.layers[g.first]);
    } else {
      CHECK(is_affine_fused(r.model.layers[i]));
      CHECK(r.model.config.layers[i].n_heads == 4 * g.size());
    }
  }
  CHECK(r.plan.merged_groups().size() >= 1);
  CHECK_NOTHROW(validate_model(r.model));
}

TEST_CASE("merging after a dead layer keeps logits") {
  TransformerModel m = oracle::random_model(3, kSpec, 16, 20, 10);
  kill(m.layers[1]);
  const std::vector<TokenId> toks{0, 1, 2, 3, 4, 5, 6, 7};
  const FlattenResult r = iterative_flatten(m, prefer(3, 1), 1);
  CHECK(rel_diff(model_forward(m, toks), model_forward(r.model, toks)) <= 1e-5);
}
