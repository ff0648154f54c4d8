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

#include "flatkit/prune_mha.hpp"
#include "oracles.hpp"

using namespace flatkit;

namespace {

const ArchSpec kSpec{4, 4, 8, 16};
const ArchSpec kGqa{6, 3, 8, 16};
constexpr std::size_t kD = 16;

std::vector<Matrix> inputs(oracle::Rng& rng, std::size_t n = 3, std::size_t t = 7) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_matrix(t, kD, rng));
  return out;
}

std::vector<double> importance_oracle(const LayerWeights& l, const ArchSpec& s,
                                      const std::vector<Matrix>& xs) {
  const std::size_t dh = s.head_dim;
  std::vector<double> f(s.n_heads, 0.0);
  double tokens = 0.0;
  for (const auto& x : xs) {
    const oracle::Rows o = oracle::heads(oracle::to_rows(x), l, s, 1e4);
    for (std::size_t t = 0; t < o.size(); ++t) {
      for (std::size_t h = 0; h < s.n_heads; ++h) {
        double sq = 0.0;
        for (std::size_t j = 0; j < dh; ++j) {
          double rn = 0.0;
          for (std::size_t c = 0; c < l.wo.cols(); ++c) {
            rn += double(l.wo(h * dh + j, c)) * l.wo(h * dh + j, c);
          }
          const double v = o[t][h * dh + j] * std::sqrt(rn);
          sq += v * v;
        }
        f[h] += std::sqrt(sq);
      }
    }
    tokens += double(o.size());
  }
  for (auto& v : f) v /= tokens;
  return f;
}

void zero_head(LayerWeights& l, std::size_t h, std::size_t dh) {
  for (std::size_t r = h * dh; r < (h + 1) * dh; ++r) {
    for (auto& v : l.wo.row(r)) v = 0.0f;
  }
}

void copy_head(LayerWeights& l, std::size_t from, std::size_t to, std::size_t dh) {
  for (std::size_t r = 0; r < kD; ++r) {
    for (std::size_t j = 0; j < dh; ++j) {
      l.wq(r, to * dh + j) = l.wq(r, from * dh + j);
      l.wk(r, to * dh + j) = l.wk(r, from * dh + j);
      l.wv(r, to * dh + j) = l.wv(r, from * dh + j);
    }
  }
  for (std::size_t j = 0; j < dh; ++j) {
    for (std::size_t c = 0; c < kD; ++c) l.wo(to * dh + j, c) = l.wo(from * dh + j, c);
  }
}

}  // namespace

TEST_CASE("head importance matches the definition oracle") {
  oracle::Rng rng(1);
  for (const ArchSpec& s : {kSpec, kGqa}) {
    const LayerWeights l = oracle::random_layer(s, kD, rng);
    const auto xs = inputs(rng);
    const auto f = head_importance(l, s, xs);
    const auto want = importance_oracle(l, s, xs);
    REQUIRE(f.size() == s.n_heads);
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      CHECK(f[h] >= 0.0);
      CHECK(f[h] == doctest::Approx(want[h]).epsilon(1e-5));
    }
  }
}

TEST_CASE("head importance: annihilated and duplicate heads") {
  oracle::Rng rng(2);
  LayerWeights l = oracle::random_layer(kSpec, kD, rng);
  zero_head(l, 2, kSpec.head_dim);
  copy_head(l, 0, 3, kSpec.head_dim);
  const auto f = head_importance(l, kSpec, inputs(rng));
  CHECK(f[2] == 0.0);
  CHECK(f[0] == f[3]);
  CHECK(f[1] > 0.0);
}

TEST_CASE("head importance scales linearly with W_O") {
  oracle::Rng rng(3);
  const LayerWeights l = oracle::random_layer(kSpec, kD, rng);
  const auto xs = inputs(rng);
  const auto f = head_importance(l, kSpec, xs);
  const double c = 3.5;
  LayerWeights scaled = l;
  for (std::size_t r = 8; r < 16; ++r) {
    for (auto& v : scaled.wo.row(r)) v = float(v * c);
  }
  const auto g = head_importance(scaled, kSpec, xs);
  CHECK(g[1] == doctest::Approx(c * f[1]).epsilon(1e-6));
  CHECK(g[0] == f[0]);
  LayerWeights all = l;
  all.wo = scale(l.wo, 2.0f);
  CHECK(top_k_indices(head_importance(all, kSpec, xs), 2) == top_k_indices(f, 2));
}

TEST_CASE("head importance is permutation equivariant") {
  oracle::Rng rng(4);
  const LayerWeights l = oracle::random_layer(kSpec, kD, rng);
  const auto xs = inputs(rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  LayerWeights p = l;
  const std::size_t dh = kSpec.head_dim;
  for (std::size_t h = 0; h < 4; ++h) {
    for (std::size_t r = 0; r < kD; ++r) {
      for (std::size_t j = 0; j < dh; ++j) {
        p.wq(r, h * dh + j) = l.wq(r, perm[h] * dh + j);
        p.wk(r, h * dh + j) = l.wk(r, perm[h] * dh + j);
        p.wv(r, h * dh + j) = l.wv(r, perm[h] * dh + j);
      }
    }
    for (std::size_t j = 0; j < dh; ++j) {
      for (std::size_t c = 0; c < kD; ++c) p.wo(h * dh + j, c) = l.wo(perm[h] * dh + j, c);
    }
  }
  const auto f = head_importance(l, kSpec, xs);
  const auto g = head_importance(p, kSpec, xs);
  for (std::size_t h = 0; h < 4; ++h) CHECK(g[h] == doctest::Approx(f[perm[h]]).epsilon(1e-9));
}

TEST_CASE("prune_heads keeps the top heads in order") {
  oracle::Rng rng(5);
  const LayerWeights l = oracle::random_layer(kSpec, kD, rng);
  const HeadImportance f{0.3, 0.1, 0.5, 0.3};
  const LayerWithSpec full = prune_heads(l, kSpec, 4, f);
  CHECK(full.weights == l);
  CHECK(full.spec == kSpec);

  const LayerWithSpec p = prune_heads(l, kSpec, 2, f);
  CHECK(p.spec == ArchSpec{2, 2, 8, 16});
  CHECK_NOTHROW(validate_layer(p.weights, p.spec, kD));
  // Kept heads are 0 and 2: pruned output is the sum of their contributions.
  const Matrix x = oracle::random_matrix(6, kD, rng);
  const Matrix o = attention_heads(x, l, kSpec);
  Matrix want(6, kD);
  for (std::size_t h : {0u, 2u}) {
    want = add(want, matmul(slice_cols(o, h * 8, 8), slice_rows(l.wo, h * 8, 8)));
  }
  CHECK(max_abs(subtract(mha_forward(x, p.weights, p.spec), want)) <= 1e-5);
  CHECK_THROWS(prune_heads(l, kSpec, 0, f));
  CHECK_THROWS(prune_heads(l, kSpec, 5, f));
  CHECK_THROWS(prune_heads(oracle::random_layer(kGqa, kD, rng), kGqa, 2,
                           HeadImportance(6, 1.0)));
}

TEST_CASE("dropping dead heads leaves the block unchanged") {
  oracle::Rng rng(6);
  LayerWeights l = oracle::random_layer(kSpec, kD, rng);
  zero_head(l, 1, 8);
  zero_head(l, 3, 8);
  const auto f = head_importance(l, kSpec, inputs(rng));
  const LayerWithSpec p = prune_heads(l, kSpec, 2, f);
  const Matrix x = oracle::random_matrix(8, kD, rng);
  CHECK(block_forward(x, p.weights, p.spec).h_next == block_forward(x, l, kSpec).h_next);
}

TEST_CASE("kv-group pruning") {
  oracle::Rng rng(7);
  LayerWeights l = oracle::random_layer(kGqa, kD, rng);
  const HeadImportance f{1, 2, 0.5, 0.5, 3, 0};
  CHECK(group_importance(kGqa, f) == std::vector<double>{3, 1, 3});
  CHECK(heads_of_groups(kGqa, std::vector<std::size_t>{0, 2}) ==
        std::vector<std::size_t>{0, 1, 4, 5});
  CHECK(prune_kv_groups(l, kGqa, 3, f).weights == l);

  const LayerWithSpec p = prune_kv_groups(l, kGqa, 2, f);
  CHECK(p.spec == ArchSpec{4, 2, 8, 16});
  CHECK(p.spec.n_heads % p.spec.n_kv_groups == 0);
  CHECK_NOTHROW(validate_layer(p.weights, p.spec, kD));

  zero_head(l, 2, 8);
  zero_head(l, 3, 8);
  const auto g = head_importance(l, kGqa, inputs(rng));
  const LayerWithSpec q = prune_kv_groups(l, kGqa, 2, g);
  const Matrix x = oracle::random_matrix(8, kD, rng);
  CHECK(block_forward(x, q.weights, q.spec).h_next == block_forward(x, l, kGqa).h_next);
  CHECK_THROWS(prune_kv_groups(l, kGqa, 0, g));
}

TEST_CASE("ranking agrees with an ablation oracle when one head dominates") {
  oracle::Rng rng(8);
  const ArchSpec s{2, 2, 8, 16};
  LayerWeights l = oracle::random_layer(s, kD, rng);
  for (std::size_t r = 0; r < 8; ++r) {
    for (auto& v : l.wo.row(r)) v *= 10.0f;
  }
  const auto xs = inputs(rng);
  const auto f = head_importance(l, s, xs);
  // Output-norm change from ablating each head.
  std::vector<double> change(2, 0.0);
  for (std::size_t h = 0; h < 2; ++h) {
    LayerWeights ablated = l;
    zero_head(ablated, h, 8);
    for (const auto& x : xs) {
      change[h] += std::sqrt(squared_distance(mha_forward(x, l, s), mha_forward(x, ablated, s)));
    }
  }
  CHECK(change[0] > change[1]);
  CHECK(f[0] > f[1]);
}

TEST_CASE("top-k selection beats dropping the top heads") {
  oracle::Rng rng(9);
  const ArchSpec s{8, 8, 4, 16};
  for (int trial = 0; trial < 5; ++trial) {
    LayerWeights l = oracle::random_layer(s, kD, rng);
    for (std::size_t h = 0; h < 8; ++h) {
      const float c = 0.2f + 0.4f * float(h % 4);
      for (std::size_t r = h * 4; r < h * 4 + 4; ++r) {
        for (auto& v : l.wo.row(r)) v *= c;
      }
    }
    const auto xs = inputs(rng);
    const auto f = head_importance(l, s, xs);
    const LayerWithSpec best = prune_heads(l, s, 4, f);
    HeadImportance neg = f;
    for (auto& v : neg) v = -v;
    const LayerWithSpec worst = prune_heads(l, s, 4, neg);
    double db = 0.0, dw = 0.0;
    for (const auto& x : xs) {
      const Matrix ref = mha_forward(x, l, s);
      db += squared_distance(ref, mha_forward(x, best.weights, best.spec));
      dw += squared_distance(ref, mha_forward(x, worst.weights, worst.spec));
    }
    CHECK(db <= dw);
  }
}
