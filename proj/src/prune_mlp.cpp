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

#include "flatkit/prune_mlp.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>

namespace flatkit {

std::vector<std::size_t> SelectionIndex::dropped(std::size_t total) const {
  std::vector<std::size_t> out;
  std::size_t next = 0;
  for (std::size_t i = 0; i < total; ++i) {
    if (next < kept.size() && kept[next] == i) {
      ++next;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

ActivationCorrelation activation_correlation(const LayerWeights& layer,
                                             std::span<const Matrix> inputs) {
  if (inputs.empty()) {
    throw Error("activation_correlation: no calibration inputs");
  }
  const std::size_t n = layer.wu.cols();
  std::vector<Matrix> hidden(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    hidden[i] = mlp_hidden(inputs[i], layer);
  });

  std::size_t tokens = 0;
  for (const Matrix& a : hidden) tokens += a.rows();
  Matrix stacked(tokens, n);
  std::size_t at = 0;
  for (const Matrix& a : hidden) {
    std::copy(a.data().begin(), a.data().end(), stacked.data().begin() + at);
    at += a.size();
  }
  // Entry (i, j) and (j, i) sum the same products in the same order, so the
  // result is exactly symmetric.
  Matrix c = matmul_tn(stacked, stacked);
  return {SpdMatrix(std::move(c)), tokens};
}

double lambda_policy(const SpdMatrix& c, double scale) {
  return scale * mean_eigenvalue(c);
}

std::vector<double> ridge_leverage_scores(const SpdMatrix& c, double lambda) {
  const std::size_t n = c.dim();
  const std::vector<double> x = spd_solve_f64(c, lambda, c.matrix());
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = std::clamp(x[i * n + i], 0.0, 1.0);
  }
  return s;
}

SelectionIndex select_channels(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw Error("select_channels: k = " + std::to_string(k) + " outside [1, " +
                std::to_string(scores.size()) + "]");
  }
  return {top_k_indices(scores, k)};
}

Matrix nystrom_update(const Matrix& wd, const SpdMatrix& c,
                      const SelectionIndex& sel, double lambda) {
  const std::size_t n = c.dim();
  if (wd.rows() != n) {
    throw DimensionError("nystrom_update: W_D has " + std::to_string(wd.rows()) +
                         " rows for a " + std::to_string(n) + "-channel C");
  }
  const auto dropped = sel.dropped(n);
  if (dropped.empty()) return Matrix(sel.size(), wd.cols());

  // S_kᵀ C (I - S_k S_kᵀ) W_D only involves the kept-by-dropped block of C.
  const Matrix c_kd = select_cols(select_rows(c.matrix(), sel.kept), dropped);
  const Matrix rhs = matmul(c_kd, select_rows(wd, dropped));
  const SpdMatrix c_kk(select_cols(select_rows(c.matrix(), sel.kept), sel.kept));
  try {
    return spd_solve(c_kk, lambda, rhs);
  } catch (const SingularMatrixError& e) {
    throw SingularMatrixError("nystrom_update: reduced system singular for " +
                              std::to_string(sel.size()) + " of " +
                              std::to_string(n) + " channels (lambda " +
                              std::to_string(lambda) + "): " + e.what());
  }
}

LeverageSummary summarize_leverage(std::span<const double> scores,
                                   const SelectionIndex& sel) {
  LeverageSummary out;
  if (scores.empty()) return out;
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  out.min = sorted.front();
  out.max = sorted.back();
  const std::size_t m = sorted.size() / 2;
  out.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
  double kept = 0.0;
  for (std::size_t i : sel.kept) kept += scores[i];
  out.kept_mass_fraction = total > 0.0 ? kept / total : 0.0;
  return out;
}

MlpPruneResult prune_mlp(const LayerWeights& layer, const ArchSpec& spec,
                         std::size_t k, std::span<const Matrix> inputs,
                         double lambda_scale) {
  if (k < 1 || k > spec.intermediate) {
    throw Error("prune_mlp: target " + std::to_string(k) + " outside [1, " +
                std::to_string(spec.intermediate) + "]");
  }
  const auto corr = activation_correlation(layer, inputs);
  MlpPruneResult out;
  out.lambda = lambda_policy(corr.c, lambda_scale);

  Matrix correction;
  if (trace(corr.c.matrix()) == 0.0) {
    std::cerr << "warning: MLP activations are identically zero; keeping the "
                 "first "
              << k << " channels without correction\n";
    out.degenerate = true;
    out.scores.assign(spec.intermediate, 0.0);
    out.selection.kept.resize(k);
    std::iota(out.selection.kept.begin(), out.selection.kept.end(),
              std::size_t{0});
    correction = Matrix(k, layer.wd.cols());
  } else {
    out.scores = ridge_leverage_scores(corr.c, out.lambda);
    out.selection = select_channels(out.scores, k);
    correction = nystrom_update(layer.wd, corr.c, out.selection, out.lambda);
  }

  LayerWeights w = layer;
  w.wu = select_cols(layer.wu, out.selection.kept);
  w.wg = select_cols(layer.wg, out.selection.kept);
  w.wd = add(select_rows(layer.wd, out.selection.kept), correction);
  ArchSpec s = spec;
  s.intermediate = k;
  out.layer = {std::move(w), s};
  return out;
}

}  // namespace flatkit
