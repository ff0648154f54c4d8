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

// MLP channel pruning by ridge leverage scores with a Nyström correction of
// the down projection.
//
// With A the gated hidden activations over the calibration set, C = AᵀA and
// S_k the kept-column selector, the correction
//
//   ΔW_D = argmin ||A S_k (S_kᵀ W_D + Δ) - A W_D||_F^2 + λ ||Δ||_F^2
//        = (S_kᵀ C S_k + λI)^{-1} S_kᵀ C (I - S_k S_kᵀ) W_D
//
// is added to the surviving rows of W_D.

#ifndef FLATKIT_PRUNE_MLP_HPP_
#define FLATKIT_PRUNE_MLP_HPP_

#include <span>
#include <vector>

#include "flatkit/flatten.hpp"
#include "flatkit/model.hpp"

namespace flatkit {

// Kept channel indices, strictly increasing.
struct SelectionIndex {
  std::vector<std::size_t> kept;

  std::size_t size() const { return kept.size(); }
  // Channels below `total` that are not kept.
  std::vector<std::size_t> dropped(std::size_t total) const;
};

struct ActivationCorrelation {
  SpdMatrix c;
  std::size_t tokens = 0;
};

// C = Σ AᵀA over calibration sequences with A = (X W_u) ⊙ SiLU(X W_g),
// accumulated in f64 and symmetrized. `inputs` are LN_p-normalized.
ActivationCorrelation activation_correlation(const LayerWeights& layer,
                                             std::span<const Matrix> inputs);

// scale * mean eigenvalue of C.
double lambda_policy(const SpdMatrix& c, double scale = 10.0);

// s_i = [C (C + λI)^{-1}]_ii, clamped to [0, 1].
std::vector<double> ridge_leverage_scores(const SpdMatrix& c, double lambda);

SelectionIndex select_channels(std::span<const double> scores, std::size_t k);

// k x d correction for the kept rows of W_D.
Matrix nystrom_update(const Matrix& wd, const SpdMatrix& c,
                      const SelectionIndex& sel, double lambda);

struct LeverageSummary {
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  double kept_mass_fraction = 0.0;  // Σ kept scores / Σ all scores
};

LeverageSummary summarize_leverage(std::span<const double> scores,
                                   const SelectionIndex& sel);

struct MlpPruneResult {
  LayerWithSpec layer;
  std::vector<double> scores;
  SelectionIndex selection;
  double lambda = 0.0;
  bool degenerate = false;  // all-zero activations: first k kept, no correction
};

MlpPruneResult prune_mlp(const LayerWeights& layer, const ArchSpec& spec,
                         std::size_t k, std::span<const Matrix> inputs,
                         double lambda_scale = 10.0);

}  // namespace flatkit

#endif  // FLATKIT_PRUNE_MLP_HPP_
