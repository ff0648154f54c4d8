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

#ifndef FLATKIT_EVAL_HPP_
#define FLATKIT_EVAL_HPP_

#include <span>
#include <vector>

#include "flatkit/calibration.hpp"
#include "flatkit/model.hpp"
#include "flatkit/model_io.hpp"

namespace flatkit {

// Sum of next-token negative log-likelihoods of one sequence and the number
// of predicted positions.
struct NllSum {
  double nll = 0.0;
  std::size_t count = 0;
};
NllSum next_token_nll(const Matrix& logits, std::span<const TokenId> tokens);

double perplexity(const TransformerModel& model, const TokenStream& tokens);

struct DivergenceMetrics {
  double logit_mse = 0.0;
  double mean_kl = 0.0;  // KL(dense || compressed) per token
  double perplexity_dense = 0.0;
  double perplexity_compressed = 0.0;
};

// Mean squared difference over every logit of every sequence.
double logit_mse(std::span<const Matrix> reference,
                 std::span<const Matrix> candidate);
// Mean over tokens of KL(softmax(reference) || softmax(candidate)).
double mean_kl(std::span<const Matrix> reference,
               std::span<const Matrix> candidate);

std::vector<Matrix> forward_all(const TransformerModel& model,
                                const TokenStream& tokens);

DivergenceMetrics logit_divergence(const TransformerModel& dense,
                                   const TransformerModel& compressed,
                                   const TokenStream& tokens);

// Removes all but the first layer of every group; `groups` must partition
// the model's layers into contiguous ranges.
TransformerModel layer_drop_baseline(const TransformerModel& model,
                                     std::span<const LayerRange> groups);

struct BenchStats {
  double mean_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  double tokens_per_s = 0.0;
  std::size_t threads = 1;
};

// Times `reps` forward passes over `batch` random sequences after one
// warm-up pass.
BenchStats bench_forward(const TransformerModel& model, std::size_t batch,
                         std::size_t seq_len, std::size_t reps,
                         std::uint64_t seed = 0);

}  // namespace flatkit

#endif  // FLATKIT_EVAL_HPP_
