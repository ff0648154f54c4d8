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

// End-to-end depth compression:
//   1. trace the dense model, build the similarity matrix
//   2. flatten the n most similar adjacent groups
//   3. re-trace, prune every merged MLP back to its original width
//   4. re-trace, prune every merged attention back to its original heads
// Unmerged layers are never modified.

#ifndef FLATKIT_PIPELINE_HPP_
#define FLATKIT_PIPELINE_HPP_

#include <string>
#include <vector>

#include "flatkit/flatten.hpp"
#include "flatkit/model.hpp"
#include "flatkit/model_io.hpp"
#include "flatkit/prune_mlp.hpp"

namespace flatkit {

struct CompressionPlan {
  double target_sparsity = 0.0;
  std::size_t n_merges = 0;
  double lambda_scale = 10.0;
  // Architecture each merged group is pruned back to, indexed by original
  // layer; a group uses the entry of its first layer.
  std::vector<ArchSpec> layer_targets;
};

// n_merges = round(target * total params / mean block params). Throws when
// that falls outside [1, L-1], naming the achievable range.
CompressionPlan plan_compression(const ModelConfig& config,
                                 double target_sparsity,
                                 double lambda_scale = 10.0);

struct StageReport {
  std::string name;
  std::size_t params = 0;
  double logit_mse_vs_dense = 0.0;
  double seconds = 0.0;
};

struct LayerPruneReport {
  std::size_t layer = 0;  // index in the compressed model
  LayerRange original;
  std::vector<double> head_importance;
  std::vector<std::size_t> kept_heads;
  LeverageSummary leverage;
  double lambda = 0.0;
};

struct CompressionReport {
  MergePlan merges;
  double target_sparsity = 0.0;
  double achieved_sparsity = 0.0;
  std::size_t params_dense = 0;
  std::size_t params_compressed = 0;
  std::vector<StageReport> stages;
  std::vector<LayerPruneReport> per_layer;
};

struct CompressionResult {
  TransformerModel model;
  CompressionReport report;
};

CompressionResult compress(const TransformerModel& model,
                           const CompressionPlan& plan,
                           const TokenStream& calib);

std::string report_to_json(const CompressionReport& report);

// Subcommands: generate | analyze | compress | eval | bench. Returns the
// process exit status; diagnostics go to `err`.
int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err);

}  // namespace flatkit

#endif  // FLATKIT_PIPELINE_HPP_
