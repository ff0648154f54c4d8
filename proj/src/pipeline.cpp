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

#include "flatkit/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "flatkit/calibration.hpp"
#include "flatkit/eval.hpp"
#include "flatkit/prune_mha.hpp"

namespace flatkit {
namespace {

using nlohmann::json;

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::vector<Matrix> logits_of(const TraceSet& traces) {
  std::vector<Matrix> out;
  out.reserve(traces.sequences.size());
  for (const auto& s : traces.sequences) out.push_back(s.logits);
  return out;
}

template <typename Fn>
auto run_stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw Error(std::string("stage '") + name + "' failed: " + e.what());
  }
}

}  // namespace

CompressionPlan plan_compression(const ModelConfig& config,
                                 double target_sparsity, double lambda_scale) {
  if (!(target_sparsity > 0.0 && target_sparsity < 1.0)) {
    throw Error("target sparsity must lie in (0, 1)");
  }
  const std::size_t n_layers = config.n_layers();
  if (n_layers < 2) throw Error("model needs at least two layers to flatten");
  const double total = double(parameter_count(config));
  double blocks = 0.0;
  for (const auto& s : config.layers) {
    blocks += double(block_parameter_count(s, config.d_model));
  }
  const double mean_block = blocks / double(n_layers);
  const double merges = std::round(target_sparsity * total / mean_block);
  if (merges < 1.0 || merges > double(n_layers - 1)) {
    std::ostringstream msg;
    msg << "target sparsity " << target_sparsity << " implies " << merges
        << " merges; achievable range is [" << mean_block / total << ", "
        << double(n_layers - 1) * mean_block / total << "] (1 to "
        << n_layers - 1 << " merges)";
    throw Error(msg.str());
  }
  CompressionPlan plan;
  plan.target_sparsity = target_sparsity;
  plan.n_merges = static_cast<std::size_t>(merges);
  plan.lambda_scale = lambda_scale;
  plan.layer_targets = config.layers;
  return plan;
}

CompressionResult compress(const TransformerModel& dense,
                           const CompressionPlan& plan,
                           const TokenStream& calib) {
  validate_model(dense);
  if (plan.layer_targets.size() != dense.n_layers()) {
    throw Error("compression plan was made for a different model depth");
  }
  const double eps = dense.config.norm_eps;
  const double rope = dense.config.rope_base;
  CompressionResult result;
  auto& report = result.report;
  report.target_sparsity = plan.target_sparsity;
  report.params_dense = parameter_count(dense);

  // 1. dense calibration + similarity
  StageTimer t_dense;
  std::vector<Matrix> dense_logits;
  SimilarityMatrix sim = run_stage("calibrate", [&] {
    const TraceSet traces = record_traces(dense, calib);
    dense_logits = logits_of(traces);
    return similarity_matrix(traces);
  });
  report.stages.push_back({"dense", report.params_dense, 0.0, t_dense.seconds()});

  // 2. flatten
  StageTimer t_flat;
  FlattenResult flat = run_stage("flatten", [&] {
    return iterative_flatten(dense, std::move(sim), plan.n_merges);
  });
  TransformerModel model = std::move(flat.model);
  report.merges = flat.plan;
  const auto& groups = report.merges.groups;

  std::vector<std::size_t> merged_layers;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].size() > 1) {
      merged_layers.push_back(i);
      report.per_layer.push_back({});
      report.per_layer.back().layer = i;
      report.per_layer.back().original = groups[i];
    }
  }

  TraceSet traces = run_stage("flatten", [&] { return record_traces(model, calib); });
  report.stages.push_back({"flatten", parameter_count(model),
                           logit_mse(dense_logits, logits_of(traces)),
                           t_flat.seconds()});

  // 3. MLP pruning on every merged layer
  StageTimer t_mlp;
  run_stage("prune_mlp", [&] {
    for (std::size_t n = 0; n < merged_layers.size(); ++n) {
      const std::size_t i = merged_layers[n];
      const ArchSpec& target = plan.layer_targets[groups[i].first];
      const auto inputs = mlp_inputs(traces, i, model.layers[i], eps);
      MlpPruneResult r;
      try {
        r = prune_mlp(model.layers[i], model.config.layers[i],
                      target.intermediate, inputs, plan.lambda_scale);
      } catch (const Error& e) {
        throw Error("layer " + std::to_string(i) + ": " + e.what());
      }
      model.layers[i] = std::move(r.layer.weights);
      model.config.layers[i] = r.layer.spec;
      report.per_layer[n].leverage = summarize_leverage(r.scores, r.selection);
      report.per_layer[n].lambda = r.lambda;
    }
    traces = record_traces(model, calib);
    return 0;
  });
  report.stages.push_back({"prune_mlp", parameter_count(model),
                           logit_mse(dense_logits, logits_of(traces)),
                           t_mlp.seconds()});

  // 4. attention pruning on every merged layer
  StageTimer t_mha;
  run_stage("prune_mha", [&] {
    for (std::size_t n = 0; n < merged_layers.size(); ++n) {
      const std::size_t i = merged_layers[n];
      const ArchSpec& target = plan.layer_targets[groups[i].first];
      const ArchSpec spec = model.config.layers[i];
      const auto inputs = attention_inputs(traces, i, model.layers[i], eps);
      const auto f = head_importance(model.layers[i], spec, inputs, rope);
      LayerWithSpec pruned;
      std::vector<std::size_t> kept;
      if (spec.is_gqa() || target.is_gqa()) {
        pruned = prune_kv_groups(model.layers[i], spec, target.n_kv_groups, f);
        kept = heads_of_groups(
            spec, top_k_indices(group_importance(spec, f), target.n_kv_groups));
      } else {
        pruned = prune_heads(model.layers[i], spec, target.n_heads, f);
        kept = top_k_indices(f, target.n_heads);
      }
      if (!(pruned.spec == target)) {
        throw Error("layer " + std::to_string(i) +
                    " does not match its target architecture after pruning");
      }
      model.layers[i] = std::move(pruned.weights);
      model.config.layers[i] = pruned.spec;
      report.per_layer[n].head_importance = f;
      report.per_layer[n].kept_heads = std::move(kept);
    }
    traces = TraceSet{};
    return 0;
  });
  const auto final_logits = forward_all(model, calib);
  report.stages.push_back({"prune_mha", parameter_count(model),
                           logit_mse(dense_logits, final_logits),
                           t_mha.seconds()});

  report.params_compressed = parameter_count(model);
  report.achieved_sparsity = 1.0 - double(report.params_compressed) /
                                       double(report.params_dense);
  result.model = std::move(model);
  return result;
}

std::string report_to_json(const CompressionReport& report) {
  json merges = json::array();
  for (const auto& ev : report.merges.events) {
    std::vector<std::size_t> layers;
    for (std::size_t l = ev.merged.first; l <= ev.merged.last; ++l) {
      layers.push_back(l);
    }
    merges.push_back({{"merged_original_layers", layers}, {"step", ev.step + 1}});
  }
  json stages = json::array();
  for (const auto& s : report.stages) {
    stages.push_back({{"name", s.name},
                      {"params", s.params},
                      {"logit_mse_vs_dense", s.logit_mse_vs_dense},
                      {"seconds", s.seconds}});
  }
  json heads = json::array();
  json leverage = json::array();
  for (const auto& l : report.per_layer) {
    std::vector<std::size_t> originals;
    for (std::size_t i = l.original.first; i <= l.original.last; ++i) {
      originals.push_back(i);
    }
    heads.push_back({{"layer", l.layer},
                     {"original_layers", originals},
                     {"scores", l.head_importance},
                     {"kept", l.kept_heads}});
    leverage.push_back({{"layer", l.layer},
                        {"original_layers", originals},
                        {"min", l.leverage.min},
                        {"median", l.leverage.median},
                        {"max", l.leverage.max},
                        {"kept_mass_fraction", l.leverage.kept_mass_fraction},
                        {"lambda", l.lambda}});
  }
  json j = {{"merges", merges},
            {"target_sparsity", report.target_sparsity},
            {"achieved_sparsity", report.achieved_sparsity},
            {"params_dense", report.params_dense},
            {"params_compressed", report.params_compressed},
            {"stages", stages},
            {"per_layer",
             {{"head_importance", heads}, {"leverage_summary", leverage}}}};
  return j.dump(2);
}

}  // namespace flatkit
