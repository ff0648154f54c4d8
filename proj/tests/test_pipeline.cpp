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
#include <string>

#include <doctest.h>
#include <json.hpp>

#include "flatkit/calibration.hpp"
#include "flatkit/eval.hpp"
#include "flatkit/model_io.hpp"
#include "flatkit/pipeline.hpp"
#include "oracles.hpp"

using namespace flatkit;

namespace {

ModelConfig uniform_config(std::size_t layers, const ArchSpec& s,
                           std::size_t d = 16, std::size_t vocab = 32) {
  ModelConfig c;
  c.d_model = d;
  c.vocab = vocab;
  c.layers.assign(layers, s);
  return c;
}

TokenStream random_stream(std::size_t n, std::size_t len, std::size_t vocab,
                          std::uint64_t seed) {
  oracle::Rng rng(seed);
  TokenStream s;
  s.seq_len = len;
  for (std::size_t i = 0; i < n; ++i) s.sequences.push_back(oracle::random_tokens(len, vocab, rng));
  return s;
}

const ArchSpec kSpec{2, 2, 8, 32};

}  // namespace

TEST_CASE("plan: 32-layer 7B-shaped config") {
  ModelConfig c = uniform_config(32, ArchSpec{32, 32, 128, 11008}, 4096, 32000);
  const CompressionPlan p = plan_compression(c, 0.2);
  CHECK(p.n_merges == 7);
  CHECK(p.layer_targets == c.layers);
  const double removed = 7.0 * double(block_parameter_count(c.layers[0], 4096));
  CHECK(std::abs(removed / double(parameter_count(c)) - 0.2102) <= 5e-5);
}

TEST_CASE("plan: infeasible targets") {
  const ModelConfig c = uniform_config(8, kSpec);
  try {
    plan_compression(c, 0.001);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("achievable range") != std::string::npos);
  }
  CHECK_THROWS(plan_compression(c, 0.0));
  CHECK_THROWS(plan_compression(c, 1.0));
  CHECK_THROWS(plan_compression(c, 0.99));
  CHECK_THROWS(plan_compression(uniform_config(1, kSpec), 0.5));
}

TEST_CASE("compress: accounting, stage order and untouched layers") {
  const ModelConfig c = uniform_config(8, kSpec);
  const TransformerModel dense = generate_toy_model(c, 3, 0.05);
  const TokenStream calib = random_stream(6, 24, 32, 4);
  const CompressionPlan plan = plan_compression(c, 0.25);
  const CompressionResult r = compress(dense, plan, calib);
  const auto& rep = r.report;

  CHECK(r.model.n_layers() == 8 - plan.n_merges);
  for (const auto& s : r.model.config.layers) CHECK(s == kSpec);
  CHECK_NOTHROW(validate_model(r.model));
  const double want = double(plan.n_merges) * double(block_parameter_count(kSpec, 16)) /
                      double(parameter_count(c));
  CHECK(rep.achieved_sparsity == doctest::Approx(want).epsilon(1e-12));
  CHECK(rep.params_dense - rep.params_compressed ==
        plan.n_merges * block_parameter_count(kSpec, 16));

  REQUIRE(rep.stages.size() == 4);
  CHECK(rep.stages[0].name == "dense");
  CHECK(rep.stages[1].params == rep.stages[0].params);
  CHECK(rep.stages[2].params < rep.stages[1].params);
  CHECK(rep.stages[3].params < rep.stages[2].params);
  CHECK(rep.stages[3].params == rep.params_compressed);

  const auto& groups = rep.merges.groups;
  REQUIRE(groups.size() == r.model.n_layers());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].size() == 1) CHECK(r.model.layers[i] == dense.layers[groups[i].first]);
  }
  CHECK(rep.per_layer.size() == rep.merges.merged_groups().size());
  for (const auto& l : rep.per_layer) {
    CHECK(l.kept_heads.size() == kSpec.n_heads);
    CHECK(l.head_importance.size() == kSpec.n_heads * l.original.size());
    CHECK(l.lambda > 0.0);
  }
}

TEST_CASE("compress: pure-residual model keeps its logits") {
  TransformerModel dense = oracle::random_model(6, kSpec, 16, 32, 5);
  for (auto& l : dense.layers) {
    l.wo = Matrix(l.wo.rows(), l.wo.cols());
    l.wd = Matrix(l.wd.rows(), l.wd.cols());
  }
  const TokenStream calib = random_stream(4, 16, 32, 6);
  const CompressionResult r = compress(dense, plan_compression(dense.config, 0.3), calib);
  CHECK(r.model.n_layers() < 6);
  const auto& toks = calib.sequences[1];
  CHECK(model_forward(r.model, toks) == model_forward(dense, toks));
}

TEST_CASE("compress: GQA targets") {
  const ArchSpec g{4, 2, 4, 24};
  const ModelConfig c = uniform_config(6, g);
  const TransformerModel dense = generate_toy_model(c, 7, 0.05);
  const CompressionResult r =
      compress(dense, plan_compression(c, 0.3), random_stream(4, 16, 32, 8));
  for (const auto& s : r.model.config.layers) CHECK(s == g);
  for (const auto& l : r.report.per_layer) {
    CHECK(l.kept_heads.size() == 4);
    for (std::size_t i = 0; i + 1 < l.kept_heads.size(); i += 2) {
      CHECK(l.kept_heads[i] % 2 == 0);
      CHECK(l.kept_heads[i + 1] == l.kept_heads[i] + 1);
    }
  }
}

TEST_CASE("compress: determinism and round-trip") {
  const ModelConfig c = uniform_config(6, kSpec);
  const TransformerModel dense = generate_toy_model(c, 9, 0.05);
  const TokenStream calib = random_stream(4, 16, 32, 10);
  const CompressionPlan plan = plan_compression(c, 0.2);
  const auto a = compress(dense, plan, calib);
  const auto b = compress(dense, plan, calib);
  const auto bytes = serialize_model(a.model);
  CHECK(bytes == serialize_model(b.model));
  const TransformerModel back = deserialize_model(bytes);
  CHECK(model_forward(back, calib.sequences[0]) == model_forward(a.model, calib.sequences[0]));
}

TEST_CASE("compress: flattening beats dropping the same layers") {
  const ModelConfig c = uniform_config(16, ArchSpec{4, 4, 16, 256}, 64, 256);
  const TransformerModel dense = generate_toy_model(c, 42, 0.02);
  const TokenStream calib = take_sequences(
      read_calibration(std::string(FLATKIT_DATA_DIR) + "/toy_corpus.txt", false, 128, 256),
      32);
  const auto r = compress(dense, plan_compression(c, 0.2), calib);
  const auto drop = layer_drop_baseline(dense, r.report.merges.groups);
  CHECK(drop.n_layers() == r.model.n_layers());
  const auto ref = forward_all(dense, calib);
  CHECK(logit_mse(ref, forward_all(r.model, calib)) <
        logit_mse(ref, forward_all(drop, calib)));
}

TEST_CASE("report JSON layout") {
  const ModelConfig c = uniform_config(6, kSpec);
  const auto r = compress(generate_toy_model(c, 13, 0.05), plan_compression(c, 0.3),
                          random_stream(3, 16, 32, 14));
  const auto j = nlohmann::json::parse(report_to_json(r.report));
  REQUIRE(j["merges"].size() == r.report.merges.events.size());
  CHECK(j["merges"][0]["step"] == 1);
  CHECK(j["merges"][0]["merged_original_layers"].size() == 2);
  CHECK(j["achieved_sparsity"].get<double>() == r.report.achieved_sparsity);
  CHECK(j["stages"].size() == 4);
  for (const char* key : {"name", "params", "logit_mse_vs_dense", "seconds"}) {
    CHECK(j["stages"][2].contains(key));
  }
  CHECK(j["per_layer"]["head_importance"].size() == r.report.per_layer.size());
  CHECK(j["per_layer"]["leverage_summary"][0].contains("kept_mass_fraction"));
}
