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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatkit/calibration.hpp"
#include "flatkit/eval.hpp"
#include "flatkit/model_io.hpp"
#include "flatkit/pipeline.hpp"

namespace flatkit {
namespace {

struct CalibArgs {
  std::string text;
  std::string tokens;
  std::size_t seq_len = 128;
  std::size_t sequences = 32;

  void add_to(CLI::App* cmd) {
    auto* t = cmd->add_option("--calib-text", text, "UTF-8 calibration text");
    auto* k = cmd->add_option("--calib-tokens", tokens,
                              "Raw little-endian u32 token file");
    t->excludes(k);
    cmd->add_option("--seq-len", seq_len, "Tokens per calibration sequence")
        ->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
    cmd->add_option("--sequences", sequences, "Number of sequences")
        ->check(CLI::PositiveNumber);
  }

  TokenStream load_all(std::size_t vocab) const {
    if (text.empty() == tokens.empty()) {
      throw CLI::ValidationError("exactly one of --calib-text or --calib-tokens "
                                 "is required");
    }
    const bool raw = !tokens.empty();
    return read_calibration(raw ? tokens : text, raw, seq_len, vocab);
  }
};

void write_text_file(const std::filesystem::path& path, const std::string& s) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << s;
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"Depth compression for Pre-LN decoder transformers", "flatkit"};
  app.require_subcommand(1);
  std::size_t threads = 1;

  // generate
  auto* gen = app.add_subcommand("generate", "Write a seeded random model");
  ModelConfig gcfg;
  ArchSpec garch{4, 0, 16, 256};
  std::size_t layers = 16;
  std::uint64_t gseed = 42;
  double init_scale = 0.02;
  std::string gout;
  gcfg.d_model = 64;
  gcfg.vocab = 256;
  gen->add_option("--layers", layers)->check(CLI::PositiveNumber);
  gen->add_option("--dim", gcfg.d_model)->check(CLI::PositiveNumber);
  gen->add_option("--heads", garch.n_heads)->check(CLI::PositiveNumber);
  gen->add_option("--kv-groups", garch.n_kv_groups, "Defaults to --heads");
  gen->add_option("--head-dim", garch.head_dim)->check(CLI::PositiveNumber);
  gen->add_option("--intermediate", garch.intermediate)
      ->check(CLI::PositiveNumber);
  gen->add_option("--vocab", gcfg.vocab)->check(CLI::PositiveNumber);
  gen->add_option("--seed", gseed);
  gen->add_option("--init-scale", init_scale)->check(CLI::NonNegativeNumber);
  gen->add_option("--out", gout)->required();

  // analyze
  auto* ana = app.add_subcommand("analyze", "Similarity matrix and layer stats");
  std::string amodel, asim, astats;
  CalibArgs acal;
  ana->add_option("--model", amodel)->required()->check(CLI::ExistingFile);
  acal.add_to(ana);
  ana->add_option("--out-similarity", asim)->required();
  ana->add_option("--out-stats", astats)->required();
  ana->add_option("--threads", threads)->check(CLI::PositiveNumber);

  // compress
  auto* cmp = app.add_subcommand("compress", "Flatten and prune a model");
  std::string cmodel, cout_path, creport;
  CalibArgs ccal;
  double sparsity = 0.2;
  double lambda_scale = 10.0;
  std::uint64_t cseed = 42;
  cmp->add_option("--model", cmodel)->required()->check(CLI::ExistingFile);
  ccal.add_to(cmp);
  cmp->add_option("--sparsity", sparsity)->required();
  cmp->add_option("--lambda-scale", lambda_scale)->check(CLI::PositiveNumber);
  cmp->add_option("--seed", cseed, "Seed for calibration sampling");
  cmp->add_option("--out", cout_path)->required();
  cmp->add_option("--report", creport)->required();
  cmp->add_option("--threads", threads)->check(CLI::PositiveNumber);

  // eval
  auto* evl = app.add_subcommand("eval", "Perplexity and divergence");
  std::string emodel, ebaseline;
  CalibArgs ecal;
  evl->add_option("--model", emodel)->required()->check(CLI::ExistingFile);
  evl->add_option("--baseline", ebaseline, "Reference (dense) model")
      ->check(CLI::ExistingFile);
  ecal.add_to(evl);
  evl->add_option("--threads", threads)->check(CLI::PositiveNumber);

  // bench
  auto* bch = app.add_subcommand("bench", "Forward latency");
  std::string bmodel;
  std::size_t batch = 1, bseq = 128, reps = 10;
  bch->add_option("--model", bmodel)->required()->check(CLI::ExistingFile);
  bch->add_option("--batch", batch)->check(CLI::PositiveNumber);
  bch->add_option("--seq-len", bseq)->check(CLI::PositiveNumber);
  bch->add_option("--reps", reps)->check(CLI::Range(3, 1 << 20));
  bch->add_option("--threads", threads)->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    set_thread_count(threads);
    if (*gen) {
      if (garch.n_kv_groups == 0) garch.n_kv_groups = garch.n_heads;
      gcfg.layers.assign(layers, garch);
      save_model(generate_toy_model(gcfg, gseed, init_scale), gout);
    } else if (*ana) {
      const auto model = load_model(amodel);
      const auto calib =
          take_sequences(acal.load_all(model.config.vocab), acal.sequences);
      const auto traces = record_traces(model, calib);
      std::ostringstream sim, stats;
      write_similarity_csv(sim, similarity_matrix(traces));
      write_layer_stats_csv(stats, layer_stats(traces));
      write_text_file(asim, sim.str());
      write_text_file(astats, stats.str());
    } else if (*cmp) {
      const auto model = load_model(cmodel);
      const auto calib = sample_sequences(ccal.load_all(model.config.vocab),
                                          ccal.sequences, cseed);
      const auto plan = plan_compression(model.config, sparsity, lambda_scale);
      const auto result = compress(model, plan, calib);
      const std::filesystem::path tmp = cout_path + ".tmp";
      save_model(result.model, tmp);
      write_text_file(creport, report_to_json(result.report));
      std::filesystem::rename(tmp, cout_path);
    } else if (*evl) {
      const auto model = load_model(emodel);
      const auto calib =
          take_sequences(ecal.load_all(model.config.vocab), ecal.sequences);
      nlohmann::json j;
      j["sequences"] = calib.size();
      j["seq_len"] = calib.seq_len;
      if (ebaseline.empty()) {
        j["perplexity"] = perplexity(model, calib);
      } else {
        const auto base = load_model(ebaseline);
        const auto m = logit_divergence(base, model, calib);
        j["perplexity"] = m.perplexity_compressed;
        j["baseline_perplexity"] = m.perplexity_dense;
        j["logit_mse"] = m.logit_mse;
        j["mean_kl"] = m.mean_kl;
      }
      out << j.dump() << '\n';
    } else if (*bch) {
      const auto model = load_model(bmodel);
      const auto s = bench_forward(model, batch, bseq, reps);
      out << nlohmann::json{{"mean_ms", s.mean_ms},
                            {"min_ms", s.min_ms},
                            {"max_ms", s.max_ms},
                            {"tokens_per_s", s.tokens_per_s},
                            {"threads", s.threads}}
                 .dump()
          << '\n';
    }
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace flatkit
