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

#include "flatkit/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace flatkit {
namespace {

// log-softmax of one row in f64.
void log_softmax(std::span<const float> row, std::vector<double>& out) {
  out.resize(row.size());
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (float v : row) sum += std::exp(double(v) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = double(row[i]) - lse;
}

void require_paired(std::span<const Matrix> a, std::span<const Matrix> b) {
  if (a.size() != b.size()) {
    throw DimensionError("logit sets hold different sequence counts");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) {
      throw DimensionError("logit shapes differ for sequence " +
                           std::to_string(i));
    }
  }
}

}  // namespace

NllSum next_token_nll(const Matrix& logits, std::span<const TokenId> tokens) {
  if (logits.rows() != tokens.size()) {
    throw DimensionError("next_token_nll: one logit row per token required");
  }
  NllSum out;
  std::vector<double> lp;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    log_softmax(logits.row(t), lp);
    out.nll -= lp.at(tokens[t + 1]);
    ++out.count;
  }
  return out;
}

std::vector<Matrix> forward_all(const TransformerModel& model,
                                const TokenStream& tokens) {
  std::vector<Matrix> logits(tokens.size());
  parallel_for(tokens.size(), [&](std::size_t i) {
    logits[i] = model_forward(model, tokens.sequences[i]);
  });
  return logits;
}

double perplexity(const TransformerModel& model, const TokenStream& tokens) {
  if (tokens.empty()) throw Error("perplexity: empty token stream");
  if (tokens.seq_len < 2) throw Error("perplexity: sequences need >= 2 tokens");
  const auto logits = forward_all(model, tokens);
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto s = next_token_nll(logits[i], tokens.sequences[i]);
    nll += s.nll;
    count += s.count;
  }
  return std::exp(nll / double(count));
}

double logit_mse(std::span<const Matrix> reference,
                 std::span<const Matrix> candidate) {
  require_paired(reference, candidate);
  double sum = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    sum += squared_distance(reference[i], candidate[i]);
    count += double(reference[i].size());
  }
  return count > 0.0 ? sum / count : 0.0;
}

double mean_kl(std::span<const Matrix> reference,
               std::span<const Matrix> candidate) {
  require_paired(reference, candidate);
  double sum = 0.0;
  double tokens = 0.0;
  std::vector<double> lp, lq;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    for (std::size_t t = 0; t < reference[i].rows(); ++t) {
      log_softmax(reference[i].row(t), lp);
      log_softmax(candidate[i].row(t), lq);
      double kl = 0.0;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        kl += std::exp(lp[v]) * (lp[v] - lq[v]);
      }
      sum += std::max(kl, 0.0);
      tokens += 1.0;
    }
  }
  return tokens > 0.0 ? sum / tokens : 0.0;
}

DivergenceMetrics logit_divergence(const TransformerModel& dense,
                                   const TransformerModel& compressed,
                                   const TokenStream& tokens) {
  if (dense.config.vocab != compressed.config.vocab) {
    throw DimensionError("logit_divergence: vocab " +
                         std::to_string(dense.config.vocab) + " vs " +
                         std::to_string(compressed.config.vocab));
  }
  const auto a = forward_all(dense, tokens);
  const auto b = forward_all(compressed, tokens);
  DivergenceMetrics m;
  m.logit_mse = logit_mse(a, b);
  m.mean_kl = mean_kl(a, b);
  double nll_a = 0.0, nll_b = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto sa = next_token_nll(a[i], tokens.sequences[i]);
    nll_a += sa.nll;
    nll_b += next_token_nll(b[i], tokens.sequences[i]).nll;
    count += sa.count;
  }
  m.perplexity_dense = std::exp(nll_a / double(count));
  m.perplexity_compressed = std::exp(nll_b / double(count));
  return m;
}

TransformerModel layer_drop_baseline(const TransformerModel& model,
                                     std::span<const LayerRange> groups) {
  std::size_t expected = 0;
  for (const auto& g : groups) {
    if (g.first != expected || g.last < g.first) {
      throw Error("layer_drop_baseline: groups must be contiguous and ordered");
    }
    expected = g.last + 1;
  }
  if (expected != model.n_layers()) {
    throw Error("layer_drop_baseline: groups cover " + std::to_string(expected) +
                " of " + std::to_string(model.n_layers()) + " layers");
  }
  TransformerModel out = model;
  out.layers.clear();
  out.config.layers.clear();
  for (const auto& g : groups) {
    out.layers.push_back(model.layers[g.first]);
    out.config.layers.push_back(model.config.layers[g.first]);
  }
  return out;
}

BenchStats bench_forward(const TransformerModel& model, std::size_t batch,
                         std::size_t seq_len, std::size_t reps,
                         std::uint64_t seed) {
  if (reps < 3) throw Error("bench_forward: at least 3 repetitions required");
  if (batch == 0 || seq_len == 0) {
    throw Error("bench_forward: batch and sequence length must be positive");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(0, TokenId(model.config.vocab - 1));
  TokenStream input;
  input.seq_len = seq_len;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<TokenId> seq(seq_len);
    for (auto& t : seq) t = pick(rng);
    input.sequences.push_back(std::move(seq));
  }

  using clock = std::chrono::steady_clock;
  forward_all(model, input);  // warm-up
  std::vector<double> ms;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto start = clock::now();
    forward_all(model, input);
    ms.push_back(
        std::chrono::duration<double, std::milli>(clock::now() - start).count());
  }
  BenchStats s;
  s.min_ms = *std::min_element(ms.begin(), ms.end());
  s.max_ms = *std::max_element(ms.begin(), ms.end());
  double total = 0.0;
  for (double v : ms) total += v;
  s.mean_ms = std::clamp(total / double(ms.size()), s.min_ms, s.max_ms);
  s.tokens_per_s = double(batch * seq_len) / (s.mean_ms / 1000.0);
  s.threads = thread_count();
  return s;
}

}  // namespace flatkit
