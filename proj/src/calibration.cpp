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

#include "flatkit/calibration.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace flatkit {
namespace {

double row_norm(std::span<const float> r) {
  double s = 0.0;
  for (float v : r) s += double(v) * v;
  return std::sqrt(s);
}

double mean_row_norm_of_difference(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    auto ar = a.row(t);
    auto br = b.row(t);
    double s = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) {
      const double d = double(ar[c]) - br[c];
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total;
}

void require_traces(const TraceSet& traces, std::size_t layer_index) {
  if (traces.sequences.empty()) throw Error("no calibration traces recorded");
  if (layer_index >= traces.n_layers()) {
    throw Error("no traces for layer " + std::to_string(layer_index));
  }
}

}  // namespace

TraceSet record_traces(const TransformerModel& model, const TokenStream& calib) {
  if (calib.empty()) throw Error("calibration set is empty");
  TraceSet traces;
  traces.sequences.resize(calib.size());
  parallel_for(calib.size(), [&](std::size_t i) {
    traces.sequences[i] = traced_forward(model, calib.sequences[i]);
  });
  return traces;
}

SimilarityMatrix SimilarityMatrix::from_values(std::size_t n,
                                               std::vector<double> values) {
  if (values.size() != n * n) {
    throw DimensionError("similarity table must be n x n");
  }
  SimilarityMatrix s;
  s.n_layers = n;
  s.values = std::move(values);
  for (std::size_t i = 0; i < n; ++i) s.groups.push_back({i, i});
  return s;
}

double SimilarityMatrix::entry(std::size_t i, std::size_t j) const {
  if (!(i < j && j < groups.size())) {
    throw DimensionError("similarity entry (" + std::to_string(i) + ", " +
                         std::to_string(j) + ") outside the upper triangle of " +
                         std::to_string(groups.size()) + " groups");
  }
  return original(groups[i].first, groups[j].last);
}

std::size_t SimilarityMatrix::entry_count() const {
  const std::size_t g = groups.size();
  return g * (g - (g > 0 ? 1 : 0)) / 2;
}

SimilarityMatrix similarity_matrix(const TraceSet& traces) {
  const std::size_t n = traces.n_layers();
  require_traces(traces, 0);
  std::vector<double> values(n * n, 0.0);
  for (const auto& seq : traces.sequences) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        values[i * n + j] +=
            mean_token_cosine(seq.layers[i].input, seq.layers[j].output);
      }
    }
  }
  for (double& v : values) v /= double(traces.sequences.size());
  return SimilarityMatrix::from_values(n, std::move(values));
}

LayerStats layer_stats(const TraceSet& traces) {
  require_traces(traces, 0);
  const std::size_t n = traces.n_layers();
  LayerStats st;
  st.sigma.resize(n);
  st.residual_norm.resize(n);
  st.attn_norm.resize(n);
  st.mlp_norm.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    double sum = 0.0, count = 0.0, tokens = 0.0;
    double res = 0.0, attn = 0.0, mlp = 0.0;
    for (const auto& seq : traces.sequences) {
      const auto& tr = seq.layers[l];
      for (float v : tr.output.data()) sum += v;
      count += double(tr.output.size());
      for (std::size_t t = 0; t < tr.input.rows(); ++t) {
        res += row_norm(tr.input.row(t));
      }
      attn += mean_row_norm_of_difference(tr.mid, tr.input);
      mlp += mean_row_norm_of_difference(tr.output, tr.mid);
      tokens += double(tr.input.rows());
    }
    const double mean = sum / count;
    double var = 0.0;
    for (const auto& seq : traces.sequences) {
      for (float v : seq.layers[l].output.data()) {
        var += (v - mean) * (v - mean);
      }
    }
    st.sigma[l] = std::sqrt(var / count);
    st.residual_norm[l] = res / tokens;
    st.attn_norm[l] = attn / tokens;
    st.mlp_norm[l] = mlp / tokens;
  }
  return st;
}

std::vector<Matrix> attention_inputs(const TraceSet& traces,
                                     std::size_t layer_index,
                                     const LayerWeights& layer,
                                     double norm_eps) {
  require_traces(traces, layer_index);
  std::vector<Matrix> out;
  out.reserve(traces.sequences.size());
  for (const auto& seq : traces.sequences) {
    out.push_back(rms_norm(seq.layers[layer_index].input, layer.alpha_attn,
                           norm_eps));
  }
  return out;
}

std::vector<Matrix> mlp_inputs(const TraceSet& traces, std::size_t layer_index,
                               const LayerWeights& layer, double norm_eps) {
  require_traces(traces, layer_index);
  std::vector<Matrix> out;
  out.reserve(traces.sequences.size());
  for (const auto& seq : traces.sequences) {
    out.push_back(
        rms_norm(seq.layers[layer_index].mid, layer.alpha_mlp, norm_eps));
  }
  return out;
}

void write_similarity_csv(std::ostream& out, const SimilarityMatrix& s) {
  const std::size_t n = s.n_layers;
  out << "layer";
  for (std::size_t j = 0; j < n; ++j) out << ',' << j;
  out << '\n';
  out << std::setprecision(9);
  for (std::size_t i = 0; i < n; ++i) {
    out << i;
    for (std::size_t j = 0; j < n; ++j) {
      out << ',';
      if (j > i) out << s.original(i, j);
    }
    out << '\n';
  }
}

void write_layer_stats_csv(std::ostream& out, const LayerStats& stats) {
  out << "layer,sigma,residual_norm,attn_norm,mlp_norm\n";
  out << std::setprecision(9);
  for (std::size_t l = 0; l < stats.sigma.size(); ++l) {
    out << l << ',' << stats.sigma[l] << ',' << stats.residual_norm[l] << ','
        << stats.attn_norm[l] << ',' << stats.mlp_norm[l] << '\n';
  }
}

}  // namespace flatkit
