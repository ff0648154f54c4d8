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

#include "flatkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flatkit {
namespace {

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols,
                   const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(name) + " is " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()) + ", expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
}

std::vector<double> rope_frequencies(std::size_t head_dim, double base) {
  std::vector<double> freq(head_dim / 2);
  for (std::size_t j = 0; j < freq.size(); ++j) {
    freq[j] = std::pow(base, -2.0 * double(j) / double(head_dim));
  }
  return freq;
}

void rotate_row(float* row, std::span<const double> freq, std::size_t pos) {
  for (std::size_t j = 0; j < freq.size(); ++j) {
    const double angle = double(pos) * freq[j];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = row[2 * j];
    const double x1 = row[2 * j + 1];
    row[2 * j] = static_cast<float>(x0 * c - x1 * s);
    row[2 * j + 1] = static_cast<float>(x0 * s + x1 * c);
  }
}

// Rotates every head slab of a tokens x (n*dh) projection in place.
void rope_slabs(Matrix& m, std::size_t n_slabs, std::size_t head_dim,
                double base) {
  const auto freq = rope_frequencies(head_dim, base);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    float* row = m.row(t).data();
    for (std::size_t h = 0; h < n_slabs; ++h) rotate_row(row + h * head_dim, freq, t);
  }
}

Matrix layer_stack(const TransformerModel& model, Matrix h) {
  const auto& cfg = model.config;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    h = block_forward(h, model.layers[l], cfg.layers[l], cfg.norm_eps,
                      cfg.rope_base)
            .h_next;
  }
  return h;
}

Matrix unembed(const TransformerModel& model, const Matrix& h) {
  return matmul(rms_norm(h, model.final_norm, model.config.norm_eps),
                model.unembedding);
}

}  // namespace

float silu(float x) {
  return static_cast<float>(double(x) / (1.0 + std::exp(-double(x))));
}

void validate_arch(const ArchSpec& spec) {
  if (spec.n_heads == 0 || spec.n_kv_groups == 0 || spec.head_dim == 0 ||
      spec.intermediate == 0) {
    throw DimensionError("arch spec has a zero dimension");
  }
  if (spec.n_kv_groups > spec.n_heads || spec.n_heads % spec.n_kv_groups != 0) {
    throw DimensionError("head count " + std::to_string(spec.n_heads) +
                         " is not a multiple of kv group count " +
                         std::to_string(spec.n_kv_groups));
  }
  if (spec.head_dim % 2 != 0) {
    throw DimensionError("head_dim must be even for rotary embedding");
  }
}

void validate_layer(const LayerWeights& layer, const ArchSpec& spec,
                    std::size_t d) {
  validate_arch(spec);
  const std::size_t q = spec.n_heads * spec.head_dim;
  const std::size_t kv = spec.n_kv_groups * spec.head_dim;
  require_shape(layer.wq, d, q, "wq");
  require_shape(layer.wk, d, kv, "wk");
  require_shape(layer.wv, d, kv, "wv");
  require_shape(layer.wo, q, d, "wo");
  require_shape(layer.wu, d, spec.intermediate, "wu");
  require_shape(layer.wg, d, spec.intermediate, "wg");
  require_shape(layer.wd, spec.intermediate, d, "wd");
  if (layer.alpha_attn.size() != d || layer.alpha_mlp.size() != d) {
    throw DimensionError("norm gain length does not match d_model");
  }
}

void validate_model(const TransformerModel& model) {
  const auto& cfg = model.config;
  if (cfg.d_model == 0 || cfg.vocab == 0) {
    throw DimensionError("model has zero d_model or vocab");
  }
  if (cfg.layers.size() != model.layers.size()) {
    throw DimensionError("config lists " + std::to_string(cfg.layers.size()) +
                         " layers but model holds " +
                         std::to_string(model.layers.size()));
  }
  require_shape(model.embedding, cfg.vocab, cfg.d_model, "embedding");
  require_shape(model.unembedding, cfg.d_model, cfg.vocab, "unembedding");
  if (model.final_norm.size() != cfg.d_model) {
    throw DimensionError("final_norm length does not match d_model");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    try {
      validate_layer(model.layers[l], cfg.layers[l], cfg.d_model);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(l) + ": " + e.what());
    }
  }
}

std::size_t block_parameter_count(const ArchSpec& s, std::size_t d) {
  return 2 * d * s.n_heads * s.head_dim + 2 * d * s.n_kv_groups * s.head_dim +
         3 * d * s.intermediate;
}

std::size_t parameter_count(const LayerWeights& l) {
  return l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size() + l.wu.size() +
         l.wg.size() + l.wd.size();
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = cfg.vocab * cfg.d_model * (cfg.tied_embeddings ? 1 : 2) +
                  cfg.d_model;
  for (const auto& s : cfg.layers) n += block_parameter_count(s, cfg.d_model);
  return n;
}

std::size_t parameter_count(const TransformerModel& model) {
  std::size_t n = model.embedding.size() + model.final_norm.size();
  if (!model.config.tied_embeddings) n += model.unembedding.size();
  for (const auto& l : model.layers) n += parameter_count(l);
  return n;
}

Matrix rms_norm(const Matrix& x, std::span<const float> alpha, double eps) {
  if (alpha.size() != x.cols()) {
    throw DimensionError("rms_norm: gain length " + std::to_string(alpha.size()) +
                         " for " + std::to_string(x.cols()) + " columns");
  }
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ss = 0.0;
    for (float v : in) ss += double(v) * v;
    const double denom = std::sqrt(ss / double(in.size()) + eps);
    const double inv = denom > 0.0 ? 1.0 / denom : 0.0;
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = static_cast<float>(double(in[c]) * inv * alpha[c]);
    }
  }
  return out;
}

Matrix rope_apply(const Matrix& x, std::span<const std::size_t> positions,
                  double base) {
  if (x.cols() % 2 != 0) {
    throw DimensionError("rope_apply: head dimension must be even");
  }
  if (positions.size() != x.rows()) {
    throw DimensionError("rope_apply: one position per row required");
  }
  Matrix out = x;
  const auto freq = rope_frequencies(x.cols(), base);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    rotate_row(out.row(t).data(), freq, positions[t]);
  }
  return out;
}

Matrix attention_heads(const Matrix& x, const LayerWeights& layer,
                       const ArchSpec& spec, double rope_base) {
  const std::size_t dh = spec.head_dim;
  const std::size_t tokens = x.rows();
  Matrix q = matmul(x, layer.wq);
  Matrix k = matmul(x, layer.wk);
  const Matrix v = matmul(x, layer.wv);
  rope_slabs(q, spec.n_heads, dh, rope_base);
  rope_slabs(k, spec.n_kv_groups, dh, rope_base);

  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  const std::size_t per_group = spec.heads_per_group();
  Matrix out(tokens, spec.n_heads * dh);
  // Per-group K (transposed, dh x tokens) and V (tokens x dh) in f64 so the
  // score and value loops run over contiguous memory.
  std::vector<double> kt(dh * tokens), vg(tokens * dh);
  std::vector<double> qt(dh), p(tokens), acc(dh);
  std::size_t loaded = spec.n_kv_groups;
  for (std::size_t h = 0; h < spec.n_heads; ++h) {
    const std::size_t g = h / per_group;
    if (g != loaded) {
      for (std::size_t s = 0; s < tokens; ++s) {
        const float* ks = k.row(s).data() + g * dh;
        const float* vs = v.row(s).data() + g * dh;
        for (std::size_t j = 0; j < dh; ++j) {
          kt[j * tokens + s] = ks[j];
          vg[s * dh + j] = vs[j];
        }
      }
      loaded = g;
    }
    for (std::size_t t = 0; t < tokens; ++t) {
      const float* qrow = q.row(t).data() + h * dh;
      for (std::size_t j = 0; j < dh; ++j) qt[j] = double(qrow[j]) * inv_sqrt;
      const std::size_t n = t + 1;
      std::fill(p.begin(), p.begin() + std::ptrdiff_t(n), 0.0);
      for (std::size_t j = 0; j < dh; ++j) {
        const double qj = qt[j];
        const double* krow = kt.data() + j * tokens;
        for (std::size_t s = 0; s < n; ++s) p[s] += qj * krow[s];
      }
      double mx = -INFINITY;
      for (std::size_t s = 0; s < n; ++s) mx = std::max(mx, p[s]);
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        p[s] = std::exp(p[s] - mx);
        sum += p[s];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t s = 0; s < n; ++s) {
        const double w = p[s];
        const double* vs = vg.data() + s * dh;
        for (std::size_t j = 0; j < dh; ++j) acc[j] += w * vs[j];
      }
      float* o = out.row(t).data() + h * dh;
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < dh; ++j) o[j] = static_cast<float>(acc[j] * inv);
    }
  }
  return out;
}

Matrix mha_forward(const Matrix& x, const LayerWeights& layer,
                   const ArchSpec& spec, double rope_base) {
  return matmul(attention_heads(x, layer, spec, rope_base), layer.wo);
}

Matrix mlp_hidden(const Matrix& x, const LayerWeights& layer) {
  Matrix up = matmul(x, layer.wu);
  const Matrix gate = matmul(x, layer.wg);
  auto u = up.data();
  auto g = gate.data();
  for (std::size_t i = 0; i < u.size(); ++i) u[i] *= silu(g[i]);
  return up;
}

Matrix mlp_forward(const Matrix& x, const LayerWeights& layer) {
  return matmul(mlp_hidden(x, layer), layer.wd);
}

BlockOutput block_forward(const Matrix& h, const LayerWeights& layer,
                          const ArchSpec& spec, double norm_eps,
                          double rope_base) {
  BlockOutput out;
  out.h_tilde = add(
      h, mha_forward(rms_norm(h, layer.alpha_attn, norm_eps), layer, spec,
                     rope_base));
  out.h_next = add(out.h_tilde,
                   mlp_forward(rms_norm(out.h_tilde, layer.alpha_mlp, norm_eps),
                               layer));
  return out;
}

Matrix embed(const TransformerModel& model, std::span<const TokenId> tokens) {
  const std::size_t d = model.config.d_model;
  Matrix h(tokens.size(), d);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= model.config.vocab) {
      throw Error("token id " + std::to_string(tokens[t]) +
                  " out of range for vocab " +
                  std::to_string(model.config.vocab));
    }
    auto src = model.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), h.row(t).begin());
  }
  return h;
}

Matrix model_forward(const TransformerModel& model,
                     std::span<const TokenId> tokens) {
  return unembed(model, layer_stack(model, embed(model, tokens)));
}

TracedOutput traced_forward(const TransformerModel& model,
                            std::span<const TokenId> tokens) {
  const auto& cfg = model.config;
  TracedOutput out;
  out.layers.reserve(model.layers.size());
  Matrix h = embed(model, tokens);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    BlockOutput b = block_forward(h, model.layers[l], cfg.layers[l],
                                  cfg.norm_eps, cfg.rope_base);
    out.layers.push_back(LayerTrace{std::move(h), std::move(b.h_tilde), b.h_next});
    h = std::move(b.h_next);
  }
  out.logits = unembed(model, h);
  return out;
}

}  // namespace flatkit
