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

// Pre-LN causal decoder: RMSNorm with affine gain, rotary multi-head (and
// grouped-query) attention, SiLU-gated MLP, no biases.
//
//   H~ = H + MHA(LN_a(H))
//   H' = H~ + MLP(LN_p(H~))

#ifndef FLATKIT_MODEL_HPP_
#define FLATKIT_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flatkit/numerics.hpp"

namespace flatkit {

using TokenId = std::uint32_t;

struct ArchSpec {
  std::size_t n_heads = 0;
  std::size_t n_kv_groups = 0;
  std::size_t head_dim = 0;
  std::size_t intermediate = 0;

  std::size_t heads_per_group() const { return n_heads / n_kv_groups; }
  bool is_gqa() const { return n_kv_groups != n_heads; }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct ModelConfig {
  std::size_t d_model = 0;
  std::size_t vocab = 0;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  bool tied_embeddings = false;
  std::vector<ArchSpec> layers;

  std::size_t n_layers() const { return layers.size(); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Matrix wq;  // d x (H*dh)
  Matrix wk;  // d x (G*dh)
  Matrix wv;  // d x (G*dh)
  Matrix wo;  // (H*dh) x d
  Matrix wu;  // d x d_int
  Matrix wg;  // d x d_int
  Matrix wd;  // d_int x d
  Vector alpha_attn;
  Vector alpha_mlp;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct TransformerModel {
  ModelConfig config;
  Matrix embedding;    // V x d
  std::vector<LayerWeights> layers;
  Vector final_norm;   // d
  Matrix unembedding;  // d x V; equals embedding^T when tied

  std::size_t n_layers() const { return layers.size(); }
};

// Per-layer record of one traced forward pass.
struct LayerTrace {
  Matrix input;   // H^{l-1}
  Matrix mid;     // H~^{l-1}, after the attention residual
  Matrix output;  // H^l
};

struct BlockOutput {
  Matrix h_tilde;
  Matrix h_next;
};

struct TracedOutput {
  Matrix logits;
  std::vector<LayerTrace> layers;
};

// Throws DimensionError when a spec is internally inconsistent.
void validate_arch(const ArchSpec& spec);
// Throws DimensionError when the layer's shapes do not match spec and d_model.
void validate_layer(const LayerWeights& layer, const ArchSpec& spec,
                    std::size_t d_model);
void validate_model(const TransformerModel& model);

// Parameter counts cover projection matrices, embeddings and the final norm.
// Per-block norm gains are excluded: affine fusion folds them into the
// projections, after which they are constant ones.
std::size_t block_parameter_count(const ArchSpec& spec, std::size_t d_model);
std::size_t parameter_count(const LayerWeights& layer);
std::size_t parameter_count(const ModelConfig& config);
std::size_t parameter_count(const TransformerModel& model);

Matrix rms_norm(const Matrix& x, std::span<const float> alpha, double eps);

// Rotates each coordinate pair (2j, 2j+1) of row t by
// positions[t] * base^(-2j/d_h).
Matrix rope_apply(const Matrix& x, std::span<const std::size_t> positions,
                  double base);

// Per-head attention outputs before the output projection, concatenated:
// tokens x (H*dh). Head h attends with KV group h / (H/G).
Matrix attention_heads(const Matrix& x, const LayerWeights& layer,
                       const ArchSpec& spec, double rope_base = 10000.0);

// x is the normalized block input.
Matrix mha_forward(const Matrix& x, const LayerWeights& layer,
                   const ArchSpec& spec, double rope_base = 10000.0);

// Gated hidden activation (x W_u) ⊙ SiLU(x W_g): tokens x d_int.
Matrix mlp_hidden(const Matrix& x, const LayerWeights& layer);
Matrix mlp_forward(const Matrix& x, const LayerWeights& layer);

BlockOutput block_forward(const Matrix& h, const LayerWeights& layer,
                          const ArchSpec& spec, double norm_eps = 1e-6,
                          double rope_base = 10000.0);

Matrix embed(const TransformerModel& model, std::span<const TokenId> tokens);

Matrix model_forward(const TransformerModel& model,
                     std::span<const TokenId> tokens);

TracedOutput traced_forward(const TransformerModel& model,
                            std::span<const TokenId> tokens);

float silu(float x);

}  // namespace flatkit

#endif  // FLATKIT_MODEL_HPP_
