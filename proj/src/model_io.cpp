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

#include "flatkit/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

namespace flatkit {
namespace {

using nlohmann::json;

constexpr std::size_t kHeaderBytes = 16;

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename T>
T read_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(p[i]) << (8 * i);
  return v;
}

void append_floats(std::vector<std::uint8_t>& out, std::span<const float> v) {
  for (float f : v) append_le(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> read_floats(const std::uint8_t* p, std::size_t count) {
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    v[i] = std::bit_cast<float>(read_le<std::uint32_t>(p + 4 * i));
  }
  return v;
}

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const float> data;
};

std::vector<NamedTensor> tensor_list(const TransformerModel& m) {
  std::vector<NamedTensor> t;
  auto mat = [&](std::string name, const Matrix& x) {
    t.push_back({std::move(name), {x.rows(), x.cols()}, x.data()});
  };
  auto vec = [&](std::string name, const Vector& x) {
    t.push_back({std::move(name), {x.size()}, x});
  };
  mat("embedding", m.embedding);
  if (!m.config.tied_embeddings) mat("unembedding", m.unembedding);
  vec("final_norm", m.final_norm);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    mat(p + "wq", l.wq);
    mat(p + "wk", l.wk);
    mat(p + "wv", l.wv);
    mat(p + "wo", l.wo);
    mat(p + "wu", l.wu);
    mat(p + "wg", l.wg);
    mat(p + "wd", l.wd);
    vec(p + "alpha_attn", l.alpha_attn);
    vec(p + "alpha_mlp", l.alpha_mlp);
  }
  return t;
}

json config_to_json(const ModelConfig& c) {
  json layers = json::array();
  for (const auto& s : c.layers) {
    layers.push_back({{"n_heads", s.n_heads},
                      {"n_kv_groups", s.n_kv_groups},
                      {"head_dim", s.head_dim},
                      {"intermediate", s.intermediate}});
  }
  return {{"n_layers", c.layers.size()}, {"d_model", c.d_model},
          {"vocab", c.vocab},            {"rope_base", c.rope_base},
          {"norm_eps", c.norm_eps},      {"tied_embeddings", c.tied_embeddings},
          {"layers", layers}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.rope_base = j.at("rope_base").get<double>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.tied_embeddings = j.at("tied_embeddings").get<bool>();
  for (const auto& s : j.at("layers")) {
    c.layers.push_back({s.at("n_heads").get<std::size_t>(),
                        s.at("n_kv_groups").get<std::size_t>(),
                        s.at("head_dim").get<std::size_t>(),
                        s.at("intermediate").get<std::size_t>()});
  }
  if (j.at("n_layers").get<std::size_t>() != c.layers.size()) {
    throw FormatError("manifest n_layers disagrees with layer list");
  }
  return c;
}

TokenStream chunk(std::vector<TokenId> ids, std::size_t seq_len) {
  if (seq_len < 2) throw Error("sequence length must be at least 2");
  TokenStream s;
  s.seq_len = seq_len;
  const std::size_t n = ids.size() / seq_len;
  if (n == 0) {
    throw Error("calibration input is empty after chunking into length " +
                std::to_string(seq_len));
  }
  for (std::size_t i = 0; i < n; ++i) {
    s.sequences.emplace_back(ids.begin() + i * seq_len,
                             ids.begin() + (i + 1) * seq_len);
  }
  return s;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const TransformerModel& model) {
  validate_model(model);
  const auto tensors = tensor_list(model);
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t len = t.data.size() * 4;
    dir.push_back({{"name", t.name},
                   {"shape", t.shape},
                   {"offset", offset},
                   {"length", len}});
    offset += len;
  }
  const std::string manifest =
      json{{"config", config_to_json(model.config)}, {"tensors", dir}}.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + manifest.size() + offset);
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  append_le<std::uint32_t>(out, kContainerVersion);
  append_le<std::uint64_t>(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  for (const auto& t : tensors) append_floats(out, t.data);
  return out;
}

TransformerModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated header");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw FormatError("bad magic: not a model container");
  }
  const auto version = read_le<std::uint32_t>(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw FormatError("version mismatch: container version " +
                      std::to_string(version) + ", expected " +
                      std::to_string(kContainerVersion));
  }
  const auto manifest_len = read_le<std::uint64_t>(bytes.data() + 8);
  if (manifest_len > bytes.size() - kHeaderBytes) {
    throw FormatError("truncated manifest");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderBytes,
                           bytes.begin() + kHeaderBytes + manifest_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid manifest JSON: ") + e.what());
  }
  const auto blob = bytes.subspan(kHeaderBytes + manifest_len);

  TransformerModel m;
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<float>>>
      tensors;
  try {
    m.config = config_from_json(manifest.at("config"));
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto length = t.at("length").get<std::uint64_t>();
      const std::size_t count = std::accumulate(
          shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
      if (length % 4 != 0 || count != length / 4) {
        throw FormatError("shape/length mismatch for tensor '" + name + "'");
      }
      if (offset > blob.size() || length > blob.size() - offset) {
        throw FormatError("truncated tensor data for tensor '" + name + "'");
      }
      tensors[name] = {shape, read_floats(blob.data() + offset, count)};
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("missing tensor '" + name + "'");
    return std::move(it->second);
  };
  auto mat = [&](const std::string& name) {
    auto [shape, data] = take(name);
    if (shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
    return Matrix(shape[0], shape[1], std::move(data));
  };
  auto vec = [&](const std::string& name) {
    auto [shape, data] = take(name);
    if (shape.size() != 1) throw FormatError("tensor '" + name + "' is not 1-D");
    return data;
  };

  m.embedding = mat("embedding");
  m.unembedding =
      m.config.tied_embeddings ? transpose(m.embedding) : mat("unembedding");
  m.final_norm = vec("final_norm");
  for (std::size_t i = 0; i < m.config.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights l;
    l.wq = mat(p + "wq");
    l.wk = mat(p + "wk");
    l.wv = mat(p + "wv");
    l.wo = mat(p + "wo");
    l.wu = mat(p + "wu");
    l.wg = mat(p + "wg");
    l.wd = mat(p + "wd");
    l.alpha_attn = vec(p + "alpha_attn");
    l.alpha_mlp = vec(p + "alpha_mlp");
    m.layers.push_back(std::move(l));
  }
  try {
    validate_model(m);
  } catch (const DimensionError& e) {
    throw FormatError(std::string("tensor shapes disagree with config: ") +
                      e.what());
  }
  return m;
}

void save_model(const TransformerModel& model,
                const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

TransformerModel load_model(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize_model(bytes);
}

TransformerModel generate_toy_model(const ModelConfig& config,
                                    std::uint64_t seed, double init_scale) {
  if (init_scale < 0.0) throw Error("init_scale must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (float& v : m.data()) v = static_cast<float>(init_scale * normal(rng));
    return m;
  };
  auto gain = [&](std::size_t n) {
    Vector v(n);
    for (float& x : v) x = static_cast<float>(1.0 + init_scale * normal(rng));
    return v;
  };

  TransformerModel m;
  m.config = config;
  const std::size_t d = config.d_model;
  m.embedding = matrix(config.vocab, d);
  m.unembedding = config.tied_embeddings ? transpose(m.embedding)
                                         : matrix(d, config.vocab);
  m.final_norm = gain(d);
  for (const auto& s : config.layers) {
    validate_arch(s);
    LayerWeights l;
    l.wq = matrix(d, s.n_heads * s.head_dim);
    l.wk = matrix(d, s.n_kv_groups * s.head_dim);
    l.wv = matrix(d, s.n_kv_groups * s.head_dim);
    l.wo = matrix(s.n_heads * s.head_dim, d);
    l.wu = matrix(d, s.intermediate);
    l.wg = matrix(d, s.intermediate);
    l.wd = matrix(s.intermediate, d);
    l.alpha_attn = gain(d);
    l.alpha_mlp = gain(d);
    m.layers.push_back(std::move(l));
  }
  validate_model(m);
  return m;
}

TokenStream tokenize_bytes(std::string_view text, std::size_t seq_len) {
  std::vector<TokenId> ids(text.size());
  std::transform(text.begin(), text.end(), ids.begin(), [](char c) {
    return static_cast<TokenId>(static_cast<unsigned char>(c));
  });
  return chunk(std::move(ids), seq_len);
}

TokenStream tokenize_u32(std::span<const std::uint8_t> bytes,
                         std::size_t seq_len, std::size_t vocab) {
  if (bytes.size() % 4 != 0) {
    throw FormatError("token file length is not a multiple of 4 bytes");
  }
  std::vector<TokenId> ids(bytes.size() / 4);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ids[i] = read_le<std::uint32_t>(bytes.data() + 4 * i);
    if (ids[i] >= vocab) {
      throw FormatError("token id " + std::to_string(ids[i]) + " at position " +
                        std::to_string(i) + " exceeds vocab " +
                        std::to_string(vocab));
    }
  }
  return chunk(std::move(ids), seq_len);
}

TokenStream read_calibration(const std::filesystem::path& path, bool raw_tokens,
                             std::size_t seq_len, std::size_t vocab) {
  const auto bytes = read_file(path);
  if (raw_tokens) return tokenize_u32(bytes, seq_len, vocab);
  if (vocab < 256) {
    throw Error("byte-level text needs vocab >= 256, model has " +
                std::to_string(vocab));
  }
  return tokenize_bytes(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
      seq_len);
}

static void require_count(const TokenStream& stream, std::size_t count) {
  if (count == 0 || count > stream.size()) {
    throw Error("calibration input yields " + std::to_string(stream.size()) +
                " sequences of length " + std::to_string(stream.seq_len) +
                ", need " + std::to_string(count));
  }
}

TokenStream take_sequences(const TokenStream& stream, std::size_t count) {
  require_count(stream, count);
  TokenStream s;
  s.seq_len = stream.seq_len;
  s.sequences.assign(stream.sequences.begin(), stream.sequences.begin() + count);
  return s;
}

TokenStream sample_sequences(const TokenStream& stream, std::size_t count,
                             std::uint64_t seed) {
  require_count(stream, count);
  std::vector<std::size_t> idx(stream.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  TokenStream s;
  s.seq_len = stream.seq_len;
  for (std::size_t i : idx) s.sequences.push_back(stream.sequences[i]);
  return s;
}

}  // namespace flatkit
