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

// Model container, toy-model generation and calibration token streams.
//
// Container layout (all integers little-endian):
//   bytes 0..3   magic "FGPT"
//   bytes 4..7   u32 version (= 1)
//   bytes 8..15  u64 manifest length in bytes
//   manifest     UTF-8 JSON {"config": {...}, "tensors": [{name, shape,
//                offset, length}, ...]}
//   blob         row-major little-endian f32 tensors; offsets are relative
//                to the start of the blob

#ifndef FLATKIT_MODEL_IO_HPP_
#define FLATKIT_MODEL_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "flatkit/model.hpp"

namespace flatkit {

inline constexpr char kContainerMagic[4] = {'F', 'G', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public Error {
 public:
  using Error::Error;
};

std::vector<std::uint8_t> serialize_model(const TransformerModel& model);
TransformerModel deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_model(const std::filesystem::path& path);

// Every matrix drawn i.i.d. N(0, init_scale^2); norm gains are
// 1 + N(0, init_scale^2). Pure function of (config, seed, init_scale).
TransformerModel generate_toy_model(const ModelConfig& config,
                                    std::uint64_t seed, double init_scale);

// Fixed-length calibration sequences.
struct TokenStream {
  std::size_t seq_len = 0;
  std::vector<std::vector<TokenId>> sequences;

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }
};

// Bytes as ids 0..255, chunked into floor(len / seq_len) sequences.
TokenStream tokenize_bytes(std::string_view text, std::size_t seq_len);

// Raw little-endian u32 ids, chunked like tokenize_bytes; ids must be < vocab.
TokenStream tokenize_u32(std::span<const std::uint8_t> bytes,
                         std::size_t seq_len, std::size_t vocab);

TokenStream read_calibration(const std::filesystem::path& path, bool raw_tokens,
                             std::size_t seq_len, std::size_t vocab);

// The first `count` sequences. Throws when fewer exist.
TokenStream take_sequences(const TokenStream& stream, std::size_t count);
// A seeded uniform sample of `count` sequences, kept in stream order.
TokenStream sample_sequences(const TokenStream& stream, std::size_t count,
                             std::uint64_t seed);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace flatkit

#endif  // FLATKIT_MODEL_IO_HPP_
