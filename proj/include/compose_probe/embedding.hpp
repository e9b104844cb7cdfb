// Copyright (c) 2026 The compose-probe Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compose_probe/error.hpp"

namespace compose_probe {

/// rows x dim row-major float32 matrix. `normalized` promises unit L2 rows.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;
  bool normalized = false;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t r, std::size_t d) : rows(r), dim(d), data(r * d, 0.0f) {}
  EmbeddingMatrix(std::size_t r, std::size_t d, std::vector<float> values, bool is_normalized = false)
      : rows(r), dim(d), data(std::move(values)), normalized(is_normalized) {
    if (data.size() != rows * dim) {
      throw Error(ErrorKind::Shape, "embedding data length " + std::to_string(data.size()) +
                                        " != rows*dim " + std::to_string(rows * dim));
    }
  }

  static EmbeddingMatrix from_rows(const std::vector<std::vector<float>>& rows_in) {
    if (rows_in.empty()) return {};
    EmbeddingMatrix m(rows_in.size(), rows_in.front().size());
    for (std::size_t i = 0; i < rows_in.size(); ++i) {
      if (rows_in[i].size() != m.dim) throw Error(ErrorKind::Shape, "ragged embedding rows");
      std::copy(rows_in[i].begin(), rows_in[i].end(), m.data.begin() + i * m.dim);
    }
    return m;
  }

  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  /// Throws unless lengths match, values are finite and, when the flag is
  /// set, every row norm is within 1e-3 of one.
  void validate() const {
    if (data.size() != rows * dim) throw Error(ErrorKind::Shape, "embedding data length mismatch");
    for (float v : data) {
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite embedding value");
    }
    if (normalized) {
      for (std::size_t i = 0; i < rows; ++i) {
        double sq = 0.0;
        for (float v : row(i)) sq += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-3) {
          throw Error(ErrorKind::Format, "row " + std::to_string(i) +
                                             " is flagged normalized but has norm " +
                                             std::to_string(std::sqrt(sq)));
        }
      }
    }
  }

  /// Rows of `other` appended below these rows.
  void append_rows(const EmbeddingMatrix& other) {
    if (rows == 0 && dim == 0) {
      *this = other;
      return;
    }
    if (other.dim != dim) throw Error(ErrorKind::Shape, "cannot stack matrices of different dims");
    data.insert(data.end(), other.data.begin(), other.data.end());
    rows += other.rows;
    normalized = normalized && other.normalized;
  }

  bool operator==(const EmbeddingMatrix&) const = default;
};

inline double row_norm(std::span<const float> row) {
  double sq = 0.0;
  for (float v : row) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

/// Divides every row by its L2 norm. Zero rows are rejected.
inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  EmbeddingMatrix out = m;
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double n = row_norm(m.row(i));
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw Error(ErrorKind::DegenerateInput, "row " + std::to_string(i) + " has zero norm");
    }
    auto dst = out.row(i);
    const auto src = m.row(i);
    for (std::size_t k = 0; k < m.dim; ++k) dst[k] = static_cast<float>(src[k] / n);
  }
  out.normalized = true;
  return out;
}

enum class EmbeddingKind : std::uint8_t {
  GlobalImage = 0,
  GlobalText = 1,
  PatchSequence = 2,
  TokenSequence = 3,
  /// Named model weight tensor inside a checkpoint container.
  ParameterTensor = 4,
};

inline bool is_global(EmbeddingKind k) {
  return k == EmbeddingKind::GlobalImage || k == EmbeddingKind::GlobalText;
}

struct EmbeddingRecord {
  std::string key;
  EmbeddingKind kind = EmbeddingKind::GlobalText;
  EmbeddingMatrix matrix;

  void validate() const {
    if (key.empty()) throw Error(ErrorKind::Format, "record key is empty");
    if (static_cast<std::uint8_t>(kind) > static_cast<std::uint8_t>(EmbeddingKind::ParameterTensor)) {
      throw Error(ErrorKind::Format, "record '" + key + "' has an unknown kind");
    }
    if (is_global(kind) && matrix.rows != 1) {
      throw Error(ErrorKind::Format, "global record '" + key + "' must have exactly one row");
    }
    matrix.validate();
  }

  bool operator==(const EmbeddingRecord&) const = default;
};

enum class EncoderLayer { Last, Penultimate };

inline std::string to_string(EncoderLayer l) { return l == EncoderLayer::Last ? "last" : "penultimate"; }

inline EncoderLayer parse_layer(const std::string& s) {
  if (s == "last") return EncoderLayer::Last;
  if (s == "penultimate") return EncoderLayer::Penultimate;
  throw Error(ErrorKind::Protocol, "unknown encoder layer '" + s + "'");
}

/// What an encoder endpoint serves; also the identity of an embedding cache.
struct EncoderDescriptor {
  std::string model_name;
  std::size_t embedding_dim = 0;
  EncoderLayer layer = EncoderLayer::Last;
  int input_side = 224;

  void validate() const {
    if (model_name.empty()) throw Error(ErrorKind::Protocol, "descriptor has no model_name");
    if (embedding_dim == 0) throw Error(ErrorKind::Protocol, "descriptor embedding_dim must be > 0");
    if (input_side <= 0) throw Error(ErrorKind::Protocol, "descriptor input_side must be > 0");
  }

  /// File-name-safe identity used to pick the cache file.
  std::string cache_tag() const {
    std::string safe;
    for (char c : model_name) {
      safe.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_');
    }
    return safe + "__" + to_string(layer) + "__" + std::to_string(input_side);
  }

  bool operator==(const EncoderDescriptor&) const = default;
};

inline nlohmann::json to_json(const EncoderDescriptor& d) {
  return {{"model_name", d.model_name},
          {"embedding_dim", d.embedding_dim},
          {"layer", to_string(d.layer)},
          {"input_side", d.input_side}};
}

inline EncoderDescriptor descriptor_from_json(const nlohmann::json& j) {
  try {
    EncoderDescriptor d;
    d.model_name = j.at("model_name").get<std::string>();
    d.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    d.layer = parse_layer(j.at("layer").get<std::string>());
    d.input_side = j.at("input_side").get<int>();
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Protocol, std::string("malformed descriptor: ") + e.what());
  }
}

}  // namespace compose_probe
