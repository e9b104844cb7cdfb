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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "compose_probe/embedding.hpp"
#include "compose_probe/error.hpp"

namespace compose_probe {

// EMB1 layout, all integers little-endian:
//   "EMB1" | u32 version | u64 record count
//   per record: u32 key length | key bytes | u8 kind | u64 rows | u64 dim |
//               u8 normalized | rows*dim float32
inline constexpr char kEmbMagic[4] = {'E', 'M', 'B', '1'};
inline constexpr std::uint32_t kEmbVersion = 1;

/// Records in insertion order with key lookup. Immutable once loaded.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  void add(EmbeddingRecord record) {
    if (index_.count(record.key)) {
      throw Error(ErrorKind::Io, "duplicate key '" + record.key + "' in embedding store");
    }
    index_.emplace(record.key, records_.size());
    records_.push_back(std::move(record));
  }

  const EmbeddingRecord* find(const std::string& key) const {
    const auto it = index_.find(key);
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<EmbeddingRecord>& records() const { return records_; }

 private:
  std::vector<EmbeddingRecord> records_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <class T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    need(sizeof(U), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) {
      throw Error(ErrorKind::Corruption, std::string("truncated EMB1 payload while reading ") + what);
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialises records to EMB1 bytes; identical inputs give identical bytes.
inline std::vector<std::uint8_t> encode_emb1(std::span<const EmbeddingRecord> records) {
  std::map<std::string, int> seen;
  for (const auto& r : records) {
    if (seen[r.key]++) throw Error(ErrorKind::Io, "duplicate key '" + r.key + "' in write request");
    r.validate();
  }
  std::vector<std::uint8_t> out(kEmbMagic, kEmbMagic + 4);
  detail::put_le(out, kEmbVersion);
  detail::put_le(out, static_cast<std::uint64_t>(records.size()));
  for (const auto& r : records) {
    detail::put_le(out, static_cast<std::uint32_t>(r.key.size()));
    out.insert(out.end(), r.key.begin(), r.key.end());
    detail::put_le(out, static_cast<std::uint8_t>(r.kind));
    detail::put_le(out, static_cast<std::uint64_t>(r.matrix.rows));
    detail::put_le(out, static_cast<std::uint64_t>(r.matrix.dim));
    detail::put_le(out, static_cast<std::uint8_t>(r.matrix.normalized ? 1 : 0));
    for (float v : r.matrix.data) detail::put_le(out, v);
  }
  return out;
}

inline EmbeddingStore decode_emb1(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbMagic, 4) != 0) {
    throw Error(ErrorKind::Format, "missing EMB1 magic");
  }
  detail::ByteReader in(bytes.subspan(4));
  const auto version = in.get<std::uint32_t>("version");
  if (version != kEmbVersion) {
    throw Error(ErrorKind::Format, "unsupported EMB1 version " + std::to_string(version));
  }
  const auto count = in.get<std::uint64_t>("record count");
  EmbeddingStore store;
  for (std::uint64_t n = 0; n < count; ++n) {
    EmbeddingRecord rec;
    const auto key_len = in.get<std::uint32_t>("key length");
    const auto key = in.take(key_len, "key");
    rec.key.assign(key.begin(), key.end());
    const auto kind = in.get<std::uint8_t>("kind");
    if (kind > static_cast<std::uint8_t>(EmbeddingKind::ParameterTensor)) {
      throw Error(ErrorKind::Format, "record '" + rec.key + "' has unknown kind " + std::to_string(kind));
    }
    rec.kind = static_cast<EmbeddingKind>(kind);
    rec.matrix.rows = in.get<std::uint64_t>("rows");
    rec.matrix.dim = in.get<std::uint64_t>("dim");
    const auto norm_flag = in.get<std::uint8_t>("normalized flag");
    if (norm_flag > 1) throw Error(ErrorKind::Format, "record '" + rec.key + "' has a bad normalized flag");
    rec.matrix.normalized = norm_flag == 1;
    const auto rows = rec.matrix.rows;
    const auto dim = rec.matrix.dim;
    if (dim != 0 && rows > in.remaining() / 4 / dim) {
      throw Error(ErrorKind::Corruption, "truncated EMB1 payload in record '" + rec.key + "'");
    }
    rec.matrix.data.resize(rows * dim);
    for (auto& v : rec.matrix.data) v = in.get<float>("payload");
    rec.validate();
    if (store.contains(rec.key)) throw Error(ErrorKind::Corruption, "duplicate key '" + rec.key + "'");
    store.add(std::move(rec));
  }
  if (in.remaining() != 0) throw Error(ErrorKind::Corruption, "trailing bytes after last EMB1 record");
  return store;
}

inline void store_write(const std::filesystem::path& path, std::span<const EmbeddingRecord> records) {
  const auto bytes = encode_emb1(records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline void store_write(const std::filesystem::path& path, const EmbeddingStore& store) {
  store_write(path, std::span<const EmbeddingRecord>(store.records()));
}

inline EmbeddingStore store_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_emb1(bytes);
}

}  // namespace compose_probe
