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

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/codec.hpp"
#include "compose_probe/crop_planner.hpp"
#include "compose_probe/emb_store.hpp"
#include "compose_probe/embedding.hpp"
#include "compose_probe/encoder_client.hpp"
#include "compose_probe/error.hpp"
#include "compose_probe/rng.hpp"

namespace compose_probe {

/// Record keys. Image ids are the dataset's image field; crop rects are in
/// the coordinates of the preprocessed side x side input.
namespace keys {

inline std::string text(const std::string& segment) { return "txt:" + sha256_hex(segment); }
inline std::string tokens(const std::string& segment) { return text(segment) + "/tokens"; }
inline std::string image_global(const std::string& image_id) { return "img:" + image_id + "/global"; }
inline std::string image_patches(const std::string& image_id) { return "img:" + image_id + "/patches"; }
inline std::string image_crop(const std::string& image_id, const CropRect& r) {
  return "img:" + image_id + "/crop:" + r.key();
}
inline std::string for_text(const std::string& segment, EncodeMode mode) {
  return mode == EncodeMode::Global ? text(segment) : tokens(segment);
}

}  // namespace keys

/// A keyed image to embed. `render` produces the encoder-ready raster and is
/// only invoked when the embedding has to be computed.
struct ImageJob {
  std::string key;
  std::function<ImageRaster()> render;
};

/// Where frozen embeddings come from: a precomputed store, a remote encoder,
/// or a test double. Implementations must be safe for concurrent calls.
class EmbeddingSource {
 public:
  virtual ~EmbeddingSource() = default;
  virtual EncoderDescriptor descriptor() = 0;
  virtual std::vector<EmbeddingMatrix> images(std::span<const ImageJob> jobs, EncodeMode mode) = 0;
  virtual std::vector<EmbeddingMatrix> texts(std::span<const std::string> texts, EncodeMode mode) = 0;
};

/// Serves lookups from an EMB1 store. Any absent key fails the whole call
/// with a CacheMissError naming every missing key.
class StoreSource : public EmbeddingSource {
 public:
  StoreSource(std::shared_ptr<const EmbeddingStore> store, EncoderDescriptor descriptor)
      : store_(std::move(store)), descriptor_(std::move(descriptor)) {}

  /// Descriptor inferred from the store contents (dim of the first record).
  explicit StoreSource(std::shared_ptr<const EmbeddingStore> store, std::string name = "store")
      : store_(std::move(store)) {
    descriptor_.model_name = std::move(name);
    descriptor_.embedding_dim = store_->empty() ? 1 : store_->records().front().matrix.dim;
  }

  EncoderDescriptor descriptor() override { return descriptor_; }

  std::vector<EmbeddingMatrix> images(std::span<const ImageJob> jobs, EncodeMode) override {
    std::vector<std::string> ks;
    for (const auto& j : jobs) ks.push_back(j.key);
    return lookup(ks);
  }

  std::vector<EmbeddingMatrix> texts(std::span<const std::string> texts, EncodeMode mode) override {
    std::vector<std::string> ks;
    for (const auto& t : texts) ks.push_back(keys::for_text(t, mode));
    return lookup(ks);
  }

 private:
  std::vector<EmbeddingMatrix> lookup(const std::vector<std::string>& ks) const {
    std::vector<EmbeddingMatrix> out;
    std::vector<std::string> missing;
    for (const auto& k : ks) {
      if (const auto* rec = store_->find(k)) {
        out.push_back(rec->matrix);
      } else {
        missing.push_back(k);
      }
    }
    if (!missing.empty()) throw CacheMissError(std::move(missing));
    return out;
  }

  std::shared_ptr<const EmbeddingStore> store_;
  EncoderDescriptor descriptor_;
};

/// Forwards to a remote encoder in batches of at most `batch_size` items.
class RemoteSource : public EmbeddingSource {
 public:
  explicit RemoteSource(std::shared_ptr<EncoderClient> client, std::size_t batch_size = 32)
      : client_(std::move(client)), batch_size_(std::max<std::size_t>(1, batch_size)) {}

  EncoderDescriptor descriptor() override { return client_->descriptor(); }

  std::vector<EmbeddingMatrix> images(std::span<const ImageJob> jobs, EncodeMode mode) override {
    std::vector<EmbeddingMatrix> out;
    for (std::size_t b = 0; b < jobs.size(); b += batch_size_) {
      std::vector<ImageRaster> rasters;
      for (std::size_t i = b; i < std::min(jobs.size(), b + batch_size_); ++i) {
        rasters.push_back(jobs[i].render());
      }
      auto part = client_->encode_images(rasters, mode);
      std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
  }

  std::vector<EmbeddingMatrix> texts(std::span<const std::string> texts, EncodeMode mode) override {
    std::vector<EmbeddingMatrix> out;
    for (std::size_t b = 0; b < texts.size(); b += batch_size_) {
      auto part = client_->encode_texts(texts.subspan(b, std::min(batch_size_, texts.size() - b)), mode);
      std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
  }

 private:
  std::shared_ptr<EncoderClient> client_;
  std::size_t batch_size_;
};

/// Memoises another source in an EMB1 file chosen by the descriptor's cache
/// tag. Populating the same key twice keeps the first value.
class CachingSource : public EmbeddingSource {
 public:
  CachingSource(std::shared_ptr<EmbeddingSource> inner, std::filesystem::path cache_dir)
      : inner_(std::move(inner)), descriptor_(inner_->descriptor()) {
    std::filesystem::create_directories(cache_dir);
    path_ = cache_dir / (descriptor_.cache_tag() + ".emb1");
    if (std::filesystem::exists(path_)) cache_ = store_read(path_);
  }

  /// Cache directory from COMPOSE_PROBE_CACHE, if set.
  static std::optional<std::filesystem::path> env_cache_dir() {
    if (const char* v = std::getenv("COMPOSE_PROBE_CACHE"); v != nullptr && *v != '\0') {
      return std::filesystem::path(v);
    }
    return std::nullopt;
  }

  EncoderDescriptor descriptor() override { return descriptor_; }
  const std::filesystem::path& path() const { return path_; }

  std::vector<EmbeddingMatrix> images(std::span<const ImageJob> jobs, EncodeMode mode) override {
    std::vector<std::string> ks;
    for (const auto& j : jobs) ks.push_back(j.key);
    return resolve(ks, mode == EncodeMode::Global ? EmbeddingKind::GlobalImage : EmbeddingKind::PatchSequence,
                   [&](const std::vector<std::size_t>& idx) {
                     std::vector<ImageJob> miss;
                     for (auto i : idx) miss.push_back(jobs[i]);
                     return inner_->images(miss, mode);
                   });
  }

  std::vector<EmbeddingMatrix> texts(std::span<const std::string> texts, EncodeMode mode) override {
    std::vector<std::string> ks;
    for (const auto& t : texts) ks.push_back(keys::for_text(t, mode));
    return resolve(ks, mode == EncodeMode::Global ? EmbeddingKind::GlobalText : EmbeddingKind::TokenSequence,
                   [&](const std::vector<std::size_t>& idx) {
                     std::vector<std::string> miss;
                     for (auto i : idx) miss.push_back(texts[i]);
                     return inner_->texts(miss, mode);
                   });
  }

  void flush() {
    std::lock_guard lock(mutex_);
    store_write(path_, cache_);
  }

 private:
  template <class Fetch>
  std::vector<EmbeddingMatrix> resolve(const std::vector<std::string>& ks, EmbeddingKind kind, Fetch fetch) {
    std::vector<EmbeddingMatrix> out(ks.size());
    std::vector<std::size_t> missing;
    {
      std::lock_guard lock(mutex_);
      for (std::size_t i = 0; i < ks.size(); ++i) {
        if (const auto* r = cache_.find(ks[i])) {
          out[i] = r->matrix;
        } else {
          missing.push_back(i);
        }
      }
    }
    if (missing.empty()) return out;
    auto fetched = fetch(missing);
    std::lock_guard lock(mutex_);
    for (std::size_t n = 0; n < missing.size(); ++n) {
      const auto i = missing[n];
      if (const auto* r = cache_.find(ks[i])) {
        out[i] = r->matrix;
        continue;
      }
      cache_.add({ks[i], kind, fetched[n]});
      out[i] = std::move(fetched[n]);
    }
    return out;
  }

  std::shared_ptr<EmbeddingSource> inner_;
  EncoderDescriptor descriptor_;
  std::filesystem::path path_;
  EmbeddingStore cache_;
  std::mutex mutex_;
};

/// Encodes texts remotely and keys the results. `kind` must be GlobalText or
/// TokenSequence; record i corresponds to texts[i].
inline std::vector<EmbeddingRecord> encode_remote(EncoderClient& client, std::span<const std::string> texts,
                                                  EmbeddingKind kind) {
  if (kind != EmbeddingKind::GlobalText && kind != EmbeddingKind::TokenSequence) {
    throw Error(ErrorKind::Precondition, "text batches need a text embedding kind");
  }
  const auto mode = kind == EmbeddingKind::GlobalText ? EncodeMode::Global : EncodeMode::Sequence;
  auto mats = client.encode_texts(texts, mode);
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.push_back({keys::for_text(texts[i], mode), kind, std::move(mats[i])});
  }
  return out;
}

/// Image counterpart; `kind` must be GlobalImage or PatchSequence.
inline std::vector<EmbeddingRecord> encode_remote(EncoderClient& client, std::span<const ImageJob> jobs,
                                                  EmbeddingKind kind) {
  if (kind != EmbeddingKind::GlobalImage && kind != EmbeddingKind::PatchSequence) {
    throw Error(ErrorKind::Precondition, "image batches need an image embedding kind");
  }
  if (jobs.empty()) throw Error(ErrorKind::Precondition, "encode batch is empty");
  std::vector<ImageRaster> rasters;
  for (const auto& j : jobs) rasters.push_back(j.render());
  auto mats = client.encode_images(rasters, kind == EmbeddingKind::GlobalImage ? EncodeMode::Global
                                                                              : EncodeMode::Sequence);
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < jobs.size(); ++i) out.push_back({jobs[i].key, kind, std::move(mats[i])});
  return out;
}

/// Deterministic encoder needing no model: texts become signed hashed
/// bags of words, images become a fixed random projection of a coarse
/// colour grid. It is a stand-in for smoke runs and tests; its text side is
/// by construction blind to word order.
class HashingEncoder : public EmbeddingSource {
 public:
  explicit HashingEncoder(std::size_t dim = 64, std::uint64_t seed = 17, int input_side = 224)
      : dim_(dim), projection_(dim * kImageFeatures) {
    descriptor_ = {"hashing-bow-" + std::to_string(dim), dim, EncoderLayer::Last, input_side};
    Rng rng(seed);
    for (auto& w : projection_) w = static_cast<float>(rng.normal());
  }

  EncoderDescriptor descriptor() override { return descriptor_; }

  std::vector<EmbeddingMatrix> images(std::span<const ImageJob> jobs, EncodeMode mode) override {
    std::vector<EmbeddingMatrix> out;
    for (const auto& job : jobs) {
      const ImageRaster img = job.render();
      if (mode == EncodeMode::Global) {
        out.push_back(project(grid_features(img, {0, 0, img.width, img.height})));
        continue;
      }
      const int p = std::max(1, std::min(img.width, img.height) / 4);
      EmbeddingMatrix seq;
      for (int y = 0; y + p <= img.height; y += p) {
        for (int x = 0; x + p <= img.width; x += p) seq.append_rows(project(grid_features(img, {x, y, p, p})));
      }
      out.push_back(std::move(seq));
    }
    return out;
  }

  std::vector<EmbeddingMatrix> texts(std::span<const std::string> texts, EncodeMode mode) override {
    std::vector<EmbeddingMatrix> out;
    for (const auto& t : texts) {
      const auto tokens = detail::tokenize(t);
      if (mode == EncodeMode::Global) {
        EmbeddingMatrix m(1, dim_);
        for (const auto& tok : tokens) {
          if (tok.word) add_word(m.row(0), to_lower(std::string_view(t).substr(tok.begin, tok.end - tok.begin)));
        }
        m.data[dim_ - 1] += 0.25f;  // keeps empty or stopword-only texts away from zero norm
        out.push_back(std::move(m));
      } else {
        EmbeddingMatrix seq;
        for (const auto& tok : tokens) {
          if (!tok.word) continue;
          EmbeddingMatrix row(1, dim_);
          add_word(row.row(0), to_lower(std::string_view(t).substr(tok.begin, tok.end - tok.begin)));
          seq.append_rows(row);
        }
        if (seq.rows == 0) {
          seq = EmbeddingMatrix(1, dim_);
          seq.data[0] = 1.0f;
        }
        out.push_back(std::move(seq));
      }
    }
    return out;
  }

 private:
  static constexpr int kGrid = 4;
  static constexpr std::size_t kImageFeatures = kGrid * kGrid * 3 + 1;

  void add_word(std::span<float> row, const std::string& word) const {
    const std::string h = sha256_hex(word);
    const auto a = std::stoull(h.substr(0, 12), nullptr, 16);
    const auto b = std::stoull(h.substr(12, 12), nullptr, 16);
    row[a % dim_] += (b & 1) ? 1.0f : -1.0f;
    row[(a / dim_) % dim_] += 0.5f;
  }

  static std::vector<float> grid_features(const ImageRaster& img, const CropRect& r) {
    std::vector<float> f(kImageFeatures, 0.0f);
    for (int gy = 0; gy < kGrid; ++gy) {
      for (int gx = 0; gx < kGrid; ++gx) {
        const int x0 = r.x + r.w * gx / kGrid, x1 = std::max(x0 + 1, r.x + r.w * (gx + 1) / kGrid);
        const int y0 = r.y + r.h * gy / kGrid, y1 = std::max(y0 + 1, r.y + r.h * (gy + 1) / kGrid);
        double sum[3] = {0, 0, 0};
        int n = 0;
        for (int y = y0; y < std::min(y1, r.y + r.h); ++y) {
          for (int x = x0; x < std::min(x1, r.x + r.w); ++x, ++n) {
            for (int c = 0; c < 3; ++c) sum[c] += img.at(x, y, c);
          }
        }
        for (int c = 0; c < 3; ++c) {
          f[(gy * kGrid + gx) * 3 + c] = n ? static_cast<float>(sum[c] / n / 255.0 - 0.5) : 0.0f;
        }
      }
    }
    f.back() = 1.0f;
    return f;
  }

  EmbeddingMatrix project(const std::vector<float>& features) const {
    EmbeddingMatrix m(1, dim_);
    for (std::size_t k = 0; k < dim_; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kImageFeatures; ++i) acc += projection_[k * kImageFeatures + i] * features[i];
      m.data[k] = static_cast<float>(acc);
    }
    return m;
  }

  std::size_t dim_;
  std::vector<float> projection_;
  EncoderDescriptor descriptor_;
};

}  // namespace compose_probe
