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

#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/crop_planner.hpp"
#include "compose_probe/embedding.hpp"
#include "compose_probe/embedding_source.hpp"
#include "compose_probe/error.hpp"

namespace compose_probe {

/// Cosine similarities, rows = crops, columns = text segments.
struct SimilarityMatrix {
  std::size_t n_crops = 0;
  std::size_t n_segments = 0;
  std::vector<float> values;

  float at(std::size_t crop, std::size_t segment) const { return values[crop * n_segments + segment]; }
};

struct Match {
  std::size_t segment = 0;
  std::size_t crop = 0;
  float similarity = 0.0f;
};

using MatchSet = std::vector<Match>;

/// Vertical stack of single-row matrices.
inline EmbeddingMatrix stack_rows(std::span<const EmbeddingMatrix> items) {
  EmbeddingMatrix out;
  for (const auto& m : items) {
    if (m.rows != 1) throw Error(ErrorKind::Shape, "expected a single-row global embedding");
    out.append_rows(m);
  }
  return out;
}

/// Rows are L2-normalised (unless already flagged) and multiplied, so each
/// entry is cos(crop_i, segment_j).
inline SimilarityMatrix sim_matrix(const EmbeddingMatrix& crop_embs, const EmbeddingMatrix& seg_embs) {
  if (crop_embs.dim != seg_embs.dim) {
    throw Error(ErrorKind::Shape, "crop dim " + std::to_string(crop_embs.dim) + " != segment dim " +
                                      std::to_string(seg_embs.dim));
  }
  const EmbeddingMatrix v = crop_embs.normalized ? crop_embs : l2_normalize(crop_embs);
  const EmbeddingMatrix l = seg_embs.normalized ? seg_embs : l2_normalize(seg_embs);
  SimilarityMatrix out{v.rows, l.rows, std::vector<float>(v.rows * l.rows)};
  for (std::size_t i = 0; i < v.rows; ++i) {
    const auto vi = v.row(i);
    for (std::size_t j = 0; j < l.rows; ++j) {
      const auto lj = l.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < v.dim; ++k) dot += static_cast<double>(vi[k]) * lj[k];
      out.values[i * l.rows + j] = static_cast<float>(dot);
    }
  }
  return out;
}

/// Best crop per segment (column argmax); ties go to the lowest crop index.
inline MatchSet match_segments(const SimilarityMatrix& m) {
  if (m.n_crops == 0 || m.n_segments == 0) throw Error(ErrorKind::Precondition, "similarity matrix is empty");
  MatchSet out;
  out.reserve(m.n_segments);
  for (std::size_t j = 0; j < m.n_segments; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.n_crops; ++i) {
      if (m.at(i, j) > m.at(best, j)) best = i;
    }
    out.push_back({j, best, m.at(best, j)});
  }
  return out;
}

/// Mean of the matched similarities.
inline double aggregate(const MatchSet& matches) {
  if (matches.empty()) throw Error(ErrorKind::Precondition, "match set is empty");
  double sum = 0.0;
  for (const auto& m : matches) sum += m.similarity;
  return sum / static_cast<double>(matches.size());
}

/// An image by id, with a loader for its full-resolution raster. Store-backed
/// sources never call the loader.
struct ImageRef {
  std::string id;
  std::function<ImageRaster()> load;
};

struct SgiConfig {
  CropConfig crops = CropConfig::with_placement(Placement::Overlap);
  SegmentationStrategy segmentation{Granularity::CoarseGrained, SegmentSource::Structured};
};

struct SgiResult {
  double score = 0.0;
  std::vector<CropRect> crops;
  CaptionSegments segments;
  SimilarityMatrix similarities;
  MatchSet matches;
};

namespace detail {

// Lazily preprocessed input shared by every crop job of one image.
class PreprocessedImage {
 public:
  PreprocessedImage(const ImageRef& ref, int side) : ref_(ref), side_(side) {}

  const ImageRaster& get() {
    std::call_once(once_, [&] {
      if (!ref_.load) throw Error(ErrorKind::Precondition, "image '" + ref_.id + "' has no loader");
      raster_ = preprocess_input(ref_.load(), side_);
    });
    return raster_;
  }

 private:
  ImageRef ref_;
  int side_;
  std::once_flag once_;
  ImageRaster raster_;
};

}  // namespace detail

/// Crop the preprocessed image, segment the caption (structured when an
/// annotation is supplied and requested, otherwise automatic), embed both
/// sides, take the best crop per segment and average.
inline SgiResult sgi_evaluate(const ImageRef& image, const std::string& caption,
                              const SegmentAnnotation* annotation, EmbeddingSource& source,
                              const SgiConfig& cfg, const Lexicon& lexicon = Lexicon::builtin()) {
  const auto desc = source.descriptor();
  const int side = desc.input_side;
  SgiResult r;
  r.crops = plan_crops(side, side, cfg.crops);
  if (r.crops.empty()) throw Error(ErrorKind::Config, "crop plan is empty for a " + std::to_string(side) + " input");
  r.segments = segment_caption(caption, annotation, cfg.segmentation, lexicon);

  auto pre = std::make_shared<detail::PreprocessedImage>(image, side);
  std::vector<ImageJob> jobs;
  jobs.reserve(r.crops.size());
  for (const auto& rect : r.crops) {
    jobs.push_back({keys::image_crop(image.id, rect), [pre, rect, side] {
                      return extract_and_resize(pre->get(), rect, side, side);
                    }});
  }
  const auto crop_embs = stack_rows(source.images(jobs, EncodeMode::Global));
  const auto seg_embs = stack_rows(source.texts(r.segments.segments, EncodeMode::Global));
  r.similarities = sim_matrix(crop_embs, seg_embs);
  r.matches = match_segments(r.similarities);
  r.score = aggregate(r.matches);
  return r;
}

inline double sgi_score(const ImageRef& image, const std::string& caption, const SegmentAnnotation* annotation,
                        EmbeddingSource& source, const SgiConfig& cfg,
                        const Lexicon& lexicon = Lexicon::builtin()) {
  return sgi_evaluate(image, caption, annotation, source, cfg, lexicon).score;
}

/// Cosine between the global embeddings of the preprocessed image and the
/// caption.
inline double global_score(const ImageRef& image, const std::string& caption, EmbeddingSource& source) {
  if (caption.empty()) throw Error(ErrorKind::Precondition, "caption is empty");
  const int side = source.descriptor().input_side;
  auto pre = std::make_shared<detail::PreprocessedImage>(image, side);
  const std::vector<ImageJob> job{{keys::image_global(image.id), [pre] { return pre->get(); }}};
  const std::vector<std::string> text{caption};
  const auto m = sim_matrix(stack_rows(source.images(job, EncodeMode::Global)),
                            stack_rows(source.texts(text, EncodeMode::Global)));
  return m.values[0];
}

}  // namespace compose_probe
