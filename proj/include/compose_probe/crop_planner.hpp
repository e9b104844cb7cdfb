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
#include <cstdint>
#include <string>
#include <vector>

#include "compose_probe/error.hpp"

namespace compose_probe {

/// Axis-aligned crop in pixel coordinates of the image it was planned for.
struct CropRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const CropRect&) const = default;

  bool fits(int width, int height) const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height;
  }

  /// "x,y,w,h", the suffix used in embedding keys.
  std::string key() const {
    return std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," +
           std::to_string(h);
  }
};

struct CropSize {
  int w = 0;
  int h = 0;
  bool operator==(const CropSize&) const = default;
};

enum class Placement { Grid, Overlap };

struct CropConfig {
  std::vector<CropSize> sizes = default_sizes();
  Placement placement = Placement::Grid;
  /// Emit the whole image as the first rect, ahead of the sized crops.
  bool include_full_image = false;

  static std::vector<CropSize> default_sizes() {
    return {{32, 32}, {56, 56}, {112, 112}, {224, 224}, {56, 112}, {112, 56}};
  }

  static CropConfig with_placement(Placement placement) {
    CropConfig cfg;
    cfg.placement = placement;
    return cfg;
  }

  /// One crop covering the image; reduces SGI to global matching.
  static CropConfig full_image_only() {
    CropConfig cfg;
    cfg.sizes.clear();
    cfg.include_full_image = true;
    return cfg;
  }
};

inline int crop_stride(int size, Placement placement) {
  return placement == Placement::Grid ? size : std::max(1, size / 2);
}

/// Number of start offsets along one axis; partial tiles are dropped.
inline int axis_positions(int dim, int size, int stride) {
  if (size <= 0 || stride <= 0 || size > dim) return 0;
  return (dim - size) / stride + 1;
}

/// Multi-scale crop geometry. Sizes are visited in config order and each
/// size contributes its positions row-major (y outer, x inner). Sizes that do
/// not fit the image contribute nothing.
inline std::vector<CropRect> plan_crops(int width, int height, const CropConfig& config) {
  if (config.sizes.empty() && !config.include_full_image) {
    throw Error(ErrorKind::Config, "crop configuration has no sizes");
  }
  if (width <= 0 || height <= 0) {
    throw Error(ErrorKind::Precondition, "image dimensions must be positive");
  }
  for (const auto& s : config.sizes) {
    if (s.w <= 0 || s.h <= 0) throw Error(ErrorKind::Config, "crop sizes must be positive");
  }

  std::vector<CropRect> rects;
  if (config.include_full_image) rects.push_back({0, 0, width, height});
  for (const auto& s : config.sizes) {
    const int sx = crop_stride(s.w, config.placement);
    const int sy = crop_stride(s.h, config.placement);
    const int nx = axis_positions(width, s.w, sx);
    const int ny = axis_positions(height, s.h, sy);
    for (int j = 0; j < ny; ++j) {
      for (int i = 0; i < nx; ++i) rects.push_back({i * sx, j * sy, s.w, s.h});
    }
  }
  return rects;
}

/// Row-major interleaved RGB, 8 bits per channel.
struct ImageRaster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  ImageRaster() = default;
  ImageRaster(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {
    if (w <= 0 || h <= 0) throw Error(ErrorKind::Precondition, "raster dimensions must be positive");
  }
  ImageRaster(int w, int h, std::vector<std::uint8_t> data)
      : width(w), height(h), pixels(std::move(data)) {
    validate();
  }

  void validate() const {
    if (width <= 0 || height <= 0) {
      throw Error(ErrorKind::Precondition, "raster dimensions must be positive");
    }
    if (pixels.size() != static_cast<std::size_t>(width) * height * 3) {
      throw Error(ErrorKind::Precondition, "raster pixel buffer does not match width*height*3");
    }
  }

  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  bool operator==(const ImageRaster&) const = default;
};

namespace detail {

// Source coordinate for destination index d when mapping n_src samples onto
// n_dst samples with the first and last pixel centres aligned.
inline double aligned_source_coord(int d, int n_src, int n_dst) {
  if (n_dst == 1) return (n_src - 1) / 2.0;
  return static_cast<double>(d) * (n_src - 1) / (n_dst - 1);
}

}  // namespace detail

/// Cuts `rect` out of `image` and resamples it to target_w x target_h with
/// bilinear interpolation. Corner output pixels land exactly on the corner
/// pixel centres of the crop, so a same-size resize is the identity.
inline ImageRaster extract_and_resize(const ImageRaster& image, const CropRect& rect, int target_w,
                                      int target_h) {
  image.validate();
  if (!rect.fits(image.width, image.height)) {
    throw Error(ErrorKind::Bounds, "crop " + rect.key() + " is outside a " +
                                       std::to_string(image.width) + "x" +
                                       std::to_string(image.height) + " image");
  }
  if (target_w <= 0 || target_h <= 0) {
    throw Error(ErrorKind::Precondition, "resize target must be positive");
  }

  ImageRaster out(target_w, target_h);
  for (int dy = 0; dy < target_h; ++dy) {
    const double sy = detail::aligned_source_coord(dy, rect.h, target_h);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, rect.h - 1);
    const double fy = sy - y0;
    for (int dx = 0; dx < target_w; ++dx) {
      const double sx = detail::aligned_source_coord(dx, rect.w, target_w);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, rect.w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double p00 = image.at(rect.x + x0, rect.y + y0, c);
        const double p10 = image.at(rect.x + x1, rect.y + y0, c);
        const double p01 = image.at(rect.x + x0, rect.y + y1, c);
        const double p11 = image.at(rect.x + x1, rect.y + y1, c);
        const double top = p00 + (p10 - p00) * fx;
        const double bottom = p01 + (p11 - p01) * fx;
        const double v = top + (bottom - top) * fy;
        out.at(dx, dy, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

/// Geometry of the shorter-side resize followed by a centred square crop.
struct PreprocessGeometry {
  int resized_w = 0;
  int resized_h = 0;
  CropRect crop;
};

inline PreprocessGeometry preprocess_geometry(int width, int height, int side) {
  if (side <= 0) throw Error(ErrorKind::Precondition, "preprocess side must be positive");
  if (width <= 0 || height <= 0) throw Error(ErrorKind::Precondition, "invalid raster");
  PreprocessGeometry g;
  if (width <= height) {
    g.resized_w = side;
    g.resized_h = std::max<int>(side, static_cast<int>(std::lround(
                                          static_cast<double>(height) * side / width)));
  } else {
    g.resized_h = side;
    g.resized_w = std::max<int>(side, static_cast<int>(std::lround(
                                          static_cast<double>(width) * side / height)));
  }
  g.crop = {(g.resized_w - side) / 2, (g.resized_h - side) / 2, side, side};
  return g;
}

/// Encoder input preparation: scale the shorter side to `side`, keep the
/// aspect ratio, then take the centred side x side square.
inline ImageRaster preprocess_input(const ImageRaster& image, int side) {
  image.validate();
  const auto g = preprocess_geometry(image.width, image.height, side);
  if (g.resized_w == image.width && g.resized_h == image.height) {
    if (image.width == side && image.height == side) return image;
    return extract_and_resize(image, g.crop, side, side);
  }
  const ImageRaster resized =
      extract_and_resize(image, {0, 0, image.width, image.height}, g.resized_w, g.resized_h);
  return extract_and_resize(resized, g.crop, side, side);
}

}  // namespace compose_probe
