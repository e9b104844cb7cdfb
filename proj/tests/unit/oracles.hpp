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

// Independent reference code shared by the unit suite and the acceptance
// binary. Nothing here calls the library routine it checks.

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "compose_probe/biscor.hpp"
#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/crop_planner.hpp"
#include "compose_probe/rng.hpp"
#include "compose_probe/sgi.hpp"

namespace test_support {

using namespace compose_probe;

// Every placement, by testing each candidate origin against the stride.
inline std::vector<CropRect> brute_force(int width, int height, const CropSize& s, bool overlap) {
  std::vector<CropRect> out;
  if (s.w > width || s.h > height) return out;
  // A size-1 overlap stride would be zero; it is clamped to one pixel.
  const int sx = overlap ? std::max(1, s.w / 2) : s.w;
  const int sy = overlap ? std::max(1, s.h / 2) : s.h;
  for (int y = 0; y + s.h <= height; ++y) {
    for (int x = 0; x + s.w <= width; ++x) {
      if (x % sx == 0 && y % sy == 0) out.push_back({x, y, s.w, s.h});
    }
  }
  return out;
}

// Independent reading of the metric definitions: image i must rank its own
// caption strictly first, caption c must rank its own image strictly first.
struct Oracle {
  bool i2t, t2i;
};

inline Oracle oracle(double s00, double s10, double s01, double s11) {
  // s[c][i]
  const double s[2][2] = {{s00, s01}, {s10, s11}};
  bool img_ok = true, txt_ok = true;
  for (int i = 0; i < 2; ++i) img_ok = img_ok && s[i][i] > s[1 - i][i];
  for (int c = 0; c < 2; ++c) txt_ok = txt_ok && s[c][c] > s[c][1 - c];
  return {img_ok, txt_ok};
}

inline const std::vector<std::string> kColors = {"red", "blue", "green", "gray", "cyan"};
inline const std::vector<std::string> kShapes = {"cube", "sphere", "cylinder"};

inline ImageRef unloadable(const std::string& id) { return {id, nullptr}; }

struct RandomCase {
  int side = 64;
  std::vector<std::pair<int, int>> sizes;
  bool overlap = false;
  bool full_image = false;
  std::string caption;
  SegmentAnnotation annotation;
  SegmentationStrategy strategy;
  std::vector<std::string> expected_segments;
};

inline RandomCase random_case(Rng& rng) {
  RandomCase c;
  c.side = 32 + static_cast<int>(rng.uniform_index(97));
  const int n_sizes = 1 + static_cast<int>(rng.uniform_index(3));
  for (int i = 0; i < n_sizes; ++i) {
    c.sizes.push_back({4 + static_cast<int>(rng.uniform_index(c.side - 3)), 4 + static_cast<int>(rng.uniform_index(c.side - 3))});
  }
  c.overlap = rng.uniform_index(2) == 1;
  c.full_image = rng.uniform_index(3) == 0;

  const auto& col1 = kColors[rng.uniform_index(kColors.size())];
  const auto& col2 = kColors[rng.uniform_index(kColors.size())];
  const auto s1 = rng.uniform_index(kShapes.size());
  const auto s2 = (s1 + 1 + rng.uniform_index(kShapes.size() - 1)) % kShapes.size();
  const std::string p1 = col1 + " " + kShapes[s1], p2 = col2 + " " + kShapes[s2];
  const bool relational = rng.uniform_index(2) == 1;
  c.caption = relational ? "A " + p1 + " behind a " + p2 : "There is a " + p1 + " and a " + p2;
  c.annotation = {{{p1, kShapes[s1]}, {p2, kShapes[s2]}},
                  relational ? std::optional<std::string>("behind") : std::nullopt};

  switch (rng.uniform_index(3)) {
    case 0:
      c.strategy = {Granularity::CoarseGrained, SegmentSource::Structured};
      c.expected_segments = {p1, p2};
      break;
    case 1:
      c.strategy = {Granularity::FineGrained, SegmentSource::Structured};
      c.expected_segments = {kShapes[s1], kShapes[s2], p1, p2};
      break;
    default:
      c.strategy = {Granularity::CoarseGrained, SegmentSource::CaptionOnly};
      break;
  }
  // "A p1 behind a p2" is its own relational span and collapses into the caption.
  c.expected_segments.push_back(c.caption);
  return c;
}

inline CropConfig crop_config(const RandomCase& c) {
  CropConfig cfg;
  cfg.sizes.clear();
  for (const auto& [w, h] : c.sizes) cfg.sizes.push_back({w, h});
  cfg.placement = c.overlap ? Placement::Overlap : Placement::Grid;
  cfg.include_full_image = c.full_image;
  return cfg;
}

inline std::vector<std::string> words(const std::string& caption) {
  std::vector<std::string> out;
  std::istringstream ss(caption);
  for (std::string w; ss >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline bool same_except_placement(const SceneObject& a, const SceneObject& b) {
  return a.shape == b.shape && a.color == b.color && a.size == b.size && a.material == b.material;
}

// Independent structural diff. Returns an empty string when the negative
// scene is a minimal edit of the positive one, otherwise a description.
inline std::string scene_diff_violation(const InstanceRecord& r) {
  const auto& p = r.scene;
  const auto& n = r.negative_scene;
  if (p.directions != n.directions || p.source_split != n.source_split || p.image_index != n.image_index) {
    return "scene-level fields differ";
  }
  if (r.category != SwapCategory::Quantity) {
    if (p.objects.size() != n.objects.size()) return "object count changed";
    if (p.relationships != n.relationships) return "relationships changed";
    const std::string field = to_string(r.category);
    for (std::size_t i = 0; i < p.objects.size(); ++i) {
      auto a = p.objects[i], b = n.objects[i];
      const bool selected = static_cast<int>(i) == r.selection.first || static_cast<int>(i) == r.selection.second;
      if (selected) {
        const auto& other = p.objects[static_cast<std::size_t>(static_cast<int>(i) == r.selection.first ? r.selection.second : r.selection.first)];
        std::string want;
        if (field == "color") { want = other.color; a.color = b.color; }
        if (field == "size") { want = other.size; a.size = b.size; }
        if (field == "material") { want = other.material; a.material = b.material; }
        const std::string got = field == "color" ? b.color : field == "size" ? b.size : b.material;
        if (got != want) return "selected object " + std::to_string(i) + " did not receive the partner's value";
      }
      if (!(a == b)) return "object " + std::to_string(i) + " changed outside the swapped attribute";
    }
    return "";
  }
  // Quantity: non-group objects identical and in order; group members only
  // appear, disappear, or are copies of existing members.
  const auto& g = r.selection.groups;
  auto in_group = [&](const SceneObject& o, int k) { return o.color == g[k].color && o.shape == g[k].shape; };
  std::vector<SceneObject> rest_p, rest_n;
  std::array<std::vector<SceneObject>, 2> mem_p, mem_n;
  for (const auto& o : p.objects) {
    if (in_group(o, 0)) mem_p[0].push_back(o);
    else if (in_group(o, 1)) mem_p[1].push_back(o);
    else rest_p.push_back(o);
  }
  for (const auto& o : n.objects) {
    if (in_group(o, 0)) mem_n[0].push_back(o);
    else if (in_group(o, 1)) mem_n[1].push_back(o);
    else rest_n.push_back(o);
  }
  if (rest_p != rest_n) return "objects outside the groups changed";
  for (int k = 0; k < 2; ++k) {
    if (static_cast<int>(mem_p[k].size()) != g[k].count) return "positive group count mismatch";
    if (static_cast<int>(mem_n[k].size()) != g[1 - k].count) return "negative group count not swapped";
    for (const auto& o : mem_n[k]) {
      const bool kept = std::find(mem_p[k].begin(), mem_p[k].end(), o) != mem_p[k].end();
      const bool copy = std::any_of(mem_p[k].begin(), mem_p[k].end(),
                                    [&](const SceneObject& m) { return same_except_placement(o, m); });
      if (!kept && !copy) return "group member is neither kept nor a copy";
    }
  }
  if (n.relationships != compute_relationships(n.objects, n.directions)) return "negative relationships stale";
  return "";
}

}  // namespace test_support
