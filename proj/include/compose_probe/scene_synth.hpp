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

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "compose_probe/rng.hpp"
#include "compose_probe/scene_graph.hpp"

namespace compose_probe {

/// Placement constraints of CLEVR's scene generator.
struct PlacementRules {
  double extent = 3.0;       // x, y drawn from [-extent, extent]
  double min_dist = 0.25;    // clearance between object footprints
  double margin = 0.4;       // minimum offset along every cardinal direction
  int max_retries = 50;
};

inline double footprint_radius(const SceneObject& o) {
  const double r = clevr::radius(o.size);
  return o.shape == "cube" ? r / std::sqrt(2.0) : r;
}

/// True when `candidate` at its position keeps clearance and directional
/// margin against every object in `others`.
inline bool placement_ok(const SceneObject& candidate, const std::vector<SceneObject>& others,
                         const std::map<std::string, std::array<double, 3>>& directions,
                         const PlacementRules& rules) {
  const double r = footprint_radius(candidate);
  for (const auto& o : others) {
    const double dx = candidate.position[0] - o.position[0];
    const double dy = candidate.position[1] - o.position[1];
    if (std::sqrt(dx * dx + dy * dy) - r - footprint_radius(o) < rules.min_dist) return false;
    for (const auto& rel : clevr::relations()) {
      const auto& d = directions.at(rel);
      if (std::abs(dx * d[0] + dy * d[1]) < rules.margin) return false;
    }
  }
  return true;
}

/// Draws positions until one satisfies placement_ok; nullopt after
/// max_retries attempts.
inline std::optional<std::array<double, 3>> find_free_position(
    const SceneObject& prototype, const std::vector<SceneObject>& others,
    const std::map<std::string, std::array<double, 3>>& directions, Rng& rng, const PlacementRules& rules = {}) {
  SceneObject probe = prototype;
  for (int attempt = 0; attempt < rules.max_retries; ++attempt) {
    probe.position = {rng.uniform(-rules.extent, rules.extent), rng.uniform(-rules.extent, rules.extent),
                      clevr::radius(prototype.size)};
    if (placement_ok(probe, others, directions, rules)) return probe.position;
  }
  return std::nullopt;
}

/// Random scenes following CLEVR's generation procedure: 3 to 10 objects
/// with uniformly drawn attributes, placed under PlacementRules, relations
/// recomputed from positions. Used where the real CLEVR scene files are not
/// available.
inline std::vector<SceneGraph> synthesize_clevr_scenes(std::size_t count, ClevrSplit split, std::uint64_t seed,
                                                       int min_objects = 3, int max_objects = 10) {
  std::vector<SceneGraph> out;
  out.reserve(count);
  Rng rng(seed);
  const auto pick = [&](const std::vector<std::string>& v) { return v[rng.uniform_index(v.size())]; };
  for (std::size_t n = 0; n < count; ++n) {
    SceneGraph s;
    s.source_split = split;
    s.image_index = static_cast<int>(n);
    char name[64];
    std::snprintf(name, sizeof name, "CLEVR_%s_%06zu.png", to_string(split).c_str(), n);
    s.image_filename = name;
    s.scene_id = s.image_filename.substr(0, s.image_filename.rfind('.'));
    const int n_objects =
        min_objects + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_objects - min_objects + 1)));
    for (;;) {
      s.objects.clear();
      bool ok = true;
      for (int k = 0; k < n_objects && ok; ++k) {
        SceneObject o;
        o.size = pick(clevr::sizes());
        o.shape = pick(clevr::shapes());
        o.color = pick(clevr::colors());
        o.material = pick(clevr::materials());
        o.rotation = rng.uniform(0.0, 360.0);
        const auto pos = find_free_position(o, s.objects, s.directions, rng);
        if (!pos) {
          ok = false;
          break;
        }
        o.position = *pos;
        s.objects.push_back(std::move(o));
      }
      if (ok) break;
    }
    s.relationships = compute_relationships(s.objects, s.directions);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace compose_probe
