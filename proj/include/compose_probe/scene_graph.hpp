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
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compose_probe/error.hpp"

namespace compose_probe {

enum class ClevrSplit { Train, Val };

inline std::string to_string(ClevrSplit s) { return s == ClevrSplit::Train ? "train" : "val"; }

inline ClevrSplit parse_clevr_split(const std::string& s) {
  if (s == "train") return ClevrSplit::Train;
  if (s == "val") return ClevrSplit::Val;
  throw Error(ErrorKind::Format, "unsupported CLEVR split '" + s + "' (expected train or val)");
}

namespace clevr {

inline const std::vector<std::string>& shapes() {
  static const std::vector<std::string> v = {"cube", "sphere", "cylinder"};
  return v;
}
inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v = {"gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"};
  return v;
}
inline const std::vector<std::string>& sizes() {
  static const std::vector<std::string> v = {"small", "large"};
  return v;
}
inline const std::vector<std::string>& materials() {
  static const std::vector<std::string> v = {"rubber", "metal"};
  return v;
}
/// Relations recorded in scene files; above/below are not used by CLEVR.
inline const std::vector<std::string>& relations() {
  static const std::vector<std::string> v = {"left", "right", "front", "behind"};
  return v;
}

inline double radius(const std::string& size) { return size == "large" ? 0.7 : 0.35; }

/// Ground-plane directions of CLEVR's default camera.
inline std::map<std::string, std::array<double, 3>> default_directions() {
  return {{"left", {-0.6563, -0.7545, 0.0}},
          {"right", {0.6563, 0.7545, 0.0}},
          {"front", {0.7545, -0.6563, 0.0}},
          {"behind", {-0.7545, 0.6563, 0.0}},
          {"above", {0.0, 0.0, 1.0}},
          {"below", {0.0, 0.0, -1.0}}};
}

/// Threshold on the projected offset used when recomputing relations.
inline constexpr double kRelationEps = 0.2;

}  // namespace clevr

struct SceneObject {
  std::string shape;
  std::string color;
  std::string size;
  std::string material;
  std::array<double, 3> position{};
  double rotation = 0.0;
  std::optional<std::array<double, 3>> pixel_coords;

  bool operator==(const SceneObject&) const = default;
};

/// relationships[rel][i] lists the objects that are `rel` of object i
/// (CLEVR convention: j in left[i] means j is left of i).
using Relationships = std::map<std::string, std::vector<std::vector<int>>>;

struct SceneGraph {
  std::string scene_id;
  std::string image_filename;
  int image_index = 0;
  ClevrSplit source_split = ClevrSplit::Val;
  std::vector<SceneObject> objects;
  Relationships relationships;
  std::map<std::string, std::array<double, 3>> directions = clevr::default_directions();

  /// True when `a` is recorded as `rel` of `b`.
  bool related(const std::string& rel, int a, int b) const {
    const auto it = relationships.find(rel);
    if (it == relationships.end() || b < 0 || static_cast<std::size_t>(b) >= it->second.size()) return false;
    const auto& lst = it->second[static_cast<std::size_t>(b)];
    return std::find(lst.begin(), lst.end(), a) != lst.end();
  }

  bool operator==(const SceneGraph&) const = default;
};

/// CLEVR's rule: j is `rel` of i when (p_j - p_i) . dir_rel > eps.
inline Relationships compute_relationships(const std::vector<SceneObject>& objects,
                                           const std::map<std::string, std::array<double, 3>>& directions,
                                           double eps = clevr::kRelationEps) {
  Relationships out;
  for (const auto& rel : clevr::relations()) {
    const auto dir = directions.at(rel);
    auto& lists = out[rel];
    lists.resize(objects.size());
    for (std::size_t i = 0; i < objects.size(); ++i) {
      for (std::size_t j = 0; j < objects.size(); ++j) {
        if (i == j) continue;
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += (objects[j].position[k] - objects[i].position[k]) * dir[k];
        if (dot > eps) lists[i].push_back(static_cast<int>(j));
      }
    }
  }
  return out;
}

/// Checks attribute vocabularies, adjacency bounds, and the mirror
/// consistency of left/right and front/behind.
inline void validate_scene(const SceneGraph& s) {
  auto in = [](const std::vector<std::string>& vocab, const std::string& v) {
    return std::find(vocab.begin(), vocab.end(), v) != vocab.end();
  };
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (!in(clevr::shapes(), o.shape) || !in(clevr::colors(), o.color) || !in(clevr::sizes(), o.size) ||
        !in(clevr::materials(), o.material)) {
      throw Error(ErrorKind::Format, "scene " + s.scene_id + ": object " + std::to_string(i) +
                                         " has an attribute outside the CLEVR vocabulary");
    }
  }
  const auto n = static_cast<int>(s.objects.size());
  for (const auto& rel : clevr::relations()) {
    const auto it = s.relationships.find(rel);
    if (it == s.relationships.end()) throw Error(ErrorKind::Format, "scene " + s.scene_id + ": missing relation " + rel);
    if (static_cast<int>(it->second.size()) != n) {
      throw Error(ErrorKind::Consistency, "scene " + s.scene_id + ": relation " + rel + " has wrong list count");
    }
    for (int i = 0; i < n; ++i) {
      for (int j : it->second[static_cast<std::size_t>(i)]) {
        if (j < 0 || j >= n || j == i) {
          throw Error(ErrorKind::Consistency, "scene " + s.scene_id + ": relation " + rel + " has invalid index");
        }
      }
    }
  }
  const std::pair<const char*, const char*> mirrors[] = {{"left", "right"}, {"front", "behind"}};
  for (const auto& [a, b] : mirrors) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (s.related(a, j, i) != s.related(b, i, j)) {
          throw Error(ErrorKind::Consistency, "scene " + s.scene_id + ": " + a + "/" + b +
                                                  " lists disagree for objects " + std::to_string(i) + " and " +
                                                  std::to_string(j));
        }
      }
    }
  }
}

inline SceneGraph scene_from_json(const nlohmann::json& j) {
  SceneGraph s;
  s.image_filename = j.value("image_filename", std::string());
  s.image_index = j.value("image_index", 0);
  s.scene_id = s.image_filename.empty() ? "scene_" + std::to_string(s.image_index)
                                        : s.image_filename.substr(0, s.image_filename.rfind('.'));
  s.source_split = parse_clevr_split(j.at("split").get<std::string>());
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.shape = o.at("shape").get<std::string>();
    obj.color = o.at("color").get<std::string>();
    obj.size = o.at("size").get<std::string>();
    obj.material = o.at("material").get<std::string>();
    obj.position = o.at("3d_coords").get<std::array<double, 3>>();
    obj.rotation = o.value("rotation", 0.0);
    if (o.contains("pixel_coords") && !o.at("pixel_coords").is_null()) {
      obj.pixel_coords = o.at("pixel_coords").get<std::array<double, 3>>();
    }
    s.objects.push_back(std::move(obj));
  }
  for (const auto& rel : clevr::relations()) {
    s.relationships[rel] = j.at("relationships").at(rel).get<std::vector<std::vector<int>>>();
  }
  if (j.contains("directions")) {
    for (const auto& [k, v] : j.at("directions").items()) s.directions[k] = v.get<std::array<double, 3>>();
  }
  return s;
}

inline nlohmann::json to_clevr_json(const SceneGraph& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    nlohmann::json jo = {{"shape", o.shape},       {"color", o.color},       {"size", o.size},
                         {"material", o.material}, {"3d_coords", o.position}, {"rotation", o.rotation}};
    if (o.pixel_coords) jo["pixel_coords"] = *o.pixel_coords;
    objs.push_back(std::move(jo));
  }
  nlohmann::json rels = nlohmann::json::object();
  for (const auto& [k, v] : s.relationships) rels[k] = v;
  nlohmann::json dirs = nlohmann::json::object();
  for (const auto& [k, v] : s.directions) dirs[k] = v;
  return {{"split", to_string(s.source_split)}, {"image_index", s.image_index},
          {"image_filename", s.image_filename}, {"objects", objs},
          {"relationships", rels},              {"directions", dirs}};
}

/// Parses CLEVR's published scenes file ({"info": ..., "scenes": [...]}), a
/// bare array of scenes, or one scene object. Every scene is validated.
inline std::vector<SceneGraph> parse_clevr_scenes(const nlohmann::json& doc) {
  const nlohmann::json* list = &doc;
  nlohmann::json single;
  if (doc.is_object() && doc.contains("scenes")) {
    list = &doc.at("scenes");
  } else if (doc.is_object()) {
    single = nlohmann::json::array({doc});
    list = &single;
  }
  if (!list->is_array()) throw Error(ErrorKind::Format, "CLEVR scenes document has no scene list");
  std::vector<SceneGraph> out;
  out.reserve(list->size());
  for (std::size_t i = 0; i < list->size(); ++i) {
    try {
      out.push_back(scene_from_json((*list)[i]));
      validate_scene(out.back());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "scene index " + std::to_string(i) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), "scene index " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<SceneGraph> load_clevr_scenes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open CLEVR scenes file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
  return parse_clevr_scenes(doc);
}

inline nlohmann::json scenes_document(const std::vector<SceneGraph>& scenes) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : scenes) list.push_back(to_clevr_json(s));
  return {{"info", {{"version", "1.0"}}}, {"scenes", list}};
}

}  // namespace compose_probe
