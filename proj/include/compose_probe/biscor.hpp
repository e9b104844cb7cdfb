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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/error.hpp"
#include "compose_probe/retrieval.hpp"
#include "compose_probe/rng.hpp"
#include "compose_probe/scene_graph.hpp"
#include "compose_probe/scene_synth.hpp"

namespace compose_probe {

enum class SwapCategory { Color, Size, Material, Quantity };

inline std::string to_string(SwapCategory c) {
  switch (c) {
    case SwapCategory::Color: return "color";
    case SwapCategory::Size: return "size";
    case SwapCategory::Material: return "material";
    case SwapCategory::Quantity: return "quantity";
  }
  return "?";
}

inline SwapCategory parse_swap_category(const std::string& s) {
  const auto l = to_lower(s);
  if (l == "color") return SwapCategory::Color;
  if (l == "size") return SwapCategory::Size;
  if (l == "material") return SwapCategory::Material;
  if (l == "quantity") return SwapCategory::Quantity;
  throw Error(ErrorKind::Config, "unknown swap category '" + s + "'");
}

inline const std::array<SwapCategory, 4>& all_categories() {
  static const std::array<SwapCategory, 4> v = {SwapCategory::Color, SwapCategory::Size, SwapCategory::Material,
                                                SwapCategory::Quantity};
  return v;
}

enum class BenchmarkSplit { Dev, Test };

inline std::string to_string(BenchmarkSplit s) { return s == BenchmarkSplit::Dev ? "dev" : "test"; }

/// Attribute of `o` targeted by an attribute swap.
inline std::string& swap_attribute(SceneObject& o, SwapCategory c) {
  switch (c) {
    case SwapCategory::Color: return o.color;
    case SwapCategory::Size: return o.size;
    case SwapCategory::Material: return o.material;
    case SwapCategory::Quantity: break;
  }
  throw Error(ErrorKind::Precondition, "quantity has no swap attribute");
}

inline const std::string& swap_attribute(const SceneObject& o, SwapCategory c) {
  return swap_attribute(const_cast<SceneObject&>(o), c);
}

/// A group of objects sharing colour and shape, with its target size.
struct QuantityGroup {
  std::string color;
  std::string shape;
  int count = 0;
  bool operator==(const QuantityGroup&) const = default;
};

/// Which objects an instance is about. Attribute swaps use `first`/`second`
/// (first is the caption subject) and `relation`, the key of first with
/// respect to second ("left" means first is left of second). Quantity uses
/// `groups`; first/second then index one seed member of each group in the
/// base scene.
struct ObjectSelection {
  SwapCategory category = SwapCategory::Color;
  int first = -1;
  int second = -1;
  std::string relation;
  std::array<QuantityGroup, 2> groups{};
  bool operator==(const ObjectSelection&) const = default;
};

/// Caption wording. Placeholders: {size} {color} {material} {shape}
/// {shapes} {count} in phrases; {phrase1} {phrase2} {relation} in captions.
struct CaptionTemplates {
  std::string attribute_phrase = "{size} {color} {material} {shape}";
  std::string attribute_caption = "A {phrase1} {relation} a {phrase2}";
  std::string quantity_phrase = "{count} {color} {shapes}";
  std::string quantity_caption = "There are {phrase1} and {phrase2}";
  std::map<std::string, std::string> relation_words = {
      {"left", "left of"}, {"right", "right of"}, {"front", "in front of"}, {"behind", "behind"}};
  std::vector<std::string> number_words = {"zero", "one", "two",   "three", "four", "five",
                                           "six",  "seven", "eight", "nine", "ten"};
  int min_group = 2;
  int max_group = 5;

  /// Overrides any subset of the fields from a JSON file.
  static CaptionTemplates load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open templates file " + path);
    CaptionTemplates t;
    try {
      const auto j = nlohmann::json::parse(in);
      t.attribute_phrase = j.value("attribute_phrase", t.attribute_phrase);
      t.attribute_caption = j.value("attribute_caption", t.attribute_caption);
      t.quantity_phrase = j.value("quantity_phrase", t.quantity_phrase);
      t.quantity_caption = j.value("quantity_caption", t.quantity_caption);
      if (j.contains("relation_words")) t.relation_words = j.at("relation_words").get<std::map<std::string, std::string>>();
      if (j.contains("number_words")) t.number_words = j.at("number_words").get<std::vector<std::string>>();
      t.min_group = j.value("min_group", t.min_group);
      t.max_group = j.value("max_group", t.max_group);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, path + ": " + e.what());
    }
    if (t.min_group < 1 || t.max_group < t.min_group + 1 ||
        static_cast<std::size_t>(t.max_group) >= t.number_words.size()) {
      throw Error(ErrorKind::Config, "templates: invalid group count range");
    }
    return t;
  }

  nlohmann::json to_json() const {
    return {{"attribute_phrase", attribute_phrase}, {"attribute_caption", attribute_caption},
            {"quantity_phrase", quantity_phrase},   {"quantity_caption", quantity_caption},
            {"relation_words", relation_words},     {"number_words", number_words},
            {"min_group", min_group},               {"max_group", max_group}};
  }

  std::string number(int n) const {
    if (n < 0 || static_cast<std::size_t>(n) >= number_words.size()) return std::to_string(n);
    return number_words[static_cast<std::size_t>(n)];
  }
};

namespace detail {

inline std::string fill(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [k, v] : vars) {
    const std::string tag = "{" + k + "}";
    for (auto pos = text.find(tag); pos != std::string::npos; pos = text.find(tag, pos + v.size())) {
      text.replace(pos, tag.size(), v);
    }
  }
  return text;
}

inline std::string describe(const SceneObject& o) { return o.size + " " + o.color + " " + o.material + " " + o.shape; }

inline int group_count(const SceneGraph& s, const QuantityGroup& g) {
  return static_cast<int>(std::count_if(s.objects.begin(), s.objects.end(), [&](const SceneObject& o) {
    return o.color == g.color && o.shape == g.shape;
  }));
}

inline std::optional<std::string> relation_between(const SceneGraph& s, int a, int b) {
  for (const auto& rel : clevr::relations()) {
    if (s.related(rel, a, b)) return rel;
  }
  return std::nullopt;
}

}  // namespace detail

/// Whether an attribute-swap pair is usable: the objects differ in the target
/// attribute and in shape, a spatial relation links them, and both their
/// descriptions stay unique in the scene before and after the swap.
inline bool valid_attribute_pair(const SceneGraph& scene, SwapCategory category, int a, int b) {
  const auto& oa = scene.objects[static_cast<std::size_t>(a)];
  const auto& ob = scene.objects[static_cast<std::size_t>(b)];
  if (swap_attribute(oa, category) == swap_attribute(ob, category) || oa.shape == ob.shape) return false;
  if (!detail::relation_between(scene, a, b)) return false;
  SceneObject sa = oa, sb = ob;
  std::swap(swap_attribute(sa, category), swap_attribute(sb, category));
  const std::string descs[] = {detail::describe(oa), detail::describe(ob), detail::describe(sa),
                               detail::describe(sb)};
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    if (static_cast<int>(k) == a || static_cast<int>(k) == b) continue;
    const auto d = detail::describe(scene.objects[k]);
    for (const auto& taken : descs) {
      if (d == taken) return false;
    }
  }
  return true;
}

/// Every selection select_objects may return for this scene.
inline std::vector<ObjectSelection> candidate_selections(const SceneGraph& scene, SwapCategory category,
                                                         const CaptionTemplates& templates = {}) {
  std::vector<ObjectSelection> out;
  const int n = static_cast<int>(scene.objects.size());
  if (category != SwapCategory::Quantity) {
    for (int a = 0; a < n; ++a) {
      for (int b = a + 1; b < n; ++b) {
        if (!valid_attribute_pair(scene, category, a, b)) continue;
        ObjectSelection sel;
        sel.category = category;
        sel.first = a;
        sel.second = b;
        sel.relation = *detail::relation_between(scene, a, b);
        out.push_back(sel);
      }
    }
    return out;
  }
  // One seed object per distinct (color, shape) signature, in first-seen order.
  std::vector<int> seeds;
  for (int i = 0; i < n; ++i) {
    bool seen = false;
    for (int s : seeds) {
      seen = seen || (scene.objects[static_cast<std::size_t>(s)].color == scene.objects[static_cast<std::size_t>(i)].color &&
                      scene.objects[static_cast<std::size_t>(s)].shape == scene.objects[static_cast<std::size_t>(i)].shape);
    }
    if (!seen) seeds.push_back(i);
  }
  for (std::size_t x = 0; x < seeds.size(); ++x) {
    for (std::size_t y = x + 1; y < seeds.size(); ++y) {
      for (int n1 = templates.min_group; n1 <= templates.max_group; ++n1) {
        for (int n2 = templates.min_group; n2 <= templates.max_group; ++n2) {
          if (n1 == n2) continue;
          const auto& o1 = scene.objects[static_cast<std::size_t>(seeds[x])];
          const auto& o2 = scene.objects[static_cast<std::size_t>(seeds[y])];
          ObjectSelection sel;
          sel.category = category;
          sel.first = seeds[x];
          sel.second = seeds[y];
          sel.groups = {QuantityGroup{o1.color, o1.shape, n1}, QuantityGroup{o2.color, o2.shape, n2}};
          out.push_back(sel);
        }
      }
    }
  }
  return out;
}

/// Uniform draw among candidate_selections; nullopt when there is none.
inline std::optional<ObjectSelection> select_objects(const SceneGraph& scene, SwapCategory category, Rng& rng,
                                                     const CaptionTemplates& templates = {}) {
  auto candidates = candidate_selections(scene, category, templates);
  if (candidates.empty()) return std::nullopt;
  return candidates[rng.uniform_index(candidates.size())];
}

/// Resizes the two quantity groups of `scene` to the selection's counts.
/// Surplus members are removed uniformly at random; missing members are
/// copies of a random member moved to a free position. Relations are
/// recomputed. Throws a placement error when no free position is found.
inline SceneGraph realize_quantity(const SceneGraph& scene, const ObjectSelection& sel, Rng& rng) {
  if (sel.category != SwapCategory::Quantity) throw Error(ErrorKind::Precondition, "not a quantity selection");
  SceneGraph out = scene;
  for (const auto& g : sel.groups) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < out.objects.size(); ++i) {
      if (out.objects[i].color == g.color && out.objects[i].shape == g.shape) members.push_back(i);
    }
    if (members.empty()) throw Error(ErrorKind::Consistency, "quantity group has no member in scene " + scene.scene_id);
    int have = static_cast<int>(members.size());
    if (have > g.count) {
      rng.shuffle(std::span(members));
      std::vector<std::size_t> drop(members.begin(), members.begin() + (have - g.count));
      std::sort(drop.rbegin(), drop.rend());
      for (auto i : drop) out.objects.erase(out.objects.begin() + static_cast<std::ptrdiff_t>(i));
    }
    while (have < g.count) {
      SceneObject copy = out.objects[members[rng.uniform_index(members.size())]];
      const auto pos = find_free_position(copy, out.objects, out.directions, rng, PlacementRules{3.0, 0.25, 0.4, 100});
      if (!pos) throw Error(ErrorKind::Placement, "no free position for a new object in scene " + scene.scene_id);
      copy.position = *pos;
      copy.rotation = rng.uniform(0.0, 360.0);
      copy.pixel_coords.reset();
      out.objects.push_back(std::move(copy));
      ++have;
    }
  }
  out.relationships = compute_relationships(out.objects, out.directions);
  return out;
}

/// Phrases and relation of the caption generate_caption would produce.
inline SegmentAnnotation caption_annotation(const ObjectSelection& sel, const SceneGraph& scene,
                                            const CaptionTemplates& t = {}) {
  SegmentAnnotation ann;
  if (sel.category == SwapCategory::Quantity) {
    for (const auto& g : sel.groups) {
      if (detail::group_count(scene, g) != g.count) {
        throw Error(ErrorKind::Consistency, "scene " + scene.scene_id + " does not contain " +
                                                std::to_string(g.count) + " " + g.color + " " + g.shape + "s");
      }
      ann.phrases.push_back({detail::fill(t.quantity_phrase, {{"count", t.number(g.count)},
                                                              {"color", g.color},
                                                              {"shape", g.shape},
                                                              {"shapes", g.shape + "s"}}),
                             g.shape + "s"});
    }
    return ann;
  }
  const auto n = static_cast<int>(scene.objects.size());
  if (sel.first < 0 || sel.second < 0 || sel.first >= n || sel.second >= n) {
    throw Error(ErrorKind::Precondition, "selection indexes objects outside the scene");
  }
  if (!scene.related(sel.relation, sel.first, sel.second)) {
    throw Error(ErrorKind::Consistency, "scene " + scene.scene_id + " records no '" + sel.relation +
                                            "' relation between the selected objects");
  }
  for (int idx : {sel.first, sel.second}) {
    const auto& o = scene.objects[static_cast<std::size_t>(idx)];
    ann.phrases.push_back({detail::fill(t.attribute_phrase, {{"size", o.size},
                                                             {"color", o.color},
                                                             {"material", o.material},
                                                             {"shape", o.shape},
                                                             {"shapes", o.shape + "s"}}),
                           o.shape});
  }
  const auto it = t.relation_words.find(sel.relation);
  if (it == t.relation_words.end()) throw Error(ErrorKind::Config, "no wording for relation '" + sel.relation + "'");
  ann.relation = it->second;
  return ann;
}

inline std::string generate_caption(const ObjectSelection& sel, const SceneGraph& scene,
                                    const CaptionTemplates& t = {}) {
  const auto ann = caption_annotation(sel, scene, t);
  if (sel.category == SwapCategory::Quantity) {
    return detail::fill(t.quantity_caption, {{"phrase1", ann.phrases[0].text}, {"phrase2", ann.phrases[1].text}});
  }
  return detail::fill(t.attribute_caption,
                      {{"phrase1", ann.phrases[0].text}, {"phrase2", ann.phrases[1].text}, {"relation", *ann.relation}});
}

/// Selection with the swapped bindings: attribute swaps keep the objects,
/// quantity swaps exchange the two counts.
inline ObjectSelection swapped_selection(const ObjectSelection& sel) {
  ObjectSelection out = sel;
  if (sel.category == SwapCategory::Quantity) std::swap(out.groups[0].count, out.groups[1].count);
  return out;
}

struct SwapNegative {
  std::string caption;
  SceneGraph scene;
};

/// Hard negative: the swapped caption and the minimally edited scene.
/// Attribute swaps exchange the target attribute of the two objects;
/// quantity swaps exchange the group counts and edit group membership.
inline SwapNegative make_swap_negative(const ObjectSelection& sel, const SceneGraph& scene, Rng& rng,
                                       const CaptionTemplates& t = {}) {
  SwapNegative neg;
  if (sel.category == SwapCategory::Quantity) {
    const auto swapped = swapped_selection(sel);
    neg.scene = realize_quantity(scene, swapped, rng);
    neg.caption = generate_caption(swapped, neg.scene, t);
    return neg;
  }
  neg.scene = scene;
  auto& a = neg.scene.objects.at(static_cast<std::size_t>(sel.first));
  auto& b = neg.scene.objects.at(static_cast<std::size_t>(sel.second));
  std::swap(swap_attribute(a, sel.category), swap_attribute(b, sel.category));
  neg.caption = generate_caption(sel, neg.scene, t);
  return neg;
}

struct InstanceRecord {
  std::string id;
  SwapCategory category = SwapCategory::Color;
  BenchmarkSplit split = BenchmarkSplit::Dev;
  std::string base_scene_id;
  std::string caption;
  std::string negative_caption;
  SegmentAnnotation annotation;
  SegmentAnnotation negative_annotation;
  SceneGraph scene;
  SceneGraph negative_scene;
  ObjectSelection selection;

  std::string image_path() const { return "images/" + id + ".png"; }
  std::string negative_image_path() const { return "images/" + id + "_neg.png"; }
  std::string scene_path() const { return "scenes/" + id + ".json"; }
  std::string negative_scene_path() const { return "scenes/" + id + "_neg.json"; }

  RetrievalInstance to_instance() const {
    RetrievalInstance r;
    r.id = id;
    r.category = to_string(category);
    r.image = image_path();
    r.negative_image = negative_image_path();
    r.caption = caption;
    r.negative_caption = negative_caption;
    r.annotation = annotation;
    r.negative_annotation = negative_annotation;
    return r;
  }
};

/// Builds one instance from a base scene, or nullopt when the scene has no
/// valid selection. Quantity selections whose edits cannot be placed are
/// replaced by further draws without replacement, up to `placement_attempts`.
inline std::optional<InstanceRecord> build_instance(const SceneGraph& base, SwapCategory category, Rng& rng,
                                                    const CaptionTemplates& t = {}, int placement_attempts = 8) {
  auto candidates = candidate_selections(base, category, t);
  for (int attempt = 0; attempt < placement_attempts && !candidates.empty(); ++attempt) {
    const std::size_t pick = rng.uniform_index(candidates.size());
    const ObjectSelection sel = candidates[pick];
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
    InstanceRecord rec;
    rec.category = category;
    rec.base_scene_id = base.scene_id;
    rec.selection = sel;
    try {
      rec.scene = category == SwapCategory::Quantity ? realize_quantity(base, sel, rng) : base;
      auto neg = make_swap_negative(sel, rec.scene, rng, t);
      rec.caption = generate_caption(sel, rec.scene, t);
      rec.annotation = caption_annotation(sel, rec.scene, t);
      rec.negative_caption = std::move(neg.caption);
      rec.negative_annotation = caption_annotation(swapped_selection(sel), neg.scene, t);
      rec.negative_scene = std::move(neg.scene);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Placement) continue;
      throw;
    }
    return rec;
  }
  return std::nullopt;
}

struct BuildOptions {
  CaptionTemplates templates;
  unsigned jobs = 1;
};

/// Exactly n instances from distinct base scenes of one CLEVR split (train
/// scenes give the dev split, val scenes the test split). Scenes are sorted
/// by id, shuffled with the seed, and each scene draws from its own stream
/// derived from (seed, category, scene id), so worker count cannot change
/// the output.
inline std::vector<InstanceRecord> build_split(const std::vector<SceneGraph>& scenes, SwapCategory category,
                                               std::size_t n, std::uint64_t seed, const BuildOptions& opts = {}) {
  if (n == 0) throw Error(ErrorKind::Precondition, "n must be at least 1");
  if (scenes.empty()) throw ExhaustionError(n, 0);
  const ClevrSplit source = scenes.front().source_split;
  for (const auto& s : scenes) {
    if (s.source_split != source) throw Error(ErrorKind::Precondition, "scenes come from more than one CLEVR split");
  }
  const BenchmarkSplit split = source == ClevrSplit::Train ? BenchmarkSplit::Dev : BenchmarkSplit::Test;
  const std::string cat = to_string(category);

  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scenes[a].scene_id < scenes[b].scene_id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (scenes[order[i]].scene_id == scenes[order[i - 1]].scene_id) {
      throw Error(ErrorKind::Precondition, "duplicate scene id " + scenes[order[i]].scene_id);
    }
  }
  Rng order_rng = Rng::derive(seed, "order/" + cat);
  order_rng.shuffle(std::span(order));

  auto attempt = [&](std::size_t scene_idx) {
    const auto& s = scenes[scene_idx];
    Rng rng = Rng::derive(seed, cat + "/" + s.scene_id);
    return build_instance(s, category, rng, opts.templates);
  };

  std::vector<InstanceRecord> out;
  const std::size_t window = std::max<std::size_t>(1, opts.jobs) * 16;
  for (std::size_t start = 0; start < order.size() && out.size() < n; start += window) {
    const std::size_t stop = std::min(order.size(), start + window);
    std::vector<std::optional<InstanceRecord>> results(stop - start);
    if (opts.jobs <= 1) {
      for (std::size_t i = start; i < stop; ++i) results[i - start] = attempt(order[i]);
    } else {
      std::vector<std::future<std::optional<InstanceRecord>>> futs;
      for (std::size_t i = start; i < stop; ++i) futs.push_back(std::async(std::launch::async, attempt, order[i]));
      for (std::size_t i = 0; i < futs.size(); ++i) results[i] = futs[i].get();
    }
    for (auto& r : results) {
      if (!r || out.size() >= n) continue;
      char id[96];
      std::snprintf(id, sizeof id, "%s-%s-%05zu", cat.c_str(), to_string(split).c_str(), out.size());
      r->id = id;
      r->split = split;
      r->scene.image_filename = r->id + ".png";
      r->negative_scene.image_filename = r->id + "_neg.png";
      out.push_back(std::move(*r));
    }
  }
  if (out.size() < n) throw ExhaustionError(n, out.size());
  return out;
}

inline nlohmann::json to_json(const ObjectSelection& s) {
  nlohmann::json j = {{"category", to_string(s.category)}, {"first", s.first}, {"second", s.second}};
  if (s.category == SwapCategory::Quantity) {
    j["groups"] = nlohmann::json::array();
    for (const auto& g : s.groups) j["groups"].push_back({{"color", g.color}, {"shape", g.shape}, {"count", g.count}});
  } else {
    j["relation"] = s.relation;
  }
  return j;
}

/// Dataset line: the retrieval interchange fields plus split, scene and
/// selection metadata.
inline nlohmann::json to_json(const InstanceRecord& r) {
  auto j = to_json(r.to_instance());
  j["split"] = to_string(r.split);
  j["scene_id"] = r.base_scene_id;
  j["selection"] = to_json(r.selection);
  return j;
}

inline void write_records_jsonl(std::ostream& out, const std::vector<InstanceRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

/// Scene files for an external renderer: scenes/<id>.json and
/// scenes/<id>_neg.json in CLEVR's schema, plus render_jobs.jsonl with one
/// row per record. Paths in the manifest are relative to out_dir.
inline void emit_render_jobs(const std::vector<InstanceRecord>& records, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "scenes");
  std::ofstream manifest(out_dir / "render_jobs.jsonl");
  if (!manifest) throw Error(ErrorKind::Io, "cannot write render manifest in " + out_dir.string());
  for (const auto& r : records) {
    for (const auto& [path, scene] : {std::pair{r.scene_path(), &r.scene}, std::pair{r.negative_scene_path(), &r.negative_scene}}) {
      std::ofstream f(out_dir / path);
      if (!f) throw Error(ErrorKind::Io, "cannot write " + (out_dir / path).string());
      f << to_clevr_json(*scene).dump(2) << '\n';
    }
    manifest << nlohmann::json{{"id", r.id},
                               {"scene", r.scene_path()},
                               {"negative_scene", r.negative_scene_path()},
                               {"image", r.image_path()},
                               {"negative_image", r.negative_image_path()}}
                    .dump()
             << '\n';
  }
}

/// Lower-cased word tokens of a caption, sorted; equal for a caption and
/// its swap negative.
inline std::vector<std::string> token_multiset(const std::string& caption) {
  std::vector<std::string> out;
  for (const auto& t : detail::tokenize(caption)) {
    if (t.word) out.push_back(to_lower(std::string_view(caption).substr(t.begin, t.end - t.begin)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace compose_probe
