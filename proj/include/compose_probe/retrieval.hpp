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
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/error.hpp"

namespace compose_probe {

/// s(C_c, I_i) stored as s<c><i>: s10 is the negative caption on the
/// positive image.
struct ScoreQuad {
  double s00 = 0.0;
  double s10 = 0.0;
  double s01 = 0.0;
  double s11 = 0.0;

  bool finite() const {
    return std::isfinite(s00) && std::isfinite(s10) && std::isfinite(s01) && std::isfinite(s11);
  }
};

/// Both images pick their own caption. Ties fail.
inline int i2t(const ScoreQuad& q) { return q.s00 > q.s10 && q.s11 > q.s01 ? 1 : 0; }

/// Both captions pick their own image. Ties fail.
inline int t2i(const ScoreQuad& q) { return q.s00 > q.s01 && q.s11 > q.s10 ? 1 : 0; }

inline int group(const ScoreQuad& q) { return i2t(q) && t2i(q) ? 1 : 0; }

/// Two images and two captions; caption 0 describes image 0. An instance
/// without a negative image is one-directional (text retrieval only).
struct RetrievalInstance {
  std::string id;
  std::string category;
  std::string image;
  std::optional<std::string> negative_image;
  std::string caption;
  std::string negative_caption;
  std::optional<SegmentAnnotation> annotation;
  std::optional<SegmentAnnotation> negative_annotation;

  const std::string& image_at(int i) const { return i == 0 ? image : *negative_image; }
  const std::string& caption_at(int c) const { return c == 0 ? caption : negative_caption; }
  const SegmentAnnotation* annotation_at(int c) const {
    const auto& a = c == 0 ? annotation : negative_annotation;
    return a ? &*a : nullptr;
  }
};

/// Similarity of caption `caption_index` with image `image_index` of an
/// instance. Higher means a better match.
using Scorer = std::function<double(const RetrievalInstance&, int image_index, int caption_index)>;

struct CategoryScores {
  std::string category;
  std::size_t count = 0;
  double i2t = 0.0;
  double t2i = 0.0;
  double group = 0.0;
};

struct InstanceResult {
  std::string id;
  std::string category;
  ScoreQuad quad;
  int i2t = 0;
  int t2i = 0;
  int group = 0;
};

/// Percentages per category (sorted by name) plus their unweighted mean.
/// In one-directional mode only i2t is defined; it is the text-retrieval
/// accuracy and t2i/group are reported as null.
struct EvalReport {
  std::string scorer;
  bool one_directional = false;
  std::size_t instances = 0;
  std::size_t skipped = 0;
  std::vector<CategoryScores> categories;
  CategoryScores average;
  std::vector<InstanceResult> results;
  std::vector<std::string> skipped_ids;
};

/// Chance level of each metric for a scorer whose four scores are i.i.d.
/// continuous: 6/24, 6/24 and 4/24 of the orderings succeed.
inline CategoryScores random_baseline() { return {"random", 0, 25.0, 25.0, 100.0 / 6.0}; }

struct EvalOptions {
  std::string scorer_name = "unnamed";
  bool lenient = false;
  unsigned jobs = 1;
};

// ---------------------------------------------------------------------------
// Dataset interchange: JSON Lines with id, category, image, caption,
// negative_image, negative_caption and optional annotation.

inline nlohmann::json to_json(const SegmentAnnotation& a) {
  nlohmann::json phrases = nlohmann::json::array();
  for (const auto& p : a.phrases) phrases.push_back({{"text", p.text}, {"object", p.object}});
  return {{"phrases", phrases}, {"relation", a.relation ? nlohmann::json(*a.relation) : nlohmann::json(nullptr)}};
}

inline SegmentAnnotation annotation_from_json(const nlohmann::json& j) {
  SegmentAnnotation a;
  for (const auto& p : j.at("phrases")) {
    a.phrases.push_back({p.at("text").get<std::string>(), p.at("object").get<std::string>()});
  }
  if (j.contains("relation") && !j.at("relation").is_null()) a.relation = j.at("relation").get<std::string>();
  return a;
}

inline nlohmann::json to_json(const RetrievalInstance& r) {
  nlohmann::json j = {{"id", r.id},
                      {"category", r.category},
                      {"image", r.image},
                      {"caption", r.caption},
                      {"negative_caption", r.negative_caption}};
  j["negative_image"] = r.negative_image ? nlohmann::json(*r.negative_image) : nlohmann::json(nullptr);
  if (r.annotation || r.negative_annotation) {
    nlohmann::json ann = nlohmann::json::object();
    if (r.annotation) ann["caption"] = to_json(*r.annotation);
    if (r.negative_annotation) ann["negative_caption"] = to_json(*r.negative_annotation);
    j["annotation"] = ann;
  }
  return j;
}

inline RetrievalInstance instance_from_json(const nlohmann::json& j) {
  RetrievalInstance r;
  r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
  r.category = j.value("category", std::string("default"));
  r.image = j.at("image").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.negative_caption = j.at("negative_caption").get<std::string>();
  if (j.contains("negative_image") && !j.at("negative_image").is_null()) {
    r.negative_image = j.at("negative_image").get<std::string>();
  }
  if (j.contains("annotation") && !j.at("annotation").is_null()) {
    const auto& a = j.at("annotation");
    if (a.contains("caption")) r.annotation = annotation_from_json(a.at("caption"));
    if (a.contains("negative_caption")) r.negative_annotation = annotation_from_json(a.at("negative_caption"));
  }
  if (r.caption == r.negative_caption) throw Error(ErrorKind::Format, "instance '" + r.id + "' has identical captions");
  if (r.negative_image && *r.negative_image == r.image) {
    throw Error(ErrorKind::Format, "instance '" + r.id + "' has identical images");
  }
  return r;
}

inline std::vector<RetrievalInstance> parse_dataset_jsonl(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<RetrievalInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, origin + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::Format, origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<RetrievalInstance> load_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open dataset " + path);
  return parse_dataset_jsonl(in, path);
}

inline void write_dataset_jsonl(std::ostream& out, std::span<const RetrievalInstance> data) {
  for (const auto& r : data) out << to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------

/// Scores every instance (in parallel when jobs > 1) and reduces in dataset
/// order, so the report does not depend on completion order. A scorer
/// failure aborts with the instance id unless `lenient`, in which case the
/// instance is skipped and counted.
inline EvalReport evaluate(std::span<const RetrievalInstance> dataset, const Scorer& scorer,
                           const EvalOptions& options = {}) {
  EvalReport report;
  report.scorer = options.scorer_name;
  if (!dataset.empty()) report.one_directional = !dataset.front().negative_image.has_value();
  for (const auto& inst : dataset) {
    if (inst.negative_image.has_value() == report.one_directional) {
      throw Error(ErrorKind::Format, "dataset mixes one-directional and bidirectional instances");
    }
  }

  struct Slot {
    std::optional<ScoreQuad> quad;
    std::optional<std::string> error;
    ErrorKind kind = ErrorKind::Scorer;
  };
  std::vector<Slot> slots(dataset.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  const bool two_way = !report.one_directional;

  auto worker = [&] {
    for (;;) {
      if (abort.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= dataset.size()) return;
      const auto& inst = dataset[i];
      try {
        ScoreQuad q;
        q.s00 = scorer(inst, 0, 0);
        q.s10 = scorer(inst, 0, 1);
        if (two_way) {
          q.s01 = scorer(inst, 1, 0);
          q.s11 = scorer(inst, 1, 1);
        }
        if (!q.finite()) throw Error(ErrorKind::Numeric, "scorer returned a non-finite score");
        slots[i].quad = q;
      } catch (const Error& e) {
        slots[i].error = e.what();
        slots[i].kind = e.kind();
        if (!options.lenient) abort.store(true);
      } catch (const std::exception& e) {
        slots[i].error = e.what();
        if (!options.lenient) abort.store(true);
      }
    }
  };
  const unsigned n_workers = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(dataset.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }

  std::map<std::string, std::array<std::size_t, 4>> tally;  // count, i2t, t2i, group
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& slot = slots[i];
    if (slot.error) {
      if (!options.lenient) throw ScorerError(dataset[i].id, *slot.error, slot.kind);
      ++report.skipped;
      report.skipped_ids.push_back(dataset[i].id);
      continue;
    }
    if (!slot.quad) continue;  // not reached before an abort
    const auto& q = *slot.quad;
    InstanceResult res{dataset[i].id, dataset[i].category, q, 0, 0, 0};
    if (two_way) {
      res.i2t = i2t(q);
      res.t2i = t2i(q);
      res.group = group(q);
    } else {
      res.i2t = q.s00 > q.s10 ? 1 : 0;
    }
    auto& t = tally[dataset[i].category];
    t[0] += 1;
    t[1] += res.i2t;
    t[2] += res.t2i;
    t[3] += res.group;
    report.results.push_back(std::move(res));
  }
  report.instances = report.results.size();

  for (const auto& [cat, t] : tally) {
    const double n = static_cast<double>(t[0]);
    report.categories.push_back({cat, t[0], 100.0 * t[1] / n, 100.0 * t[2] / n, 100.0 * t[3] / n});
  }
  report.average.category = "average";
  report.average.count = report.instances;
  if (!report.categories.empty()) {
    for (const auto& c : report.categories) {
      report.average.i2t += c.i2t;
      report.average.t2i += c.t2i;
      report.average.group += c.group;
    }
    const double k = static_cast<double>(report.categories.size());
    report.average.i2t /= k;
    report.average.t2i /= k;
    report.average.group /= k;
  }
  return report;
}

/// Same as evaluate() over precomputed quads; convenient for metric tests.
inline EvalReport evaluate_quads(std::span<const RetrievalInstance> dataset, std::span<const ScoreQuad> quads,
                                 const std::string& name = "precomputed") {
  if (dataset.size() != quads.size()) throw Error(ErrorKind::Shape, "one quad per instance is required");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < dataset.size(); ++i) index[dataset[i].id] = i;
  EvalOptions opts;
  opts.scorer_name = name;
  return evaluate(
      dataset,
      [&](const RetrievalInstance& inst, int img, int cap) {
        const auto& q = quads[index.at(inst.id)];
        if (img == 0) return cap == 0 ? q.s00 : q.s10;
        return cap == 0 ? q.s01 : q.s11;
      },
      opts);
}

inline nlohmann::json to_json(const CategoryScores& c, bool one_directional) {
  nlohmann::json j = {{"category", c.category}, {"count", c.count}, {"i2t", c.i2t}};
  j["t2i"] = one_directional ? nlohmann::json(nullptr) : nlohmann::json(c.t2i);
  j["group"] = one_directional ? nlohmann::json(nullptr) : nlohmann::json(c.group);
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : r.categories) cats.push_back(to_json(c, r.one_directional));
  nlohmann::json j = {{"scorer", r.scorer},
                      {"mode", r.one_directional ? "one_directional" : "bidirectional"},
                      {"instances", r.instances},
                      {"skipped", r.skipped},
                      {"skipped_ids", r.skipped_ids},
                      {"categories", cats},
                      {"average", to_json(r.average, r.one_directional)}};
  if (!r.one_directional) j["random_baseline"] = to_json(random_baseline(), false);
  return j;
}

inline std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  auto row = [&](const CategoryScores& c) {
    out << c.category << ',' << c.count << ',' << c.i2t << ',';
    if (r.one_directional) {
      out << ",\n";
    } else {
      out << c.t2i << ',' << c.group << '\n';
    }
  };
  out << "category,count," << (r.one_directional ? "accuracy" : "i2t") << ",t2i,group\n";
  if (!r.one_directional) row(random_baseline());
  for (const auto& c : r.categories) row(c);
  row(r.average);
  return out.str();
}

}  // namespace compose_probe
