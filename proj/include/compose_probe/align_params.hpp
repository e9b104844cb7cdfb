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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compose_probe/emb_store.hpp"
#include "compose_probe/embedding.hpp"
#include "compose_probe/error.hpp"
#include "compose_probe/rng.hpp"

namespace compose_probe {

enum class Variant { Local, Global };

inline std::string to_string(Variant v) { return v == Variant::Local ? "local" : "global"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "local") return Variant::Local;
  if (s == "global") return Variant::Global;
  throw Error(ErrorKind::Config, "unknown variant '" + s + "' (expected local or global)");
}

/// Alignment transformer shape. Local consumes patch and token sequences of
/// the frozen encoders; Global consumes one pooled vector per modality.
struct TransformerConfig {
  Variant variant = Variant::Local;
  std::size_t layers = 4;
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t ff_dim = 2048;
  std::size_t max_patches = 50;
  std::size_t max_tokens = 77;
  std::size_t visual_dim = 768;
  std::size_t text_dim = 512;
  double ln_eps = 1e-5;

  /// Defaults sized for ViT-B/32: 50 patch rows of width 768 (penultimate
  /// layer) and up to 77 tokens of width 512.
  static TransformerConfig local() { return {}; }

  static TransformerConfig global(std::size_t embedding_dim = 512) {
    TransformerConfig c;
    c.variant = Variant::Global;
    c.max_patches = 1;
    c.max_tokens = 1;
    c.visual_dim = embedding_dim;
    c.text_dim = embedding_dim;
    return c;
  }

  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (layers < 1) throw Error(ErrorKind::Config, "layers must be at least 1");
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0) {
      throw Error(ErrorKind::Config, "model_dim " + std::to_string(model_dim) + " is not divisible by heads " +
                                         std::to_string(heads));
    }
    if (ff_dim == 0 || max_patches == 0 || max_tokens == 0 || visual_dim == 0 || text_dim == 0) {
      throw Error(ErrorKind::Config, "transformer dimensions must be positive");
    }
    if (variant == Variant::Global && (max_patches != 1 || max_tokens != 1)) {
      throw Error(ErrorKind::Config, "global variant takes one vector per modality");
    }
    if (!(ln_eps > 0.0)) throw Error(ErrorKind::Config, "ln_eps must be positive");
  }

  bool operator==(const TransformerConfig&) const = default;
};

inline nlohmann::json to_json(const TransformerConfig& c) {
  return {{"variant", to_string(c.variant)}, {"layers", c.layers},           {"model_dim", c.model_dim},
          {"heads", c.heads},                {"ff_dim", c.ff_dim},           {"max_patches", c.max_patches},
          {"max_tokens", c.max_tokens},      {"visual_dim", c.visual_dim},   {"text_dim", c.text_dim},
          {"ln_eps", c.ln_eps}};
}

inline TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  try {
    TransformerConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.layers = j.at("layers").get<std::size_t>();
    c.model_dim = j.at("model_dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_dim = j.at("ff_dim").get<std::size_t>();
    c.max_patches = j.at("max_patches").get<std::size_t>();
    c.max_tokens = j.at("max_tokens").get<std::size_t>();
    c.visual_dim = j.at("visual_dim").get<std::size_t>();
    c.text_dim = j.at("text_dim").get<std::size_t>();
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("transformer config: ") + e.what());
  }
}

struct TensorSpec {
  std::string name;
  std::size_t rows = 1;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

struct BlockSlots {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Flat placement of every learnable tensor. Matrices are row-major
/// (out x in); the flat order is the order of `tensors`.
struct ParamLayout {
  std::vector<TensorSpec> tensors;
  std::size_t total = 0;
  std::size_t vis_w = 0, vis_b = 0, txt_w = 0, txt_b = 0, vis_pos = 0, txt_pos = 0, modality = 0, cls = 0;
  std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0, logit_scale = 0;
  std::vector<BlockSlots> blocks;

  static ParamLayout build(const TransformerConfig& c) {
    c.validate();
    ParamLayout l;
    const auto d = c.model_dim;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      l.tensors.push_back({name, rows, cols, l.total});
      l.total += rows * cols;
      return l.tensors.back().offset;
    };
    l.vis_w = add("visual_proj.weight", d, c.visual_dim);
    l.vis_b = add("visual_proj.bias", 1, d);
    l.txt_w = add("text_proj.weight", d, c.text_dim);
    l.txt_b = add("text_proj.bias", 1, d);
    l.vis_pos = add("visual_pos", c.max_patches, d);
    l.txt_pos = add("text_pos", c.max_tokens, d);
    l.modality = add("modality", 2, d);
    l.cls = add("cls", 1, d);
    for (std::size_t i = 0; i < c.layers; ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      BlockSlots b{};
      b.ln1_g = add(p + "ln1.gamma", 1, d);
      b.ln1_b = add(p + "ln1.beta", 1, d);
      b.wq = add(p + "attn.wq", d, d);
      b.bq = add(p + "attn.bq", 1, d);
      b.wk = add(p + "attn.wk", d, d);
      b.bk = add(p + "attn.bk", 1, d);
      b.wv = add(p + "attn.wv", d, d);
      b.bv = add(p + "attn.bv", 1, d);
      b.wo = add(p + "attn.wo", d, d);
      b.bo = add(p + "attn.bo", 1, d);
      b.ln2_g = add(p + "ln2.gamma", 1, d);
      b.ln2_b = add(p + "ln2.beta", 1, d);
      b.w1 = add(p + "ff1.weight", c.ff_dim, d);
      b.b1 = add(p + "ff1.bias", 1, c.ff_dim);
      b.w2 = add(p + "ff2.weight", d, c.ff_dim);
      b.b2 = add(p + "ff2.bias", 1, d);
      l.blocks.push_back(b);
    }
    l.lnf_g = add("final_ln.gamma", 1, d);
    l.lnf_b = add("final_ln.beta", 1, d);
    l.head_w = add("head.weight", 1, d);
    l.head_b = add("head.bias", 1, 1);
    l.logit_scale = add("logit_scale", 1, 1);
    return l;
  }

  const TensorSpec& find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw Error(ErrorKind::Precondition, "no parameter tensor named '" + name + "'");
  }

  /// Tensor containing flat index i.
  const TensorSpec& owner(std::size_t i) const {
    for (const auto& t : tensors) {
      if (i >= t.offset && i < t.offset + t.size()) return t;
    }
    throw Error(ErrorKind::Bounds, "flat parameter index out of range");
  }
};

/// Initial temperature 0.07, stored as a log inverse.
inline const double kInitLogitScale = std::log(1.0 / 0.07);
inline const double kMaxLogitScale = std::log(100.0);

template <class T>
struct ModelParams {
  TransformerConfig config;
  std::shared_ptr<const ParamLayout> layout;
  std::vector<T> values;

  ModelParams() = default;
  explicit ModelParams(const TransformerConfig& c)
      : config(c), layout(std::make_shared<const ParamLayout>(ParamLayout::build(c))), values(layout->total, T(0)) {}

  /// Zero-filled tensors of the same layout, e.g. for gradients.
  ModelParams zeros_like() const {
    ModelParams z;
    z.config = config;
    z.layout = layout;
    z.values.assign(values.size(), T(0));
    return z;
  }

  std::size_t size() const { return values.size(); }
  T* ptr(std::size_t offset) { return values.data() + offset; }
  const T* ptr(std::size_t offset) const { return values.data() + offset; }

  std::span<T> tensor(const std::string& name) {
    const auto& t = layout->find(name);
    return {values.data() + t.offset, t.size()};
  }
  std::span<const T> tensor(const std::string& name) const {
    const auto& t = layout->find(name);
    return {values.data() + t.offset, t.size()};
  }

  void check_finite(const char* what) const {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(static_cast<double>(values[i]))) {
        throw Error(ErrorKind::Numeric, std::string("non-finite ") + what + " in tensor " + layout->owner(i).name);
      }
    }
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

struct InitOptions {
  std::uint64_t seed = 0;
  double std = 0.02;
  bool zero_head = false;
};

/// Matrices, embeddings and the CLS vector ~ N(0, std^2); biases and
/// LayerNorm shifts 0; LayerNorm gains 1. Every tensor draws from its own
/// stream so adding layers leaves earlier tensors unchanged.
template <class T>
ModelParams<T> init_params(const TransformerConfig& cfg, const InitOptions& opt = {}) {
  ModelParams<T> p(cfg);
  for (const auto& t : p.layout->tensors) {
    T* v = p.ptr(t.offset);
    const auto& n = t.name;
    auto ends_with = [&](std::string_view s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
    if (n == "logit_scale") {
      v[0] = static_cast<T>(kInitLogitScale);
    } else if (ends_with("gamma")) {
      std::fill(v, v + t.size(), T(1));
    } else if (ends_with("beta") || ends_with("bias") || ends_with(".bq") || ends_with(".bk") ||
               ends_with(".bv") || ends_with(".bo")) {
      std::fill(v, v + t.size(), T(0));
    } else if (n == "head.weight" && opt.zero_head) {
      std::fill(v, v + t.size(), T(0));
    } else {
      Rng rng = Rng::derive(opt.seed, "init/" + n);
      for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<T>(opt.std * rng.normal());
    }
  }
  return p;
}

/// Learnable scalars of the model, the logit scale included.
template <class T>
std::size_t param_count(const ModelParams<T>& p) {
  return p.values.size();
}

inline std::size_t param_count(const TransformerConfig& c) { return ParamLayout::build(c).total; }

/// Scalars in one transformer block.
inline std::size_t block_param_count(const TransformerConfig& c) {
  const auto d = c.model_dim, f = c.ff_dim;
  return 4 * (d * d + d) + 2 * f * d + f + d + 4 * d;
}

/// Checkpoint: an EMB1 container with one ParameterTensor record per tensor
/// plus `<path>.json` holding the config and caller metadata.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& p, const nlohmann::json& meta = {}) {
  std::vector<EmbeddingRecord> records;
  records.reserve(p.layout->tensors.size());
  for (const auto& t : p.layout->tensors) {
    std::vector<float> data(p.values.begin() + static_cast<std::ptrdiff_t>(t.offset),
                            p.values.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
    records.push_back({t.name, EmbeddingKind::ParameterTensor, EmbeddingMatrix(t.rows, t.cols, std::move(data))});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  store_write(path, records);
  nlohmann::json side = {{"config", to_json(p.config)}, {"param_count", param_count(p)}, {"format", "EMB1"}};
  if (!meta.is_null()) side["meta"] = meta;
  std::ofstream f(path.string() + ".json");
  if (!f) throw Error(ErrorKind::Io, "cannot write " + path.string() + ".json");
  f << side.dump(2) << '\n';
}

template <class T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path.string() + ".json");
  if (!f) throw Error(ErrorKind::Io, "missing checkpoint sidecar " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ".json: " + e.what());
  }
  ModelParams<T> p(transformer_config_from_json(side.at("config")));
  const auto store = store_read(path);
  if (store.records().size() != p.layout->tensors.size()) {
    throw Error(ErrorKind::Format, "checkpoint holds " + std::to_string(store.records().size()) +
                                       " tensors, config expects " + std::to_string(p.layout->tensors.size()));
  }
  for (const auto& t : p.layout->tensors) {
    const auto* r = store.find(t.name);
    if (!r) throw Error(ErrorKind::Format, "checkpoint lacks tensor " + t.name);
    if (r->kind != EmbeddingKind::ParameterTensor || r->matrix.rows != t.rows || r->matrix.dim != t.cols) {
      throw Error(ErrorKind::Shape, "checkpoint tensor " + t.name + " has the wrong shape");
    }
    std::copy(r->matrix.data.begin(), r->matrix.data.end(), p.values.begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
  p.check_finite("checkpoint value");
  return p;
}

}  // namespace compose_probe
