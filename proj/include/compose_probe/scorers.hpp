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

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "compose_probe/align_model.hpp"
#include "compose_probe/embedding_source.hpp"
#include "compose_probe/image_io.hpp"
#include "compose_probe/retrieval.hpp"
#include "compose_probe/rng.hpp"
#include "compose_probe/sgi.hpp"

namespace compose_probe {

/// Maps an image reference from a dataset line to something scorers can
/// embed.
using ImageResolver = std::function<ImageRef(const std::string& image)>;

/// Images are files relative to `root`; the dataset path doubles as the
/// embedding id.
inline ImageResolver file_image_resolver(std::filesystem::path root) {
  return [root = std::move(root)](const std::string& image) {
    const auto full = (root / image).string();
    return ImageRef{image, [full] { return load_image(full); }};
  };
}

inline Scorer global_scorer(std::shared_ptr<EmbeddingSource> source, ImageResolver resolve) {
  return [source, resolve](const RetrievalInstance& inst, int i, int c) {
    return global_score(resolve(inst.image_at(i)), inst.caption_at(c), *source);
  };
}

inline Scorer sgi_scorer(std::shared_ptr<EmbeddingSource> source, ImageResolver resolve, SgiConfig cfg = {},
                         std::shared_ptr<const Lexicon> lexicon = nullptr) {
  if (!lexicon) lexicon = std::make_shared<const Lexicon>(Lexicon::builtin());
  return [source, resolve, cfg, lexicon](const RetrievalInstance& inst, int i, int c) {
    return sgi_score(resolve(inst.image_at(i)), inst.caption_at(c), inst.annotation_at(c), *source, cfg, *lexicon);
  };
}

/// Uniform score in [0, 1) that depends only on (seed, instance, image,
/// caption), so results do not depend on scheduling.
inline Scorer random_scorer(std::uint64_t seed) {
  return [seed](const RetrievalInstance& inst, int i, int c) {
    Rng rng = Rng::derive(seed, inst.id + "/" + std::to_string(i) + "/" + std::to_string(c));
    return rng.uniform01();
  };
}

template <class T>
Sequence<T> to_sequence(const EmbeddingMatrix& m) {
  return Sequence<T>::dense(m.rows, m.dim, std::vector<T>(m.data.begin(), m.data.end()));
}

/// Wraps forward as a retrieval scorer. Local models read patch and token
/// sequences from the source, Global models read the pooled embeddings.
/// Which encoder layer those come from is the source's descriptor.
template <class T>
Scorer as_scorer(std::shared_ptr<const ModelParams<T>> params, std::shared_ptr<EmbeddingSource> source,
                 ImageResolver resolve) {
  return [params, source, resolve](const RetrievalInstance& inst, int i, int c) {
    const bool local = params->config.variant == Variant::Local;
    const auto ref = resolve(inst.image_at(i));
    const int side = source->descriptor().input_side;
    auto pre = std::make_shared<detail::PreprocessedImage>(ref, side);
    const std::vector<ImageJob> job{{local ? keys::image_patches(ref.id) : keys::image_global(ref.id),
                                     [pre] { return pre->get(); }}};
    const std::vector<std::string> text{inst.caption_at(c)};
    const auto mode = local ? EncodeMode::Sequence : EncodeMode::Global;
    const auto img = source->images(job, mode);
    const auto txt = source->texts(text, mode);
    return static_cast<double>(forward(*params, to_sequence<T>(img.at(0)), to_sequence<T>(txt.at(0))));
  };
}

}  // namespace compose_probe
