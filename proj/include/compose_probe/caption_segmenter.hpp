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

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "compose_probe/error.hpp"
#include "compose_probe/lexicon.hpp"

namespace compose_probe {

enum class Granularity { FineGrained, CoarseGrained };
/// CaptionOnly keeps just the full caption; it reduces SGI to global
/// matching on the text side.
enum class SegmentSource { Structured, Automatic, CaptionOnly };

struct SegmentationStrategy {
  Granularity granularity = Granularity::CoarseGrained;
  SegmentSource source = SegmentSource::Structured;
};

/// One attribute phrase as it appears in the caption ("large red rubber
/// cube") and its head object word ("cube").
struct AnnotatedPhrase {
  std::string text;
  std::string object;
  bool operator==(const AnnotatedPhrase&) const = default;
};

/// Ground-truth structure of a caption: its attribute phrases in caption
/// order and, when the phrases are linked by a spatial relation, the
/// relation's surface words ("left of").
struct SegmentAnnotation {
  std::vector<AnnotatedPhrase> phrases;
  std::optional<std::string> relation;
  bool operator==(const SegmentAnnotation&) const = default;
};

/// Ordered, duplicate-free segments. The full caption is always last.
struct CaptionSegments {
  std::vector<std::string> segments;

  const std::string& full_caption() const { return segments.back(); }
  std::size_t size() const { return segments.size(); }
};

namespace detail {

struct Token {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool word = false;
};

inline bool is_word_char(unsigned char c) {
  return std::isalnum(c) || c == '\'' || c == '-' || c >= 0x80;
}

inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      tokens.push_back({i, j, true});
      i = j;
    } else {
      tokens.push_back({i, i + 1, false});
      ++i;
    }
  }
  return tokens;
}

inline bool contains_word(std::string_view haystack, std::string_view word) {
  for (const auto& t : tokenize(haystack)) {
    if (t.word && haystack.substr(t.begin, t.end - t.begin) == word) return true;
  }
  // Multi-word objects ("fire hydrant") are matched as plain substrings.
  return word.find(' ') != std::string_view::npos && haystack.find(word) != std::string_view::npos;
}

// Builds the final segment list: drops empties and duplicates (first
// occurrence wins), removes copies of the caption, appends the caption.
inline CaptionSegments finish_segments(const std::vector<std::string>& parts,
                                       const std::string& caption) {
  CaptionSegments out;
  for (const auto& p : parts) {
    if (p.empty() || p == caption) continue;
    bool seen = false;
    for (const auto& q : out.segments) seen = seen || q == p;
    if (!seen) out.segments.push_back(p);
  }
  out.segments.push_back(caption);
  return out;
}

}  // namespace detail

/// Segments from ground-truth structure. Order: object words (fine-grained
/// only), attribute phrases, the relational span, the full caption. The
/// relational span runs from the first phrase (with its determiner) to the
/// end of the last phrase, copied verbatim from the caption; it is only
/// produced when the annotation names a relation.
inline CaptionSegments segment_structured(const SegmentAnnotation& annotation,
                                          const std::string& caption,
                                          const SegmentationStrategy& strategy,
                                          const Lexicon& lexicon = Lexicon::builtin()) {
  if (caption.empty()) throw Error(ErrorKind::Precondition, "caption is empty");
  if (annotation.phrases.empty()) {
    throw Error(ErrorKind::Consistency, "annotation has no phrases for caption '" + caption + "'");
  }

  std::vector<std::size_t> starts;
  std::size_t cursor = 0;
  for (const auto& phrase : annotation.phrases) {
    if (phrase.text.empty()) throw Error(ErrorKind::Consistency, "empty annotated phrase");
    const auto pos = caption.find(phrase.text, cursor);
    if (pos == std::string::npos) {
      throw Error(ErrorKind::Consistency,
                  "phrase '" + phrase.text + "' does not appear in caption '" + caption + "'");
    }
    if (!detail::contains_word(phrase.text, phrase.object)) {
      throw Error(ErrorKind::Consistency,
                  "object '" + phrase.object + "' is not a word of phrase '" + phrase.text + "'");
    }
    starts.push_back(pos);
    cursor = pos + phrase.text.size();
  }

  std::optional<std::string> relational;
  if (annotation.relation && annotation.phrases.size() >= 2) {
    const auto first_end = starts[0] + annotation.phrases[0].text.size();
    const auto rel = caption.find(*annotation.relation, first_end);
    if (rel == std::string::npos || rel >= starts[1]) {
      throw Error(ErrorKind::Consistency, "relation '" + *annotation.relation +
                                              "' does not link the phrases of '" + caption + "'");
    }
    std::size_t begin = starts[0];
    // Pull in a determiner directly in front of the first phrase.
    const auto tokens = detail::tokenize(std::string_view(caption).substr(0, begin));
    if (!tokens.empty() && tokens.back().word &&
        lexicon.classify(std::string_view(caption).substr(
            tokens.back().begin, tokens.back().end - tokens.back().begin)) ==
            WordClass::Determiner) {
      begin = tokens.back().begin;
    }
    relational = caption.substr(begin, cursor - begin);
  }

  std::vector<std::string> parts;
  if (strategy.granularity == Granularity::FineGrained) {
    for (const auto& phrase : annotation.phrases) parts.push_back(phrase.object);
  }
  for (const auto& phrase : annotation.phrases) parts.push_back(phrase.text);
  if (relational) parts.push_back(*relational);
  return detail::finish_segments(parts, caption);
}

/// Noun-chunk spans of `caption`: maximal runs matching
/// determiner? (number|adjective)* noun+, with the determiner left out of
/// the emitted span. Punctuation ends a chunk.
inline std::vector<std::string> noun_chunks(const std::string& caption, const Lexicon& lexicon) {
  const auto tokens = detail::tokenize(caption);
  std::vector<WordClass> cls;
  cls.reserve(tokens.size());
  for (const auto& t : tokens) {
    cls.push_back(t.word ? lexicon.classify(std::string_view(caption).substr(t.begin, t.end - t.begin))
                         : WordClass::Other);
  }

  std::vector<std::string> chunks;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (cls[i] == WordClass::Other) {
      ++i;
      continue;
    }
    std::size_t j = i;
    if (cls[j] == WordClass::Determiner) ++j;
    const std::size_t body = j;
    while (j < tokens.size() && (cls[j] == WordClass::Number || cls[j] == WordClass::Adjective)) ++j;
    std::size_t k = j;
    while (k < tokens.size() && cls[k] == WordClass::Noun) ++k;
    if (k > j) {
      chunks.push_back(caption.substr(tokens[body].begin, tokens[k - 1].end - tokens[body].begin));
      i = k;
    } else {
      i = std::max(i + 1, j);
    }
  }
  return chunks;
}

/// Caption segmentation without annotations: noun chunks then the caption.
inline CaptionSegments segment_automatic(const std::string& caption,
                                         const Lexicon& lexicon = Lexicon::builtin()) {
  if (caption.empty()) throw Error(ErrorKind::Precondition, "caption is empty");
  return detail::finish_segments(noun_chunks(caption, lexicon), caption);
}

/// Dispatches on the strategy source; structured segmentation requires an
/// annotation.
inline CaptionSegments segment_caption(const std::string& caption,
                                       const SegmentAnnotation* annotation,
                                       const SegmentationStrategy& strategy,
                                       const Lexicon& lexicon = Lexicon::builtin()) {
  if (strategy.source == SegmentSource::CaptionOnly) {
    if (caption.empty()) throw Error(ErrorKind::Precondition, "caption is empty");
    return CaptionSegments{{caption}};
  }
  if (strategy.source == SegmentSource::Structured && annotation != nullptr) {
    return segment_structured(*annotation, caption, strategy, lexicon);
  }
  return segment_automatic(caption, lexicon);
}

}  // namespace compose_probe
