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
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "compose_probe/error.hpp"

namespace compose_probe {

enum class WordClass { Determiner, Number, Adjective, Noun, Other };

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Closed-class and open-class word lists driving the rule-based chunker.
/// Each list can be replaced by a plain-text file with one token per line.
struct Lexicon {
  std::set<std::string> determiners;
  std::set<std::string> numbers;
  std::set<std::string> conjunctions;
  std::set<std::string> relations;
  std::set<std::string> function_words;
  std::set<std::string> colors;
  std::set<std::string> sizes;
  std::set<std::string> materials;
  std::set<std::string> shapes;
  std::set<std::string> adjectives;
  std::set<std::string> nouns;

  /// File stems recognised by load_dir / write_dir, in a fixed order.
  static const std::vector<std::string>& list_names() {
    static const std::vector<std::string> names = {
        "determiners", "numbers",   "conjunctions", "relations",  "function_words", "colors",
        "sizes",       "materials", "shapes",       "adjectives", "nouns"};
    return names;
  }

  std::set<std::string>& list(std::string_view name) {
    return const_cast<std::set<std::string>&>(std::as_const(*this).list(name));
  }

  const std::set<std::string>& list(std::string_view name) const {
    if (name == "determiners") return determiners;
    if (name == "numbers") return numbers;
    if (name == "conjunctions") return conjunctions;
    if (name == "relations") return relations;
    if (name == "function_words") return function_words;
    if (name == "colors") return colors;
    if (name == "sizes") return sizes;
    if (name == "materials") return materials;
    if (name == "shapes") return shapes;
    if (name == "adjectives") return adjectives;
    if (name == "nouns") return nouns;
    throw Error(ErrorKind::Config, "unknown lexicon list '" + std::string(name) + "'");
  }

  static Lexicon builtin() {
    Lexicon lx;
    lx.determiners = {"a", "an", "the", "this", "that", "these", "those", "some", "each",
                      "every", "another", "any", "its", "their", "his", "her", "my", "our",
                      "your"};
    lx.numbers = {"one", "two",   "three",  "four",   "five",  "six",  "seven",
                  "eight", "nine", "ten",   "eleven", "twelve", "several", "many",
                  "multiple", "few"};
    lx.conjunctions = {"and", "or", "but", "nor", "while", "whereas"};
    lx.relations = {"left",   "right",   "front",  "behind", "of",      "in",     "on",
                    "at",     "under",   "over",   "above",  "below",   "beside", "near",
                    "next",   "to",      "with",   "between", "beneath", "inside", "outside",
                    "around", "by",      "from",   "into",   "onto",    "atop",   "across",
                    "against", "along",  "through", "underneath", "upon",  "without"};
    lx.function_words = {"there", "is",   "are",  "was",  "were",  "be",    "been", "being",
                         "has",   "have", "had",  "it",   "they",  "he",    "she",  "we",
                         "you",   "i",    "not",  "no",   "also",  "as",    "than", "which",
                         "who",   "whom", "what", "where", "when", "very",  "too",  "sits",
                         "sit",   "stands", "stand", "lies", "lie", "holds", "hold",
                         "looks", "look", "does", "do",  "can",   "will",  "same", "other"};
    lx.colors = {"gray", "grey",  "red",   "blue",  "green", "brown", "purple", "cyan",
                 "yellow", "black", "white", "orange", "pink"};
    lx.sizes = {"small", "large", "big", "tiny", "little", "huge"};
    lx.materials = {"rubber", "metal", "metallic", "matte", "shiny", "wooden", "plastic"};
    lx.shapes = {"cube",    "cubes",  "sphere", "spheres", "cylinder", "cylinders",
                 "block",   "blocks", "ball",   "balls",   "object",   "objects"};
    lx.adjectives = {"old", "new", "young", "tall", "short", "round", "square", "bright",
                     "dark", "light", "empty", "full", "wet", "dry", "hot", "cold",
                     "fluffy", "furry", "soft", "hard", "happy", "sad", "long", "wide",
                     "narrow", "thin", "thick", "clean", "dirty", "open", "closed", "fresh",
                     "striped", "spotted", "wild", "busy", "quiet", "smooth", "rough",
                     "heavy", "fat", "pretty", "ugly", "giant", "miniature"};
    lx.nouns = {"dog", "cat", "man", "woman", "table", "chair", "car", "tree", "bird",
                "horse", "person", "people", "child", "plate", "cup", "ball", "shirt",
                "hat", "street", "field", "grass", "water", "sky", "room", "kitchen",
                "pizza", "bus", "train", "boat", "bench", "side", "top", "bottom", "hair", "couch", "bed", "sofa",
                "bowl", "banana", "apple", "orange", "sign", "road", "building", "window",
                "door", "wall", "floor", "clock", "laptop", "phone", "book", "vase",
                "flower", "flowers", "frisbee", "kite", "umbrella", "skateboard", "surfboard"};
    return lx;
  }

  /// Starts from the built-in lists and replaces each list whose file
  /// `<dir>/<name>.txt` exists. Blank lines and '#' comments are skipped.
  static Lexicon load_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
      throw Error(ErrorKind::Io, "lexicon directory not found: " + dir.string());
    }
    Lexicon lx = builtin();
    for (const auto& name : list_names()) {
      const auto path = dir / (name + ".txt");
      if (!std::filesystem::exists(path)) continue;
      std::ifstream in(path);
      if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
      auto& words = lx.list(name);
      words.clear();
      std::string line;
      while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t\r");
        words.insert(to_lower(line.substr(b, e - b + 1)));
      }
    }
    return lx;
  }

  void write_dir(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& name : list_names()) {
      std::ofstream out(dir / (name + ".txt"));
      if (!out) throw Error(ErrorKind::Io, "cannot write lexicon into " + dir.string());
      for (const auto& w : list(name)) out << w << '\n';
    }
  }

  /// Chunker word class. Closed classes are checked first, then shapes, then
  /// attribute words; unknown words fall back to suffix rules and default to
  /// nouns.
  WordClass classify(std::string_view word) const {
    const std::string w = to_lower(word);
    if (w.empty()) return WordClass::Other;
    if (determiners.count(w)) return WordClass::Determiner;
    if (numbers.count(w) || std::all_of(w.begin(), w.end(), [](unsigned char c) {
          return std::isdigit(c);
        })) {
      return WordClass::Number;
    }
    if (conjunctions.count(w) || relations.count(w) || function_words.count(w)) {
      return WordClass::Other;
    }
    if (shapes.count(w)) return WordClass::Noun;
    if (colors.count(w) || sizes.count(w) || materials.count(w) || adjectives.count(w)) {
      return WordClass::Adjective;
    }
    if (nouns.count(w)) return WordClass::Noun;
    return classify_by_suffix(w);
  }

 private:
  static bool ends_with(std::string_view w, std::string_view suffix) {
    return w.size() > suffix.size() + 1 && w.substr(w.size() - suffix.size()) == suffix;
  }

  static WordClass classify_by_suffix(std::string_view w) {
    if (ends_with(w, "ly") || ends_with(w, "ing")) return WordClass::Other;
    for (std::string_view s : {"ed", "ous", "ful", "ive", "able", "ible", "ical", "less", "ish"}) {
      if (ends_with(w, s)) return WordClass::Adjective;
    }
    return WordClass::Noun;
  }
};

}  // namespace compose_probe
