// Closed narration grammar for the moving-shapes world, plus the vocabulary
// and the deterministic noun / verb-phrase extraction that operates on it.
//
// Sentence form:
//   "the {color} {shape} is {phrase}" joined by " and "
// where phrase is one of the motion phrases below, or "staying still".
#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace evl {

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VocabError : std::runtime_error {
  explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class ShapeKind : int { kCircle = 0, kSquare = 1, kTriangle = 2 };
enum class ColorKind : int { kRed = 0, kGreen = 1, kBlue = 2, kYellow = 3, kPurple = 4 };
enum class MotionKind : int {
  kSlideLeft = 0,
  kSlideRight = 1,
  kSlideUp = 2,
  kSlideDown = 3,
  kGrow = 4,
  kShrink = 5,
  kStay = 6,
};

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 5;
inline constexpr int kNumMotions = 7;

inline const std::array<std::string, kNumShapes>& shape_names() {
  static const std::array<std::string, kNumShapes> n = {"circle", "square", "triangle"};
  return n;
}

inline const std::array<std::string, kNumColors>& color_names() {
  static const std::array<std::string, kNumColors> n = {"red", "green", "blue",
                                                        "yellow", "purple"};
  return n;
}

// RGB values used by the renderer, indexed by ColorKind.
inline const std::array<std::array<std::uint8_t, 3>, kNumColors>& color_rgb() {
  static const std::array<std::array<std::uint8_t, 3>, kNumColors> c = {{
      {{220, 50, 40}},
      {{50, 200, 70}},
      {{60, 90, 230}},
      {{235, 220, 50}},
      {{170, 60, 200}},
  }};
  return c;
}

// Motion phrase as it appears in the narration; "staying still" is not a
// motion and is excluded from verb-phrase extraction.
inline std::string motion_phrase(MotionKind m) {
  switch (m) {
    case MotionKind::kSlideLeft: return "sliding left";
    case MotionKind::kSlideRight: return "sliding right";
    case MotionKind::kSlideUp: return "sliding up";
    case MotionKind::kSlideDown: return "sliding down";
    case MotionKind::kGrow: return "growing";
    case MotionKind::kShrink: return "shrinking";
    case MotionKind::kStay: return "staying still";
  }
  throw ParseError("unknown motion");
}

inline bool motion_is_still(MotionKind m) { return m == MotionKind::kStay; }

inline std::string noun_of(ColorKind c, ShapeKind s) {
  return color_names()[static_cast<std::size_t>(c)] + " " +
         shape_names()[static_cast<std::size_t>(s)];
}

inline std::string entity_clause(ColorKind c, ShapeKind s, MotionKind m) {
  return "the " + noun_of(c, s) + " is " + motion_phrase(m);
}

inline std::string compose_narration(const std::vector<std::string>& clauses) {
  std::string text;
  for (std::size_t i = 0; i < clauses.size(); ++i) {
    if (i) text += " and ";
    text += clauses[i];
  }
  return text;
}

// ---------------------------------------------------------------------------
// Vocabulary

struct Vocabulary {
  std::vector<std::string> words;  // id -> word; ids dense from 0
  std::unordered_map<std::string, std::int64_t> ids;
  std::vector<std::string> taxonomy;  // contrast dictionary of nouns
  std::int64_t begin_id = 0;
  std::int64_t end_id = 1;

  std::int64_t id_of(const std::string& w) const {
    auto it = ids.find(w);
    if (it == ids.end()) throw VocabError("word not in vocabulary: '" + w + "'");
    return it->second;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(words.size()); }
};

inline Vocabulary build_vocabulary() {
  Vocabulary v;
  auto add = [&v](const std::string& w) {
    v.ids.emplace(w, static_cast<std::int64_t>(v.words.size()));
    v.words.push_back(w);
  };
  add("<s>");
  add("</s>");
  for (const auto& w : {"the", "is", "and"}) add(w);
  for (const auto& w : color_names()) add(w);
  for (const auto& w : shape_names()) add(w);
  for (const auto& w : {"sliding", "left", "right", "up", "down", "growing",
                        "shrinking", "staying", "still"})
    add(w);
  for (int c = 0; c < kNumColors; ++c)
    for (int s = 0; s < kNumShapes; ++s)
      v.taxonomy.push_back(noun_of(static_cast<ColorKind>(c), static_cast<ShapeKind>(s)));
  return v;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(w);
  }
  return out;
}

// Whitespace-split, lowercased, begin/end markers added.
inline std::vector<std::int64_t> tokenize(const std::string& text, const Vocabulary& v) {
  std::vector<std::int64_t> ids;
  ids.push_back(v.begin_id);
  for (const auto& w : split_words(text)) ids.push_back(v.id_of(w));
  ids.push_back(v.end_id);
  return ids;
}

inline std::string detokenize(const std::vector<std::int64_t>& ids, const Vocabulary& v) {
  std::string text;
  for (auto id : ids) {
    if (id == v.begin_id || id == v.end_id) continue;
    if (!text.empty()) text += " ";
    text += v.words[static_cast<std::size_t>(id)];
  }
  return text;
}

// ---------------------------------------------------------------------------
// Narration + extraction

struct Narration {
  std::string text;
  std::vector<std::string> nouns;
  std::vector<std::string> verb_phrases;
};

namespace detail {

inline bool is_color_word(const std::string& w, int* idx) {
  for (int i = 0; i < kNumColors; ++i)
    if (color_names()[static_cast<std::size_t>(i)] == w) {
      *idx = i;
      return true;
    }
  return false;
}

inline bool is_shape_word(const std::string& w, int* idx) {
  for (int i = 0; i < kNumShapes; ++i)
    if (shape_names()[static_cast<std::size_t>(i)] == w) {
      *idx = i;
      return true;
    }
  return false;
}

}  // namespace detail

// Color + shape compound nouns, in order of mention.
inline std::vector<std::string> extract_nouns(const std::string& text) {
  const auto words = split_words(text);
  std::vector<std::string> nouns;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    int ci = 0, si = 0;
    if (detail::is_color_word(words[i], &ci) && detail::is_shape_word(words[i + 1], &si))
      nouns.push_back(words[i] + " " + words[i + 1]);
  }
  if (nouns.empty()) throw ParseError("narration has no grammar nouns: '" + text + "'");
  return nouns;
}

// Progressive motion phrases, in order of mention; "staying still" is not a
// motion phrase, so stationary entities contribute nothing.
inline std::vector<std::string> extract_verb_phrases(const std::string& text) {
  const auto words = split_words(text);
  if (words.empty()) throw ParseError("empty narration");
  std::vector<std::string> phrases;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::string& w = words[i];
    if (w == "sliding") {
      if (i + 1 >= words.size()) throw ParseError("dangling 'sliding' in: '" + text + "'");
      const std::string& dir = words[i + 1];
      if (dir != "left" && dir != "right" && dir != "up" && dir != "down")
        throw ParseError("bad slide direction '" + dir + "'");
      phrases.push_back(w + " " + dir);
    } else if (w == "growing" || w == "shrinking") {
      phrases.push_back(w);
    } else if (w == "staying") {
      if (i + 1 >= words.size() || words[i + 1] != "still")
        throw ParseError("bad stationary clause in: '" + text + "'");
    }
  }
  return phrases;
}

inline Narration make_narration(const std::vector<ColorKind>& colors,
                                const std::vector<ShapeKind>& shapes,
                                const std::vector<MotionKind>& motions) {
  Narration n;
  std::vector<std::string> clauses;
  for (std::size_t i = 0; i < colors.size(); ++i) {
    clauses.push_back(entity_clause(colors[i], shapes[i], motions[i]));
    n.nouns.push_back(noun_of(colors[i], shapes[i]));
    if (!motion_is_still(motions[i])) n.verb_phrases.push_back(motion_phrase(motions[i]));
  }
  n.text = compose_narration(clauses);
  return n;
}

}  // namespace evl
