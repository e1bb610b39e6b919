#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "css/core.hpp"
#include "css/databench.hpp"
#include "css/model.hpp"

namespace testutil {

inline std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline css::QuestionRecord question(const std::string& text, std::size_t type_tokens, const std::string& type = "") {
  css::QuestionRecord q;
  q.question_id = "q0";
  q.tokens = split(text);
  q.type_token_count = type_tokens;
  if (type.empty()) {
    for (std::size_t i = 0; i < type_tokens; ++i) q.question_type += (i ? " " : "") + q.tokens[i];
  } else {
    q.question_type = type;
  }
  return q;
}

// one object per category, features drawn deterministically from the index
inline css::ImageRecord image(const std::vector<std::string>& categories, std::size_t dim = 4) {
  css::ImageRecord img;
  img.image_id = "img0";
  for (std::size_t i = 0; i < categories.size(); ++i) {
    css::ObjectInstance o;
    o.object_id = static_cast<std::int64_t>(i);
    o.category = categories[i];
    for (std::size_t j = 0; j < dim; ++j) o.feature.push_back(0.1 * static_cast<double>((i * 7 + j * 3) % 11) - 0.5);
    img.objects.push_back(o);
  }
  return img;
}

inline css::Sample sample(const std::vector<std::string>& categories, const std::string& text, std::size_t type_tokens,
                          css::AnswerScores answers, std::size_t dim = 4) {
  css::Sample s;
  s.image = image(categories, dim);
  s.question = question(text, type_tokens);
  s.answers = std::move(answers);
  return s;
}

inline css::AnswerVocabulary colour_vocab() {
  return css::AnswerVocabulary({"red", "blue", "green", "white", "black", "maroon", "yes", "no"});
}

// Small generic model over `vocab` with every token the test questions use.
inline css::VqaModel small_model(const css::AnswerVocabulary& vocab, std::size_t d_v = 4, std::size_t d_h = 6,
                                 css::FusionStrategy strategy = {}, std::uint64_t seed = 11) {
  std::vector<std::string> tokens = {"what", "color", "is",  "the",   "kite", "tie",  "shirt", "wall",
                                     "man's", "how",  "many", "there", "a",    "dog",  "are"};
  return css::VqaModel(css::init_params({d_v, d_h, vocab.size()}, tokens, seed), vocab, strategy);
}

// Hand-built lexicon for the tie / shirt / wall scenes: cos(tie, shirt) = 0.6, cos(tie, wall) = 0.1.
inline css::EmbeddingLexicon tie_lexicon() {
  css::EmbeddingLexicon lex(3);
  lex.add("tie", {1.0, 0.0, 0.0}, true);
  lex.add("shirt", {0.6, 0.8, 0.0}, true);
  lex.add("wall", {0.1, 0.0, std::sqrt(0.99)}, true);
  lex.add("kite", {0.0, 0.0, 1.0}, true);
  lex.add("what", {0.0, 1.0, 0.0}, false);
  lex.add("color", {0.0, 1.0, 0.0}, false);
  return lex;
}

}  // namespace testutil
