#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "css/core.hpp"

namespace css {

/// What a question type asks about the referenced object.
enum class QuestionKind { kColor, kCount, kPresence };

struct QuestionTypeSpec {
  std::string name;                          // e.g. "what color"
  QuestionKind kind = QuestionKind::kColor;
  std::vector<std::vector<std::string>> templates;  // "{noun}" marks the target noun slot
};

/// Parameters of the synthetic changing-priors benchmark.
struct GeneratorSpec {
  std::vector<QuestionTypeSpec> question_types;
  std::vector<std::string> categories;
  std::map<std::string, std::string> aliases;  // category -> alternative noun
  std::vector<std::string> colors;
  std::vector<std::string> counts;
  double bias_skew = 0.8;
  std::size_t train_size = 5000;
  std::size_t test_size = 1000;
  int min_objects = 4;
  int max_objects = 10;
  std::size_t visual_dim = 32;
  double noise_sigma = 0.1;
  std::size_t lexicon_dim = 96;
  /// Templates [0, training_templates) are used for train/test questions; the rest only appear
  /// in rephrasings.
  std::size_t training_templates = 3;
  std::uint64_t seed = 7;

  /// Three question types, twelve categories, eight colours, counts 1..5.
  static GeneratorSpec defaults();
  void validate() const;

  AnswerVocabulary answer_vocabulary() const;
  const QuestionTypeSpec* find_type(const std::string& name) const;
  std::vector<std::string> answers_for(QuestionKind kind) const;
  /// Every token the templates, nouns and answers can produce.
  std::vector<std::string> all_tokens() const;
};

/// Head answer per question type in each split.
struct PriorSummary {
  std::map<std::string, std::string> train_head;
  std::map<std::string, std::string> test_head;
};

struct GeneratedData {
  std::vector<Sample> train;
  std::vector<Sample> test;
  AnswerVocabulary vocab;
  PriorSummary priors;
};

GeneratedData generate_dataset(const GeneratorSpec& spec);

/// Token -> unit vector with a noun flag. Stand-in for pretrained word vectors.
class EmbeddingLexicon {
 public:
  struct Entry {
    std::vector<double> vector;
    bool noun = false;
    bool operator==(const Entry&) const = default;
  };

  EmbeddingLexicon() = default;
  explicit EmbeddingLexicon(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  void add(const std::string& token, std::vector<double> vector, bool noun);
  bool contains(const std::string& token) const { return entries_.count(token) > 0; }
  bool is_noun(const std::string& token) const;
  const Entry& at(const std::string& token) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  double cosine(const std::string& a, const std::string& b) const;

  std::string to_json() const;
  static EmbeddingLexicon from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static EmbeddingLexicon load(const std::filesystem::path& path);

  bool operator==(const EmbeddingLexicon&) const = default;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, Entry> entries_;
};

/// Orthogonal base directions plus small shared perturbations: unrelated tokens have cosine
/// <= 0.3, a category and its alias >= 0.9.
EmbeddingLexicon build_embedding_lexicon(const GeneratorSpec& spec);

struct RephrasingGroup {
  std::vector<Sample> members;  // members[0] is the original
};

/// n-1 template variants of the sample's question that keep its type, target noun and answers.
RephrasingGroup generate_rephrasings(const Sample& sample, std::size_t n, const GeneratorSpec& spec);

std::string rephrasing_group_to_json_line(const RephrasingGroup& group);
RephrasingGroup rephrasing_group_from_json_line(const std::string& line, const AnswerVocabulary& vocab);

/// Position of the question's target noun (first token the lexicon flags as a noun).
std::optional<std::size_t> target_noun_position(const QuestionRecord& question, const EmbeddingLexicon& lexicon);

/// Copy of the sample with the target noun token deleted. Throws when the question has no noun.
Sample build_critical_word_removed(const Sample& sample, const EmbeddingLexicon& lexicon);

}  // namespace css
