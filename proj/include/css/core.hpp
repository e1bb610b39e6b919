#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace css {

/// Raised for malformed or inconsistent dataset input. `line()` is 1-based, 0 when unknown.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::size_t line = 0);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Ordered answer candidate set. Positions are stable for the lifetime of the object.
class AnswerVocabulary {
 public:
  AnswerVocabulary() = default;
  explicit AnswerVocabulary(std::vector<std::string> answers);

  std::size_t size() const { return answers_.size(); }
  const std::string& at(std::size_t index) const { return answers_.at(index); }
  const std::vector<std::string>& answers() const { return answers_; }
  std::optional<std::size_t> index_of(const std::string& answer) const;
  bool contains(const std::string& answer) const { return index_.count(answer) > 0; }

  static AnswerVocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool operator==(const AnswerVocabulary& other) const { return answers_ == other.answers_; }

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Ground-truth soft scores. Empty is legal (a counterfactual target with every answer ruled out).
struct AnswerScores {
  std::map<std::string, double> entries;

  bool empty() const { return entries.empty(); }
  double score_of(const std::string& answer) const;
  /// Dense target vector aligned with `vocab`. Throws DatasetError on unknown answers.
  std::vector<double> dense(const AnswerVocabulary& vocab) const;

  bool operator==(const AnswerScores&) const = default;
};

struct ObjectInstance {
  std::int64_t object_id = 0;
  std::string category;
  std::vector<double> feature;

  bool operator==(const ObjectInstance&) const = default;
};

struct ImageRecord {
  std::string image_id;
  std::vector<ObjectInstance> objects;

  const ObjectInstance* find(std::int64_t object_id) const;
  bool operator==(const ImageRecord&) const = default;
};

struct QuestionRecord {
  std::string question_id;
  std::vector<std::string> tokens;
  std::string question_type;
  std::size_t type_token_count = 1;

  /// True when token `i` belongs to the question-type prefix.
  bool is_type_token(std::size_t i) const { return i < type_token_count; }
  std::string text() const;
  bool operator==(const QuestionRecord&) const = default;
};

enum class Split { kTrain, kTest };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

struct Sample {
  ImageRecord image;
  QuestionRecord question;
  AnswerScores answers;
  Split split = Split::kTrain;

  std::string id() const { return image.image_id + "/" + question.question_id; }
  bool operator==(const Sample&) const = default;
};

struct AnswerDistribution {
  std::vector<double> probs;

  std::size_t argmax() const;
  /// Indices of the `n` largest entries, ties broken by lower index.
  std::vector<std::size_t> top_n(std::size_t n) const;
  /// Σ score(a)·P(a) over the ground-truth answers.
  double gt_mass(const AnswerScores& gt, const AnswerVocabulary& vocab) const;
};

/// Throws DatasetError when a record breaks a core invariant. `answers_required` is false for
/// counterfactual records whose reassigned answer set may be empty.
void validate_sample(const Sample& sample, const AnswerVocabulary& vocab, bool answers_required = true);
void validate_question(const QuestionRecord& question);

std::string sample_to_json_line(const Sample& sample);
Sample sample_from_json_line(const std::string& line, const AnswerVocabulary& vocab, std::size_t line_no = 0);

/// Reads a JSONL dataset. All records must share one feature dimension.
std::vector<Sample> load_dataset(const std::filesystem::path& path, const AnswerVocabulary& vocab);
void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& path);

/// VQA soft accuracy: the ground-truth score of the predicted answer, 0 when absent.
double soft_accuracy(const std::string& predicted, const AnswerScores& gt);

}  // namespace css
