#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "css/core.hpp"
#include "css/databench.hpp"
#include "css/model.hpp"

namespace css {

enum class AnswerCategory { kYesNo, kNumber, kOther };

std::string to_string(AnswerCategory c);

/// Question type -> reporting category. Unmapped types fall back to the default rule:
/// "is ..." types are yes/no, "how many" is number, everything else is other.
struct CategoryMap {
  std::map<std::string, AnswerCategory> overrides;
  AnswerCategory category_of(const std::string& question_type) const;
};

struct AccuracyReport {
  double all = 0.0;
  std::size_t count = 0;
  std::map<AnswerCategory, double> per_category;  // empty categories omitted
  std::map<AnswerCategory, std::size_t> per_category_count;
};

/// Mean soft accuracy of the model's argmax prediction, overall and per category.
AccuracyReport accuracy_report(const VqaModel& model, const std::vector<Sample>& samples,
                               const CategoryMap& categories = {});

/// Mean SIM of the k objects with largest |contribution|; all objects when fewer than k.
double importance_of_top_k(const std::vector<double>& sims, const std::vector<double>& contributions, std::size_t k);

/// AI(k) averaged over samples. Samples whose question/answer has no noun are skipped.
double average_importance(const VqaModel& model, const std::vector<Sample>& samples, const EmbeddingLexicon& lexicon,
                          std::size_t k);

struct ConfidencePair {
  Sample original;
  Sample removed;  // critical noun deleted
};

struct ConfidenceTerm {
  double mass_original = 0.0;
  double mass_removed = 0.0;
  bool correct = false;  // the prediction on the original question is a ground-truth answer
};

/// Σ (P(a|I,Q) − P(a|I,Q*))·1(correct) / #pairs.
double confidence_improvement_of(const std::vector<ConfidenceTerm>& terms);
double confidence_improvement(const VqaModel& model, const std::vector<ConfidencePair>& pairs);

/// Fraction of size-k subsets of one group on which every member is correct.
double group_consensus(const std::vector<bool>& correct, std::size_t k);
double consensus_score_of(const std::vector<std::vector<bool>>& groups, std::size_t k);
/// CS(k); a member is correct when its soft accuracy is positive.
double consensus_score(const VqaModel& model, const std::vector<RephrasingGroup>& groups, std::size_t k);

struct EvalReport {
  AccuracyReport accuracy;
  std::map<std::size_t, double> average_importance;  // k -> AI(k)
  std::optional<double> confidence_improvement;
  std::map<std::size_t, double> consensus;            // k -> CS(k)

  std::string to_json() const;
  /// Three aligned panels: accuracy, AI, CS/CI.
  std::string to_text() const;
};

/// All three panels for one model. CI pairs come from test samples whose question names its
/// target noun; groups may be empty, in which case the CS panel is left empty.
EvalReport evaluate(const VqaModel& model, const std::vector<Sample>& test, const EmbeddingLexicon& lexicon,
                    const std::vector<RephrasingGroup>& groups, const std::vector<std::size_t>& ai_k,
                    const std::vector<std::size_t>& cs_k);

}  // namespace css
