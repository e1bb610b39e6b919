#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "css/core.hpp"
#include "css/databench.hpp"
#include "css/model.hpp"
#include "css/random.hpp"
#include "css/saliency.hpp"

namespace css {

struct CssConfig {
  double eta = 0.65;                  // mass threshold for the dynamic number of critical objects
  double delta = 0.5;                 // V-CSS is taken when a U[0,1) draw is >= delta
  std::size_t initial_set_size = 8;   // |I|, objects kept by the lexical pre-selection
  std::size_t word_top_k = 1;         // critical words per question
  std::size_t answer_top_n = 5;       // probe answers excluded from the reassigned targets
  bool probe_uses_fusion = false;     // probe with the fused distribution instead of f_vqa
  std::uint64_t seed = 0;

  void validate() const;
};

struct ObjectSimilarity {
  std::int64_t object_id = 0;
  std::size_t index = 0;  // position in the image's object list
  double sim = 0.0;
};

/// Candidate critical objects ranked by lexical relatedness to the question/answer nouns.
struct InitialObjectSet {
  std::vector<ObjectSimilarity> members;  // sorted by sim descending, ties by index
  bool nouns_found = true;                // false: no nouns, every object kept with sim 0
};

/// Per-object SIM: max cosine between the object's category and any noun in the question or
/// ground-truth answers. Empty when no noun is found.
std::vector<double> object_similarities(const Sample& sample, const EmbeddingLexicon& lexicon);

InitialObjectSet initial_object_selection(const Sample& sample, const EmbeddingLexicon& lexicon,
                                          const CssConfig& config);

/// Smallest k such that the top-k softmax mass of `scores` exceeds eta. Ties in score are
/// ordered by lower position.
std::size_t dynamic_k(const std::vector<double>& scores, double eta);

struct ObjectPartition {
  std::vector<std::int64_t> critical;  // I+, highest contribution first
  std::vector<std::int64_t> rest;      // I- = I \ I+, image order
};

/// Picks I+ among the initial set by `object_scores` (indexed by image position).
ObjectPartition critical_object_selection(const ImageRecord& image, const InitialObjectSet& initial,
                                          const std::vector<double>& object_scores, const CssConfig& config);

struct WordSelection {
  std::vector<std::size_t> critical;  // token positions, highest contribution first
  QuestionRecord q_plus;              // everything but type and critical words masked
  QuestionRecord q_minus;             // critical words masked
};

/// Nullopt when every token belongs to the question type.
std::optional<WordSelection> critical_word_selection(const QuestionRecord& question,
                                                     const std::vector<double>& word_scores, const CssConfig& config);

struct AnswerAssignment {
  AnswerScores a_minus;                // gt \ a+, original scores kept
  std::vector<std::string> a_plus;     // probe top-N, most probable first
};

/// a- = {a in gt : a not in a+}.
AnswerScores exclude_answers(const AnswerScores& gt, const std::vector<std::string>& a_plus);

/// Runs the probe in eval mode and reassigns the ground truth. Parameters are never touched.
AnswerAssignment dynamic_answer_assign(VqaModel& model, const Sample& probe, const AnswerScores& gt,
                                       const CssConfig& config);

enum class CssKind { kVisual, kQuestion };
std::string to_string(CssKind kind);

enum class SkipReason { kNone, kSingleObject, kEmptyComplement, kTypeOnlyQuestion };
std::string to_string(SkipReason reason);

struct CounterfactualSample {
  Sample original;
  Sample counterfactual;  // (I-, Q, a-) or (I, Q-, a-)
  CssKind kind = CssKind::kVisual;
  std::vector<std::int64_t> masked_ids;  // V: I+
  std::vector<std::int64_t> kept_ids;    // V: I-
  std::vector<std::size_t> critical_words;
  std::vector<std::string> q_plus_tokens;
  std::vector<std::string> q_minus_tokens;
  AnswerScores assigned_answers;      // a-
  std::vector<std::string> probe_answers;  // a+
  InitialObjectSet initial_set;       // V only
  std::vector<double> saliency;       // s(a, .) for every object / word
};

struct SynthesisResult {
  std::optional<CounterfactualSample> sample;
  SkipReason skip = SkipReason::kNone;
};

/// V-CSS. `object_scores` may carry contributions computed earlier (e.g. before a parameter
/// update); otherwise they are computed from the model as it is now.
SynthesisResult synthesize_vcss(const Sample& sample, VqaModel& model, const EmbeddingLexicon& lexicon,
                                const CssConfig& config, const std::vector<double>* object_scores = nullptr);

/// Q-CSS, same conventions as synthesize_vcss.
SynthesisResult synthesize_qcss(const Sample& sample, VqaModel& model, const CssConfig& config,
                                const std::vector<double>* word_scores = nullptr);

/// Throws std::logic_error describing the first broken invariant.
void check_counterfactual(const CounterfactualSample& cf);

std::string counterfactual_to_json_line(const CounterfactualSample& cf);

struct CssStepResult {
  double original_loss = 0.0;
  std::optional<double> counterfactual_loss;
  CssKind branch = CssKind::kVisual;
  SkipReason skip = SkipReason::kNone;
};

/// One CSS training step: train on the original sample, synthesize a V-CSS or Q-CSS
/// counterfactual, then train on it. Contributions come from the parameters before the first
/// update; the answer probe sees the parameters after it.
CssStepResult css_train_step(const Sample& sample, VqaModel& model, const EmbeddingLexicon& lexicon,
                             const CssConfig& config, Rng& rng, double learning_rate);

}  // namespace css
