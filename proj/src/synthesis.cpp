#include "css/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace css {

using ordered_json = nlohmann::ordered_json;

namespace {

// Positions sorted by value descending, ties by lower position.
std::vector<std::size_t> rank_descending(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

ordered_json ids_json(const std::vector<std::int64_t>& ids) { return ordered_json(ids); }

}  // namespace

void CssConfig::validate() const {
  if (!(eta > 0.0 && eta < 1.0)) throw std::invalid_argument("eta must lie in (0, 1)");
  if (!(delta >= 0.0 && delta <= 1.0)) throw std::invalid_argument("delta must lie in [0, 1]");
  if (initial_set_size < 1) throw std::invalid_argument("initial_set_size must be >= 1");
  if (word_top_k < 1) throw std::invalid_argument("word_top_k must be >= 1");
  if (answer_top_n < 1) throw std::invalid_argument("answer_top_n must be >= 1");
}

std::vector<double> object_similarities(const Sample& sample, const EmbeddingLexicon& lexicon) {
  std::vector<std::string> nouns;
  for (const auto& tok : sample.question.tokens) {
    if (lexicon.is_noun(tok)) nouns.push_back(tok);
  }
  for (const auto& [answer, score] : sample.answers.entries) {
    if (lexicon.is_noun(answer)) nouns.push_back(answer);
  }
  for (const auto& o : sample.image.objects) {
    if (!lexicon.contains(o.category)) {
      throw std::invalid_argument("object category '" + o.category + "' missing from the lexicon");
    }
  }
  if (nouns.empty()) return {};
  std::vector<double> sims;
  sims.reserve(sample.image.objects.size());
  for (const auto& o : sample.image.objects) {
    double best = -1.0;
    for (const auto& n : nouns) best = std::max(best, lexicon.cosine(o.category, n));
    sims.push_back(best);
  }
  return sims;
}

InitialObjectSet initial_object_selection(const Sample& sample, const EmbeddingLexicon& lexicon,
                                          const CssConfig& config) {
  InitialObjectSet out;
  const auto& objects = sample.image.objects;
  std::vector<double> sims = object_similarities(sample, lexicon);
  if (sims.empty()) {
    out.nouns_found = false;
    for (std::size_t i = 0; i < objects.size(); ++i) out.members.push_back({objects[i].object_id, i, 0.0});
    return out;
  }
  const auto order = rank_descending(sims);
  const std::size_t keep = std::min(config.initial_set_size, order.size());
  for (std::size_t r = 0; r < keep; ++r) {
    const std::size_t i = order[r];
    out.members.push_back({objects[i].object_id, i, sims[i]});
  }
  return out;
}

std::size_t dynamic_k(const std::vector<double>& scores, double eta) {
  if (scores.empty()) throw std::invalid_argument("dynamic_k needs at least one score");
  const auto order = rank_descending(scores);
  const double top = scores[order.front()];
  std::vector<double> weights;
  weights.reserve(order.size());
  double total = 0.0;
  for (std::size_t i : order) {
    weights.push_back(std::exp(scores[i] - top));
    total += weights.back();
  }
  double mass = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    mass += weights[k];
    if (mass / total > eta) return k + 1;
  }
  return weights.size();
}

ObjectPartition critical_object_selection(const ImageRecord& image, const InitialObjectSet& initial,
                                          const std::vector<double>& object_scores, const CssConfig& config) {
  if (initial.members.empty()) throw std::invalid_argument("initial object set is empty");
  if (object_scores.size() != image.objects.size()) {
    throw std::invalid_argument("one contribution score per object is required");
  }
  // Members in image order so that score ties resolve to the lowest object index.
  std::vector<ObjectSimilarity> members = initial.members;
  std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  std::vector<double> scores;
  for (const auto& m : members) scores.push_back(object_scores.at(m.index));

  const std::size_t k = dynamic_k(scores, config.eta);
  const auto order = rank_descending(scores);
  ObjectPartition out;
  std::set<std::int64_t> critical;
  for (std::size_t r = 0; r < k; ++r) {
    out.critical.push_back(members[order[r]].object_id);
    critical.insert(members[order[r]].object_id);
  }
  for (const auto& o : image.objects) {
    if (!critical.count(o.object_id)) out.rest.push_back(o.object_id);
  }
  return out;
}

std::optional<WordSelection> critical_word_selection(const QuestionRecord& question,
                                                     const std::vector<double>& word_scores, const CssConfig& config) {
  if (word_scores.size() != question.tokens.size()) {
    throw std::invalid_argument("one contribution score per token is required");
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = question.type_token_count; i < question.tokens.size(); ++i) candidates.push_back(i);
  if (candidates.empty()) return std::nullopt;
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return word_scores[a] > word_scores[b]; });
  candidates.resize(std::min(config.word_top_k, candidates.size()));

  WordSelection out;
  out.critical = candidates;
  const std::set<std::size_t> critical(candidates.begin(), candidates.end());
  out.q_minus = question;
  out.q_plus = question;
  out.q_minus.question_id += "-qminus";
  out.q_plus.question_id += "-qplus";
  for (std::size_t i = question.type_token_count; i < question.tokens.size(); ++i) {
    if (critical.count(i)) {
      out.q_minus.tokens[i] = std::string(kMaskToken);
    } else {
      out.q_plus.tokens[i] = std::string(kMaskToken);
    }
  }
  return out;
}

AnswerScores exclude_answers(const AnswerScores& gt, const std::vector<std::string>& a_plus) {
  const std::set<std::string> excluded(a_plus.begin(), a_plus.end());
  AnswerScores out;
  for (const auto& [answer, score] : gt.entries) {
    if (!excluded.count(answer)) out.entries.emplace(answer, score);
  }
  return out;
}

AnswerAssignment dynamic_answer_assign(VqaModel& model, const Sample& probe, const AnswerScores& gt,
                                       const CssConfig& config) {
  ScopedMode eval(model, Mode::kEval);
  const AnswerDistribution dist = config.probe_uses_fusion ? model.forward_fused(probe) : model.predict(probe);
  AnswerAssignment out;
  for (std::size_t idx : dist.top_n(config.answer_top_n)) out.a_plus.push_back(model.answers().at(idx));
  out.a_minus = exclude_answers(gt, out.a_plus);
  return out;
}

std::string to_string(CssKind kind) { return kind == CssKind::kVisual ? "V" : "Q"; }

std::string to_string(SkipReason reason) {
  switch (reason) {
    case SkipReason::kNone: return "none";
    case SkipReason::kSingleObject: return "single_object";
    case SkipReason::kEmptyComplement: return "empty_complement";
    case SkipReason::kTypeOnlyQuestion: return "type_only_question";
  }
  return "none";
}

SynthesisResult synthesize_vcss(const Sample& sample, VqaModel& model, const EmbeddingLexicon& lexicon,
                                const CssConfig& config, const std::vector<double>* object_scores) {
  if (sample.image.objects.size() <= 1) return {std::nullopt, SkipReason::kSingleObject};

  CounterfactualSample cf;
  cf.kind = CssKind::kVisual;
  cf.original = sample;
  cf.initial_set = initial_object_selection(sample, lexicon, config);
  cf.saliency = object_scores ? *object_scores : object_contributions(sample, model).scores;

  const ObjectPartition part = critical_object_selection(sample.image, cf.initial_set, cf.saliency, config);
  if (part.rest.empty()) return {std::nullopt, SkipReason::kEmptyComplement};
  cf.masked_ids = part.critical;
  cf.kept_ids = part.rest;

  const std::set<std::int64_t> masked(part.critical.begin(), part.critical.end());
  Sample probe = sample;
  probe.image.objects.clear();
  cf.counterfactual = sample;
  cf.counterfactual.image.objects.clear();
  cf.counterfactual.image.image_id += "-vcss";
  for (const auto& o : sample.image.objects) {
    (masked.count(o.object_id) ? probe : cf.counterfactual).image.objects.push_back(o);
  }

  AnswerAssignment assignment = dynamic_answer_assign(model, probe, sample.answers, config);
  cf.probe_answers = std::move(assignment.a_plus);
  cf.assigned_answers = assignment.a_minus;
  cf.counterfactual.answers = std::move(assignment.a_minus);
  return {std::move(cf), SkipReason::kNone};
}

SynthesisResult synthesize_qcss(const Sample& sample, VqaModel& model, const CssConfig& config,
                                const std::vector<double>* word_scores) {
  if (sample.question.type_token_count >= sample.question.tokens.size()) {
    return {std::nullopt, SkipReason::kTypeOnlyQuestion};
  }
  CounterfactualSample cf;
  cf.kind = CssKind::kQuestion;
  cf.original = sample;
  cf.saliency = word_scores ? *word_scores : word_contributions(sample, model).scores;

  auto selection = critical_word_selection(sample.question, cf.saliency, config);
  if (!selection) return {std::nullopt, SkipReason::kTypeOnlyQuestion};
  cf.critical_words = selection->critical;
  cf.q_plus_tokens = selection->q_plus.tokens;
  cf.q_minus_tokens = selection->q_minus.tokens;

  Sample probe = sample;
  probe.question = selection->q_plus;
  AnswerAssignment assignment = dynamic_answer_assign(model, probe, sample.answers, config);
  cf.probe_answers = std::move(assignment.a_plus);
  cf.assigned_answers = assignment.a_minus;
  cf.counterfactual = sample;
  cf.counterfactual.question = selection->q_minus;
  cf.counterfactual.answers = std::move(assignment.a_minus);
  return {std::move(cf), SkipReason::kNone};
}

void check_counterfactual(const CounterfactualSample& cf) {
  const std::set<std::string> probe(cf.probe_answers.begin(), cf.probe_answers.end());
  for (const auto& [answer, score] : cf.assigned_answers.entries) {
    if (probe.count(answer)) throw std::logic_error("a- intersects a+ at '" + answer + "'");
    auto it = cf.original.answers.entries.find(answer);
    if (it == cf.original.answers.entries.end() || it->second != score) {
      throw std::logic_error("a- is not a subset of the ground truth at '" + answer + "'");
    }
  }
  if (cf.counterfactual.answers != cf.assigned_answers) throw std::logic_error("counterfactual targets differ from a-");

  if (cf.kind == CssKind::kVisual) {
    std::set<std::int64_t> masked(cf.masked_ids.begin(), cf.masked_ids.end());
    std::set<std::int64_t> kept(cf.kept_ids.begin(), cf.kept_ids.end());
    if (masked.size() != cf.masked_ids.size() || kept.size() != cf.kept_ids.size()) {
      throw std::logic_error("duplicate object ids in partition");
    }
    if (masked.empty()) throw std::logic_error("I+ is empty");
    for (auto id : masked) {
      if (kept.count(id)) throw std::logic_error("I+ and I- overlap at object " + std::to_string(id));
    }
    std::set<std::int64_t> all;
    for (const auto& o : cf.original.image.objects) all.insert(o.object_id);
    std::set<std::int64_t> uni = masked;
    uni.insert(kept.begin(), kept.end());
    if (uni != all) throw std::logic_error("I+ and I- do not cover the image");
    std::set<std::int64_t> initial;
    for (const auto& m : cf.initial_set.members) initial.insert(m.object_id);
    for (auto id : masked) {
      if (!initial.count(id)) throw std::logic_error("critical object outside the initial set");
    }
    std::vector<std::int64_t> cf_ids;
    for (const auto& o : cf.counterfactual.image.objects) cf_ids.push_back(o.object_id);
    if (cf_ids != cf.kept_ids) throw std::logic_error("counterfactual image does not hold exactly I-");
    if (cf.counterfactual.question != cf.original.question) throw std::logic_error("V-CSS changed the question");
  } else {
    const auto& q = cf.original.question;
    const std::set<std::size_t> critical(cf.critical_words.begin(), cf.critical_words.end());
    if (cf.q_minus_tokens.size() != q.tokens.size() || cf.q_plus_tokens.size() != q.tokens.size()) {
      throw std::logic_error("masked questions changed length");
    }
    if (critical.empty()) throw std::logic_error("no critical word");
    for (std::size_t i = 0; i < q.tokens.size(); ++i) {
      const bool type = q.is_type_token(i);
      if (type && critical.count(i)) throw std::logic_error("question-type token selected as critical");
      const std::string expect_minus = critical.count(i) ? std::string(kMaskToken) : q.tokens[i];
      const std::string expect_plus = (type || critical.count(i)) ? q.tokens[i] : std::string(kMaskToken);
      if (cf.q_minus_tokens[i] != expect_minus) throw std::logic_error("Q- masks the wrong tokens");
      if (cf.q_plus_tokens[i] != expect_plus) throw std::logic_error("Q+ masks the wrong tokens");
    }
    if (cf.counterfactual.question.tokens != cf.q_minus_tokens) throw std::logic_error("counterfactual is not Q-");
    if (cf.counterfactual.image != cf.original.image) throw std::logic_error("Q-CSS changed the image");
  }
}

std::string counterfactual_to_json_line(const CounterfactualSample& cf) {
  ordered_json j;
  j["sample_id"] = cf.original.id();
  j["kind"] = to_string(cf.kind);
  j["original"] = ordered_json::parse(sample_to_json_line(cf.original));
  j["counterfactual"] = ordered_json::parse(sample_to_json_line(cf.counterfactual));
  j["masked_ids"] = ids_json(cf.masked_ids);
  j["kept_ids"] = ids_json(cf.kept_ids);
  j["critical_words"] = cf.critical_words;
  j["q_plus"] = cf.q_plus_tokens;
  j["q_minus"] = cf.q_minus_tokens;
  j["a_plus"] = cf.probe_answers;
  ordered_json a_minus = ordered_json::object();
  for (const auto& [answer, score] : cf.assigned_answers.entries) a_minus[answer] = score;
  j["a_minus"] = std::move(a_minus);
  ordered_json initial = ordered_json::array();
  for (const auto& m : cf.initial_set.members) initial.push_back({{"object_id", m.object_id}, {"sim", m.sim}});
  j["initial_set"] = std::move(initial);
  j["nouns_found"] = cf.initial_set.nouns_found;
  j["saliency"] = cf.saliency;
  return j.dump();
}

CssStepResult css_train_step(const Sample& sample, VqaModel& model, const EmbeddingLexicon& lexicon,
                             const CssConfig& config, Rng& rng, double learning_rate) {
  CssStepResult out;
  const double cond = rng.uniform();
  out.branch = cond >= config.delta ? CssKind::kVisual : CssKind::kQuestion;

  std::vector<double> scores = out.branch == CssKind::kVisual ? object_contributions(sample, model).scores
                                                                : word_contributions(sample, model).scores;
  out.original_loss = model.train_step(sample, learning_rate);

  const SynthesisResult synth = out.branch == CssKind::kVisual
                                    ? synthesize_vcss(sample, model, lexicon, config, &scores)
                                    : synthesize_qcss(sample, model, config, &scores);
  out.skip = synth.skip;
  if (synth.sample) {
    out.counterfactual_loss = model.train_step(synth.sample->counterfactual, learning_rate, false);
  }
  return out;
}

}  // namespace css
