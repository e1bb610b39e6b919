#include "css/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "css/saliency.hpp"
#include "css/synthesis.hpp"
#include "json.hpp"

namespace css {

using ordered_json = nlohmann::ordered_json;

namespace {

double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return std::round(r);
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%7.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string to_string(AnswerCategory c) {
  switch (c) {
    case AnswerCategory::kYesNo: return "Y/N";
    case AnswerCategory::kNumber: return "Num";
    case AnswerCategory::kOther: return "Other";
  }
  return "Other";
}

AnswerCategory CategoryMap::category_of(const std::string& question_type) const {
  if (auto it = overrides.find(question_type); it != overrides.end()) return it->second;
  if (question_type.rfind("how many", 0) == 0) return AnswerCategory::kNumber;
  if (question_type.rfind("is ", 0) == 0 || question_type == "is") return AnswerCategory::kYesNo;
  return AnswerCategory::kOther;
}

AccuracyReport accuracy_report(const VqaModel& model, const std::vector<Sample>& samples,
                               const CategoryMap& categories) {
  if (samples.empty()) throw std::invalid_argument("accuracy_report on an empty split");
  AccuracyReport out;
  std::map<AnswerCategory, double> sums;
  double total = 0.0;
  for (const auto& s : samples) {
    const std::string predicted = model.answers().at(model.predict(s).argmax());
    const double acc = soft_accuracy(predicted, s.answers);
    total += acc;
    const auto c = categories.category_of(s.question.question_type);
    sums[c] += acc;
    ++out.per_category_count[c];
  }
  out.count = samples.size();
  out.all = total / static_cast<double>(samples.size());
  for (const auto& [c, sum] : sums) out.per_category[c] = sum / static_cast<double>(out.per_category_count[c]);
  return out;
}

double importance_of_top_k(const std::vector<double>& sims, const std::vector<double>& contributions, std::size_t k) {
  if (sims.size() != contributions.size() || sims.empty()) {
    throw std::invalid_argument("importance_of_top_k: need one SIM and one contribution per object");
  }
  std::vector<std::size_t> order(sims.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(contributions[a]) > std::abs(contributions[b]); });
  const std::size_t take = std::min(k, order.size());
  double sum = 0.0;
  for (std::size_t r = 0; r < take; ++r) sum += sims[order[r]];
  return sum / static_cast<double>(take);
}

double average_importance(const VqaModel& model, const std::vector<Sample>& samples, const EmbeddingLexicon& lexicon,
                          std::size_t k) {
  if (k == 0) throw std::invalid_argument("AI needs k >= 1");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const auto sims = object_similarities(s, lexicon);
    if (sims.empty() || s.answers.empty()) continue;
    sum += importance_of_top_k(sims, object_contributions(s, model).scores, k);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("no sample has a noun to score AI against");
  return sum / static_cast<double>(n);
}

double confidence_improvement_of(const std::vector<ConfidenceTerm>& terms) {
  if (terms.empty()) throw std::invalid_argument("CI over an empty pair list");
  double sum = 0.0;
  for (const auto& t : terms) {
    if (t.correct) sum += t.mass_original - t.mass_removed;
  }
  return sum / static_cast<double>(terms.size());
}

double confidence_improvement(const VqaModel& model, const std::vector<ConfidencePair>& pairs) {
  std::vector<ConfidenceTerm> terms;
  terms.reserve(pairs.size());
  for (const auto& pair : pairs) {
    const AnswerDistribution p = model.predict(pair.original);
    const AnswerDistribution p_star = model.predict(pair.removed);
    ConfidenceTerm t;
    t.mass_original = p.gt_mass(pair.original.answers, model.answers());
    t.mass_removed = p_star.gt_mass(pair.original.answers, model.answers());
    t.correct = pair.original.answers.score_of(model.answers().at(p.argmax())) > 0.0;
    terms.push_back(t);
  }
  return confidence_improvement_of(terms);
}

double group_consensus(const std::vector<bool>& correct, std::size_t k) {
  if (k == 0 || correct.size() < k) throw std::invalid_argument("group smaller than k");
  const auto c = static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
  return binomial(c, k) / binomial(correct.size(), k);
}

double consensus_score_of(const std::vector<std::vector<bool>>& groups, std::size_t k) {
  if (groups.empty()) throw std::invalid_argument("CS over no groups");
  double sum = 0.0;
  for (const auto& g : groups) sum += group_consensus(g, k);
  return sum / static_cast<double>(groups.size());
}

double consensus_score(const VqaModel& model, const std::vector<RephrasingGroup>& groups, std::size_t k) {
  std::vector<std::vector<bool>> correctness;
  correctness.reserve(groups.size());
  for (const auto& g : groups) {
    std::vector<bool> row;
    for (const auto& m : g.members) {
      row.push_back(soft_accuracy(model.answers().at(model.predict(m).argmax()), m.answers) > 0.0);
    }
    correctness.push_back(std::move(row));
  }
  return consensus_score_of(correctness, k);
}

EvalReport evaluate(const VqaModel& model, const std::vector<Sample>& test, const EmbeddingLexicon& lexicon,
                    const std::vector<RephrasingGroup>& groups, const std::vector<std::size_t>& ai_k,
                    const std::vector<std::size_t>& cs_k) {
  EvalReport r;
  r.accuracy = accuracy_report(model, test);
  for (auto k : ai_k) r.average_importance[k] = average_importance(model, test, lexicon, k);
  std::vector<ConfidencePair> pairs;
  for (const auto& s : test) {
    if (s.answers.entries.empty() || !target_noun_position(s.question, lexicon)) continue;
    pairs.push_back({s, build_critical_word_removed(s, lexicon)});
  }
  if (!pairs.empty()) r.confidence_improvement = confidence_improvement(model, pairs);
  if (!groups.empty()) {
    for (auto k : cs_k) r.consensus[k] = consensus_score(model, groups, k);
  }
  return r;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  ordered_json acc;
  acc["All"] = accuracy.all;
  for (const auto& [c, v] : accuracy.per_category) acc[to_string(c)] = v;
  j["accuracy"] = std::move(acc);
  ordered_json ai = ordered_json::object();
  for (const auto& [k, v] : average_importance) ai["top-" + std::to_string(k)] = v;
  j["average_importance"] = std::move(ai);
  ordered_json cs = ordered_json::object();
  for (const auto& [k, v] : consensus) cs["k=" + std::to_string(k)] = v;
  j["consensus_score"] = std::move(cs);
  j["confidence_improvement"] = confidence_improvement ? ordered_json(*confidence_improvement) : ordered_json();
  return j.dump(2);
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "(a) Accuracy (%)\n";
  out << "      All";
  for (const auto& [c, v] : accuracy.per_category) {
    char h[16];
    std::snprintf(h, sizeof(h), " %7s", to_string(c).c_str());
    out << h;
  }
  out << "\n  " << percent(accuracy.all);
  for (const auto& [c, v] : accuracy.per_category) out << " " << percent(v);
  out << "\n\n(b) Average importance (%)\n ";
  for (const auto& [k, v] : average_importance) {
    char h[16];
    std::snprintf(h, sizeof(h), "   Top-%zu", k);
    out << h;
  }
  out << "\n ";
  for (const auto& [k, v] : average_importance) out << " " << percent(v);
  out << "\n\n(c) Consensus score CS(k) (%) | CI (%)\n ";
  for (const auto& [k, v] : consensus) {
    char h[16];
    std::snprintf(h, sizeof(h), "     k=%zu", k);
    out << h;
  }
  out << " |      CI\n ";
  for (const auto& [k, v] : consensus) out << " " << percent(v);
  out << " | " << (confidence_improvement ? percent(*confidence_improvement) : std::string("      -"));
  out << "\n";
  return out.str();
}

}  // namespace css
