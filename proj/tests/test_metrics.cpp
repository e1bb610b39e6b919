#include <cmath>

#include "doctest.h"
#include "css/metrics.hpp"
#include "css/random.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace css;

namespace {

// fraction of size-k subsets on which every member is correct, by enumeration
double enumerate_consensus(const std::vector<bool>& correct, std::size_t k) {
  const std::size_t n = correct.size();
  double hits = 0.0, total = 0.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
    total += 1.0;
    bool all = true;
    for (std::size_t i = 0; i < n; ++i) {
      if ((mask >> i) & 1u) all = all && correct[i];
    }
    hits += all;
  }
  return hits / total;
}

}  // namespace

TEST_CASE("answer categories") {
  CategoryMap m;
  CHECK(m.category_of("how many") == AnswerCategory::kNumber);
  CHECK(m.category_of("is there") == AnswerCategory::kYesNo);
  CHECK(m.category_of("what color") == AnswerCategory::kOther);
  m.overrides["what color"] = AnswerCategory::kYesNo;
  CHECK(m.category_of("what color") == AnswerCategory::kYesNo);
}

TEST_CASE("accuracy report") {
  const auto vocab = testutil::colour_vocab();
  VqaModel m = testutil::small_model(vocab);
  CHECK_THROWS(accuracy_report(m, {}));

  Sample s = testutil::sample({"kite", "wall"}, "what color is the kite", 2, AnswerScores{{{"red", 1.0}}});
  const std::string predicted = vocab.at(m.predict(s).argmax());
  s.answers = AnswerScores{{{predicted, 1.0}}};
  Sample wrong = s;
  wrong.answers = AnswerScores{{{predicted == "blue" ? "red" : "blue", 1.0}}};
  Sample partial = s;
  partial.answers = AnswerScores{{{predicted, 0.6}}};
  const auto r = accuracy_report(m, {s, s, wrong, partial, s});
  CHECK(r.all == doctest::Approx((1 + 1 + 0 + 0.6 + 1) / 5.0));
  CHECK(r.count == 5u);
  CHECK(r.per_category.size() == 1u);
  CHECK(r.per_category.count(AnswerCategory::kOther) == 1u);

  const auto perfect = accuracy_report(m, {s, s});
  CHECK(perfect.all == 1.0);
}

TEST_CASE("average importance kernel") {
  CHECK(importance_of_top_k({0.9, 0.2}, {0.1, -0.5}, 1) == doctest::Approx(0.2));
  CHECK(importance_of_top_k({0.9, 0.2}, {0.1, -0.5}, 2) == doctest::Approx(0.55));
  CHECK(importance_of_top_k({0.7}, {0.3}, 1) == doctest::Approx(0.7));
  CHECK(importance_of_top_k({0.7}, {0.3}, 3) == doctest::Approx(0.7));
  CHECK(importance_of_top_k({0.3, 1.0, 0.1}, {0.0, 5.0, 0.1}, 1) == 1.0);
  CHECK_THROWS(importance_of_top_k({0.1}, {0.1, 0.2}, 1));
}

TEST_CASE("confidence improvement kernel") {
  CHECK(confidence_improvement_of({{0.9, 0.6, true}, {0.8, 0.1, false}}) == doctest::Approx(0.15));
  CHECK(confidence_improvement_of({{0.9, 0.6, false}, {0.8, 0.1, false}}) == 0.0);
  CHECK_THROWS(confidence_improvement_of({}));

  const auto vocab = testutil::colour_vocab();
  const VqaModel m = testutil::small_model(vocab);
  const Sample s = testutil::sample({"kite", "wall"}, "what color is the kite", 2, AnswerScores{{{"red", 1.0}}});
  CHECK(confidence_improvement(m, {{s, s}, {s, s}}) == 0.0);
}

TEST_CASE("consensus score") {
  const std::vector<bool> three_of_four = {true, true, false, true};
  CHECK(group_consensus(three_of_four, 1) == doctest::Approx(0.75));
  CHECK(group_consensus(three_of_four, 2) == doctest::Approx(0.5));
  CHECK(group_consensus(three_of_four, 4) == 0.0);
  CHECK(consensus_score_of({{true, true, true}, {true, true, true}}, 3) == 1.0);
  CHECK(consensus_score_of({{false, false}, {false, false}}, 1) == 0.0);
  CHECK_THROWS(group_consensus({true}, 2));

  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<bool>> groups(1 + rng.index(5));
    const std::size_t n = 2 + rng.index(7);
    for (auto& g : groups) {
      for (std::size_t i = 0; i < n; ++i) g.push_back(rng.uniform() < 0.6);
    }
    double previous = 1.0;
    for (std::size_t k = 1; k <= n; ++k) {
      double oracle = 0.0;
      for (const auto& g : groups) oracle += enumerate_consensus(g, k);
      oracle /= static_cast<double>(groups.size());
      const double cs = consensus_score_of(groups, k);
      CHECK(cs == oracle);
      CHECK(cs <= previous);
      previous = cs;
    }
  }
}

TEST_CASE("report rendering") {
  EvalReport r;
  r.accuracy.all = 0.5;
  r.accuracy.per_category[AnswerCategory::kYesNo] = 0.25;
  r.average_importance[1] = 0.75;
  r.consensus[1] = 0.4;
  r.confidence_improvement = 0.125;
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["accuracy"]["All"] == 0.5);
  CHECK(j["accuracy"]["Y/N"] == 0.25);
  CHECK(j["average_importance"]["top-1"] == 0.75);
  CHECK(j["consensus_score"]["k=1"] == 0.4);
  CHECK(j["confidence_improvement"] == 0.125);
  const std::string text = r.to_text();
  CHECK(text.find("50.00") != std::string::npos);
  CHECK(text.find("25.00") != std::string::npos);
  CHECK(text.find("75.00") != std::string::npos);
  CHECK(text.find("40.00") != std::string::npos);
  CHECK(text.find("12.50") != std::string::npos);
}
