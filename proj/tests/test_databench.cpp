#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "css/databench.hpp"
#include "helpers.hpp"

using namespace css;

namespace {

const GeneratedData& default_data() {
  static const GeneratedData data = generate_dataset(GeneratorSpec::defaults());
  return data;
}

std::map<std::string, std::map<std::string, double>> answer_distribution(const std::vector<Sample>& samples) {
  std::map<std::string, std::map<std::string, double>> counts;
  std::map<std::string, double> totals;
  for (const auto& s : samples) {
    counts[s.question.question_type][s.answers.entries.begin()->first] += 1.0;
    totals[s.question.question_type] += 1.0;
  }
  for (auto& [type, dist] : counts) {
    for (auto& [a, c] : dist) c /= totals[type];
  }
  return counts;
}

std::string category_of_noun(const GeneratorSpec& spec, const std::string& noun) {
  for (const auto& [cat, alias] : spec.aliases) {
    if (alias == noun) return cat;
  }
  return noun;
}

// nearest centroid over one block of the feature vector, fitted on the first half, scored on the second
double nearest_centroid_accuracy(const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  const std::size_t half = rows.size() / 2;
  std::map<std::string, std::vector<double>> centroid;
  std::map<std::string, double> n;
  for (std::size_t i = 0; i < half; ++i) {
    auto& c = centroid[rows[i].first];
    c.resize(rows[i].second.size(), 0.0);
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += rows[i].second[j];
    n[rows[i].first] += 1.0;
  }
  for (auto& [label, c] : centroid) {
    for (auto& x : c) x /= n[label];
  }
  std::size_t correct = 0;
  for (std::size_t i = half; i < rows.size(); ++i) {
    std::string best;
    double best_d = 1e300;
    for (const auto& [label, c] : centroid) {
      double d = 0.0;
      for (std::size_t j = 0; j < c.size(); ++j) d += (c[j] - rows[i].second[j]) * (c[j] - rows[i].second[j]);
      if (d < best_d) {
        best_d = d;
        best = label;
      }
    }
    correct += best == rows[i].first;
  }
  return static_cast<double>(correct) / static_cast<double>(rows.size() - half);
}

}  // namespace

TEST_CASE("generator spec validation") {
  GeneratorSpec spec = GeneratorSpec::defaults();
  CHECK_NOTHROW(spec.validate());
  spec.bias_skew = 0.5;
  CHECK_THROWS(spec.validate());
  spec = GeneratorSpec::defaults();
  spec.visual_dim = 10;
  CHECK_THROWS(spec.validate());
  spec = GeneratorSpec::defaults();
  spec.aliases["tie"] = "shirt";
  CHECK_THROWS(spec.validate());
}

TEST_CASE("train head answer frequency tracks bias_skew") {
  const auto& data = default_data();
  const auto dist = answer_distribution(data.train);
  const auto& heads = data.priors.train_head;
  CHECK(dist.at("what color").at(heads.at("what color")) >= 0.77);
  CHECK(dist.at("what color").at(heads.at("what color")) <= 0.83);
  for (const auto& [type, head] : heads) CHECK(head != data.priors.test_head.at(type));
}

TEST_CASE("train and test priors differ") {
  const auto& data = default_data();
  const auto train = answer_distribution(data.train);
  const auto test = answer_distribution(data.test);
  for (const auto& [type, dist] : train) {
    std::set<std::string> answers;
    for (const auto& [a, p] : dist) answers.insert(a);
    for (const auto& [a, p] : test.at(type)) answers.insert(a);
    double tv = 0.0;
    for (const auto& a : answers) {
      const double p = dist.count(a) ? dist.at(a) : 0.0;
      const double q = test.at(type).count(a) ? test.at(type).at(a) : 0.0;
      tv += std::abs(p - q) / 2.0;
    }
    CAPTURE(type);
    CHECK(tv >= (2 * 0.8 - 1) - 0.05);
  }
}

TEST_CASE("question-only oracle fails on the test split") {
  const auto& data = default_data();
  std::map<std::string, std::map<std::string, int>> counts;
  for (const auto& s : data.train) counts[s.question.text()][s.answers.entries.begin()->first]++;
  std::map<std::string, std::map<std::string, int>> by_type;
  for (const auto& s : data.train) by_type[s.question.question_type][s.answers.entries.begin()->first]++;
  auto best = [](const std::map<std::string, int>& m) {
    std::string arg;
    int top = -1;
    for (const auto& [a, c] : m) {
      if (c > top) {
        top = c;
        arg = a;
      }
    }
    return arg;
  };
  double correct = 0.0;
  for (const auto& s : data.test) {
    auto it = counts.find(s.question.text());
    const std::string guess = it != counts.end() ? best(it->second) : best(by_type[s.question.question_type]);
    correct += soft_accuracy(guess, s.answers);
  }
  CHECK(correct / static_cast<double>(data.test.size()) < 1.0 - 0.8 + 0.1);
}

TEST_CASE("features are informative") {
  const GeneratorSpec spec = GeneratorSpec::defaults();
  const auto& data = default_data();
  const auto lex = build_embedding_lexicon(spec);
  std::vector<std::pair<std::string, std::vector<double>>> categories, colours;
  const std::size_t nc = spec.categories.size();
  for (const auto& s : data.train) {
    for (const auto& o : s.image.objects) {
      categories.push_back({o.category, std::vector<double>(o.feature.begin(), o.feature.begin() + nc)});
    }
    if (s.question.question_type != "what color") continue;
    const std::string target = category_of_noun(spec, s.question.tokens[*target_noun_position(s.question, lex)]);
    for (const auto& o : s.image.objects) {
      if (o.category == target) {
        colours.push_back({s.answers.entries.begin()->first,
                           std::vector<double>(o.feature.begin() + nc, o.feature.begin() + nc + spec.colors.size())});
      }
    }
  }
  REQUIRE(colours.size() > 500u);
  CHECK(nearest_centroid_accuracy(categories) >= 0.95);
  CHECK(nearest_centroid_accuracy(colours) >= 0.95);
}

TEST_CASE("generation is deterministic and valid") {
  GeneratorSpec spec = GeneratorSpec::defaults();
  spec.train_size = 50;
  spec.test_size = 20;
  const auto a = generate_dataset(spec);
  const auto b = generate_dataset(spec);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  for (const auto& s : a.train) CHECK_NOTHROW(validate_sample(s, a.vocab));
  spec.seed = 8;
  CHECK_FALSE(generate_dataset(spec).train == a.train);

  spec.train_size = 0;
  spec.test_size = 0;
  const auto empty = generate_dataset(spec);
  CHECK(empty.train.empty());
  CHECK(empty.test.empty());
}

TEST_CASE("embedding lexicon") {
  const GeneratorSpec spec = GeneratorSpec::defaults();
  const auto lex = build_embedding_lexicon(spec);
  CHECK(lex.to_json() == build_embedding_lexicon(spec).to_json());
  CHECK(EmbeddingLexicon::from_json(lex.to_json()) == lex);

  std::set<std::pair<std::string, std::string>> related;
  for (const auto& [cat, alias] : spec.aliases) {
    related.insert({cat, alias});
    related.insert({alias, cat});
    CHECK(lex.cosine(cat, alias) >= 0.9);
    CHECK(lex.is_noun(alias));
  }
  for (const auto& [a, ea] : lex.entries()) {
    double norm = 0.0;
    for (double x : ea.vector) norm += x * x;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lex.cosine(a, a) == doctest::Approx(1.0));
    for (const auto& [b, eb] : lex.entries()) {
      if (a < b && !related.count({a, b})) {
        CAPTURE(a);
        CAPTURE(b);
        CHECK(lex.cosine(a, b) <= 0.3);
      }
    }
  }
  for (const auto& c : spec.categories) CHECK(lex.is_noun(c));
  CHECK_FALSE(lex.is_noun("what"));
}

TEST_CASE("rephrasings") {
  const GeneratorSpec spec = GeneratorSpec::defaults();
  const auto lex = build_embedding_lexicon(spec);
  const auto& data = default_data();
  for (std::size_t i = 0; i < 50; ++i) {
    const Sample& s = data.test[i];
    const auto group = generate_rephrasings(s, 4, spec);
    REQUIRE(group.members.size() == 4u);
    CHECK(group.members[0] == s);
    const std::string noun = s.question.tokens[*target_noun_position(s.question, lex)];
    std::set<std::vector<std::string>> texts;
    for (const auto& m : group.members) {
      CHECK(m.answers == s.answers);
      CHECK(m.image == s.image);
      CHECK(m.question.question_type == s.question.question_type);
      CHECK(std::find(m.question.tokens.begin(), m.question.tokens.end(), noun) != m.question.tokens.end());
      CHECK_NOTHROW(validate_sample(m, data.vocab));
      texts.insert(m.question.tokens);
    }
    CHECK(texts.size() == 4u);
    CHECK(rephrasing_group_from_json_line(rephrasing_group_to_json_line(group), data.vocab).members == group.members);
  }
  CHECK(generate_rephrasings(data.test[0], 2, spec).members.size() == 2u);
  CHECK(generate_rephrasings(data.test[3], 3, spec).members == generate_rephrasings(data.test[3], 3, spec).members);
}

TEST_CASE("critical word removal") {
  const auto lex = testutil::tie_lexicon();
  const Sample s = testutil::sample({"tie", "wall"}, "what color is the tie", 2, AnswerScores{{{"green", 1.0}}});
  const Sample removed = build_critical_word_removed(s, lex);
  CHECK(removed.question.text() == "what color is the");
  CHECK(removed.question.tokens.size() == s.question.tokens.size() - 1);
  CHECK(removed.image == s.image);
  CHECK(removed.answers == s.answers);
  auto tokens = removed.question.tokens;
  tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(*target_noun_position(s.question, lex)), "tie");
  CHECK(tokens == s.question.tokens);

  const Sample no_noun = testutil::sample({"tie"}, "what color is it", 2, AnswerScores{{{"green", 1.0}}});
  CHECK_THROWS(build_critical_word_removed(no_noun, lex));
}
