#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "css/core.hpp"
#include "css/databench.hpp"
#include "helpers.hpp"

using namespace css;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "csskit_test_core";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST_CASE("vocabulary rejects duplicates and round-trips") {
  CHECK_THROWS_AS(AnswerVocabulary({"red", "red"}), DatasetError);
  const AnswerVocabulary v = testutil::colour_vocab();
  CHECK(v.index_of("green") == 2u);
  CHECK_FALSE(v.index_of("purple").has_value());
  const auto p = temp_file("vocab.json");
  v.save(p);
  CHECK(AnswerVocabulary::load(p) == v);
}

TEST_CASE("soft accuracy") {
  CHECK(soft_accuracy("red", AnswerScores{{{"red", 1.0}}}) == 1.0);
  CHECK(soft_accuracy("blue", AnswerScores{{{"red", 1.0}}}) == 0.0);
  CHECK(soft_accuracy("maroon", AnswerScores{{{"red", 1.0}, {"maroon", 0.6}}}) == 0.6);
}

TEST_CASE("answer distribution helpers") {
  const AnswerDistribution d{{0.1, 0.4, 0.4, 0.1}};
  CHECK(d.argmax() == 1u);
  CHECK(d.top_n(3) == std::vector<std::size_t>{1, 2, 0});
  const AnswerVocabulary v({"a", "b", "c", "d"});
  CHECK(d.gt_mass(AnswerScores{{{"b", 1.0}, {"d", 0.5}}}, v) == doctest::Approx(0.45));
}

TEST_CASE("sample validation") {
  const auto vocab = testutil::colour_vocab();
  Sample s = testutil::sample({"kite", "wall"}, "what color is the kite", 2, AnswerScores{{{"red", 1.0}}});
  CHECK_NOTHROW(validate_sample(s, vocab));

  SUBCASE("question type must match the leading tokens") {
    s.question.question_type = "what";
    CHECK_THROWS_AS(validate_sample(s, vocab), DatasetError);
  }
  SUBCASE("duplicate object ids") {
    s.image.objects[1].object_id = s.image.objects[0].object_id;
    CHECK_THROWS_AS(validate_sample(s, vocab), DatasetError);
  }
  SUBCASE("ragged features") {
    s.image.objects[1].feature.pop_back();
    CHECK_THROWS_AS(validate_sample(s, vocab), DatasetError);
  }
  SUBCASE("unknown answer") {
    s.answers.entries["purple"] = 1.0;
    CHECK_THROWS_AS(validate_sample(s, vocab), DatasetError);
  }
  SUBCASE("empty answers only allowed for counterfactuals") {
    s.answers.entries.clear();
    CHECK_THROWS_AS(validate_sample(s, vocab), DatasetError);
    CHECK_NOTHROW(validate_sample(s, vocab, false));
  }
}

TEST_CASE("dataset files") {
  const auto vocab = testutil::colour_vocab();
  const Sample s = testutil::sample({"kite", "wall"}, "what color is the kite", 2, AnswerScores{{{"red", 1.0}}});

  SUBCASE("empty file gives an empty list") {
    const auto p = temp_file("empty.jsonl");
    save_dataset({}, p);
    CHECK(fs::file_size(p) == 0u);
    CHECK(load_dataset(p, vocab).empty());
  }
  SUBCASE("one sample round-trips byte for byte") {
    const auto p = temp_file("one.jsonl");
    save_dataset({s}, p);
    const auto loaded = load_dataset(p, vocab);
    REQUIRE(loaded.size() == 1u);
    CHECK(loaded[0] == s);
    CHECK(sample_to_json_line(loaded[0]) == sample_to_json_line(s));
  }
  SUBCASE("feature dimension mismatch names the line") {
    Sample other = s;
    other.question.question_id = "q1";
    for (auto& o : other.image.objects) o.feature.pop_back();
    const auto p = temp_file("mismatch.jsonl");
    write_text(p, sample_to_json_line(s) + "\n" + sample_to_json_line(other) + "\n");
    try {
      load_dataset(p, vocab);
      FAIL("expected a DatasetError");
    } catch (const DatasetError& e) {
      CHECK(e.line() == 2u);
    }
  }
  SUBCASE("missing and extra fields are rejected") {
    std::string line = sample_to_json_line(s);
    CHECK_THROWS_AS(sample_from_json_line(line.substr(0, line.size() - 1) + ",\"extra\":1}", vocab, 1), DatasetError);
    const auto pos = line.find(",\"split_tag\"");
    CHECK_THROWS_AS(sample_from_json_line(line.substr(0, pos) + "}", vocab, 1), DatasetError);
    CHECK_THROWS_AS(sample_from_json_line("not json", vocab, 3), DatasetError);
  }
}

TEST_CASE("generated samples round-trip") {
  GeneratorSpec spec = GeneratorSpec::defaults();
  spec.train_size = 100;
  spec.test_size = 0;
  const auto data = generate_dataset(spec);
  const auto p = temp_file("gen.jsonl");
  save_dataset(data.train, p);
  const auto loaded = load_dataset(p, data.vocab);
  REQUIRE(loaded.size() == data.train.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) CHECK(loaded[i] == data.train[i]);
}
