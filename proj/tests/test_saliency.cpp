#include <cmath>

#include "doctest.h"
#include "css/random.hpp"
#include "css/saliency.hpp"
#include "helpers.hpp"

using namespace css;

namespace {

// P(a) = f(Σ_j v_ij) summed over objects, with the encoded rows equal to the raw features.
class StubPredictor : public DifferentiablePredictor {
 public:
  explicit StubPredictor(bool squash) : squash_(squash) {}

  EncodedImage encode_image(const ImageRecord& image) const override {
    EncodedImage out{Tensor(image.objects.size(), image.objects.front().feature.size())};
    for (std::size_t i = 0; i < image.objects.size(); ++i) {
      for (std::size_t c = 0; c < out.features.cols; ++c) out.features.at(i, c) = image.objects[i].feature[c];
    }
    return out;
  }
  EncodedQuestion encode_question(const QuestionRecord& q) const override {
    EncodedQuestion out;
    out.word_features = Tensor(q.tokens.size(), 2, 0.0);
    return out;
  }
  double answer_mass(const EncodedImage& v, const EncodedQuestion&, const AnswerScores&) const override {
    double total = 0.0;
    for (double x : v.features.values) total += x;
    return squash_ ? 1.0 / (1.0 + std::exp(-total)) : total;
  }
  MassGradients answer_mass_gradients(const EncodedImage& v, const EncodedQuestion& q,
                                      const AnswerScores& gt) const override {
    MassGradients g;
    g.mass = answer_mass(v, q, gt);
    const double slope = squash_ ? g.mass * (1.0 - g.mass) : 1.0;
    g.d_objects = Tensor(v.features.rows, v.features.cols, slope);
    g.d_words = Tensor(q.word_features.rows, q.word_features.cols, 0.0);
    return g;
  }

 private:
  bool squash_;
};

Sample one_object_sample() {
  Sample s = testutil::sample({"kite"}, "what color is the kite", 2, AnswerScores{{{"red", 1.0}}});
  s.image.objects[0].feature = {0.2, -0.1, 0.3, 0.05};
  return s;
}

}  // namespace

TEST_CASE("stub predictors give the analytic contribution") {
  const Sample s = one_object_sample();
  const double dh = 4.0;

  const StubPredictor linear(false);
  const auto lin = object_contributions(s, linear);
  REQUIRE(lin.scores.size() == 1u);
  CHECK(lin.scores[0] == dh);
  CHECK(finite_difference_contribution(s, linear, ElementKind::kObject, 0, 1e-4) == doctest::Approx(dh).epsilon(1e-9));

  const StubPredictor squashed(true);
  const double p = 1.0 / (1.0 + std::exp(-0.45));
  CHECK(object_contributions(s, squashed).scores[0] == doctest::Approx(dh * p * (1.0 - p)).epsilon(1e-12));
}

TEST_CASE("contributions need ground truth") {
  Sample s = one_object_sample();
  s.answers.entries.clear();
  const StubPredictor linear(false);
  CHECK_THROWS_AS(object_contributions(s, linear), std::invalid_argument);
  CHECK_THROWS_AS(word_contributions(s, linear), std::invalid_argument);
}

TEST_CASE("model contributions match central differences") {
  const auto vocab = testutil::colour_vocab();
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const VqaModel m = testutil::small_model(vocab, 4, 5, {}, 100 + static_cast<std::uint64_t>(trial));
    Sample s = testutil::sample({"kite", "wall", "dog", "tie"}, "what color is the kite", 2,
                                AnswerScores{{{vocab.at(rng.index(vocab.size())), 1.0}}});
    for (auto& o : s.image.objects) {
      for (auto& x : o.feature) x = rng.uniform(-1.0, 1.0);
    }
    const auto objects = object_contributions(s, m);
    const auto words = word_contributions(s, m);
    REQUIRE(objects.scores.size() == 4u);
    REQUIRE(words.scores.size() == 5u);
    for (std::size_t i = 0; i < objects.scores.size(); ++i) {
      const double fd = finite_difference_contribution(s, m, ElementKind::kObject, i, 1e-4);
      CHECK(std::abs(fd - objects.scores[i]) <= 1e-4 * std::max(std::abs(fd), 1e-6) + 1e-10);
    }
    for (std::size_t j = 0; j < words.scores.size(); ++j) {
      const double fd = finite_difference_contribution(s, m, ElementKind::kWord, j, 1e-4);
      CHECK(std::abs(fd - words.scores[j]) <= 1e-4 * std::max(std::abs(fd), 1e-6) + 1e-10);
    }
  }
}

TEST_CASE("halving epsilon roughly quarters the finite-difference error") {
  const auto vocab = testutil::colour_vocab();
  const VqaModel m = testutil::small_model(vocab, 4, 5, {}, 9);
  Sample s = testutil::sample({"kite", "wall"}, "what color is the kite", 2, AnswerScores{{{"blue", 1.0}}});
  const double exact = object_contributions(s, m).scores[0];
  const double e1 = std::abs(finite_difference_contribution(s, m, ElementKind::kObject, 0, 0.1) - exact);
  const double e2 = std::abs(finite_difference_contribution(s, m, ElementKind::kObject, 0, 0.05) - exact);
  REQUIRE(e1 > 0.0);
  CHECK(e2 / e1 == doctest::Approx(0.25).epsilon(0.2));
}

TEST_CASE("mask-only question scores just its own rows") {
  const auto vocab = testutil::colour_vocab();
  const VqaModel m = testutil::small_model(vocab);
  Sample s = testutil::sample({"kite"}, "[MASK]", 1, AnswerScores{{{"red", 1.0}}});
  const auto w = word_contributions(s, m);
  CHECK(w.scores.size() == 1u);
  CHECK(std::isfinite(w.scores[0]));
}
