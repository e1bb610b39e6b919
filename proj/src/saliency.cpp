#include "css/saliency.hpp"

#include <stdexcept>

namespace css {

namespace {

void require_answers(const Sample& sample) {
  if (sample.answers.empty()) {
    throw std::invalid_argument("saliency needs ground-truth answers (sample '" + sample.id() + "')");
  }
}

std::vector<double> row_sums(const Tensor& t) {
  std::vector<double> out(t.rows, 0.0);
  for (std::size_t r = 0; r < t.rows; ++r) {
    for (double v : t.row(r)) out[r] += v;
  }
  return out;
}

}  // namespace

std::string to_string(ElementKind kind) { return kind == ElementKind::kObject ? "object" : "word"; }

SaliencyScores object_contributions(const Sample& sample, const DifferentiablePredictor& predictor) {
  require_answers(sample);
  const MassGradients g = predictor.answer_mass_gradients(predictor.encode_image(sample.image),
                                                          predictor.encode_question(sample.question), sample.answers);
  return {ElementKind::kObject, g.mass, row_sums(g.d_objects)};
}

SaliencyScores word_contributions(const Sample& sample, const DifferentiablePredictor& predictor) {
  require_answers(sample);
  const MassGradients g = predictor.answer_mass_gradients(predictor.encode_image(sample.image),
                                                          predictor.encode_question(sample.question), sample.answers);
  return {ElementKind::kWord, g.mass, row_sums(g.d_words)};
}

double finite_difference_contribution(const Sample& sample, const DifferentiablePredictor& predictor,
                                      ElementKind kind, std::size_t index, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  EncodedImage v = predictor.encode_image(sample.image);
  EncodedQuestion q = predictor.encode_question(sample.question);
  Tensor& target = kind == ElementKind::kObject ? v.features : q.word_features;
  if (index >= target.rows) throw std::out_of_range("element index out of range");

  double total = 0.0;
  for (std::size_t c = 0; c < target.cols; ++c) {
    const double original = target.at(index, c);
    target.at(index, c) = original + epsilon;
    const double plus = predictor.answer_mass(v, q, sample.answers);
    target.at(index, c) = original - epsilon;
    const double minus = predictor.answer_mass(v, q, sample.answers);
    target.at(index, c) = original;
    total += (plus - minus) / (2.0 * epsilon);
  }
  return total;
}

}  // namespace css
