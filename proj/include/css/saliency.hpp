#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "css/core.hpp"
#include "css/model.hpp"

namespace css {

enum class ElementKind { kObject, kWord };

std::string to_string(ElementKind kind);

/// Local contribution of every object (or word) to the ground-truth answer mass.
struct SaliencyScores {
  ElementKind kind = ElementKind::kObject;
  double target_answer_mass = 0.0;
  std::vector<double> scores;  // one entry per object / word, in input order
};

/// Sum over components of d(Σ score(a)·P_vqa(a)) / d(v_i) at the encoded object rows.
SaliencyScores object_contributions(const Sample& sample, const DifferentiablePredictor& predictor);

/// Same, at the embedded word rows w_j.
SaliencyScores word_contributions(const Sample& sample, const DifferentiablePredictor& predictor);

/// Central-difference estimate of one contribution:
/// Σ_j [P(x + ε e_j) − P(x − ε e_j)] / (2ε) over the components of element `index`.
double finite_difference_contribution(const Sample& sample, const DifferentiablePredictor& predictor,
                                      ElementKind kind, std::size_t index, double epsilon);

}  // namespace css
