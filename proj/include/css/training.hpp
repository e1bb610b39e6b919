#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "css/core.hpp"
#include "css/databench.hpp"
#include "css/model.hpp"
#include "css/synthesis.hpp"

namespace css {

/// Ablation axes: which fusion is used and which synthesis branches run.
struct TrainMode {
  bool ensemble = false;
  bool css = false;
  std::optional<double> delta_override;  // 0 = V-CSS only, 1 = Q-CSS only

  /// "baseline", "ensemble", optionally suffixed with "+css", "+vcss" or "+qcss".
  static TrainMode parse(const std::string& name);
  std::string name() const;
};

struct TrainOptions {
  std::size_t hidden_dim = 32;
  std::size_t epochs = 30;
  double learning_rate = 0.01;
  FusionStrategy ensemble_strategy{FusionKind::kLearnedMixin, 0.36, 1.0};
  CssConfig css;
  std::uint64_t seed = 7;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double counterfactual_loss = 0.0;
  std::optional<double> test_accuracy;
  std::size_t vcss_steps = 0;
  std::size_t qcss_steps = 0;
  std::size_t skipped = 0;

  std::string to_json_line() const;
};

struct TrainStats {
  std::size_t synthesis_calls = 0;
  std::vector<EpochLog> epochs;
};

/// Builds a fresh model for `train` (token table from the training questions).
VqaModel make_model(const TrainOptions& options, const TrainMode& mode, const std::vector<Sample>& train,
                    const AnswerVocabulary& vocab);

/// Per-sample gradient descent over shuffled epochs; with css enabled every step is a CSS step.
/// `on_epoch` receives each epoch's log as soon as it is complete.
TrainStats train_model(VqaModel& model, const TrainOptions& options, const TrainMode& mode,
                       const std::vector<Sample>& train, const std::vector<Sample>* test,
                       const EmbeddingLexicon& lexicon, const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace css
