#include "css/training.hpp"

#include <numeric>
#include <set>
#include <stdexcept>

#include "css/metrics.hpp"
#include "css/random.hpp"
#include "json.hpp"

namespace css {

TrainMode TrainMode::parse(const std::string& name) {
  TrainMode m;
  std::string base = name;
  std::string suffix;
  if (auto plus = name.find('+'); plus != std::string::npos) {
    base = name.substr(0, plus);
    suffix = name.substr(plus + 1);
  }
  if (base == "baseline") {
    m.ensemble = false;
  } else if (base == "ensemble") {
    m.ensemble = true;
  } else {
    throw std::invalid_argument("unknown training mode '" + name + "'");
  }
  if (suffix.empty()) return m;
  m.css = true;
  if (suffix == "css") return m;
  if (suffix == "vcss") {
    m.delta_override = 0.0;
  } else if (suffix == "qcss") {
    m.delta_override = 1.0;
  } else {
    throw std::invalid_argument("unknown training mode '" + name + "'");
  }
  return m;
}

std::string TrainMode::name() const {
  std::string out = ensemble ? "ensemble" : "baseline";
  if (!css) return out;
  if (!delta_override) return out + "+css";
  return out + (*delta_override == 0.0 ? "+vcss" : "+qcss");
}

std::string EpochLog::to_json_line() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["counterfactual_loss"] = counterfactual_loss;
  j["test_accuracy"] = test_accuracy ? nlohmann::ordered_json(*test_accuracy) : nlohmann::ordered_json();
  j["vcss_steps"] = vcss_steps;
  j["qcss_steps"] = qcss_steps;
  j["skipped"] = skipped;
  return j.dump();
}

VqaModel make_model(const TrainOptions& options, const TrainMode& mode, const std::vector<Sample>& train,
                    const AnswerVocabulary& vocab) {
  if (train.empty()) throw std::invalid_argument("cannot size a model from an empty training split");
  std::vector<std::string> tokens;
  for (const auto& s : train) tokens.insert(tokens.end(), s.question.tokens.begin(), s.question.tokens.end());
  ModelDims dims{train.front().image.objects.front().feature.size(), options.hidden_dim, vocab.size()};
  FusionStrategy strategy = mode.ensemble ? options.ensemble_strategy : FusionStrategy{FusionKind::kNone, 0.0, 0.0};
  return VqaModel(init_params(dims, std::move(tokens), options.seed), vocab, strategy);
}

TrainStats train_model(VqaModel& model, const TrainOptions& options, const TrainMode& mode,
                       const std::vector<Sample>& train, const std::vector<Sample>* test,
                       const EmbeddingLexicon& lexicon, const std::function<void(const EpochLog&)>& on_epoch) {
  CssConfig css = options.css;
  if (mode.delta_override) css.delta = *mode.delta_override;
  css.validate();

  TrainStats stats;
  Rng order_rng(options.seed ^ 0x0DDBA11ULL);
  Rng css_rng(css.seed ^ options.seed ^ 0xC55ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ScopedMode training(model, Mode::kTrain);

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
    EpochLog log;
    log.epoch = epoch;
    std::size_t cf_steps = 0;
    for (std::size_t idx : order) {
      const Sample& s = train[idx];
      try {
        if (!mode.css) {
          log.train_loss += model.train_step(s, options.learning_rate);
          continue;
        }
        ++stats.synthesis_calls;
        const CssStepResult r = css_train_step(s, model, lexicon, css, css_rng, options.learning_rate);
        log.train_loss += r.original_loss;
        (r.branch == CssKind::kVisual ? log.vcss_steps : log.qcss_steps)++;
        if (r.counterfactual_loss) {
          log.counterfactual_loss += *r.counterfactual_loss;
          ++cf_steps;
        } else {
          ++log.skipped;
        }
      } catch (const TrainingError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
    }
    if (!train.empty()) log.train_loss /= static_cast<double>(train.size());
    if (cf_steps) log.counterfactual_loss /= static_cast<double>(cf_steps);
    if (test && !test->empty()) {
      ScopedMode eval(model, Mode::kEval);
      log.test_accuracy = accuracy_report(model, *test).all;
    }
    stats.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return stats;
}

}  // namespace css
