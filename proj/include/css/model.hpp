#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "css/core.hpp"

namespace css {

inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kMaskToken = "[MASK]";

/// Row-major dense matrix. Vectors are stored as n x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  bool operator==(const Tensor&) const = default;
};

struct ModelDims {
  std::size_t visual_dim = 0;   // d_v
  std::size_t hidden_dim = 0;   // d_h
  std::size_t num_answers = 0;  // |A|

  bool operator==(const ModelDims&) const = default;
};

enum class FusionKind { kNone, kProductOfExperts, kSigmoidMask, kLearnedMixin };

std::string to_string(FusionKind kind);
FusionKind fusion_kind_from_string(const std::string& s);

/// Combination rule M for the main and question-only answer distributions.
struct FusionStrategy {
  FusionKind kind = FusionKind::kNone;
  /// Weight of the entropy penalty on the scaled bias distribution (learned_mixin only).
  double entropy_weight = 0.0;
  /// Weight of the question-only branch's own cross-entropy. Its gradient stops at the question
  /// summary, so the shared encoder only learns through the fused loss.
  double bias_loss_weight = 1.0;
};

struct ModelParams {
  ModelDims dims;
  std::uint64_t seed = 0;
  std::vector<std::string> tokens;  // row order of `embedding`; rows 0/1 are UNK/MASK

  Tensor embedding;         // |tokens| x d_h
  Tensor visual_w, visual_b;  // d_h x d_v, d_h x 1
  Tensor rnn_wx, rnn_wh, rnn_b;
  Tensor attention_w;       // d_h x d_h
  Tensor joint_vw, joint_vb, joint_qw, joint_qb;
  Tensor cls_w1, cls_b1, cls_w2, cls_b2;  // f_vqa classifier
  Tensor q_w1, q_b1, q_w2, q_b2;          // f_q classifier
  Tensor gate_w, gate_b;                  // learned-mixin gate g(Q)

  /// Calls `fn(name, tensor)` on every parameter tensor in a fixed order.
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  bool operator==(const ModelParams&) const = default;
};

/// Uniform initialization in [-r, r], r = 1/sqrt(fan_in). Token order is sorted and deduplicated.
ModelParams init_params(const ModelDims& dims, std::vector<std::string> tokens, std::uint64_t seed);

/// Hex SHA-256 of every parameter value, in `visit` order.
std::string params_digest(const ModelParams& params);

struct EncodedImage {
  Tensor features;  // n_v x d_h
};

struct EncodedQuestion {
  std::vector<std::size_t> token_rows;  // embedding rows the words came from
  Tensor word_features;                 // n_q x d_h
  std::vector<double> summary;          // d_h
};

/// Scalar answer mass Σ score(a)·P_vqa(a) together with its gradient at every encoded row.
struct MassGradients {
  double mass = 0.0;
  Tensor d_objects;  // n_v x d_h
  Tensor d_words;    // n_q x d_h
};

/// Anything that maps encoded rows to an answer distribution and can differentiate it. Saliency
/// is computed against this interface.
class DifferentiablePredictor {
 public:
  virtual ~DifferentiablePredictor() = default;
  virtual EncodedImage encode_image(const ImageRecord& image) const = 0;
  virtual EncodedQuestion encode_question(const QuestionRecord& question) const = 0;
  virtual double answer_mass(const EncodedImage& v, const EncodedQuestion& q, const AnswerScores& gt) const = 0;
  virtual MassGradients answer_mass_gradients(const EncodedImage& v, const EncodedQuestion& q,
                                              const AnswerScores& gt) const = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { kTrain, kEval };

/// f_vqa (bottom-up/top-down attention), f_q, and fusion over shared parameters.
class VqaModel : public DifferentiablePredictor {
 public:
  VqaModel(ModelParams params, AnswerVocabulary answers, FusionStrategy strategy);

  const ModelParams& params() const { return params_; }
  const AnswerVocabulary& answers() const { return answers_; }
  const FusionStrategy& strategy() const { return strategy_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  EncodedImage encode_image(const ImageRecord& image) const override;
  EncodedQuestion encode_question(const QuestionRecord& question) const override;

  AnswerDistribution forward_vqa(const EncodedImage& v, const EncodedQuestion& q) const;
  AnswerDistribution forward_qonly(const EncodedQuestion& q) const;
  /// g(Q) >= 0, the learned-mixin gate.
  double gate(const EncodedQuestion& q) const;

  /// Fused training-time distribution for a sample.
  AnswerDistribution forward_fused(const Sample& sample) const;
  /// Test-time prediction: f_vqa only.
  AnswerDistribution predict(const Sample& sample) const;

  double answer_mass(const EncodedImage& v, const EncodedQuestion& q, const AnswerScores& gt) const override;
  MassGradients answer_mass_gradients(const EncodedImage& v, const EncodedQuestion& q,
                                      const AnswerScores& gt) const override;

  /// Per-answer sigmoid cross-entropy on the fused logits (plus branch terms), no update.
  double loss(const Sample& sample) const;

  /// One gradient-descent step on the fused loss. Requires train mode. Returns the pre-step loss.
  /// `answers_required` is false for counterfactual samples whose targets may be empty.
  double train_step(const Sample& sample, double learning_rate, bool answers_required = true);

  void save_checkpoint(const std::filesystem::path& path) const;
  static VqaModel load_checkpoint(const std::filesystem::path& path);

 private:
  std::size_t token_row(const std::string& token) const;

  ModelParams params_;
  AnswerVocabulary answers_;
  FusionStrategy strategy_;
  Mode mode_ = Mode::kTrain;
  std::unordered_map<std::string, std::size_t> token_index_;
};

/// Combines two answer distributions, using their log-probabilities as logits.
/// `gate` is g(Q) for learned_mixin and ignored otherwise.
AnswerDistribution fuse(const AnswerDistribution& p_vqa, const AnswerDistribution& p_q,
                        const FusionStrategy& strategy, double gate = 1.0);

/// Restores the previous mode on scope exit.
class ScopedMode {
 public:
  ScopedMode(VqaModel& model, Mode mode) : model_(model), previous_(model.mode()) { model.set_mode(mode); }
  ~ScopedMode() { model_.set_mode(previous_); }
  ScopedMode(const ScopedMode&) = delete;
  ScopedMode& operator=(const ScopedMode&) = delete;

 private:
  VqaModel& model_;
  Mode previous_;
};

}  // namespace css
