#include "css/model.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "css/random.hpp"
#include "json.hpp"

namespace css {

using ordered_json = nlohmann::ordered_json;
using Vec = std::vector<double>;

namespace {

constexpr double kProbFloor = 1e-12;

Vec matvec(const Tensor& w, std::span<const double> x) {
  Vec y(w.rows, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.values.data() + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// y += W^T dy
void add_matTvec(const Tensor& w, std::span<const double> dy, std::span<double> out) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.values.data() + r * w.cols;
    const double g = dy[r];
    if (g == 0.0) continue;
    for (std::size_t c = 0; c < w.cols; ++c) out[c] += wr[c] * g;
  }
}

void add_outer(Tensor& g, std::span<const double> dy, std::span<const double> x) {
  for (std::size_t r = 0; r < g.rows; ++r) {
    double* gr = g.values.data() + r * g.cols;
    const double d = dy[r];
    if (d == 0.0) continue;
    for (std::size_t c = 0; c < g.cols; ++c) gr[c] += d * x[c];
  }
}

void add_into(std::span<double> acc, std::span<const double> x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void tanh_inplace(Vec& v) {
  for (auto& x : v) x = std::tanh(x);
}

Vec log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  const double lse = mx + std::log(sum);
  Vec out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

Vec softmax(std::span<const double> logits) {
  Vec out = log_softmax(logits);
  for (auto& x : out) x = std::exp(x);
  return out;
}

// d(softmax)/d(logits) applied to an upstream gradient on the probabilities.
Vec softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
  const double inner = dot(probs, dprobs);
  Vec out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (dprobs[i] - inner);
  return out;
}

// Same for log-softmax.
Vec log_softmax_backward(std::span<const double> probs, std::span<const double> dlog) {
  double total = 0.0;
  for (double d : dlog) total += d;
  Vec out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = dlog[i] - probs[i] * total;
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// Per-answer binary cross-entropy of sigmoid(logits) against soft targets. An empty target
// pushes every logit down instead of moving mass onto other answers.
double bce_logits(std::span<const double> logits, std::span<const double> targets, Vec* dlogits) {
  double loss = 0.0;
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double t = targets[i];
    // log(1 + e^-|z|) form keeps large logits finite
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    if (dlogits) (*dlogits)[i] = sigmoid(z) - t;
  }
  return loss;
}

struct HeadTrace {
  Vec summary;
  std::vector<Vec> states;  // h_0..h_n
  Vec scores, alpha, attended, joint_v, joint_q, joint, hidden, logits;
};

std::vector<Vec> run_recurrence(const ModelParams& p, const Tensor& words) {
  const std::size_t dh = p.dims.hidden_dim;
  std::vector<Vec> states;
  states.reserve(words.rows + 1);
  states.emplace_back(dh, 0.0);
  for (std::size_t t = 0; t < words.rows; ++t) {
    Vec pre = matvec(p.rnn_wx, words.row(t));
    const Vec rec = matvec(p.rnn_wh, states.back());
    for (std::size_t i = 0; i < dh; ++i) pre[i] += rec[i] + p.rnn_b.values[i];
    tanh_inplace(pre);
    states.push_back(std::move(pre));
  }
  return states;
}

HeadTrace head_forward(const ModelParams& p, const Tensor& objects, const Tensor& words) {
  const std::size_t dh = p.dims.hidden_dim;
  HeadTrace t;
  t.states = run_recurrence(p, words);
  t.summary = t.states.back();

  const std::size_t nv = objects.rows;
  t.scores.assign(nv, 0.0);
  const Vec key = [&] {
    // s_i = (A v_i) . q = v_i . (A^T q)
    Vec k(dh, 0.0);
    add_matTvec(p.attention_w, t.summary, k);
    return k;
  }();
  for (std::size_t i = 0; i < nv; ++i) t.scores[i] = dot(objects.row(i), key);
  t.alpha = softmax(t.scores);
  t.attended.assign(dh, 0.0);
  for (std::size_t i = 0; i < nv; ++i) {
    const auto row = objects.row(i);
    for (std::size_t c = 0; c < dh; ++c) t.attended[c] += t.alpha[i] * row[c];
  }

  t.joint_v = matvec(p.joint_vw, t.attended);
  t.joint_q = matvec(p.joint_qw, t.summary);
  t.joint.assign(dh, 0.0);
  for (std::size_t c = 0; c < dh; ++c) {
    t.joint_v[c] = std::tanh(t.joint_v[c] + p.joint_vb.values[c]);
    t.joint_q[c] = std::tanh(t.joint_q[c] + p.joint_qb.values[c]);
    t.joint[c] = t.joint_v[c] * t.joint_q[c];
  }
  t.hidden = matvec(p.cls_w1, t.joint);
  for (std::size_t c = 0; c < t.hidden.size(); ++c) t.hidden[c] = std::tanh(t.hidden[c] + p.cls_b1.values[c]);
  t.logits = matvec(p.cls_w2, t.hidden);
  for (std::size_t a = 0; a < t.logits.size(); ++a) t.logits[a] += p.cls_b2.values[a];
  return t;
}

// Backpropagates dlogits through the attention head. Writes the gradient at each object row into
// `d_objects` and accumulates the summary gradient into `d_summary`. `grads` may be null.
void head_backward(const ModelParams& p, const Tensor& objects, const HeadTrace& t, std::span<const double> dlogits,
                   ModelParams* grads, Tensor& d_objects, Vec& d_summary) {
  const std::size_t dh = p.dims.hidden_dim;
  const std::size_t nv = objects.rows;

  Vec d_hidden(t.hidden.size(), 0.0);
  add_matTvec(p.cls_w2, dlogits, d_hidden);
  if (grads) {
    add_outer(grads->cls_w2, dlogits, t.hidden);
    add_into(grads->cls_b2.values, dlogits);
  }
  for (std::size_t c = 0; c < d_hidden.size(); ++c) d_hidden[c] *= 1.0 - t.hidden[c] * t.hidden[c];
  Vec d_joint(dh, 0.0);
  add_matTvec(p.cls_w1, d_hidden, d_joint);
  if (grads) {
    add_outer(grads->cls_w1, d_hidden, t.joint);
    add_into(grads->cls_b1.values, d_hidden);
  }

  Vec d_jv(dh), d_jq(dh);
  for (std::size_t c = 0; c < dh; ++c) {
    d_jv[c] = d_joint[c] * t.joint_q[c] * (1.0 - t.joint_v[c] * t.joint_v[c]);
    d_jq[c] = d_joint[c] * t.joint_v[c] * (1.0 - t.joint_q[c] * t.joint_q[c]);
  }
  Vec d_attended(dh, 0.0);
  add_matTvec(p.joint_vw, d_jv, d_attended);
  add_matTvec(p.joint_qw, d_jq, d_summary);
  if (grads) {
    add_outer(grads->joint_vw, d_jv, t.attended);
    add_into(grads->joint_vb.values, d_jv);
    add_outer(grads->joint_qw, d_jq, t.summary);
    add_into(grads->joint_qb.values, d_jq);
  }

  d_objects = Tensor(nv, dh);
  Vec d_alpha(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    d_alpha[i] = dot(d_attended, objects.row(i));
    auto drow = d_objects.row(i);
    for (std::size_t c = 0; c < dh; ++c) drow[c] += t.alpha[i] * d_attended[c];
  }
  const Vec d_scores = softmax_backward(t.alpha, d_alpha);

  Vec key(dh, 0.0);
  add_matTvec(p.attention_w, t.summary, key);
  Vec d_key(dh, 0.0);
  for (std::size_t i = 0; i < nv; ++i) {
    const double ds = d_scores[i];
    if (ds == 0.0) continue;
    auto drow = d_objects.row(i);
    const auto row = objects.row(i);
    for (std::size_t c = 0; c < dh; ++c) {
      drow[c] += ds * key[c];
      d_key[c] += ds * row[c];
    }
  }
  // key = A^T q  =>  dq += A d_key, dA += q d_key^T
  const Vec dq_att = matvec(p.attention_w, d_key);
  add_into(d_summary, dq_att);
  if (grads) add_outer(grads->attention_w, t.summary, d_key);
}

// Backpropagates through the recurrence. Returns the gradient at each word-feature row.
Tensor recurrence_backward(const ModelParams& p, const Tensor& words, const std::vector<Vec>& states,
                           Vec d_state, ModelParams* grads) {
  const std::size_t dh = p.dims.hidden_dim;
  Tensor d_words(words.rows, dh);
  for (std::size_t t = words.rows; t-- > 0;) {
    const Vec& h = states[t + 1];
    Vec d_pre(dh);
    for (std::size_t i = 0; i < dh; ++i) d_pre[i] = d_state[i] * (1.0 - h[i] * h[i]);
    add_matTvec(p.rnn_wx, d_pre, d_words.row(t));
    Vec d_prev(dh, 0.0);
    add_matTvec(p.rnn_wh, d_pre, d_prev);
    if (grads) {
      add_outer(grads->rnn_wx, d_pre, words.row(t));
      add_outer(grads->rnn_wh, d_pre, states[t]);
      add_into(grads->rnn_b.values, d_pre);
    }
    d_state = std::move(d_prev);
  }
  return d_words;
}

struct QonlyTrace {
  Vec hidden, logits;
};

QonlyTrace qonly_forward(const ModelParams& p, std::span<const double> summary) {
  QonlyTrace t;
  t.hidden = matvec(p.q_w1, summary);
  for (std::size_t c = 0; c < t.hidden.size(); ++c) t.hidden[c] = std::tanh(t.hidden[c] + p.q_b1.values[c]);
  t.logits = matvec(p.q_w2, t.hidden);
  for (std::size_t a = 0; a < t.logits.size(); ++a) t.logits[a] += p.q_b2.values[a];
  return t;
}

void qonly_backward(const ModelParams& p, std::span<const double> summary, const QonlyTrace& t,
                    std::span<const double> dlogits, ModelParams* grads, Vec* d_summary) {
  Vec d_hidden(t.hidden.size(), 0.0);
  add_matTvec(p.q_w2, dlogits, d_hidden);
  if (grads) {
    add_outer(grads->q_w2, dlogits, t.hidden);
    add_into(grads->q_b2.values, dlogits);
  }
  for (std::size_t c = 0; c < d_hidden.size(); ++c) d_hidden[c] *= 1.0 - t.hidden[c] * t.hidden[c];
  if (grads) {
    add_outer(grads->q_w1, d_hidden, summary);
    add_into(grads->q_b1.values, d_hidden);
  }
  if (d_summary) add_matTvec(p.q_w1, d_hidden, *d_summary);
}

double gate_preactivation(const ModelParams& p, std::span<const double> summary) {
  return dot(p.gate_w.values, summary) + p.gate_b.values[0];
}

// Fused logits. z_vqa are raw answer logits; the bias side enters as log p_q (or raw logits
// z_q for the sigmoid mask, RUBi-style).
Vec fused_logits(const Vec& z_vqa, const Vec& ls_q, const Vec& z_q, FusionKind kind, double gate) {
  Vec out(z_vqa.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case FusionKind::kNone: out[i] = z_vqa[i]; break;
      case FusionKind::kProductOfExperts: out[i] = z_vqa[i] + ls_q[i]; break;
      case FusionKind::kSigmoidMask: out[i] = z_vqa[i] * sigmoid(z_q[i]); break;
      case FusionKind::kLearnedMixin: out[i] = z_vqa[i] + gate * ls_q[i]; break;
    }
  }
  return out;
}

double entropy_of_logits(const Vec& logits, Vec* d_logits) {
  const Vec ls = log_softmax(logits);
  double h = 0.0;
  for (double l : ls) h -= std::exp(l) * l;
  if (d_logits) {
    d_logits->resize(ls.size());
    for (std::size_t i = 0; i < ls.size(); ++i) (*d_logits)[i] = -std::exp(ls[i]) * (ls[i] + h);
  }
  return h;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams g;
  g.dims = p.dims;
  std::vector<const Tensor*> shapes;
  p.visit([&](const std::string&, const Tensor& t) { shapes.push_back(&t); });
  std::size_t i = 0;
  g.visit([&](const std::string&, Tensor& t) {
    t = Tensor(shapes[i]->rows, shapes[i]->cols);
    ++i;
  });
  return g;
}

}  // namespace

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kNone: return "none";
    case FusionKind::kProductOfExperts: return "product_of_experts";
    case FusionKind::kSigmoidMask: return "sigmoid_mask";
    case FusionKind::kLearnedMixin: return "learned_mixin";
  }
  return "none";
}

FusionKind fusion_kind_from_string(const std::string& s) {
  if (s == "none") return FusionKind::kNone;
  if (s == "product_of_experts" || s == "poe") return FusionKind::kProductOfExperts;
  if (s == "sigmoid_mask" || s == "rubi") return FusionKind::kSigmoidMask;
  if (s == "learned_mixin" || s == "lmh") return FusionKind::kLearnedMixin;
  throw std::invalid_argument("unknown fusion strategy '" + s + "'");
}

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embedding", embedding);
  fn("visual_w", visual_w);
  fn("visual_b", visual_b);
  fn("rnn_wx", rnn_wx);
  fn("rnn_wh", rnn_wh);
  fn("rnn_b", rnn_b);
  fn("attention_w", attention_w);
  fn("joint_vw", joint_vw);
  fn("joint_vb", joint_vb);
  fn("joint_qw", joint_qw);
  fn("joint_qb", joint_qb);
  fn("cls_w1", cls_w1);
  fn("cls_b1", cls_b1);
  fn("cls_w2", cls_w2);
  fn("cls_b2", cls_b2);
  fn("q_w1", q_w1);
  fn("q_b1", q_b1);
  fn("q_w2", q_w2);
  fn("q_b2", q_b2);
  fn("gate_w", gate_w);
  fn("gate_b", gate_b);
}

void ModelParams::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ModelParams*>(this)->visit([&](const std::string& name, Tensor& t) { fn(name, t); });
}

ModelParams init_params(const ModelDims& dims, std::vector<std::string> tokens, std::uint64_t seed) {
  if (dims.visual_dim == 0 || dims.hidden_dim == 0 || dims.num_answers == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  std::set<std::string> unique(tokens.begin(), tokens.end());
  unique.erase(std::string(kUnkToken));
  unique.erase(std::string(kMaskToken));
  ModelParams p;
  p.dims = dims;
  p.seed = seed;
  p.tokens = {std::string(kUnkToken), std::string(kMaskToken)};
  p.tokens.insert(p.tokens.end(), unique.begin(), unique.end());

  const std::size_t dv = dims.visual_dim, dh = dims.hidden_dim, na = dims.num_answers;
  Rng rng(seed);
  auto uniform = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    Tensor t(rows, cols);
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values) v = rng.uniform(-r, r);
    return t;
  };
  p.embedding = uniform(p.tokens.size(), dh, 1);
  p.visual_w = uniform(dh, dv, dv);
  p.visual_b = uniform(dh, 1, dv);
  p.rnn_wx = uniform(dh, dh, dh);
  p.rnn_wh = uniform(dh, dh, dh);
  p.rnn_b = uniform(dh, 1, dh);
  p.attention_w = uniform(dh, dh, dh);
  p.joint_vw = uniform(dh, dh, dh);
  p.joint_vb = uniform(dh, 1, dh);
  p.joint_qw = uniform(dh, dh, dh);
  p.joint_qb = uniform(dh, 1, dh);
  p.cls_w1 = uniform(dh, dh, dh);
  p.cls_b1 = uniform(dh, 1, dh);
  p.cls_w2 = uniform(na, dh, dh);
  p.cls_b2 = uniform(na, 1, dh);
  p.q_w1 = uniform(dh, dh, dh);
  p.q_b1 = uniform(dh, 1, dh);
  p.q_w2 = uniform(na, dh, dh);
  p.q_b2 = uniform(na, 1, dh);
  p.gate_w = uniform(1, dh, dh);
  p.gate_b = uniform(1, 1, dh);
  return p;
}

std::string params_digest(const ModelParams& params) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  params.visit([&](const std::string& name, const Tensor& t) {
    EVP_DigestUpdate(ctx, name.data(), name.size());
    const std::uint64_t shape[2] = {t.rows, t.cols};
    EVP_DigestUpdate(ctx, shape, sizeof(shape));
    EVP_DigestUpdate(ctx, t.values.data(), t.values.size() * sizeof(double));
  });
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

VqaModel::VqaModel(ModelParams params, AnswerVocabulary answers, FusionStrategy strategy)
    : params_(std::move(params)), answers_(std::move(answers)), strategy_(strategy) {
  if (answers_.size() != params_.dims.num_answers) {
    throw std::invalid_argument("answer vocabulary size does not match the classifier");
  }
  for (std::size_t i = 0; i < params_.tokens.size(); ++i) token_index_.emplace(params_.tokens[i], i);
}

std::size_t VqaModel::token_row(const std::string& token) const {
  auto it = token_index_.find(token);
  return it == token_index_.end() ? 0 : it->second;
}

EncodedImage VqaModel::encode_image(const ImageRecord& image) const {
  const std::size_t dh = params_.dims.hidden_dim;
  EncodedImage out{Tensor(image.objects.size(), dh)};
  for (std::size_t i = 0; i < image.objects.size(); ++i) {
    const auto& f = image.objects[i].feature;
    if (f.size() != params_.dims.visual_dim) {
      throw DatasetError("object feature dimension " + std::to_string(f.size()) + " does not match model d_v " +
                         std::to_string(params_.dims.visual_dim));
    }
    Vec pre = matvec(params_.visual_w, f);
    auto row = out.features.row(i);
    for (std::size_t c = 0; c < dh; ++c) row[c] = std::tanh(pre[c] + params_.visual_b.values[c]);
  }
  return out;
}

EncodedQuestion VqaModel::encode_question(const QuestionRecord& question) const {
  const std::size_t dh = params_.dims.hidden_dim;
  EncodedQuestion out;
  out.word_features = Tensor(question.tokens.size(), dh);
  for (std::size_t t = 0; t < question.tokens.size(); ++t) {
    const std::size_t r = token_row(question.tokens[t]);
    out.token_rows.push_back(r);
    std::copy_n(params_.embedding.row(r).begin(), dh, out.word_features.row(t).begin());
  }
  out.summary = run_recurrence(params_, out.word_features).back();
  return out;
}

AnswerDistribution VqaModel::forward_vqa(const EncodedImage& v, const EncodedQuestion& q) const {
  return {softmax(head_forward(params_, v.features, q.word_features).logits)};
}

AnswerDistribution VqaModel::forward_qonly(const EncodedQuestion& q) const {
  const Vec summary = run_recurrence(params_, q.word_features).back();
  return {softmax(qonly_forward(params_, summary).logits)};
}

double VqaModel::gate(const EncodedQuestion& q) const {
  const Vec summary = run_recurrence(params_, q.word_features).back();
  return softplus(gate_preactivation(params_, summary));
}

AnswerDistribution VqaModel::forward_fused(const Sample& sample) const {
  const EncodedImage v = encode_image(sample.image);
  const EncodedQuestion q = encode_question(sample.question);
  const HeadTrace head = head_forward(params_, v.features, q.word_features);
  if (strategy_.kind == FusionKind::kNone) return {softmax(head.logits)};
  const QonlyTrace qt = qonly_forward(params_, head.summary);
  const double g = softplus(gate_preactivation(params_, head.summary));
  return {softmax(fused_logits(head.logits, log_softmax(qt.logits), qt.logits, strategy_.kind, g))};
}

AnswerDistribution VqaModel::predict(const Sample& sample) const {
  return forward_vqa(encode_image(sample.image), encode_question(sample.question));
}

double VqaModel::answer_mass(const EncodedImage& v, const EncodedQuestion& q, const AnswerScores& gt) const {
  return forward_vqa(v, q).gt_mass(gt, answers_);
}

MassGradients VqaModel::answer_mass_gradients(const EncodedImage& v, const EncodedQuestion& q,
                                              const AnswerScores& gt) const {
  const HeadTrace t = head_forward(params_, v.features, q.word_features);
  const Vec probs = softmax(t.logits);
  const Vec weights = gt.dense(answers_);
  MassGradients out;
  out.mass = dot(weights, probs);
  Vec dlogits(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k) dlogits[k] = probs[k] * (weights[k] - out.mass);
  Vec d_summary(params_.dims.hidden_dim, 0.0);
  head_backward(params_, v.features, t, dlogits, nullptr, out.d_objects, d_summary);
  out.d_words = recurrence_backward(params_, q.word_features, t.states, std::move(d_summary), nullptr);
  return out;
}

namespace {

// Full loss and (optionally) parameter gradients for one sample.
double loss_and_gradients(const ModelParams& p, const VqaModel& model, const Sample& sample,
                          const FusionStrategy& strategy, ModelParams* grads) {
  const EncodedImage v = model.encode_image(sample.image);
  const EncodedQuestion q = model.encode_question(sample.question);
  const Vec targets = sample.answers.dense(model.answers());
  const std::size_t na = targets.size();
  const std::size_t dh = p.dims.hidden_dim;

  const HeadTrace head = head_forward(p, v.features, q.word_features);
  const bool ensemble = strategy.kind != FusionKind::kNone;

  QonlyTrace qtrace;
  Vec ls_q(na, 0.0), p_q(na, 0.0);
  double gate_pre = 0.0, gate = 1.0;
  if (ensemble) {
    qtrace = qonly_forward(p, head.summary);
    ls_q = log_softmax(qtrace.logits);
    for (std::size_t k = 0; k < na; ++k) p_q[k] = std::exp(ls_q[k]);
    gate_pre = gate_preactivation(p, head.summary);
    gate = softplus(gate_pre);
  }

  const Vec fused = fused_logits(head.logits, ls_q, qtrace.logits, strategy.kind, gate);
  Vec d_fused;
  double loss = bce_logits(fused, targets, grads ? &d_fused : nullptr);

  // bias branch learns the prior on its own; its gradient stops at the question summary
  Vec d_bias_logits;
  if (ensemble && strategy.bias_loss_weight > 0.0) {
    loss += strategy.bias_loss_weight * bce_logits(qtrace.logits, targets, grads ? &d_bias_logits : nullptr);
    for (auto& d : d_bias_logits) d *= strategy.bias_loss_weight;
  }
  Vec scaled_bias, d_scaled_bias;
  if (strategy.kind == FusionKind::kLearnedMixin && strategy.entropy_weight > 0.0) {
    scaled_bias.resize(na);
    for (std::size_t k = 0; k < na; ++k) scaled_bias[k] = gate * ls_q[k];
    loss += strategy.entropy_weight * entropy_of_logits(scaled_bias, grads ? &d_scaled_bias : nullptr);
    for (auto& d : d_scaled_bias) d *= strategy.entropy_weight;
  }
  if (!grads) return loss;

  Vec d_logits_vqa(na, 0.0), d_ls_q(na, 0.0), d_zq(na, 0.0);
  double d_gate = 0.0;
  for (std::size_t k = 0; k < na; ++k) {
    switch (strategy.kind) {
      case FusionKind::kNone: d_logits_vqa[k] = d_fused[k]; break;
      case FusionKind::kProductOfExperts:
        d_logits_vqa[k] = d_fused[k];
        d_ls_q[k] = d_fused[k];
        break;
      case FusionKind::kSigmoidMask: {
        const double m = sigmoid(qtrace.logits[k]);
        d_logits_vqa[k] = d_fused[k] * m;
        d_zq[k] = d_fused[k] * head.logits[k] * m * (1.0 - m);
        break;
      }
      case FusionKind::kLearnedMixin:
        d_logits_vqa[k] = d_fused[k];
        d_ls_q[k] = d_fused[k] * gate;
        d_gate += d_fused[k] * ls_q[k];
        break;
    }
  }
  for (std::size_t k = 0; k < d_scaled_bias.size(); ++k) {
    d_ls_q[k] += d_scaled_bias[k] * gate;
    d_gate += d_scaled_bias[k] * ls_q[k];
  }

  Vec d_summary(dh, 0.0);
  Tensor d_objects;
  head_backward(p, v.features, head, d_logits_vqa, grads, d_objects, d_summary);

  if (ensemble) {
    Vec d_logits_q = log_softmax_backward(p_q, d_ls_q);
    add_into(d_logits_q, d_zq);
    qonly_backward(p, head.summary, qtrace, d_logits_q, grads, &d_summary);
    if (!d_bias_logits.empty()) qonly_backward(p, head.summary, qtrace, d_bias_logits, grads, nullptr);
    if (strategy.kind == FusionKind::kLearnedMixin && d_gate != 0.0) {
      const double d_pre = d_gate * sigmoid(gate_pre);
      for (std::size_t c = 0; c < dh; ++c) {
        grads->gate_w.values[c] += d_pre * head.summary[c];
        d_summary[c] += d_pre * p.gate_w.values[c];
      }
      grads->gate_b.values[0] += d_pre;
    }
  }

  const Tensor d_words = recurrence_backward(p, q.word_features, head.states, std::move(d_summary), grads);
  for (std::size_t t = 0; t < d_words.rows; ++t) {
    auto g = grads->embedding.row(q.token_rows[t]);
    add_into(g, d_words.row(t));
  }
  for (std::size_t i = 0; i < d_objects.rows; ++i) {
    const auto vrow = v.features.row(i);
    Vec d_pre(dh);
    for (std::size_t c = 0; c < dh; ++c) d_pre[c] = d_objects.at(i, c) * (1.0 - vrow[c] * vrow[c]);
    add_outer(grads->visual_w, d_pre, sample.image.objects[i].feature);
    add_into(grads->visual_b.values, d_pre);
  }
  return loss;
}

}  // namespace

double VqaModel::loss(const Sample& sample) const { return loss_and_gradients(params_, *this, sample, strategy_, nullptr); }

double VqaModel::train_step(const Sample& sample, double learning_rate, bool answers_required) {
  if (mode_ != Mode::kTrain) throw std::logic_error("train_step called while the model is in eval mode");
  if (answers_required && sample.answers.empty()) {
    throw DatasetError("training sample '" + sample.id() + "' has no answers");
  }
  ModelParams grads = zeros_like(params_);
  const double loss = loss_and_gradients(params_, *this, sample, strategy_, &grads);
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss on sample '" + sample.id() + "'");
  }
  if (learning_rate == 0.0) return loss;
  std::vector<Tensor*> targets;
  params_.visit([&](const std::string&, Tensor& t) { targets.push_back(&t); });
  std::size_t i = 0;
  grads.visit([&](const std::string&, Tensor& g) {
    Tensor& t = *targets[i++];
    for (std::size_t k = 0; k < t.values.size(); ++k) t.values[k] -= learning_rate * g.values[k];
  });
  return loss;
}

AnswerDistribution fuse(const AnswerDistribution& p_vqa, const AnswerDistribution& p_q,
                        const FusionStrategy& strategy, double gate) {
  if (p_vqa.probs.size() != p_q.probs.size()) throw std::invalid_argument("fuse: distributions differ in length");
  if (strategy.kind == FusionKind::kNone) return p_vqa;
  Vec ls_v(p_vqa.probs.size()), ls_q(p_q.probs.size());
  for (std::size_t i = 0; i < ls_v.size(); ++i) {
    ls_v[i] = std::log(std::max(p_vqa.probs[i], kProbFloor));
    ls_q[i] = std::log(std::max(p_q.probs[i], kProbFloor));
  }
  return {softmax(fused_logits(ls_v, ls_q, ls_q, strategy.kind, gate))};
}

void VqaModel::save_checkpoint(const std::filesystem::path& path) const {
  ordered_json j;
  j["d_v"] = params_.dims.visual_dim;
  j["d_h"] = params_.dims.hidden_dim;
  j["num_answers"] = params_.dims.num_answers;
  j["seed"] = params_.seed;
  j["strategy"] = to_string(strategy_.kind);
  j["entropy_weight"] = strategy_.entropy_weight;
  j["bias_loss_weight"] = strategy_.bias_loss_weight;
  j["answers"] = answers_.answers();
  j["tokens"] = params_.tokens;
  ordered_json tensors = ordered_json::object();
  params_.visit([&](const std::string& name, const Tensor& t) {
    ordered_json entry;
    entry["shape"] = {t.rows, t.cols};
    entry["values"] = t.values;
    tensors[name] = std::move(entry);
  });
  j["params"] = std::move(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

VqaModel VqaModel::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  ModelParams p;
  p.dims.visual_dim = j.at("d_v").get<std::size_t>();
  p.dims.hidden_dim = j.at("d_h").get<std::size_t>();
  p.dims.num_answers = j.at("num_answers").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.tokens = j.at("tokens").get<std::vector<std::string>>();
  const auto& tensors = j.at("params");
  p.visit([&](const std::string& name, Tensor& t) {
    const auto& entry = tensors.at(name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    t = Tensor(shape.at(0), shape.at(1));
    t.values = entry.at("values").get<std::vector<double>>();
    if (t.values.size() != t.rows * t.cols) throw std::runtime_error("checkpoint tensor '" + name + "' has wrong size");
  });
  FusionStrategy s;
  s.kind = fusion_kind_from_string(j.at("strategy").get<std::string>());
  s.entropy_weight = j.at("entropy_weight").get<double>();
  s.bias_loss_weight = j.at("bias_loss_weight").get<double>();
  return VqaModel(std::move(p), AnswerVocabulary(j.at("answers").get<std::vector<std::string>>()), s);
}

}  // namespace css
