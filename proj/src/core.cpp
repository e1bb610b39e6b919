#include "css/core.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace css {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string with_line(const std::string& what, std::size_t line) {
  if (line == 0) return what;
  return "line " + std::to_string(line) + ": " + what;
}

const std::vector<std::string>& record_keys() {
  static const std::vector<std::string> keys = {"image_id",         "objects", "question_id", "tokens",
                                                "question_type",    "type_token_count",
                                                "answers",          "split_tag"};
  return keys;
}

}  // namespace

DatasetError::DatasetError(const std::string& what, std::size_t line)
    : std::runtime_error(with_line(what, line)), line_(line) {}

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> answers) : answers_(std::move(answers)) {
  for (std::size_t i = 0; i < answers_.size(); ++i) {
    if (!index_.emplace(answers_[i], i).second) {
      throw DatasetError("duplicate answer in vocabulary: '" + answers_[i] + "'");
    }
  }
}

std::optional<std::size_t> AnswerVocabulary::index_of(const std::string& answer) const {
  auto it = index_.find(answer);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

AnswerVocabulary AnswerVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open vocabulary file " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed vocabulary file " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw DatasetError("vocabulary file must hold a JSON list of strings");
  std::vector<std::string> answers;
  for (const auto& a : j) {
    if (!a.is_string()) throw DatasetError("vocabulary entries must be strings");
    answers.push_back(a.get<std::string>());
  }
  return AnswerVocabulary(std::move(answers));
}

void AnswerVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write vocabulary file " + path.string());
  out << ordered_json(answers_).dump() << "\n";
}

double AnswerScores::score_of(const std::string& answer) const {
  auto it = entries.find(answer);
  return it == entries.end() ? 0.0 : it->second;
}

std::vector<double> AnswerScores::dense(const AnswerVocabulary& vocab) const {
  std::vector<double> out(vocab.size(), 0.0);
  for (const auto& [answer, score] : entries) {
    auto idx = vocab.index_of(answer);
    if (!idx) throw DatasetError("answer '" + answer + "' not in vocabulary");
    out[*idx] = score;
  }
  return out;
}

const ObjectInstance* ImageRecord::find(std::int64_t object_id) const {
  for (const auto& o : objects) {
    if (o.object_id == object_id) return &o;
  }
  return nullptr;
}

std::string QuestionRecord::text() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw DatasetError("split_tag must be 'train' or 'test', got '" + s + "'");
}

std::size_t AnswerDistribution::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

std::vector<std::size_t> AnswerDistribution::top_n(std::size_t n) const {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  n = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  order.resize(n);
  return order;
}

double AnswerDistribution::gt_mass(const AnswerScores& gt, const AnswerVocabulary& vocab) const {
  double mass = 0.0;
  for (const auto& [answer, score] : gt.entries) {
    auto idx = vocab.index_of(answer);
    if (!idx) throw DatasetError("answer '" + answer + "' not in vocabulary");
    mass += score * probs[*idx];
  }
  return mass;
}

void validate_question(const QuestionRecord& q) {
  if (q.tokens.empty()) throw DatasetError("question '" + q.question_id + "' has no tokens");
  if (q.type_token_count < 1 || q.type_token_count > q.tokens.size()) {
    throw DatasetError("question '" + q.question_id + "': type_token_count out of range");
  }
  std::string prefix;
  for (std::size_t i = 0; i < q.type_token_count; ++i) {
    if (i) prefix += ' ';
    prefix += q.tokens[i];
  }
  if (prefix != q.question_type) {
    throw DatasetError("question '" + q.question_id + "': leading tokens '" + prefix +
                       "' do not spell question_type '" + q.question_type + "'");
  }
}

void validate_sample(const Sample& s, const AnswerVocabulary& vocab, bool answers_required) {
  if (s.image.objects.empty()) throw DatasetError("image '" + s.image.image_id + "' has no objects");
  std::set<std::int64_t> ids;
  const std::size_t dim = s.image.objects.front().feature.size();
  for (const auto& o : s.image.objects) {
    if (!ids.insert(o.object_id).second) {
      throw DatasetError("image '" + s.image.image_id + "': duplicate object_id " + std::to_string(o.object_id));
    }
    if (o.feature.size() != dim) {
      throw DatasetError("image '" + s.image.image_id + "': feature dimension mismatch (" +
                         std::to_string(o.feature.size()) + " vs " + std::to_string(dim) + ")");
    }
  }
  validate_question(s.question);
  if (answers_required && s.answers.empty()) throw DatasetError("sample '" + s.id() + "' has no answers");
  for (const auto& [answer, score] : s.answers.entries) {
    if (!vocab.contains(answer)) throw DatasetError("unknown answer '" + answer + "'");
    if (!(score >= 0.0 && score <= 1.0)) throw DatasetError("answer score for '" + answer + "' outside [0,1]");
  }
}

std::string sample_to_json_line(const Sample& s) {
  ordered_json j;
  j["image_id"] = s.image.image_id;
  ordered_json objects = ordered_json::array();
  for (const auto& o : s.image.objects) {
    ordered_json obj;
    obj["object_id"] = o.object_id;
    obj["category"] = o.category;
    obj["feature"] = o.feature;
    objects.push_back(std::move(obj));
  }
  j["objects"] = std::move(objects);
  j["question_id"] = s.question.question_id;
  j["tokens"] = s.question.tokens;
  j["question_type"] = s.question.question_type;
  j["type_token_count"] = s.question.type_token_count;
  ordered_json answers = ordered_json::object();
  for (const auto& [answer, score] : s.answers.entries) answers[answer] = score;
  j["answers"] = std::move(answers);
  j["split_tag"] = to_string(s.split);
  return j.dump();
}

Sample sample_from_json_line(const std::string& line, const AnswerVocabulary& vocab, std::size_t line_no) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("parse error: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw DatasetError("record is not a JSON object", line_no);
  for (const auto& key : record_keys()) {
    if (!j.contains(key)) throw DatasetError("missing field '" + key + "'", line_no);
  }
  if (j.size() != record_keys().size()) throw DatasetError("unexpected extra fields", line_no);

  Sample s;
  try {
    s.image.image_id = j.at("image_id").get<std::string>();
    for (const auto& obj : j.at("objects")) {
      ObjectInstance o;
      o.object_id = obj.at("object_id").get<std::int64_t>();
      o.category = obj.at("category").get<std::string>();
      o.feature = obj.at("feature").get<std::vector<double>>();
      s.image.objects.push_back(std::move(o));
    }
    s.question.question_id = j.at("question_id").get<std::string>();
    s.question.tokens = j.at("tokens").get<std::vector<std::string>>();
    s.question.question_type = j.at("question_type").get<std::string>();
    s.question.type_token_count = j.at("type_token_count").get<std::size_t>();
    for (const auto& [answer, score] : j.at("answers").items()) {
      s.answers.entries[answer] = score.get<double>();
    }
    s.split = split_from_string(j.at("split_tag").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("bad field type: ") + e.what(), line_no);
  } catch (const DatasetError& e) {
    throw DatasetError(e.what(), line_no);
  }
  try {
    validate_sample(s, vocab);
  } catch (const DatasetError& e) {
    throw DatasetError(e.what(), line_no);
  }
  return s;
}

std::vector<Sample> load_dataset(const std::filesystem::path& path, const AnswerVocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset file " + path.string());
  std::vector<Sample> out;
  std::optional<std::size_t> dim;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Sample s = sample_from_json_line(line, vocab, line_no);
    const std::size_t d = s.image.objects.front().feature.size();
    if (!dim) dim = d;
    if (*dim != d) {
      throw DatasetError("feature dimension mismatch (" + std::to_string(d) + " vs " + std::to_string(*dim) + ")",
                         line_no);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write dataset file " + path.string());
  for (const auto& s : samples) out << sample_to_json_line(s) << '\n';
  if (!out) throw DatasetError("write failed for " + path.string());
}

double soft_accuracy(const std::string& predicted, const AnswerScores& gt) { return gt.score_of(predicted); }

}  // namespace css
