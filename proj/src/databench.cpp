#include "css/databench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "css/random.hpp"
#include "json.hpp"

namespace css {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kFeatureResolution = 1e-4;

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double quantize(double x) { return std::round(x / kFeatureResolution) * kFeatureResolution; }

std::vector<std::string> render(const std::vector<std::string>& tmpl, const std::string& noun) {
  std::vector<std::string> out = tmpl;
  for (auto& t : out) {
    if (t == "{noun}") t = noun;
  }
  return out;
}

std::size_t index_of(const std::vector<std::string>& v, const std::string& s) {
  return static_cast<std::size_t>(std::find(v.begin(), v.end(), s) - v.begin());
}

struct ObjectDraw {
  std::string category;
  std::size_t color = 0;
  std::size_t count = 0;
};

std::vector<double> make_feature(const GeneratorSpec& spec, const ObjectDraw& d, Rng& rng) {
  std::vector<double> f(spec.visual_dim, 0.0);
  const std::size_t nc = spec.categories.size();
  const std::size_t nk = spec.colors.size();
  f[index_of(spec.categories, d.category)] = 1.0;
  f[nc + d.color] = 1.0;
  f[nc + nk + d.count] = 1.0;
  for (auto& x : f) x = quantize(x + spec.noise_sigma * rng.normal());
  return f;
}

// Draws an answer from a head-skewed prior: `head` with probability `skew`, otherwise uniform
// over the remaining answers.
std::string draw_answer(const std::vector<std::string>& answers, const std::string& head, double skew, Rng& rng) {
  if (rng.uniform() < skew) return head;
  std::vector<std::string> rest;
  for (const auto& a : answers) {
    if (a != head) rest.push_back(a);
  }
  return rest[rng.index(rest.size())];
}

Sample make_sample(const GeneratorSpec& spec, const QuestionTypeSpec& qt, const std::string& answer, Split split,
                   std::size_t index, Rng& rng) {
  const std::string& category = spec.categories[rng.index(spec.categories.size())];
  std::string noun = category;
  if (auto it = spec.aliases.find(category); it != spec.aliases.end() && rng.uniform() < 0.5) noun = it->second;

  const int n_objects = rng.between(spec.min_objects, spec.max_objects);
  std::vector<ObjectDraw> draws;
  bool include_target = true;
  ObjectDraw target{category, rng.index(spec.colors.size()), rng.index(spec.counts.size())};
  switch (qt.kind) {
    case QuestionKind::kColor: target.color = index_of(spec.colors, answer); break;
    case QuestionKind::kCount: target.count = index_of(spec.counts, answer); break;
    case QuestionKind::kPresence: include_target = answer == "yes"; break;
  }
  if (include_target) draws.push_back(target);
  std::vector<std::string> others;
  for (const auto& c : spec.categories) {
    if (c != category) others.push_back(c);
  }
  while (static_cast<int>(draws.size()) < n_objects) {
    draws.push_back({others[rng.index(others.size())], rng.index(spec.colors.size()), rng.index(spec.counts.size())});
  }
  for (std::size_t i = draws.size(); i > 1; --i) std::swap(draws[i - 1], draws[rng.index(i)]);

  Sample s;
  const std::string prefix = to_string(split);
  char id[32];
  std::snprintf(id, sizeof(id), "%s-%06zu", prefix.c_str(), index);
  s.image.image_id = id;
  for (std::size_t i = 0; i < draws.size(); ++i) {
    s.image.objects.push_back({static_cast<std::int64_t>(i), draws[i].category, make_feature(spec, draws[i], rng)});
  }
  const std::size_t tmpl = rng.index(std::min(spec.training_templates, qt.templates.size()));
  s.question.question_id = std::string("q") + id;
  s.question.tokens = render(qt.templates[tmpl], noun);
  s.question.question_type = qt.name;
  s.question.type_token_count = split_words(qt.name).size();
  s.answers.entries[answer] = 1.0;
  s.split = split;
  return s;
}

}  // namespace

GeneratorSpec GeneratorSpec::defaults() {
  GeneratorSpec s;
  auto t = [](std::initializer_list<const char*> words) {
    std::vector<std::string> out;
    for (const char* w : words) out.emplace_back(w);
    return out;
  };
  s.question_types = {
      {"what color",
       QuestionKind::kColor,
       {t({"what", "color", "is", "the", "{noun}"}), t({"what", "color", "is", "this", "{noun}"}),
        t({"what", "color", "is", "that", "{noun}", "here"}), t({"what", "color", "does", "the", "{noun}", "have"}),
        t({"what", "color", "would", "you", "say", "the", "{noun}", "is"})}},
      {"how many",
       QuestionKind::kCount,
       {t({"how", "many", "{noun}", "are", "there"}), t({"how", "many", "{noun}", "are", "in", "the", "picture"}),
        t({"how", "many", "{noun}", "can", "you", "see"}), t({"how", "many", "{noun}", "are", "visible"}),
        t({"how", "many", "{noun}", "do", "you", "count"})}},
      {"is there",
       QuestionKind::kPresence,
       {t({"is", "there", "a", "{noun}"}), t({"is", "there", "a", "{noun}", "in", "the", "image"}),
        t({"is", "there", "any", "{noun}"}), t({"is", "there", "a", "{noun}", "visible"}),
        t({"is", "there", "some", "{noun}", "here"})}},
  };
  s.categories = {"tie", "shirt", "wall", "kite", "car", "dog", "cat", "ball", "cup", "tree", "hat", "bus"};
  s.aliases = {{"tie", "necktie"}, {"shirt", "tshirt"}, {"wall", "barrier"}, {"kite", "glider"},
               {"car", "automobile"}, {"dog", "puppy"}, {"cat", "kitten"}, {"ball", "sphere"},
               {"cup", "mug"}, {"tree", "oak"}, {"hat", "cap"}, {"bus", "coach"}};
  s.colors = {"red", "green", "blue", "white", "black", "yellow", "brown", "gray"};
  s.counts = {"1", "2", "3", "4", "5"};
  return s;
}

void GeneratorSpec::validate() const {
  if (!(bias_skew > 0.5 && bias_skew < 1.0)) throw std::invalid_argument("bias_skew must lie in (0.5, 1)");
  if (min_objects < 1 || max_objects < min_objects) throw std::invalid_argument("invalid object count range");
  if (categories.size() < 2) throw std::invalid_argument("need at least two categories");
  if (colors.size() < 2 || counts.size() < 2) throw std::invalid_argument("need at least two colours and counts");
  if (visual_dim < categories.size() + colors.size() + counts.size()) {
    throw std::invalid_argument("visual_dim too small for the one-hot feature blocks");
  }
  if (question_types.empty()) throw std::invalid_argument("no question types");
  std::set<std::string> answers;
  for (const auto& a : colors) answers.insert(a);
  for (const auto& a : counts) {
    if (!answers.insert(a).second) throw std::invalid_argument("answer '" + a + "' is used by two question kinds");
  }
  for (const auto& a : {"yes", "no"}) {
    if (!answers.insert(a).second) throw std::invalid_argument("answer vocabularies overlap");
  }
  std::set<std::string> nouns(categories.begin(), categories.end());
  for (const auto& [cat, alias] : aliases) {
    if (!nouns.count(cat)) throw std::invalid_argument("alias for unknown category '" + cat + "'");
    if (!nouns.insert(alias).second) throw std::invalid_argument("alias '" + alias + "' collides with another noun");
  }
  for (const auto& qt : question_types) {
    if (qt.templates.empty()) throw std::invalid_argument("question type '" + qt.name + "' has no templates");
    const auto type_words = split_words(qt.name);
    for (const auto& tmpl : qt.templates) {
      if (std::count(tmpl.begin(), tmpl.end(), "{noun}") != 1) {
        throw std::invalid_argument("every template needs exactly one {noun} slot");
      }
      if (tmpl.size() <= type_words.size() || !std::equal(type_words.begin(), type_words.end(), tmpl.begin())) {
        throw std::invalid_argument("template does not start with its question type '" + qt.name + "'");
      }
    }
  }
}

AnswerVocabulary GeneratorSpec::answer_vocabulary() const {
  std::vector<std::string> answers = colors;
  answers.insert(answers.end(), counts.begin(), counts.end());
  answers.emplace_back("yes");
  answers.emplace_back("no");
  return AnswerVocabulary(std::move(answers));
}

const QuestionTypeSpec* GeneratorSpec::find_type(const std::string& name) const {
  for (const auto& qt : question_types) {
    if (qt.name == name) return &qt;
  }
  return nullptr;
}

std::vector<std::string> GeneratorSpec::answers_for(QuestionKind kind) const {
  switch (kind) {
    case QuestionKind::kColor: return colors;
    case QuestionKind::kCount: return counts;
    case QuestionKind::kPresence: return {"yes", "no"};
  }
  return {};
}

std::vector<std::string> GeneratorSpec::all_tokens() const {
  std::set<std::string> out(categories.begin(), categories.end());
  for (const auto& [cat, alias] : aliases) out.insert(alias);
  for (const auto& qt : question_types) {
    for (const auto& tmpl : qt.templates) {
      for (const auto& w : tmpl) {
        if (w != "{noun}") out.insert(w);
      }
    }
  }
  const auto vocab = answer_vocabulary();
  out.insert(vocab.answers().begin(), vocab.answers().end());
  return {out.begin(), out.end()};
}

GeneratedData generate_dataset(const GeneratorSpec& spec) {
  spec.validate();
  GeneratedData out;
  out.vocab = spec.answer_vocabulary();
  Rng rng(spec.seed);

  std::vector<std::vector<std::string>> type_answers;
  std::vector<std::string> train_head, test_head;
  for (const auto& qt : spec.question_types) {
    auto answers = spec.answers_for(qt.kind);
    std::string head, inverted;
    if (qt.kind == QuestionKind::kPresence) {
      head = "yes";
      inverted = "no";
    } else {
      const std::size_t h = rng.index(answers.size());
      std::size_t t = rng.index(answers.size() - 1);
      if (t >= h) ++t;
      head = answers[h];
      inverted = answers[t];
    }
    out.priors.train_head[qt.name] = head;
    out.priors.test_head[qt.name] = inverted;
    train_head.push_back(head);
    test_head.push_back(inverted);
    type_answers.push_back(std::move(answers));
  }

  auto generate_split = [&](Split split, std::size_t n, std::uint64_t salt) {
    Rng split_rng = rng.fork(salt);
    std::vector<Sample> samples;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = split_rng.index(spec.question_types.size());
      const auto& head = split == Split::kTrain ? train_head[t] : test_head[t];
      const std::string answer = draw_answer(type_answers[t], head, spec.bias_skew, split_rng);
      samples.push_back(make_sample(spec, spec.question_types[t], answer, split, i, split_rng));
    }
    return samples;
  };
  out.train = generate_split(Split::kTrain, spec.train_size, 1);
  out.test = generate_split(Split::kTest, spec.test_size, 2);
  return out;
}

void EmbeddingLexicon::add(const std::string& token, std::vector<double> vector, bool noun) {
  if (vector.size() != dim_) throw std::invalid_argument("lexicon vector for '" + token + "' has wrong dimension");
  entries_[token] = Entry{std::move(vector), noun};
}

bool EmbeddingLexicon::is_noun(const std::string& token) const {
  auto it = entries_.find(token);
  return it != entries_.end() && it->second.noun;
}

const EmbeddingLexicon::Entry& EmbeddingLexicon::at(const std::string& token) const {
  auto it = entries_.find(token);
  if (it == entries_.end()) throw std::out_of_range("token '" + token + "' not in lexicon");
  return it->second;
}

double EmbeddingLexicon::cosine(const std::string& a, const std::string& b) const {
  const auto& va = at(a).vector;
  const auto& vb = at(b).vector;
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) {
    ab += va[i] * vb[i];
    aa += va[i] * va[i];
    bb += vb[i] * vb[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::string EmbeddingLexicon::to_json() const {
  ordered_json j;
  j["dim"] = dim_;
  ordered_json tokens = ordered_json::object();
  for (const auto& [token, e] : entries_) {
    ordered_json entry;
    entry["noun"] = e.noun;
    entry["vector"] = e.vector;
    tokens[token] = std::move(entry);
  }
  j["tokens"] = std::move(tokens);
  return j.dump();
}

EmbeddingLexicon EmbeddingLexicon::from_json(const std::string& text) {
  const auto j = ordered_json::parse(text);
  EmbeddingLexicon lex(j.at("dim").get<std::size_t>());
  for (const auto& [token, entry] : j.at("tokens").items()) {
    lex.add(token, entry.at("vector").get<std::vector<double>>(), entry.at("noun").get<bool>());
  }
  return lex;
}

void EmbeddingLexicon::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write lexicon " + path.string());
  out << to_json() << '\n';
}

EmbeddingLexicon EmbeddingLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lexicon " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return from_json(buf.str());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed lexicon " + path.string() + ": " + e.what());
  }
}

EmbeddingLexicon build_embedding_lexicon(const GeneratorSpec& spec) {
  spec.validate();
  constexpr double kSharedWeight = 0.3;
  constexpr double kAliasWeight = 0.3;
  constexpr std::size_t kSharedDims = 18;

  std::vector<std::string> concepts;
  for (const auto& tok : spec.all_tokens()) {
    bool is_alias = false;
    for (const auto& [cat, alias] : spec.aliases) is_alias |= alias == tok;
    if (!is_alias) concepts.push_back(tok);
  }
  const std::size_t needed = concepts.size() + spec.aliases.size() + kSharedDims;
  if (spec.lexicon_dim < needed) {
    throw std::invalid_argument("lexicon_dim must be at least " + std::to_string(needed));
  }
  const std::size_t dim = spec.lexicon_dim;
  Rng rng(spec.seed ^ 0x5EEDBA5EULL);

  // Random orthonormal basis via Gram-Schmidt.
  std::vector<std::vector<double>> basis;
  while (basis.size() < needed) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  auto normalized = [](std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
  };

  const std::size_t shared_begin = concepts.size() + spec.aliases.size();
  std::set<std::string> nouns(spec.categories.begin(), spec.categories.end());
  EmbeddingLexicon lex(dim);
  std::map<std::string, std::vector<double>> concept_vectors;
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    std::vector<double> shared(kSharedDims);
    for (auto& x : shared) x = rng.normal();
    shared = normalized(shared);
    std::vector<double> v = basis[c];
    for (std::size_t s = 0; s < kSharedDims; ++s) {
      for (std::size_t i = 0; i < dim; ++i) v[i] += kSharedWeight * shared[s] * basis[shared_begin + s][i];
    }
    v = normalized(std::move(v));
    concept_vectors[concepts[c]] = v;
    lex.add(concepts[c], std::move(v), nouns.count(concepts[c]) > 0);
  }
  std::size_t alias_slot = concepts.size();
  for (const auto& [cat, alias] : spec.aliases) {
    std::vector<double> v = concept_vectors.at(cat);
    for (std::size_t i = 0; i < dim; ++i) v[i] += kAliasWeight * basis[alias_slot][i];
    ++alias_slot;
    lex.add(alias, normalized(std::move(v)), true);
  }
  return lex;
}

RephrasingGroup generate_rephrasings(const Sample& sample, std::size_t n, const GeneratorSpec& spec) {
  if (n < 2) throw std::invalid_argument("a rephrasing group needs at least two members");
  const QuestionTypeSpec* qt = spec.find_type(sample.question.question_type);
  if (!qt) throw std::invalid_argument("unknown question type '" + sample.question.question_type + "'");

  std::set<std::string> nouns(spec.categories.begin(), spec.categories.end());
  for (const auto& [cat, alias] : spec.aliases) nouns.insert(alias);
  std::string noun;
  for (const auto& tok : sample.question.tokens) {
    if (nouns.count(tok)) {
      noun = tok;
      break;
    }
  }
  if (noun.empty()) throw std::invalid_argument("question '" + sample.question.question_id + "' has no target noun");

  std::vector<std::vector<std::string>> candidates;
  for (const auto& tmpl : qt->templates) {
    auto tokens = render(tmpl, noun);
    if (tokens != sample.question.tokens) candidates.push_back(std::move(tokens));
  }
  if (candidates.size() < n - 1) {
    throw std::invalid_argument("question type '" + qt->name + "' has too few templates for a group of " +
                                std::to_string(n));
  }
  Rng rng(fnv1a(sample.id(), spec.seed));
  for (std::size_t i = candidates.size(); i > 1; --i) std::swap(candidates[i - 1], candidates[rng.index(i)]);

  RephrasingGroup group;
  group.members.push_back(sample);
  for (std::size_t r = 0; r + 1 < n; ++r) {
    Sample m = sample;
    m.question.tokens = candidates[r];
    m.question.question_id = sample.question.question_id + "-r" + std::to_string(r + 1);
    group.members.push_back(std::move(m));
  }
  return group;
}

std::string rephrasing_group_to_json_line(const RephrasingGroup& group) {
  ordered_json members = ordered_json::array();
  for (const auto& m : group.members) members.push_back(ordered_json::parse(sample_to_json_line(m)));
  ordered_json j;
  j["members"] = std::move(members);
  return j.dump();
}

RephrasingGroup rephrasing_group_from_json_line(const std::string& line, const AnswerVocabulary& vocab) {
  const auto j = ordered_json::parse(line);
  RephrasingGroup g;
  for (const auto& m : j.at("members")) g.members.push_back(sample_from_json_line(m.dump(), vocab));
  if (g.members.size() < 2) throw DatasetError("rephrasing group with fewer than two members");
  return g;
}

std::optional<std::size_t> target_noun_position(const QuestionRecord& question, const EmbeddingLexicon& lexicon) {
  for (std::size_t i = question.type_token_count; i < question.tokens.size(); ++i) {
    if (lexicon.is_noun(question.tokens[i])) return i;
  }
  return std::nullopt;
}

Sample build_critical_word_removed(const Sample& sample, const EmbeddingLexicon& lexicon) {
  const auto pos = target_noun_position(sample.question, lexicon);
  if (!pos) throw std::invalid_argument("question '" + sample.question.question_id + "' has no noun to remove");
  Sample out = sample;
  out.question.tokens.erase(out.question.tokens.begin() + static_cast<std::ptrdiff_t>(*pos));
  out.question.question_id += "-star";
  return out;
}

}  // namespace css
