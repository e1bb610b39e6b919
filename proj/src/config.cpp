#include "css/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace css {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* begin = value.data();
  const char* end = begin + value.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("bad value for '" + key + "': '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double d = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad value for '" + key + "': '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("bad value for '" + key + "': '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream in(value);
  for (std::string item; std::getline(in, item, ',');) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("'" + key + "' needs at least one value");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = {
      "data_dir",       "out",          "checkpoint",        "mode",           "seed",
      "train_size",     "test_size",    "bias_skew",         "noise_sigma",    "min_objects",
      "max_objects",    "visual_dim",   "lexicon_dim",       "rephrasing_group_size",
      "hidden_dim",     "epochs",       "learning_rate",     "fusion",         "entropy_weight",
      "bias_loss_weight", "eta",        "delta",             "initial_set_size", "word_top_k",
      "answer_top_n",   "probe_uses_fusion", "ai_k",         "cs_k"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "data_dir") data_dir = value;
  else if (key == "out") out = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "mode") mode = value;
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "train_size") train_size = parse_number<std::size_t>(key, value);
  else if (key == "test_size") test_size = parse_number<std::size_t>(key, value);
  else if (key == "bias_skew") bias_skew = parse_double(key, value);
  else if (key == "noise_sigma") noise_sigma = parse_double(key, value);
  else if (key == "min_objects") min_objects = parse_number<int>(key, value);
  else if (key == "max_objects") max_objects = parse_number<int>(key, value);
  else if (key == "visual_dim") visual_dim = parse_number<std::size_t>(key, value);
  else if (key == "lexicon_dim") lexicon_dim = parse_number<std::size_t>(key, value);
  else if (key == "rephrasing_group_size") rephrasing_group_size = parse_number<std::size_t>(key, value);
  else if (key == "hidden_dim") hidden_dim = parse_number<std::size_t>(key, value);
  else if (key == "epochs") epochs = parse_number<std::size_t>(key, value);
  else if (key == "learning_rate") learning_rate = parse_double(key, value);
  else if (key == "fusion") fusion = value;
  else if (key == "entropy_weight") entropy_weight = parse_double(key, value);
  else if (key == "bias_loss_weight") bias_loss_weight = parse_double(key, value);
  else if (key == "eta") eta = parse_double(key, value);
  else if (key == "delta") delta = parse_double(key, value);
  else if (key == "initial_set_size") initial_set_size = parse_number<std::size_t>(key, value);
  else if (key == "word_top_k") word_top_k = parse_number<std::size_t>(key, value);
  else if (key == "answer_top_n") answer_top_n = parse_number<std::size_t>(key, value);
  else if (key == "probe_uses_fusion") probe_uses_fusion = parse_bool(key, value);
  else if (key == "ai_k") ai_k = parse_list(key, value);
  else if (key == "cs_k") cs_k = parse_list(key, value);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::validate() const {
  generator_spec().validate();
  train_options().css.validate();
  TrainMode::parse(mode);
  fusion_kind_from_string(fusion);
  if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be positive");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be non-negative");
  if (rephrasing_group_size < 2) throw std::invalid_argument("rephrasing_group_size must be >= 2");
  for (auto k : ai_k) {
    if (k == 0) throw std::invalid_argument("ai_k entries must be >= 1");
  }
  for (auto k : cs_k) {
    if (k == 0 || k > rephrasing_group_size) throw std::invalid_argument("cs_k entries must lie in [1, group size]");
  }
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out / "checkpoint.json" : checkpoint;
}

GeneratorSpec RunConfig::generator_spec() const {
  GeneratorSpec spec = GeneratorSpec::defaults();
  spec.seed = seed;
  spec.train_size = train_size;
  spec.test_size = test_size;
  spec.bias_skew = bias_skew;
  spec.noise_sigma = noise_sigma;
  spec.min_objects = min_objects;
  spec.max_objects = max_objects;
  spec.visual_dim = visual_dim;
  spec.lexicon_dim = lexicon_dim;
  return spec;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.hidden_dim = hidden_dim;
  o.epochs = epochs;
  o.learning_rate = learning_rate;
  o.ensemble_strategy = {fusion_kind_from_string(fusion), entropy_weight, bias_loss_weight};
  if (o.ensemble_strategy.kind == FusionKind::kNone) {
    throw std::invalid_argument("fusion must name an ensemble strategy; use mode=baseline for plain training");
  }
  o.css.eta = eta;
  o.css.delta = delta;
  o.css.initial_set_size = initial_set_size;
  o.css.word_top_k = word_top_k;
  o.css.answer_top_n = answer_top_n;
  o.css.probe_uses_fusion = probe_uses_fusion;
  o.css.seed = seed;
  o.seed = seed;
  return o;
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "data_dir = " << data_dir.string() << "\n"
    << "out = " << out.string() << "\n"
    << "checkpoint = " << checkpoint_path().string() << "\n"
    << "mode = " << mode << "\n"
    << "seed = " << seed << "\n"
    << "train_size = " << train_size << "\n"
    << "test_size = " << test_size << "\n"
    << "bias_skew = " << bias_skew << "\n"
    << "noise_sigma = " << noise_sigma << "\n"
    << "min_objects = " << min_objects << "\n"
    << "max_objects = " << max_objects << "\n"
    << "visual_dim = " << visual_dim << "\n"
    << "lexicon_dim = " << lexicon_dim << "\n"
    << "rephrasing_group_size = " << rephrasing_group_size << "\n"
    << "hidden_dim = " << hidden_dim << "\n"
    << "epochs = " << epochs << "\n"
    << "learning_rate = " << learning_rate << "\n"
    << "fusion = " << fusion << "\n"
    << "entropy_weight = " << entropy_weight << "\n"
    << "bias_loss_weight = " << bias_loss_weight << "\n"
    << "eta = " << eta << "\n"
    << "delta = " << delta << "\n"
    << "initial_set_size = " << initial_set_size << "\n"
    << "word_top_k = " << word_top_k << "\n"
    << "answer_top_n = " << answer_top_n << "\n"
    << "probe_uses_fusion = " << (probe_uses_fusion ? "true" : "false") << "\n"
    << "ai_k = " << join(ai_k) << "\n"
    << "cs_k = " << join(cs_k) << "\n";
  return o.str();
}

}  // namespace css
