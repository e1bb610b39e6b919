// csskit command-line entry point: gen-data, train, synth, report.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "css/config.hpp"
#include "css/core.hpp"
#include "css/databench.hpp"
#include "css/metrics.hpp"
#include "css/model.hpp"
#include "css/synthesis.hpp"
#include "css/training.hpp"

namespace fs = std::filesystem;
using namespace css;

namespace {

struct Flags {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
  std::vector<std::string> overrides;
};

// file first, then --set key=value, then the dedicated flags
RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  if (!f.config_file.empty()) cfg.load_file(f.config_file);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.seed = *f.seed;
  if (!f.mode.empty()) cfg.mode = f.mode;
  if (!f.out.empty()) cfg.out = f.out;
  cfg.validate();
  return cfg;
}

// Tracks files a command writes so a failure can take them back out.
class Outputs {
 public:
  fs::path add(const fs::path& p) {
    written_.push_back(p);
    return p;
  }
  void discard() {
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
  }

 private:
  std::vector<fs::path> written_;
};

void require(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing input " + p.string());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

struct DataDir {
  AnswerVocabulary vocab;
  std::vector<Sample> train, test;
  EmbeddingLexicon lexicon;
};

DataDir load_data(const RunConfig& cfg, bool need_train, bool need_test) {
  const fs::path d = cfg.data_dir;
  require(d / "vocab.json");
  require(d / "lexicon.json");
  DataDir out{AnswerVocabulary::load(d / "vocab.json"), {}, {}, EmbeddingLexicon::load(d / "lexicon.json")};
  if (need_train) {
    require(d / "train.jsonl");
    out.train = load_dataset(d / "train.jsonl", out.vocab);
  }
  if (need_test) {
    require(d / "test.jsonl");
    out.test = load_dataset(d / "test.jsonl", out.vocab);
  }
  return out;
}

int cmd_gen_data(const RunConfig& cfg, Outputs& outputs) {
  const GeneratorSpec spec = cfg.generator_spec();
  const GeneratedData data = generate_dataset(spec);
  fs::create_directories(cfg.out);
  data.vocab.save(outputs.add(cfg.out / "vocab.json"));
  save_dataset(data.train, outputs.add(cfg.out / "train.jsonl"));
  save_dataset(data.test, outputs.add(cfg.out / "test.jsonl"));
  build_embedding_lexicon(spec).save(outputs.add(cfg.out / "lexicon.json"));
  auto reph = open_out(outputs.add(cfg.out / "rephrasings.jsonl"));
  for (const auto& s : data.test) {
    reph << rephrasing_group_to_json_line(generate_rephrasings(s, cfg.rephrasing_group_size, spec)) << "\n";
  }
  std::cerr << "wrote " << data.train.size() << " train / " << data.test.size() << " test samples to "
            << cfg.out.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, Outputs& outputs) {
  const DataDir data = load_data(cfg, true, true);
  const TrainOptions options = cfg.train_options();
  const TrainMode mode = TrainMode::parse(cfg.mode);
  VqaModel model = make_model(options, mode, data.train, data.vocab);
  fs::create_directories(cfg.out);
  auto log = open_out(outputs.add(cfg.out / "train_log.jsonl"));
  const TrainStats stats = train_model(model, options, mode, data.train, data.test.empty() ? nullptr : &data.test,
                                       data.lexicon, [&](const EpochLog& e) {
                                         log << e.to_json_line() << "\n";
                                         std::cerr << "epoch " << e.epoch << " loss " << e.train_loss;
                                         if (e.test_accuracy) std::cerr << " test acc " << *e.test_accuracy;
                                         std::cerr << "\n";
                                       });
  const fs::path ckpt = cfg.checkpoint_path();
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  model.save_checkpoint(outputs.add(ckpt));
  std::cerr << mode.name() << ": " << stats.epochs.size() << " epochs, " << stats.synthesis_calls
            << " synthesis calls, checkpoint " << ckpt.string() << "\n";
  return 0;
}

int cmd_synth(const RunConfig& cfg, Outputs& outputs) {
  const DataDir data = load_data(cfg, true, false);
  require(cfg.checkpoint_path());
  VqaModel model = VqaModel::load_checkpoint(cfg.checkpoint_path());
  const CssConfig css = cfg.train_options().css;
  fs::create_directories(cfg.out);
  auto dump = open_out(outputs.add(cfg.out / "counterfactuals.jsonl"));
  std::size_t written = 0, skipped = 0;
  for (const auto& s : data.train) {
    for (const SynthesisResult& r : {synthesize_vcss(s, model, data.lexicon, css), synthesize_qcss(s, model, css)}) {
      if (!r.sample) {
        ++skipped;
        continue;
      }
      check_counterfactual(*r.sample);
      dump << counterfactual_to_json_line(*r.sample) << "\n";
      ++written;
    }
  }
  std::cerr << written << " counterfactuals, " << skipped << " skipped\n";
  return 0;
}

int cmd_report(const RunConfig& cfg, Outputs& outputs) {
  const DataDir data = load_data(cfg, false, true);
  require(cfg.checkpoint_path());
  VqaModel model = VqaModel::load_checkpoint(cfg.checkpoint_path());
  model.set_mode(Mode::kEval);
  std::vector<RephrasingGroup> groups;
  if (fs::exists(cfg.data_dir / "rephrasings.jsonl")) {
    std::ifstream in(cfg.data_dir / "rephrasings.jsonl");
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) groups.push_back(rephrasing_group_from_json_line(line, data.vocab));
    }
  }
  const EvalReport report = evaluate(model, data.test, data.lexicon, groups, cfg.ai_k, cfg.cs_k);
  fs::create_directories(cfg.out);
  open_out(outputs.add(cfg.out / "report.json")) << report.to_json() << "\n";
  open_out(outputs.add(cfg.out / "report.txt")) << report.to_text();
  std::cout << report.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual samples synthesizing toolkit"};
  app.require_subcommand(1);
  Flags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config_file, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "seed for data, init and synthesis");
    sub->add_option("--mode", flags.mode, "baseline | ensemble, optionally +css / +vcss / +qcss");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--set", flags.overrides, "extra key=value overrides")->take_all();
  };
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&, Outputs&);
  };
  const Command commands[] = {
      {"gen-data", "write a synthetic changing-priors dataset, lexicon and rephrasings", cmd_gen_data},
      {"train", "train a model and write checkpoint + JSONL log", cmd_train},
      {"synth", "dump V-CSS and Q-CSS counterfactuals for the training split", cmd_synth},
      {"report", "accuracy, AI, CI and CS panels for a checkpoint", cmd_report},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    subs.emplace_back(sub, &c);
  }
  CLI11_PARSE(app, argc, argv);

  Outputs outputs;
  try {
    const RunConfig cfg = resolve(flags);
    for (auto& [sub, cmd] : subs) {
      if (sub->parsed()) return cmd->run(cfg, outputs);
    }
  } catch (const std::exception& e) {
    outputs.discard();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
