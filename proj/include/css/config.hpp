#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "css/databench.hpp"
#include "css/training.hpp"

namespace css {

/// Everything a CLI command needs. Read from a flat `key = value` file; command-line flags
/// override file values. `keys()` lists every accepted key.
struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out = "out";
  std::filesystem::path checkpoint;  // defaults to <out>/checkpoint.json
  std::string mode = "ensemble+css";
  std::uint64_t seed = 7;

  // data generation
  std::size_t train_size = 5000;
  std::size_t test_size = 1000;
  double bias_skew = 0.8;
  double noise_sigma = 0.1;
  int min_objects = 4;
  int max_objects = 10;
  std::size_t visual_dim = 32;
  std::size_t lexicon_dim = 96;
  std::size_t rephrasing_group_size = 4;

  // model and training
  std::size_t hidden_dim = 32;
  std::size_t epochs = 30;
  double learning_rate = 0.01;
  std::string fusion = "learned_mixin";
  double entropy_weight = 0.36;
  double bias_loss_weight = 1.0;

  // synthesis
  double eta = 0.65;
  double delta = 0.5;
  std::size_t initial_set_size = 8;
  std::size_t word_top_k = 1;
  std::size_t answer_top_n = 5;
  bool probe_uses_fusion = false;

  // metrics
  std::vector<std::size_t> ai_k = {1, 2, 3};
  std::vector<std::size_t> cs_k = {1, 2, 3, 4};

  static const std::vector<std::string>& keys();

  /// Throws std::invalid_argument on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);
  void validate() const;

  std::filesystem::path checkpoint_path() const;
  GeneratorSpec generator_spec() const;
  TrainOptions train_options() const;
  std::string to_text() const;
};

}  // namespace css
