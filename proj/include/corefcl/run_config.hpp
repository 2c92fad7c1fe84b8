#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "corefcl/augment.hpp"
#include "corefcl/eval.hpp"
#include "corefcl/model.hpp"
#include "corefcl/synthgen.hpp"
#include "corefcl/train.hpp"

namespace corefcl {

std::string_view version();

/// Every tunable of the pipeline as one flat record. Resolution order is
/// defaults, then a JSON config file, then command-line flags.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string work_dir = "work";
  int threads = 1;

  // synthetic corpus
  int docs = 2000;
  int sentences_per_doc = 5;
  double pronoun_rate = 0.4;
  std::string pronoun = "it";
  int nouns_per_gender = 0;  ///< 0 keeps the built-in lexicon
  double verb_cue = 0.0;

  // data
  std::string input;
  std::string format = "jsonl";
  int context_size = 2;
  double train_ratio = 0.8;
  double valid_ratio = 0.1;
  double test_ratio = 0.1;
  int bpe_merges = 0;
  int min_count = 1;

  // annotation and augmentation
  std::string rules;
  double p_omit = 0.5;
  std::string strategy = "both";
  int variants = 1;
  bool sample_one_chain = false;

  // model
  std::string variant = "multi-enc";
  int d_model = 32;
  int n_layers = 1;
  int n_heads = 4;
  int d_ff = 64;
  double dropout = 0.1;
  int max_len = 128;
  bool share_embeddings = true;

  // MT phase
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 32;
  int max_steps = 6000;
  int eval_every = 100;
  int patience = 3;
  double min_delta = 0.0;

  // fine-tuning phase
  double finetune_learning_rate = 1e-3;
  int finetune_max_steps = 1000;
  double alpha = 0.5;
  double eta = 1.0;

  // evaluation
  int beam_size = 1;
  bool length_norm = false;
  int decode_max_len = 64;
  std::string smoothing = "none";
  bool lowercase = false;
  bool char_level = false;

  /// Throws ConfigError for unknown keys and type mismatches.
  void merge(const nlohmann::json& j);
  void merge_file(const std::filesystem::path& path);
  /// Applies one textual override, e.g. from a command-line flag.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  bool operator==(const RunConfig&) const = default;

  /// Stage seeds are hashed from the master seed and the stage name.
  std::uint64_t derived_seed(std::string_view stage) const;

  Lexicon lexicon() const;
  GenerationConfig generation() const;
  std::array<double, 3> split_ratios() const { return {train_ratio, valid_ratio, test_ratio}; }
  CorruptionConfig corruption(Tokens replacement_pool) const;
  ModelConfig model(int vocab_size) const;
  TrainConfig train(Phase phase) const;
  DecodeOptions decoding() const;
  BleuOptions bleu() const;
};

using RunConfigMember = std::variant<int RunConfig::*, std::uint64_t RunConfig::*, double RunConfig::*,
                                     bool RunConfig::*, std::string RunConfig::*>;

struct RunConfigField {
  std::string_view key;
  RunConfigMember member;
  std::string_view help;
};

/// Field table in documentation order.
const std::vector<RunConfigField>& run_config_fields();

/// Deterministic larger lexicon of pseudo-words, `per_gender` nouns per
/// gender class, on top of the built-in verbs and adjectives.
Lexicon synthetic_lexicon(int per_gender);

}  // namespace corefcl
