#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "corefcl/model.hpp"
#include "corefcl/synthgen.hpp"

namespace corefcl {

enum class Smoothing { None, AddEpsilon };

std::string_view to_string(Smoothing s);
Smoothing parse_smoothing(std::string_view s);

struct BleuOptions {
  int max_n = 4;
  Smoothing smoothing = Smoothing::None;
  double epsilon = 0.1;
  bool lowercase = false;
  /// Split tokens into UTF-8 characters before counting n-grams.
  bool char_level = false;
};

struct BleuReport {
  double bleu = 0.0;  ///< 0..100
  std::vector<double> precisions;
  std::vector<std::int64_t> matches;
  std::vector<std::int64_t> totals;
  double brevity_penalty = 0.0;
  std::int64_t hyp_length = 0;
  std::int64_t ref_length = 0;
  BleuOptions options;

  nlohmann::json to_json() const;
};

/// Corpus-level BLEU with clipped n-gram counts. Orders for which the
/// hypotheses contain no n-grams at all are left out of the geometric mean.
BleuReport corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                       const BleuOptions& options = {});

struct DecodeOptions {
  int max_len = 64;  ///< generated tokens, EOS included
  int beam_size = 1;
  bool length_norm = false;  ///< rank finished beams by score / length^0.6
};

/// Argmax decoding; ties go to the lowest token id. Returned sequences
/// exclude BOS and EOS.
template <typename T>
std::vector<std::vector<int>> greedy_decode(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                            int max_len = 64);

template <typename T>
std::vector<int> beam_decode(const ModelParams<T>& params, const EncodedExample& example,
                             const DecodeOptions& options);

template <typename T>
std::vector<std::vector<int>> translate(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                        const DecodeOptions& options);

// --- contrastive scoring ----------------------------------------------------------

struct EncodedContrastiveItem {
  EncodedExample correct;
  std::vector<std::vector<int>> incorrect_targets;
};

EncodedContrastiveItem encode_test_item(const ContrastiveTestItem& item, const Vocabulary& vocab,
                                        const BpeModel* bpe = nullptr);

struct ItemScore {
  double correct = 0.0;
  std::vector<double> incorrect;
  bool is_correct = false;
};

struct ContrastiveResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<ItemScore> items;

  nlohmann::json to_json(bool with_items = false) const;
};

/// An item counts as correct iff its correct target scores strictly higher
/// than every incorrect one.
template <typename T>
ContrastiveResult contrastive_accuracy(const ModelParams<T>& params, std::span<const EncodedContrastiveItem> suite,
                                       int batch_size = 64);

/// JSON lines {"ctx": [...], "src": ..., "tgt": ..., "wrong": [...]}.
void write_suite(std::ostream& out, const std::vector<ContrastiveTestItem>& suite);
std::vector<ContrastiveTestItem> parse_suite(std::istream& in);
std::vector<ContrastiveTestItem> load_suite(const std::filesystem::path& path);

}  // namespace corefcl
