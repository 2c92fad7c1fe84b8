#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "corefcl/corpus.hpp"

namespace corefcl {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kBoc = 4;
inline constexpr int kNumReserved = 5;

class Vocabulary {
 public:
  /// Reserved tokens only.
  Vocabulary();

  /// Tokens with frequency >= min_count, ordered by descending frequency then
  /// lexicographically, numbered after the reserved ids.
  static Vocabulary build(const std::vector<Tokens>& sentences, int min_count = 1);

  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary parse(std::istream& in);
  void save(const std::filesystem::path& path) const;
  void write(std::ostream& out) const;

  int id(const std::string& token) const;  ///< kUnk when absent
  std::optional<int> find(const std::string& token) const;
  const std::string& token(int id) const;  ///< throws on out-of-range ids
  int size() const { return static_cast<int>(tokens_.size()); }
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  static const std::vector<std::string>& reserved_tokens();

 private:
  int add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

inline Vocabulary build_vocab(const std::vector<Tokens>& sentences, int min_count = 1) {
  return Vocabulary::build(sentences, min_count);
}

/// Byte-pair encoding over whitespace words (Sennrich et al.). Words are split
/// into characters and the last symbol carries the end-of-word marker.
class BpeModel {
 public:
  using Pair = std::pair<std::string, std::string>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Pair> merges, std::string end_of_word = "</w>");

  /// Greedy merging of the most frequent adjacent pair; ties go to the
  /// lexicographically smallest pair.
  static BpeModel train(const std::vector<Tokens>& sentences, int num_merges);

  static BpeModel load(const std::filesystem::path& path);
  static BpeModel parse(std::istream& in);
  void save(const std::filesystem::path& path) const;

  Tokens segment_word(const std::string& word) const;
  Tokens segment(const Tokens& words) const;
  /// Inverse of segment: symbols are concatenated until one ends a word.
  Tokens join(const Tokens& symbols) const;

  const std::vector<Pair>& merges() const { return merges_; }
  const std::string& end_of_word() const { return end_of_word_; }

 private:
  std::vector<Pair> merges_;
  std::map<Pair, int> rank_;
  std::string end_of_word_ = "</w>";
};

inline BpeModel train_bpe(const std::vector<Tokens>& sentences, int num_merges) {
  return BpeModel::train(sentences, num_merges);
}

std::vector<int> encode(const Tokens& tokens, const Vocabulary& vocab, const BpeModel* bpe = nullptr);
Tokens decode(const std::vector<int>& ids, const Vocabulary& vocab, const BpeModel* bpe = nullptr);

/// Model-ready ids: contexts as [BOC, ...], source and target as [BOS, ..., EOS].
struct EncodedExample {
  std::vector<std::vector<int>> contexts;
  std::vector<int> source;
  std::vector<int> target;
};

EncodedExample encode_example(const ContextualExample& example, const Vocabulary& vocab,
                              const BpeModel* bpe = nullptr);
std::vector<int> encode_context(const Tokens& context, const Vocabulary& vocab, const BpeModel* bpe = nullptr);

/// Source and target token strings of every example, for building a
/// vocabulary (contexts are earlier sources); segmented when a BPE model is given.
std::vector<Tokens> vocabulary_sentences(const std::vector<ContextualExample>& examples,
                                         const BpeModel* bpe = nullptr);

}  // namespace corefcl
