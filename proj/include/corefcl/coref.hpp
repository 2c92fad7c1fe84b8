#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "corefcl/corpus.hpp"
#include "corefcl/synthgen.hpp"

namespace corefcl {

enum class Pos { Noun, Det, Adj, Pron, Other };
enum class Number { Sg, Pl };

struct LexEntry {
  Pos pos = Pos::Other;
  std::optional<Number> number;
  std::optional<Gender> gender;
};

/// Closed pronoun set plus a small POS lexicon driving the noun-chunk grammar
/// DET? ADJ* NOUN+.
class RuleSet {
 public:
  RuleSet();

  /// JSON-lines of {"token", "pos", "number", "gender"}.
  static RuleSet load(const std::filesystem::path& path);
  static RuleSet parse(std::istream& in);
  /// Lexicon-derived rules: nouns with gender, adjectives, determiner,
  /// follow-up pronouns.
  static RuleSet from_lexicon(const Lexicon& lexicon);

  void save(const std::filesystem::path& path) const;
  void write(std::ostream& out) const;

  void add(const std::string& token, LexEntry entry);
  const LexEntry* lookup(const std::string& token) const;
  bool is_pronoun(const std::string& token) const;
  Pos pos(const std::string& token) const;

  /// Noun tokens in lexicon order; the default replacement pool for augment.
  std::vector<std::string> nouns() const;

  void set_pronouns(std::set<std::string> pronouns) { pronouns_ = std::move(pronouns); }
  const std::set<std::string>& pronouns() const { return pronouns_; }

  bool case_sensitive = false;

 private:
  std::string key(const std::string& token) const;

  std::unordered_map<std::string, LexEntry> entries_;
  std::vector<std::string> order_;
  std::set<std::string> pronouns_;
};

enum class MentionKind { Pronoun, Nominal };

inline constexpr int kSourceLocation = -1;

struct Mention {
  int location = kSourceLocation;  ///< context index, or kSourceLocation
  int start = 0;
  int end = 0;
  Tokens surface;
  MentionKind kind = MentionKind::Nominal;

  bool operator==(const Mention&) const = default;
};

struct CorefChain {
  std::vector<Mention> antecedents;  ///< all in contexts
  std::vector<Mention> anaphors;     ///< all in the source sentence

  bool operator==(const CorefChain&) const = default;
};

struct AnnotatedExample {
  ContextualExample example;
  std::vector<CorefChain> chains;
};

std::vector<Mention> detect_mentions(const Tokens& sentence, const RuleSet& rules,
                                     int location = kSourceLocation);

/// Links source mentions to context mentions. Pronouns take the nearest
/// compatible nominal (nearest context first, rightmost mention first);
/// nominals link to every context nominal sharing their head noun.
AnnotatedExample resolve(const ContextualExample& example, const RuleSet& rules);

std::vector<AnnotatedExample> filter_annotated(const std::vector<AnnotatedExample>& examples);

double annotation_rate(const std::vector<AnnotatedExample>& examples);

/// Annotated dataset I/O: corpus JSONL record plus "chains" and "ctx".
void write_annotated(std::ostream& out, const std::vector<AnnotatedExample>& examples);
std::vector<AnnotatedExample> parse_annotated(std::istream& in);

}  // namespace corefcl
