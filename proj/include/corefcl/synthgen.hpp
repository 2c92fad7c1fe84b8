#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "corefcl/corpus.hpp"

namespace corefcl {

enum class Gender { M, F, N };

std::string_view to_string(Gender g);
std::optional<Gender> parse_gender(std::string_view s);

struct NounEntry {
  std::string source;
  std::string target;
  Gender gender = Gender::N;
};

struct WordPair {
  std::string source;
  std::string target;
};

/// Bilingual lexicon for the synthetic pronoun task. Intro sentences follow
/// "the <noun> is <adj>" -> "<det> <noun> <copula> <adj>"; follow-ups follow
/// "<pronoun> <verb>" -> "<gendered pronoun> <verb>".
struct Lexicon {
  std::vector<NounEntry> nouns;
  std::vector<WordPair> verbs;
  std::vector<WordPair> adjectives;
  /// source pronoun -> gender class -> target pronoun
  std::map<std::string, std::map<Gender, std::string>> pronouns;
  WordPair determiner{"the", "de"};
  WordPair copula{"is", "ist"};

  /// 15 nouns (5 per gender), 8 verbs, 8 adjectives, it -> {er, sie, es}.
  static Lexicon default_lexicon();

  /// Throws Error when a category is empty, forms repeat, or a gender in use
  /// lacks a pronoun mapping.
  void validate() const;

  std::vector<Gender> genders_in_use() const;
  const NounEntry* find_noun(std::string_view source) const;
};

struct GenerationConfig {
  int num_docs = 100;
  int sentences_per_doc = 6;
  double pronoun_rate = 0.5;
  std::uint64_t seed = 0;
  /// Pronoun used in follow-up sentences; must be a key of Lexicon::pronouns.
  std::string pronoun = "it";
  /// Probability that a follow-up verb is drawn from the verbs preferring the
  /// antecedent's gender (verb i prefers genders_in_use()[i % G]); otherwise
  /// the verb is uniform. Gives the pronoun a sentence-local cue.
  double verb_cue = 0.0;
};

struct ContrastiveTestItem {
  std::vector<Tokens> contexts;
  Tokens source;
  Tokens target_correct;
  std::vector<Tokens> targets_incorrect;
  int pronoun_position = 0;
};

/// Deterministic under config.seed. Each document alternates intro sentences
/// with pronoun follow-ups; a follow-up always directly follows an intro.
/// The number of follow-ups per document is rate*S stochastically rounded.
std::vector<Document> generate_corpus(const Lexicon& lexicon, const GenerationConfig& config);

/// One item per pronoun follow-up found in the corpus; incorrect variants
/// substitute every other in-use gender's pronoun.
std::vector<ContrastiveTestItem> generate_contrastive_suite(
    const std::vector<Document>& corpus, const Lexicon& lexicon,
    std::size_t context_size = kDefaultContextSize);

/// Counts sentences whose source starts with a lexicon pronoun.
std::size_t count_pronoun_followups(const std::vector<Document>& corpus, const Lexicon& lexicon);

}  // namespace corefcl
