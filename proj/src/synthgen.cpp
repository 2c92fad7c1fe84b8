#include "corefcl/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "corefcl/error.hpp"
#include "corefcl/rng.hpp"

namespace corefcl {

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::M: return "M";
    case Gender::F: return "F";
    case Gender::N: return "N";
  }
  return "?";
}

std::optional<Gender> parse_gender(std::string_view s) {
  if (s == "M") return Gender::M;
  if (s == "F") return Gender::F;
  if (s == "N") return Gender::N;
  return std::nullopt;
}

Lexicon Lexicon::default_lexicon() {
  Lexicon lex;
  lex.nouns = {
      {"coat", "mantel", Gender::M},   {"chair", "stuhl", Gender::M},
      {"garden", "garten", Gender::M}, {"tree", "baum", Gender::M},
      {"car", "wagen", Gender::M},     {"lamp", "lampe", Gender::F},
      {"door", "tuer", Gender::F},     {"bottle", "flasche", Gender::F},
      {"street", "strasse", Gender::F}, {"cup", "tasse", Gender::F},
      {"book", "buch", Gender::N},     {"house", "haus", Gender::N},
      {"window", "fenster", Gender::N}, {"bed", "bett", Gender::N},
      {"picture", "bild", Gender::N},
  };
  lex.verbs = {
      {"falls", "faellt"},   {"breaks", "bricht"}, {"shines", "glaenzt"},
      {"stays", "bleibt"},   {"moves", "wackelt"}, {"disappears", "verschwindet"},
      {"helps", "hilft"},    {"waits", "wartet"},
  };
  lex.adjectives = {
      {"red", "rot"}, {"old", "alt"},     {"new", "neu"},     {"big", "gross"},
      {"small", "klein"}, {"clean", "sauber"}, {"heavy", "schwer"}, {"cheap", "billig"},
  };
  lex.pronouns["it"] = {{Gender::M, "er"}, {Gender::F, "sie"}, {Gender::N, "es"}};
  return lex;
}

void Lexicon::validate() const {
  if (nouns.empty() || verbs.empty() || adjectives.empty() || pronouns.empty()) {
    throw Error("lexicon: every category must be non-empty");
  }
  auto check_unique = [](const std::vector<std::string>& forms, const char* what) {
    std::set<std::string> seen;
    for (const auto& f : forms) {
      if (f.empty()) throw Error(std::string("lexicon: empty ") + what + " form");
      if (!seen.insert(f).second) throw Error(std::string("lexicon: duplicate ") + what + " '" + f + "'");
    }
  };
  std::vector<std::string> ns, nt, vs, vt, as, at;
  for (const auto& n : nouns) ns.push_back(n.source), nt.push_back(n.target);
  for (const auto& v : verbs) vs.push_back(v.source), vt.push_back(v.target);
  for (const auto& a : adjectives) as.push_back(a.source), at.push_back(a.target);
  check_unique(ns, "noun source");
  check_unique(nt, "noun target");
  check_unique(vs, "verb source");
  check_unique(vt, "verb target");
  check_unique(as, "adjective source");
  check_unique(at, "adjective target");
  for (const auto& [pron, by_gender] : pronouns) {
    for (Gender g : genders_in_use()) {
      if (!by_gender.contains(g)) {
        throw Error("lexicon: pronoun '" + pron + "' lacks a mapping for gender " +
                    std::string(to_string(g)));
      }
    }
    std::set<std::string> targets;
    for (const auto& [g, t] : by_gender) {
      if (!targets.insert(t).second) throw Error("lexicon: pronoun '" + pron + "' maps two genders to '" + t + "'");
    }
  }
}

std::vector<Gender> Lexicon::genders_in_use() const {
  std::set<Gender> gs;
  for (const auto& n : nouns) gs.insert(n.gender);
  return {gs.begin(), gs.end()};
}

const NounEntry* Lexicon::find_noun(std::string_view source) const {
  for (const auto& n : nouns) {
    if (n.source == source) return &n;
  }
  return nullptr;
}

std::vector<Document> generate_corpus(const Lexicon& lexicon, const GenerationConfig& config) {
  lexicon.validate();
  if (config.num_docs <= 0 || config.sentences_per_doc <= 0) {
    throw Error("generate_corpus: document and sentence counts must be positive");
  }
  if (!(config.pronoun_rate >= 0.0 && config.pronoun_rate <= 1.0)) {
    throw Error("generate_corpus: pronoun_rate must lie in [0, 1]");
  }
  const int S = config.sentences_per_doc;
  if (config.pronoun_rate > 0.0 && S < 2) {
    throw Error("generate_corpus: pronoun_rate > 0 needs at least 2 sentences per document");
  }
  const int max_followups = S / 2;
  if (config.pronoun_rate * S > max_followups + 1e-12) {
    throw Error("generate_corpus: pronoun_rate exceeds the structural maximum " +
                std::to_string(static_cast<double>(max_followups) / S) +
                " (every follow-up needs its own antecedent sentence)");
  }
  const auto pron_it = lexicon.pronouns.find(config.pronoun);
  if (pron_it == lexicon.pronouns.end()) {
    throw Error("generate_corpus: pronoun '" + config.pronoun + "' not in lexicon");
  }

  if (!(config.verb_cue >= 0.0 && config.verb_cue <= 1.0)) {
    throw Error("generate_corpus: verb_cue must lie in [0, 1]");
  }
  const auto genders = lexicon.genders_in_use();
  if (config.verb_cue > 0.0 && lexicon.verbs.size() < genders.size()) {
    throw Error("generate_corpus: verb_cue needs at least one verb per gender class");
  }

  const std::size_t noun_count = lexicon.nouns.size();
  std::vector<Document> docs;
  docs.reserve(config.num_docs);
  for (int d = 0; d < config.num_docs; ++d) {
    Philox rng(mix64(config.seed), static_cast<std::uint64_t>(d));
    Document doc;
    doc.doc_id = "d" + std::to_string(d);

    // Stochastic rounding keeps the expected follow-up count at rate * S.
    const double want = config.pronoun_rate * S;
    int k = static_cast<int>(std::floor(want));
    if (rng.uniform() < want - k) ++k;
    k = std::min(k, max_followups);

    // k non-adjacent positions in [1, S-1]: sample k of S-k slots, then spread.
    std::vector<bool> followup(S, false);
    {
      const int slots = S - k;
      std::vector<int> pool(slots);
      for (int i = 0; i < slots; ++i) pool[i] = i;
      for (int i = 0; i < k; ++i) {
        std::swap(pool[i], pool[i + rng.below(static_cast<std::uint64_t>(slots - i))]);
      }
      std::vector<int> chosen(pool.begin(), pool.begin() + k);
      std::sort(chosen.begin(), chosen.end());
      for (int j = 0; j < k; ++j) followup[chosen[j] + j + 1] = true;
    }

    std::vector<std::size_t> recent;  // nouns of earlier intros, newest last
    const NounEntry* last_noun = nullptr;
    for (int s = 0; s < S; ++s) {
      SentencePair pair;
      pair.index = s;
      if (followup[s]) {
        std::size_t verb_idx = 0;
        if (config.verb_cue > 0.0 && rng.uniform() < config.verb_cue) {
          // Verb i prefers gender class genders[i % G].
          std::vector<std::size_t> preferred;
          for (std::size_t v = 0; v < lexicon.verbs.size(); ++v) {
            if (genders[v % genders.size()] == last_noun->gender) preferred.push_back(v);
          }
          verb_idx = preferred[rng.below(preferred.size())];
        } else {
          verb_idx = rng.below(lexicon.verbs.size());
        }
        const auto& verb = lexicon.verbs[verb_idx];
        pair.source_text = config.pronoun + " " + verb.source;
        pair.target_text = pron_it->second.at(last_noun->gender) + " " + verb.target;
      } else {
        // Avoid repeating a noun of a recent intro so that no nominal chain
        // links two intro sentences.
        std::vector<std::size_t> candidates;
        const std::size_t window = std::min(recent.size(), noun_count - 1);
        for (std::size_t n = 0; n < noun_count; ++n) {
          if (std::find(recent.end() - static_cast<std::ptrdiff_t>(window), recent.end(), n) ==
              recent.end()) {
            candidates.push_back(n);
          }
        }
        const std::size_t noun_idx = candidates[rng.below(candidates.size())];
        const auto& noun = lexicon.nouns[noun_idx];
        const auto& adj = lexicon.adjectives[rng.below(lexicon.adjectives.size())];
        pair.source_text = lexicon.determiner.source + " " + noun.source + " " +
                           lexicon.copula.source + " " + adj.source;
        pair.target_text = lexicon.determiner.target + " " + noun.target + " " +
                           lexicon.copula.target + " " + adj.target;
        recent.push_back(noun_idx);
        last_noun = &noun;
      }
      doc.pairs.push_back(std::move(pair));
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<ContrastiveTestItem> generate_contrastive_suite(const std::vector<Document>& corpus,
                                                            const Lexicon& lexicon,
                                                            std::size_t context_size) {
  const auto genders = lexicon.genders_in_use();
  std::vector<ContrastiveTestItem> suite;
  for (const auto& doc : corpus) {
    const auto examples = extract_examples(doc, context_size);
    for (std::size_t i = 1; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      if (ex.source.size() != 2 || ex.target.size() != 2) continue;
      const auto pron = lexicon.pronouns.find(ex.source[0]);
      if (pron == lexicon.pronouns.end()) continue;
      const auto prev = split_whitespace(doc.pairs[i - 1].source_text);
      if (prev.size() < 2) continue;
      const NounEntry* noun = lexicon.find_noun(prev[1]);
      if (noun == nullptr) continue;

      ContrastiveTestItem item;
      item.contexts = ex.contexts;
      item.source = ex.source;
      item.target_correct = ex.target;
      item.pronoun_position = 0;
      for (Gender g : genders) {
        if (g == noun->gender) continue;
        Tokens wrong = ex.target;
        wrong[0] = pron->second.at(g);
        item.targets_incorrect.push_back(std::move(wrong));
      }
      suite.push_back(std::move(item));
    }
  }
  return suite;
}

std::size_t count_pronoun_followups(const std::vector<Document>& corpus, const Lexicon& lexicon) {
  std::size_t count = 0;
  for (const auto& doc : corpus) {
    for (const auto& p : doc.pairs) {
      const auto toks = split_whitespace(p.source_text);
      if (!toks.empty() && lexicon.pronouns.contains(toks[0])) ++count;
    }
  }
  return count;
}

}  // namespace corefcl
