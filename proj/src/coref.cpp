#include "corefcl/coref.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include <json.hpp>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;

namespace {

const char* pos_name(Pos p) {
  switch (p) {
    case Pos::Noun: return "NOUN";
    case Pos::Det: return "DET";
    case Pos::Adj: return "ADJ";
    case Pos::Pron: return "PRON";
    case Pos::Other: return "OTHER";
  }
  return "OTHER";
}

std::optional<Pos> parse_pos(const std::string& s) {
  if (s == "NOUN") return Pos::Noun;
  if (s == "DET") return Pos::Det;
  if (s == "ADJ") return Pos::Adj;
  if (s == "PRON") return Pos::Pron;
  if (s == "OTHER") return Pos::Other;
  return std::nullopt;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

RuleSet::RuleSet() {
  // Closed pronoun set; number/gender from ordinary English usage.
  struct P { const char* tok; Number num; std::optional<Gender> g; };
  const P defaults[] = {
      {"it", Number::Sg, std::nullopt},   {"he", Number::Sg, Gender::M},
      {"she", Number::Sg, Gender::F},     {"they", Number::Pl, std::nullopt},
      {"him", Number::Sg, Gender::M},     {"her", Number::Sg, Gender::F},
      {"them", Number::Pl, std::nullopt}, {"its", Number::Sg, std::nullopt},
      {"his", Number::Sg, Gender::M},     {"this", Number::Sg, std::nullopt},
      {"that", Number::Sg, std::nullopt},
  };
  for (const auto& p : defaults) {
    add(p.tok, LexEntry{Pos::Pron, p.num, p.g});
    pronouns_.insert(p.tok);
  }
}

std::string RuleSet::key(const std::string& token) const {
  return case_sensitive ? token : lower(token);
}

void RuleSet::add(const std::string& token, LexEntry entry) {
  auto k = key(token);
  auto [it, inserted] = entries_.insert_or_assign(k, entry);
  if (inserted) order_.push_back(k);
}

const LexEntry* RuleSet::lookup(const std::string& token) const {
  auto it = entries_.find(key(token));
  return it == entries_.end() ? nullptr : &it->second;
}

bool RuleSet::is_pronoun(const std::string& token) const { return pronouns_.contains(key(token)); }

Pos RuleSet::pos(const std::string& token) const {
  const auto* e = lookup(token);
  return e ? e->pos : Pos::Other;
}

std::vector<std::string> RuleSet::nouns() const {
  std::vector<std::string> out;
  for (const auto& k : order_) {
    if (entries_.at(k).pos == Pos::Noun) out.push_back(k);
  }
  return out;
}

RuleSet RuleSet::parse(std::istream& in) {
  RuleSet rules;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("invalid JSON: ") + e.what(), lineno);
    }
    if (!rec.is_object() || !rec.contains("token") || !rec["token"].is_string() ||
        !rec.contains("pos") || !rec["pos"].is_string()) {
      throw FormatError("rule record needs string fields token and pos", lineno);
    }
    LexEntry e;
    auto pos = parse_pos(rec["pos"].get<std::string>());
    if (!pos) throw FormatError("unknown pos '" + rec["pos"].get<std::string>() + "'", lineno);
    e.pos = *pos;
    if (rec.contains("number") && !rec["number"].is_null()) {
      const auto n = rec["number"].get<std::string>();
      if (n == "SG") e.number = Number::Sg;
      else if (n == "PL") e.number = Number::Pl;
      else throw FormatError("unknown number '" + n + "'", lineno);
    }
    if (rec.contains("gender") && !rec["gender"].is_null()) {
      const auto g = rec["gender"].get<std::string>();
      e.gender = parse_gender(g);
      if (!e.gender) throw FormatError("unknown gender '" + g + "'", lineno);
    }
    const auto token = rec["token"].get<std::string>();
    rules.add(token, e);
    // The closed pronoun set follows the file: PRON entries join it, and a
    // default pronoun re-tagged with another POS leaves it.
    if (e.pos == Pos::Pron) rules.pronouns_.insert(rules.key(token));
    else rules.pronouns_.erase(rules.key(token));
  }
  return rules;
}

RuleSet RuleSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open rule lexicon: " + path.string());
  return parse(in);
}

RuleSet RuleSet::from_lexicon(const Lexicon& lexicon) {
  RuleSet rules;
  rules.add(lexicon.determiner.source, LexEntry{Pos::Det, std::nullopt, std::nullopt});
  for (const auto& n : lexicon.nouns) rules.add(n.source, LexEntry{Pos::Noun, Number::Sg, n.gender});
  for (const auto& a : lexicon.adjectives) rules.add(a.source, LexEntry{Pos::Adj, std::nullopt, std::nullopt});
  for (const auto& v : lexicon.verbs) rules.add(v.source, LexEntry{Pos::Other, std::nullopt, std::nullopt});
  rules.add(lexicon.copula.source, LexEntry{Pos::Other, std::nullopt, std::nullopt});
  for (const auto& [pron, _] : lexicon.pronouns) {
    if (!rules.is_pronoun(pron)) {
      rules.add(pron, LexEntry{Pos::Pron, Number::Sg, std::nullopt});
      rules.pronouns_.insert(rules.key(pron));
    }
  }
  return rules;
}

void RuleSet::write(std::ostream& out) const {
  for (const auto& k : order_) {
    const auto& e = entries_.at(k);
    json rec = {{"token", k}, {"pos", pos_name(e.pos)}};
    rec["number"] = e.number ? json(*e.number == Number::Sg ? "SG" : "PL") : json(nullptr);
    rec["gender"] = e.gender ? json(std::string(to_string(*e.gender))) : json(nullptr);
    out << rec.dump() << '\n';
  }
}

void RuleSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write rule lexicon: " + path.string());
  write(out);
}

std::vector<Mention> detect_mentions(const Tokens& sentence, const RuleSet& rules, int location) {
  std::vector<Mention> out;
  const int n = static_cast<int>(sentence.size());
  // Length of the ADJ* NOUN+ chunk starting at i (0 if none).
  auto chunk_from = [&](int i) {
    int j = i;
    while (j < n && rules.pos(sentence[j]) == Pos::Adj) ++j;
    int k = j;
    while (k < n && rules.pos(sentence[k]) == Pos::Noun) ++k;
    return k > j ? k - i : 0;
  };
  auto emit = [&](int start, int end, MentionKind kind) {
    out.push_back(Mention{location, start, end,
                          Tokens(sentence.begin() + start, sentence.begin() + end), kind});
  };

  int i = 0;
  while (i < n) {
    const auto& tok = sentence[i];
    const Pos pos = rules.pos(tok);
    if (rules.is_pronoun(tok)) {
      // A pronoun-set word heading a noun chunk ("this coat", "its lid") acts
      // as its determiner.
      if (int len = chunk_from(i + 1); len > 0) {
        emit(i, i + 1 + len, MentionKind::Nominal);
        i += 1 + len;
      } else {
        emit(i, i + 1, MentionKind::Pronoun);
        ++i;
      }
      continue;
    }
    if (pos == Pos::Det) {
      if (int len = chunk_from(i + 1); len > 0) {
        emit(i, i + 1 + len, MentionKind::Nominal);
        i += 1 + len;
        continue;
      }
    } else if (pos == Pos::Adj || pos == Pos::Noun) {
      if (int len = chunk_from(i); len > 0) {
        emit(i, i + len, MentionKind::Nominal);
        i += len;
        continue;
      }
    }
    ++i;
  }
  return out;
}

namespace {

std::string head_of(const Mention& m) { return m.surface.back(); }

Number number_of_nominal(const Mention& m, const RuleSet& rules) {
  const auto head = head_of(m);
  if (const auto* e = rules.lookup(head); e && e->number) return *e->number;
  const std::string h = rules.case_sensitive ? head : lower(head);
  if (h.size() > 3 && h.back() == 's' && h[h.size() - 2] != 's') return Number::Pl;
  return Number::Sg;
}

std::optional<Gender> gender_of(const std::string& token, const RuleSet& rules) {
  const auto* e = rules.lookup(token);
  return e ? e->gender : std::nullopt;
}

bool compatible(const Mention& pronoun, const Mention& nominal, const RuleSet& rules) {
  const auto* pe = rules.lookup(pronoun.surface.front());
  const Number pn = pe && pe->number ? *pe->number : Number::Sg;
  if (pn != number_of_nominal(nominal, rules)) return false;
  const auto pg = gender_of(pronoun.surface.front(), rules);
  const auto ng = gender_of(head_of(nominal), rules);
  return !pg || !ng || *pg == *ng;
}

bool same_head(const Mention& a, const Mention& b, const RuleSet& rules) {
  if (rules.case_sensitive) return head_of(a) == head_of(b);
  return lower(head_of(a)) == lower(head_of(b));
}

}  // namespace

AnnotatedExample resolve(const ContextualExample& example, const RuleSet& rules) {
  AnnotatedExample out{example, {}};
  if (example.contexts.empty()) return out;

  std::vector<std::vector<Mention>> ctx_nominals(example.contexts.size());
  for (std::size_t c = 0; c < example.contexts.size(); ++c) {
    for (auto& m : detect_mentions(example.contexts[c], rules, static_cast<int>(c))) {
      if (m.kind == MentionKind::Nominal) ctx_nominals[c].push_back(std::move(m));
    }
  }

  // Candidate links: (anaphor, antecedents).
  std::vector<CorefChain> links;
  for (const auto& anaphor : detect_mentions(example.source, rules, kSourceLocation)) {
    CorefChain link;
    if (anaphor.kind == MentionKind::Pronoun) {
      for (std::size_t c = example.contexts.size(); c-- > 0 && link.antecedents.empty();) {
        const auto& cands = ctx_nominals[c];
        for (auto it = cands.rbegin(); it != cands.rend(); ++it) {
          if (compatible(anaphor, *it, rules)) {
            link.antecedents.push_back(*it);
            break;
          }
        }
      }
    } else {
      for (const auto& cands : ctx_nominals) {
        for (const auto& m : cands) {
          if (same_head(anaphor, m, rules)) link.antecedents.push_back(m);
        }
      }
    }
    if (link.antecedents.empty()) continue;
    link.anaphors.push_back(anaphor);
    links.push_back(std::move(link));
  }

  // Merge links sharing an antecedent mention into one chain.
  auto shares = [](const CorefChain& a, const CorefChain& b) {
    for (const auto& x : a.antecedents) {
      if (std::find(b.antecedents.begin(), b.antecedents.end(), x) != b.antecedents.end()) return true;
    }
    return false;
  };
  for (auto& link : links) {
    CorefChain* target = nullptr;
    for (auto& chain : out.chains) {
      if (shares(chain, link)) {
        target = &chain;
        break;
      }
    }
    if (target == nullptr) {
      out.chains.push_back(std::move(link));
      continue;
    }
    for (auto& a : link.antecedents) {
      if (std::find(target->antecedents.begin(), target->antecedents.end(), a) == target->antecedents.end()) {
        target->antecedents.push_back(std::move(a));
      }
    }
    for (auto& a : link.anaphors) target->anaphors.push_back(std::move(a));
  }
  auto by_position = [](const Mention& a, const Mention& b) {
    return std::tie(a.location, a.start) < std::tie(b.location, b.start);
  };
  for (auto& chain : out.chains) {
    std::sort(chain.antecedents.begin(), chain.antecedents.end(), by_position);
    std::sort(chain.anaphors.begin(), chain.anaphors.end(), by_position);
  }
  return out;
}

std::vector<AnnotatedExample> filter_annotated(const std::vector<AnnotatedExample>& examples) {
  std::vector<AnnotatedExample> out;
  std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
               [](const AnnotatedExample& e) { return !e.chains.empty(); });
  return out;
}

double annotation_rate(const std::vector<AnnotatedExample>& examples) {
  if (examples.empty()) throw Error("annotation_rate: empty input");
  const auto hit = std::count_if(examples.begin(), examples.end(),
                                 [](const AnnotatedExample& e) { return !e.chains.empty(); });
  return static_cast<double>(hit) / static_cast<double>(examples.size());
}

namespace {

json mention_json(const Mention& m, bool with_ctx) {
  json j = {{"start", m.start}, {"end", m.end}};
  if (with_ctx) j["ctx"] = m.location;
  j["kind"] = m.kind == MentionKind::Pronoun ? "P" : "N";
  return j;
}

Mention mention_from(const json& j, const ContextualExample& ex, bool in_ctx, std::size_t lineno) {
  Mention m;
  m.location = in_ctx ? j.at("ctx").get<int>() : kSourceLocation;
  m.start = j.at("start").get<int>();
  m.end = j.at("end").get<int>();
  const Tokens* sent = nullptr;
  if (in_ctx) {
    if (m.location < 0 || m.location >= static_cast<int>(ex.contexts.size())) {
      throw FormatError("antecedent context index out of range", lineno);
    }
    sent = &ex.contexts[m.location];
  } else {
    sent = &ex.source;
  }
  if (!(0 <= m.start && m.start < m.end && m.end <= static_cast<int>(sent->size()))) {
    throw FormatError("mention span out of bounds", lineno);
  }
  m.surface.assign(sent->begin() + m.start, sent->begin() + m.end);
  if (j.contains("kind")) {
    m.kind = j["kind"] == "P" ? MentionKind::Pronoun : MentionKind::Nominal;
  }
  return m;
}

}  // namespace

void write_annotated(std::ostream& out, const std::vector<AnnotatedExample>& examples) {
  for (const auto& a : examples) {
    json ctx = json::array();
    for (const auto& c : a.example.contexts) ctx.push_back(join_tokens(c));
    json chains = json::array();
    for (const auto& ch : a.chains) {
      json ants = json::array(), anas = json::array();
      for (const auto& m : ch.antecedents) ants.push_back(mention_json(m, true));
      for (const auto& m : ch.anaphors) anas.push_back(mention_json(m, false));
      chains.push_back({{"antecedents", ants}, {"anaphors", anas}});
    }
    json rec = {{"doc", a.example.doc_id},
                {"i", a.example.index},
                {"src", join_tokens(a.example.source)},
                {"tgt", join_tokens(a.example.target)},
                {"ctx", ctx},
                {"chains", chains}};
    out << rec.dump() << '\n';
  }
}

std::vector<AnnotatedExample> parse_annotated(std::istream& in) {
  std::vector<AnnotatedExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json rec = json::parse(line);
      AnnotatedExample a;
      a.example.doc_id = rec.at("doc").get<std::string>();
      a.example.index = rec.at("i").get<int>();
      a.example.source = split_whitespace(rec.at("src").get<std::string>());
      a.example.target = split_whitespace(rec.at("tgt").get<std::string>());
      for (const auto& c : rec.at("ctx")) a.example.contexts.push_back(split_whitespace(c.get<std::string>()));
      for (const auto& ch : rec.at("chains")) {
        CorefChain chain;
        for (const auto& m : ch.at("antecedents")) chain.antecedents.push_back(mention_from(m, a.example, true, lineno));
        for (const auto& m : ch.at("anaphors")) chain.anaphors.push_back(mention_from(m, a.example, false, lineno));
        if (chain.antecedents.empty() || chain.anaphors.empty()) {
          throw FormatError("chain needs at least one antecedent and one anaphor", lineno);
        }
        a.chains.push_back(std::move(chain));
      }
      out.push_back(std::move(a));
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad annotated record: ") + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace corefcl
