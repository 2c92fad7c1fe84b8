#include "corefcl/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;

const std::vector<std::string>& Vocabulary::reserved_tokens() {
  static const std::vector<std::string> r = {"<pad>", "<s>", "</s>", "<unk>", "[BOC]"};
  return r;
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) add(t);
}

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = ids_.try_emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

Vocabulary Vocabulary::build(const std::vector<Tokens>& sentences, int min_count) {
  std::unordered_map<std::string, long long> counts;
  for (const auto& s : sentences) {
    for (const auto& t : s) ++counts[t];
  }
  std::vector<std::pair<std::string, long long>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, count] : items) {
    if (count >= min_count && !v.ids_.contains(tok)) v.add(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw Error("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

Vocabulary Vocabulary::parse(std::istream& in) {
  std::vector<std::pair<int, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = json::parse(line);
      rows.emplace_back(rec.at("id").get<int>(), rec.at("tok").get<std::string>());
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad vocabulary record: ") + e.what(), lineno);
    }
  }
  std::sort(rows.begin(), rows.end());
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].first != static_cast<int>(k)) throw FormatError("vocabulary ids must be 0..n-1 without gaps");
    if (k < reserved_tokens().size() && rows[k].second != reserved_tokens()[k]) {
      throw FormatError("reserved id " + std::to_string(k) + " must be " + reserved_tokens()[k]);
    }
    if (v.ids_.contains(rows[k].second)) throw FormatError("duplicate vocabulary token '" + rows[k].second + "'");
    v.add(rows[k].second);
  }
  if (v.tokens_.size() < reserved_tokens().size()) throw FormatError("vocabulary lacks reserved tokens");
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary: " + path.string());
  return parse(in);
}

void Vocabulary::write(std::ostream& out) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out << json{{"id", static_cast<int>(i)}, {"tok", tokens_[i]}}.dump() << '\n';
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary: " + path.string());
  write(out);
}

// ---------------------------------------------------------------------------
// BPE

namespace {

Tokens initial_symbols(const std::string& word, const std::string& eow) {
  Tokens syms;
  for (char c : word) syms.emplace_back(1, c);
  if (!syms.empty()) syms.back() += eow;
  return syms;
}

void merge_in_place(Tokens& syms, const std::string& left, const std::string& right) {
  Tokens out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(syms[i]);
    }
  }
  syms = std::move(out);
}

}  // namespace

BpeModel::BpeModel(std::vector<Pair> merges, std::string end_of_word)
    : merges_(std::move(merges)), end_of_word_(std::move(end_of_word)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    if (!rank_.emplace(merges_[i], static_cast<int>(i)).second) {
      throw Error("duplicate BPE merge '" + merges_[i].first + " " + merges_[i].second + "'");
    }
  }
}

BpeModel BpeModel::train(const std::vector<Tokens>& sentences, int num_merges) {
  if (num_merges < 0) throw Error("num_merges must be non-negative");
  const std::string eow = "</w>";
  std::map<std::string, long long> word_counts;
  for (const auto& s : sentences) {
    for (const auto& w : s) ++word_counts[w];
  }
  std::vector<std::pair<Tokens, long long>> words;
  for (const auto& [w, c] : word_counts) words.emplace_back(initial_symbols(w, eow), c);

  std::vector<Pair> merges;
  for (int m = 0; m < num_merges; ++m) {
    std::map<Pair, long long> pair_counts;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += c;
    }
    if (pair_counts.empty()) break;
    // std::map iterates pairs lexicographically, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    merges.push_back(best->first);
    for (auto& [syms, c] : words) merge_in_place(syms, best->first.first, best->first.second);
  }
  return BpeModel(std::move(merges), eow);
}

Tokens BpeModel::segment_word(const std::string& word) const {
  Tokens syms = initial_symbols(word, end_of_word_);
  while (syms.size() > 1) {
    int best_rank = -1;
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = rank_.find({syms[i], syms[i + 1]});
      if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) {
        best_rank = it->second;
        best_at = i;
      }
    }
    if (best_rank < 0) break;
    const auto left = syms[best_at], right = syms[best_at + 1];
    merge_in_place(syms, left, right);
  }
  return syms;
}

Tokens BpeModel::segment(const Tokens& words) const {
  Tokens out;
  for (const auto& w : words) {
    auto syms = segment_word(w);
    out.insert(out.end(), syms.begin(), syms.end());
  }
  return out;
}

Tokens BpeModel::join(const Tokens& symbols) const {
  Tokens words;
  std::string cur;
  for (const auto& s : symbols) {
    if (s.size() >= end_of_word_.size() &&
        s.compare(s.size() - end_of_word_.size(), end_of_word_.size(), end_of_word_) == 0) {
      cur += s.substr(0, s.size() - end_of_word_.size());
      words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += s;
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

BpeModel BpeModel::parse(std::istream& in) {
  std::vector<Pair> merges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto parts = split_whitespace(line);
    if (parts.size() != 2) throw FormatError("BPE merge line must be 'left right'", lineno);
    merges.emplace_back(parts[0], parts[1]);
  }
  return BpeModel(std::move(merges));
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open BPE merges: " + path.string());
  return parse(in);
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write BPE merges: " + path.string());
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
}

// ---------------------------------------------------------------------------

std::vector<int> encode(const Tokens& tokens, const Vocabulary& vocab, const BpeModel* bpe) {
  const Tokens units = bpe ? bpe->segment(tokens) : tokens;
  std::vector<int> ids;
  ids.reserve(units.size());
  for (const auto& u : units) ids.push_back(vocab.id(u));
  return ids;
}

Tokens decode(const std::vector<int>& ids, const Vocabulary& vocab, const BpeModel* bpe) {
  Tokens units;
  units.reserve(ids.size());
  for (int id : ids) units.push_back(vocab.token(id));
  return bpe ? bpe->join(units) : units;
}

std::vector<int> encode_context(const Tokens& context, const Vocabulary& vocab, const BpeModel* bpe) {
  std::vector<int> ids{kBoc};
  const auto body = encode(context, vocab, bpe);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

EncodedExample encode_example(const ContextualExample& example, const Vocabulary& vocab,
                              const BpeModel* bpe) {
  EncodedExample out;
  for (const auto& c : example.contexts) out.contexts.push_back(encode_context(c, vocab, bpe));
  auto wrap = [&](const Tokens& t) {
    std::vector<int> ids{kBos};
    const auto body = encode(t, vocab, bpe);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(kEos);
    return ids;
  };
  out.source = wrap(example.source);
  out.target = wrap(example.target);
  return out;
}

std::vector<Tokens> vocabulary_sentences(const std::vector<ContextualExample>& examples,
                                         const BpeModel* bpe) {
  std::vector<Tokens> out;
  for (const auto& ex : examples) {
    out.push_back(bpe ? bpe->segment(ex.source) : ex.source);
    out.push_back(bpe ? bpe->segment(ex.target) : ex.target);
  }
  return out;
}

}  // namespace corefcl
