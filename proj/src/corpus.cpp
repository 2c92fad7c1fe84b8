#include "corefcl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "corefcl/error.hpp"
#include "corefcl/rng.hpp"

namespace corefcl {

using nlohmann::json;

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return is_space(c); });
}

}  // namespace

Tokens split_whitespace(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<Document> parse_corpus(std::istream& in) {
  std::vector<Document> docs;
  std::unordered_map<std::string, std::size_t> slot;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("invalid JSON: ") + e.what(), lineno);
    }
    if (!rec.is_object() || rec.size() != 4 || !rec.contains("doc") || !rec.contains("i") ||
        !rec.contains("src") || !rec.contains("tgt")) {
      throw FormatError("record must have exactly the keys doc, i, src, tgt", lineno);
    }
    if (!rec["doc"].is_string() || !rec["i"].is_number_integer() || !rec["src"].is_string() ||
        !rec["tgt"].is_string()) {
      throw FormatError("wrong value type (doc:string, i:integer, src:string, tgt:string)", lineno);
    }
    auto doc_id = rec["doc"].get<std::string>();
    if (doc_id.empty()) throw FormatError("empty doc id", lineno);
    const auto index = rec["i"].get<long long>();
    SentencePair pair{static_cast<int>(index), rec["src"].get<std::string>(),
                      rec["tgt"].get<std::string>()};
    if (blank(pair.source_text) || blank(pair.target_text)) {
      throw FormatError("empty source or target text", lineno);
    }
    auto [it, inserted] = slot.try_emplace(doc_id, docs.size());
    if (inserted) docs.push_back(Document{doc_id, {}});
    auto& doc = docs[it->second];
    const auto expected = static_cast<long long>(doc.pairs.size());
    if (index < expected) {
      throw FormatError("duplicate or non-monotone index " + std::to_string(index) +
                            " in document '" + doc_id + "'",
                        lineno);
    }
    if (index != expected) {
      throw FormatError("non-monotone/gapped index " + std::to_string(index) + " in document '" +
                            doc_id + "' (expected " + std::to_string(expected) + ")",
                        lineno);
    }
    doc.pairs.push_back(std::move(pair));
  }
  return docs;
}

std::vector<Document> load_corpus(const std::filesystem::path& path, std::string_view format) {
  if (format != "jsonl") throw Error("unsupported corpus format: " + std::string(format));
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  return parse_corpus(in);
}

void write_corpus(std::ostream& out, const std::vector<Document>& docs) {
  for (const auto& doc : docs) {
    for (const auto& p : doc.pairs) {
      json rec = {{"doc", doc.doc_id}, {"i", p.index}, {"src", p.source_text}, {"tgt", p.target_text}};
      out << rec.dump() << '\n';
    }
  }
}

void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file: " + path.string());
  write_corpus(out, docs);
}

void validate_document(const Document& doc) {
  if (doc.doc_id.empty()) throw FormatError("empty doc id");
  for (std::size_t k = 0; k < doc.pairs.size(); ++k) {
    const auto& p = doc.pairs[k];
    if (p.index != static_cast<int>(k)) {
      throw FormatError("document '" + doc.doc_id + "': index " + std::to_string(p.index) +
                        " at position " + std::to_string(k));
    }
    if (blank(p.source_text) || blank(p.target_text)) {
      throw FormatError("document '" + doc.doc_id + "': empty text at index " + std::to_string(k));
    }
  }
}

std::vector<ContextualExample> extract_examples(const Document& doc, std::size_t n) {
  std::vector<Tokens> sources;
  sources.reserve(doc.pairs.size());
  for (const auto& p : doc.pairs) sources.push_back(split_whitespace(p.source_text));

  std::vector<ContextualExample> out;
  out.reserve(doc.pairs.size());
  for (std::size_t i = 0; i < doc.pairs.size(); ++i) {
    ContextualExample ex;
    ex.doc_id = doc.doc_id;
    ex.index = doc.pairs[i].index;
    ex.source = sources[i];
    ex.target = split_whitespace(doc.pairs[i].target_text);
    const std::size_t first = i > n ? i - n : 0;
    for (std::size_t j = first; j < i; ++j) ex.contexts.push_back(sources[j]);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ContextualExample> extract_examples(const std::vector<Document>& docs, std::size_t n) {
  std::vector<ContextualExample> out;
  for (const auto& doc : docs) {
    auto part = extract_examples(doc, n);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

DatasetSplit split_by_documents(const std::vector<Document>& docs,
                                const std::array<double, 3>& ratios, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw Error("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
  const std::size_t nonzero = static_cast<std::size_t>(std::count_if(
      ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));
  if (docs.size() < nonzero) {
    throw Error("split_by_documents: " + std::to_string(docs.size()) + " documents for " +
                std::to_string(nonzero) + " non-empty splits");
  }

  // Shuffle the sorted id list so the result does not depend on input order.
  std::vector<std::string> ids;
  ids.reserve(docs.size());
  for (const auto& d : docs) ids.push_back(d.doc_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error("split_by_documents: duplicate doc id");
  }
  Philox rng(mix64(seed), 0x73706c6974ull);
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::swap(ids[i - 1], ids[rng.below(i)]);
  }

  const std::size_t total = ids.size();
  auto count_for = [&](double r) -> std::size_t {
    if (r <= 0.0) return 0;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(r * total)));
  };
  std::size_t n_valid = count_for(ratios[1]);
  std::size_t n_test = count_for(ratios[2]);
  const std::size_t min_train = ratios[0] > 0.0 ? 1 : 0;
  while (n_valid + n_test + min_train > total) {
    if (n_valid >= n_test && n_valid > (ratios[1] > 0.0 ? 1u : 0u)) --n_valid;
    else --n_test;
  }
  if (ratios[0] <= 0.0) {
    // Everything not in valid goes to test so that no document is dropped.
    n_test = total - n_valid;
  }

  std::map<std::string, int> assign;
  for (std::size_t k = 0; k < total; ++k) {
    assign[ids[k]] = k < n_valid ? 1 : (k < n_valid + n_test ? 2 : 0);
  }
  DatasetSplit split;
  for (const auto& d : docs) {
    switch (assign[d.doc_id]) {
      case 0: split.train.push_back(d); break;
      case 1: split.valid.push_back(d); break;
      default: split.test.push_back(d); break;
    }
  }
  return split;
}

}  // namespace corefcl
