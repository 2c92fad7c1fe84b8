#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace corefcl {

using Tokens = std::vector<std::string>;

struct SentencePair {
  int index = 0;
  std::string source_text;
  std::string target_text;
};

struct Document {
  std::string doc_id;
  std::vector<SentencePair> pairs;
};

/// A sentence pair with up to n preceding source sentences of the same
/// document, oldest first.
struct ContextualExample {
  std::string doc_id;
  int index = 0;
  Tokens source;
  Tokens target;
  std::vector<Tokens> contexts;

  bool operator==(const ContextualExample&) const = default;
};

struct DatasetSplit {
  std::vector<Document> train;
  std::vector<Document> valid;
  std::vector<Document> test;
};

inline constexpr std::size_t kDefaultContextSize = 2;

Tokens split_whitespace(std::string_view text);
std::string join_tokens(const Tokens& tokens);

/// Reads the JSON-lines corpus format (keys doc, i, src, tgt). Records are
/// grouped by doc_id in order of first appearance.
std::vector<Document> load_corpus(const std::filesystem::path& path,
                                  std::string_view format = "jsonl");
std::vector<Document> parse_corpus(std::istream& in);
void write_corpus(std::ostream& out, const std::vector<Document>& docs);
void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs);

/// Checks the Document invariants; throws FormatError on violation.
void validate_document(const Document& doc);

std::vector<ContextualExample> extract_examples(const Document& doc,
                                                std::size_t n = kDefaultContextSize);
std::vector<ContextualExample> extract_examples(const std::vector<Document>& docs,
                                                std::size_t n = kDefaultContextSize);

/// Partitions whole documents into train/valid/test. Membership depends only
/// on the set of doc ids, the ratios and the seed; each split keeps the
/// input order of its documents.
DatasetSplit split_by_documents(const std::vector<Document>& docs,
                                const std::array<double, 3>& ratios, std::uint64_t seed);

}  // namespace corefcl
