#pragma once

#include <vector>

#include "corefcl/augment.hpp"
#include "corefcl/coref.hpp"
#include "corefcl/eval.hpp"
#include "corefcl/synthgen.hpp"
#include "corefcl/tokenizer.hpp"
#include "corefcl/train.hpp"

namespace testutil {

// A small synthetic data set with every derived artifact the trainers need.
struct TinyData {
  corefcl::Vocabulary vocab;
  std::vector<corefcl::ContextualExample> train_ex, valid_ex;
  std::vector<corefcl::EncodedExample> train, valid;
  std::vector<corefcl::ContrastiveItem> contrastive;
  std::vector<corefcl::EncodedContrastiveItem> suite;
};

inline TinyData tiny_data(int docs, std::uint64_t seed = 1, int variants = 1) {
  using namespace corefcl;
  const auto lex = Lexicon::default_lexicon();
  GenerationConfig g;
  g.num_docs = docs;
  g.sentences_per_doc = 4;
  g.seed = seed;
  const auto corpus = generate_corpus(lex, g);
  const auto split = split_by_documents(corpus, {0.75, 0.25, 0.0}, seed);
  TinyData d;
  d.train_ex = extract_examples(split.train);
  d.valid_ex = extract_examples(split.valid);
  d.vocab = Vocabulary::build(vocabulary_sentences(extract_examples(corpus)));
  for (const auto& e : d.train_ex) d.train.push_back(encode_example(e, d.vocab));
  for (const auto& e : d.valid_ex) d.valid.push_back(encode_example(e, d.vocab));
  const auto rules = RuleSet::from_lexicon(lex);
  std::vector<AnnotatedExample> ann;
  for (const auto& e : d.train_ex) ann.push_back(resolve(e, rules));
  CorruptionConfig cc;
  cc.seed = seed;
  cc.replacement_pool = rules.nouns();
  cc.variants = variants;
  for (const auto& p : build_contrastive_dataset(filter_annotated(ann), cc)) {
    d.contrastive.push_back(encode_contrastive_pair(p, d.vocab));
  }
  for (const auto& item : generate_contrastive_suite(split.train, lex)) d.suite.push_back(encode_test_item(item, d.vocab));
  return d;
}

inline corefcl::ModelConfig tiny_model(int vocab, corefcl::Variant v = corefcl::Variant::MultiEnc, int d = 16) {
  corefcl::ModelConfig c;
  c.variant = v;
  c.d_model = d;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 2 * d;
  c.dropout = 0.1;
  c.max_len = 32;
  c.vocab_size = vocab;
  return c;
}

}  // namespace testutil
