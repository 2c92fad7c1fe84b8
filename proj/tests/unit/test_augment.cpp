#include "doctest.h"

#include <algorithm>
#include <sstream>

#include "corefcl/augment.hpp"
#include "corefcl/error.hpp"

using namespace corefcl;

namespace {

Mention ctx_mention(int loc, int s, int e, Tokens surface) {
  return Mention{loc, s, e, std::move(surface), MentionKind::Nominal};
}

AnnotatedExample coat_example(std::string doc = "d", int index = 1) {
  AnnotatedExample a;
  a.example.doc_id = std::move(doc);
  a.example.index = index;
  a.example.contexts = {split_whitespace("the coat is red")};
  a.example.source = split_whitespace("it falls");
  a.example.target = split_whitespace("er faellt");
  a.chains = {CorefChain{{ctx_mention(0, 0, 2, {"the", "coat"})},
                         {Mention{kSourceLocation, 0, 1, {"it"}, MentionKind::Pronoun}}}};
  return a;
}

const Tokens kPool{"the", "coat", "lamp", "book", "chair"};

}  // namespace

TEST_CASE("masking") {
  auto m = mask_antecedents(coat_example());
  CHECK(m.render() == std::vector<Tokens>{{"MASK", "MASK", "is", "red"}});
  CHECK(m.mask_count() == 2);
  CHECK(m.tokens[0] == split_whitespace("the coat is red"));

  auto two = coat_example();
  two.example.contexts = {split_whitespace("the coat is by the lamp")};
  two.chains = {CorefChain{{ctx_mention(0, 0, 2, {"the", "coat"})}, {}},
                CorefChain{{ctx_mention(0, 4, 6, {"the", "lamp"})}, {}}};
  CHECK(mask_antecedents(two).render()[0] == Tokens{"MASK", "MASK", "is", "by", "MASK", "MASK"});
  CHECK(mask_antecedents(two, 1).render()[0] == Tokens{"the", "coat", "is", "by", "MASK", "MASK"});

  auto whole = coat_example();
  whole.chains[0].antecedents[0] = ctx_mention(0, 0, 4, whole.example.contexts[0]);
  CHECK(mask_antecedents(whole).mask_count() == 4);

  auto none = coat_example();
  none.chains.clear();
  CHECK_THROWS_AS(mask_antecedents(none), Error);
}

TEST_CASE("corruption branches") {
  const auto masked = mask_antecedents(coat_example());
  CorruptionConfig cfg;
  cfg.replacement_pool = kPool;

  cfg.p_omit = 1.0;
  Philox rng(1);
  auto c = corrupt(masked, cfg, rng);
  CHECK(c.contexts == std::vector<Tokens>{{"is", "red"}});
  REQUIRE(c.edits.size() == 2);
  CHECK(c.edits[0] == Edit{0, 0, EditKind::Omit, {}});
  CHECK(c.edits[1] == Edit{0, 1, EditKind::Omit, {}});

  cfg.p_omit = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Philox r(s);
    c = corrupt(masked, cfg, r);
    REQUIRE(c.contexts[0].size() == 4);
    CHECK(c.contexts[0][0] != "the");
    CHECK(c.contexts[0][1] != "coat");
    CHECK(c.contexts[0][2] == "is");
    CHECK(c.contexts[0][3] == "red");
    CHECK(std::all_of(c.edits.begin(), c.edits.end(), [](const Edit& e) { return e.kind == EditKind::Replace; }));
  }

  cfg.replacement_pool = {"coat"};
  Philox r(0);
  CHECK_THROWS_AS(corrupt(masked, cfg, r), Error);

  auto unmasked = masked;
  unmasked.masked[0].assign(4, false);
  CHECK_THROWS_AS(corrupt(unmasked, cfg, r), Error);
}

TEST_CASE("corruption replays the documented draw sequence") {
  const auto masked = mask_antecedents(coat_example());
  CorruptionConfig cfg;
  cfg.replacement_pool = kPool;
  cfg.p_omit = 0.5;
  for (std::uint64_t key = 0; key < 40; ++key) {
    Philox rng(key, 3);
    const auto got = corrupt(masked, cfg, rng);

    // replay straight from the raw block function
    std::vector<std::uint32_t> words;
    for (std::uint64_t ctr = 0; ctr < 4; ++ctr)
      for (auto w : Philox::block(key, 3, ctr)) words.push_back(w);
    std::size_t pos = 0;
    auto uniform = [&] {
      const std::uint64_t lo = words[pos], hi = words[pos + 1];
      pos += 2;
      return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
    };
    Tokens expect;
    const Tokens original = masked.tokens[0];
    for (std::size_t j = 0; j < original.size(); ++j) {
      if (!masked.masked[0][j]) {
        expect.push_back(original[j]);
        continue;
      }
      if (uniform() < 0.5) continue;
      Tokens pool;
      for (const auto& t : kPool)
        if (t != original[j]) pool.push_back(t);
      expect.push_back(pool[static_cast<std::size_t>(uniform() * pool.size())]);
    }
    CHECK(got.contexts[0] == expect);
  }
}

TEST_CASE("strategies") {
  CorruptionConfig cfg;
  cfg.p_omit = 0.3;
  cfg.strategy = CorruptionStrategy::OmitOnly;
  CHECK(cfg.effective_p_omit() == 1.0);
  cfg.strategy = CorruptionStrategy::ReplaceOnly;
  CHECK(cfg.effective_p_omit() == 0.0);
  cfg.strategy = CorruptionStrategy::Both;
  CHECK(cfg.effective_p_omit() == 0.3);
  for (auto s : {CorruptionStrategy::Both, CorruptionStrategy::OmitOnly, CorruptionStrategy::ReplaceOnly})
    CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS_AS(parse_strategy("shuffle"), Error);

  cfg.p_omit = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.p_omit = 0.5;
  cfg.variants = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("dataset construction") {
  std::vector<AnnotatedExample> in;
  for (int i = 0; i < 30; ++i) in.push_back(coat_example("doc" + std::to_string(i % 7), i));
  CorruptionConfig cfg;
  cfg.replacement_pool = kPool;
  cfg.seed = 9;
  cfg.variants = 2;
  const auto pairs = build_contrastive_dataset(in, cfg);
  REQUIRE(pairs.size() == in.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].original.example == in[i].example);
    CHECK(pairs[i].variants.size() == 2);
  }

  auto rev = in;
  std::reverse(rev.begin(), rev.end());
  const auto rpairs = build_contrastive_dataset(rev, cfg);
  for (std::size_t i = 0; i < pairs.size(); ++i) CHECK(rpairs[pairs.size() - 1 - i].variants == pairs[i].variants);

  // tokens outside antecedent spans survive unchanged and in order
  for (const auto& p : pairs)
    for (const auto& v : p.variants) {
      const auto& tail = v.contexts[0];
      REQUIRE(tail.size() >= 2);
      CHECK(tail[tail.size() - 2] == "is");
      CHECK(tail.back() == "red");
    }
}

TEST_CASE("omit fraction over many masked tokens") {
  std::vector<AnnotatedExample> in;
  for (int i = 0; i < 6000; ++i) in.push_back(coat_example("doc" + std::to_string(i / 10), i % 10));
  CorruptionConfig cfg;
  cfg.replacement_pool = kPool;
  cfg.seed = 17;
  std::size_t omits = 0, total = 0;
  for (const auto& p : build_contrastive_dataset(in, cfg))
    for (const auto& e : p.variants[0].edits) {
      ++total;
      omits += e.kind == EditKind::Omit;
    }
  REQUIRE(total >= 10000);
  CHECK(std::abs(static_cast<double>(omits) / total - 0.5) <= 0.03);
}

TEST_CASE("augmented I/O") {
  CorruptionConfig cfg;
  cfg.replacement_pool = kPool;
  const auto pairs = build_contrastive_dataset({coat_example("a", 1), coat_example("b", 2)}, cfg);
  std::stringstream ss;
  write_augmented(ss, pairs);
  CHECK(ss.str().find("MASK") == std::string::npos);
  const auto back = parse_augmented(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].original.example == pairs[1].original.example);
  CHECK(back[1].original.chains == pairs[1].original.chains);
  CHECK(back[0].variants == pairs[0].variants);
}
