#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "corefcl/error.hpp"
#include "fixtures.hpp"

using namespace corefcl;

namespace {

std::vector<Tokens> segs(std::initializer_list<const char*> lines) {
  std::vector<Tokens> out;
  for (const char* l : lines) out.push_back(split_whitespace(l));
  return out;
}

ModelParams<double> biased_model(int vocab, std::vector<std::pair<int, double>> bias, std::uint64_t seed = 1) {
  auto cfg = testutil::tiny_model(vocab, Variant::MultiEnc, 8);
  cfg.dropout = 0.0;
  auto p = init_params<double>(cfg, seed);
  for (auto& x : p.get("out.w").mutable_values()) x = 0;
  for (auto [id, b] : bias) p.get("out.b").mutable_values()[id] = b;
  return p;
}

EncodedExample src(std::vector<int> s, std::vector<std::vector<int>> ctx = {}) {
  s.insert(s.begin(), kBos);
  s.push_back(kEos);
  return {std::move(ctx), std::move(s), {kBos, kEos}};
}

}  // namespace

TEST_CASE("BLEU oracles") {
  SUBCASE("identity is exactly 100") {
    const auto h = segs({"the cat sat on the mat", "a b c d e f"});
    CHECK(corpus_bleu(h, h).bleu == 100.0);
  }
  SUBCASE("clipped unigram precision") {
    const auto r = corpus_bleu(segs({"the the the the the the the"}), segs({"the cat is on the mat"}));
    CHECK(std::abs(r.precisions[0] - 2.0 / 7.0) < 1e-6);
    CHECK(r.matches[0] == 2);
    CHECK(r.totals[0] == 7);
  }
  SUBCASE("no overlap without smoothing is zero") {
    CHECK(corpus_bleu(segs({"w x y z"}), segs({"a b c d"})).bleu == 0.0);
    CHECK(corpus_bleu(segs({"a b c d e"}), segs({"a b c x e"})).bleu == 0.0);  // no 4-gram match
  }
  SUBCASE("add-epsilon smoothing keeps zero-match orders finite") {
    BleuOptions o;
    o.smoothing = Smoothing::AddEpsilon;
    const auto r = corpus_bleu(segs({"a b c x e"}), segs({"a b c d e"}), o);
    // p4 = 0.1 / 2
    CHECK(r.precisions[3] == doctest::Approx(0.05));
    const double expected = 100 * std::exp((std::log(4.0 / 5) + std::log(2.0 / 4) + std::log(1.0 / 3) + std::log(0.05)) / 4);
    CHECK(r.bleu == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("hand-computed score with brevity penalty") {
    const auto r = corpus_bleu(segs({"a b c d e"}), segs({"a b c d e f g"}));
    CHECK(r.brevity_penalty == doctest::Approx(std::exp(1.0 - 7.0 / 5.0)).epsilon(1e-12));
    CHECK(r.bleu == doctest::Approx(100 * std::exp(1.0 - 7.0 / 5.0)).epsilon(1e-12));
    const auto s = corpus_bleu(segs({"a b c d e"}), segs({"a b c d f"}));
    CHECK(s.bleu == doctest::Approx(100 * std::pow(4.0 / 5 * 3.0 / 4 * 2.0 / 3 * 1.0 / 2, 0.25)).epsilon(1e-12));
    CHECK(s.brevity_penalty == 1.0);
  }
  SUBCASE("short hypotheses leave empty orders out") {
    const auto r = corpus_bleu(segs({"a b"}), segs({"a b"}));
    CHECK(r.totals[2] == 0);
    CHECK(r.bleu == 100.0);
  }
  SUBCASE("case and character modes") {
    BleuOptions o;
    CHECK(corpus_bleu(segs({"The Cat is here"}), segs({"the cat is here"}), o).bleu < 100.0);
    o.lowercase = true;
    CHECK(corpus_bleu(segs({"The Cat is here"}), segs({"the cat is here"}), o).bleu == 100.0);
    BleuOptions c;
    c.char_level = true;
    const auto r = corpus_bleu(segs({"abcd"}), segs({"abce"}), c);
    CHECK(r.totals[0] == 4);
    CHECK(r.matches[0] == 3);
    const auto u = corpus_bleu({{"\xc3\xa4\xc3\xb6"}}, {{"\xc3\xa4\xc3\xb6"}}, c);  // two 2-byte characters
    CHECK(u.totals[0] == 2);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(corpus_bleu({}, {}), Error);
    CHECK_THROWS_AS(corpus_bleu(segs({"a"}), segs({"a", "b"})), Error);
  }
}

TEST_CASE("BLEU properties on random corpora") {
  Philox rng(77, 0);
  const Tokens words{"a", "b", "c", "d", "e", "f"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tokens> hyp, ref;
    const int n = 1 + static_cast<int>(rng.below(6));
    for (int i = 0; i < n; ++i) {
      Tokens h, r;
      for (std::uint64_t k = 0, len = 1 + rng.below(8); k < len; ++k) h.push_back(words[rng.below(words.size())]);
      for (std::uint64_t k = 0, len = 1 + rng.below(8); k < len; ++k) r.push_back(words[rng.below(words.size())]);
      hyp.push_back(h);
      ref.push_back(r);
    }
    const auto base = corpus_bleu(hyp, ref);
    CHECK(base.bleu >= 0.0);
    CHECK(base.bleu <= 100.0);
    CHECK(base.brevity_penalty <= 1.0);
    CHECK(corpus_bleu(hyp, hyp).bleu == 100.0);
    // segment order does not matter
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<Tokens> hp, rp;
    for (auto i : perm) {
      hp.push_back(hyp[i]);
      rp.push_back(ref[i]);
    }
    CHECK(corpus_bleu(hp, rp).bleu == doctest::Approx(base.bleu).epsilon(1e-12));
  }
}

TEST_CASE("smoothing names") {
  CHECK(parse_smoothing("add-epsilon") == Smoothing::AddEpsilon);
  CHECK(parse_smoothing(to_string(Smoothing::None)) == Smoothing::None);
  CHECK_THROWS_AS(parse_smoothing("exp"), ConfigError);
}

TEST_CASE("decoding a model with a fixed next-token distribution") {
  const int V = 12;
  auto p = biased_model(V, {{kPad, 50}, {kBos, 40}, {kBoc, 30}, {7, 10}, {8, 9}});
  const std::vector<EncodedExample> batch{src({5, 6}), src({9}, {{kBoc, 10}})};
  const auto g = greedy_decode(p, std::span<const EncodedExample>(batch), 6);
  for (const auto& seq : g) CHECK(seq == std::vector<int>(6, 7));  // reserved ids are never produced
  const auto b = beam_decode(p, batch[0], {6, 4, false});
  CHECK(b == std::vector<int>(6, 7));

  auto stop = biased_model(V, {{kEos, 5}});
  CHECK(greedy_decode(stop, std::span<const EncodedExample>(batch), 6)[0].empty());
}

TEST_CASE("argmax ties go to the lowest allowed id") {
  auto p = biased_model(12, {});  // uniform: EOS is the lowest id that may be emitted
  const std::vector<EncodedExample> batch{src({5})};
  CHECK(greedy_decode(p, std::span<const EncodedExample>(batch), 5)[0].empty());
  auto q = biased_model(12, {{kEos, -5}});
  CHECK(greedy_decode(q, std::span<const EncodedExample>(batch), 3)[0] == std::vector<int>{kUnk, kUnk, kUnk});
}

TEST_CASE("beam size 1 reproduces greedy, and wider beams never score lower") {
  auto d = testutil::tiny_data(10);
  auto cfg = testutil::tiny_model(d.vocab.size(), Variant::MultiEncHier);
  cfg.dropout = 0.0;
  auto p = init_params<float>(cfg, 3);
  TrainConfig tc;
  tc.max_steps = 40;
  tc.batch_size = 8;
  tc.learning_rate = 5e-3;
  train_mt<float>(p, d.train, {}, tc);
  const std::span<const EncodedExample> data(d.valid.data(), std::min<std::size_t>(d.valid.size(), 12));
  const auto greedy = greedy_decode(p, data, 10);
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(beam_decode(p, data[i], {10, 1, false}) == greedy[i]);
    for (int t : greedy[i]) {
      CHECK(t != kEos);
      CHECK(t != kPad);
      CHECK(t != kBos);
    }
  }
  const auto tr = translate(p, data, {10, 1, false});
  CHECK(tr == greedy);
  const auto wide = translate(p, data, {10, 4, false});
  CHECK(wide.size() == data.size());
  const auto normed = translate(p, data, {10, 3, true});
  CHECK(normed.size() == data.size());

  // the beam result is at least as likely as greedy when both finish
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto score = [&](const std::vector<int>& seq) {
      EncodedExample e = data[i];
      e.target = {kBos};
      e.target.insert(e.target.end(), seq.begin(), seq.end());
      e.target.push_back(kEos);
      return log_prob(p, e);
    };
    if (greedy[i].size() < 9 && wide[i].size() < 9) CHECK(score(wide[i]) >= score(greedy[i]) - 1e-4f);
  }
}

TEST_CASE("contrastive accuracy") {
  const int V = 12;
  auto p = biased_model(V, {{7, 2.0}, {8, 0.0}});
  auto item = [](int good, int bad) {
    EncodedContrastiveItem it;
    it.correct = {{{kBoc, 5}}, {kBos, 6, kEos}, {kBos, good, 9, kEos}};
    it.incorrect_targets = {{kBos, bad, 9, kEos}};
    return it;
  };
  SUBCASE("3 of 4 correct") {
    std::vector<EncodedContrastiveItem> suite{item(7, 8), item(7, 8), item(8, 7), item(7, 8)};
    auto r = contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite));
    CHECK(r.accuracy == 0.75);
    CHECK(r.correct == 3);
    CHECK(r.total == 4);
    CHECK(r.items.size() == 4);
    CHECK(r.items[2].correct < r.items[2].incorrect[0]);
    // order and duplication
    std::reverse(suite.begin(), suite.end());
    CHECK(contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite)).accuracy == 0.75);
    suite.push_back(suite.front());
    auto dup = contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite), 2);
    CHECK(dup.correct == 4);
    CHECK(dup.total == 5);
  }
  SUBCASE("ties are incorrect") {
    std::vector<EncodedContrastiveItem> suite{item(7, 7)};
    CHECK(contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite)).accuracy == 0.0);
  }
  SUBCASE("every incorrect variant must lose") {
    auto it = item(7, 8);
    it.incorrect_targets.push_back({kBos, 7, 9, kEos});
    std::vector<EncodedContrastiveItem> suite{it};
    CHECK(contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite)).accuracy == 0.0);
  }
  SUBCASE("errors") {
    std::vector<EncodedContrastiveItem> none;
    CHECK_THROWS_AS(contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(none)), Error);
    auto it = item(7, 8);
    it.incorrect_targets.clear();
    std::vector<EncodedContrastiveItem> bad{it};
    CHECK_THROWS_AS(contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(bad)), Error);
  }
  SUBCASE("report json") {
    std::vector<EncodedContrastiveItem> suite{item(7, 8)};
    auto j = contrastive_accuracy(p, std::span<const EncodedContrastiveItem>(suite)).to_json(true);
    CHECK(j["accuracy"] == 1.0);
    CHECK(j["items"].size() == 1);
  }
}

TEST_CASE("suite files round-trip") {
  const auto lex = Lexicon::default_lexicon();
  GenerationConfig g;
  g.num_docs = 10;
  const auto suite = generate_contrastive_suite(generate_corpus(lex, g), lex);
  REQUIRE_FALSE(suite.empty());
  std::stringstream ss;
  write_suite(ss, suite);
  const auto back = parse_suite(ss);
  REQUIRE(back.size() == suite.size());
  for (std::size_t i = 0; i < suite.size(); ++i) {
    CHECK(back[i].contexts == suite[i].contexts);
    CHECK(back[i].source == suite[i].source);
    CHECK(back[i].target_correct == suite[i].target_correct);
    CHECK(back[i].targets_incorrect == suite[i].targets_incorrect);
    CHECK(back[i].pronoun_position == suite[i].pronoun_position);
  }
  std::istringstream bad("{\"ctx\": [], \"src\": \"x\"}\n");
  CHECK_THROWS_AS(parse_suite(bad), FormatError);
}
