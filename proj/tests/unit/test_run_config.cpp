#include "doctest.h"

#include <set>

#include "corefcl/error.hpp"
#include "corefcl/run_config.hpp"

using namespace corefcl;
using nlohmann::json;

TEST_CASE("defaults validate") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.alpha == 0.5);
  CHECK(c.eta == 1.0);
  CHECK(c.p_omit == 0.5);
  CHECK(c.dropout == 0.1);
  CHECK(c.min_delta == 0.0);
  CHECK(c.verb_cue == 0.0);
}

TEST_CASE("strict merge") {
  RunConfig c;
  c.merge(json{{"alpha", 0.25}, {"variant", "concat"}, {"docs", 10}, {"share_embeddings", false}});
  CHECK(c.alpha == 0.25);
  CHECK(c.variant == "concat");
  CHECK(c.docs == 10);
  CHECK_FALSE(c.share_embeddings);
  CHECK_THROWS_AS(c.merge(json{{"alpah", 0.3}}), ConfigError);
  CHECK_THROWS_AS(c.merge(json{{"docs", "many"}}), ConfigError);
  CHECK_THROWS_AS(c.merge(json::array()), ConfigError);
  CHECK(c.alpha == 0.25);
}

TEST_CASE("textual overrides") {
  RunConfig c;
  c.set("eta", "0.5");
  c.set("seed", "12345678901234");
  c.set("length_norm", "true");
  c.set("strategy", "omit-only");
  CHECK(c.eta == 0.5);
  CHECK(c.seed == 12345678901234ull);
  CHECK(c.length_norm);
  CHECK(c.strategy == "omit-only");
  CHECK_THROWS_AS(c.set("eta", "half"), ConfigError);
  CHECK_THROWS_AS(c.set("batch_size", "3.5"), ConfigError);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
}

TEST_CASE("validation") {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.alpha = 1.5; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.eta = -1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.variant = "rnn"; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.d_model = 30; c.n_heads = 4; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.train_ratio = 0.9; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.smoothing = "magic"; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](RunConfig& c) { c.min_delta = -0.1; }).validate(), ConfigError);
}

TEST_CASE("json round-trip and field table") {
  RunConfig c;
  c.seed = 77;
  c.variant = "multi-enc-hier";
  c.p_omit = 0.25;
  const auto j = c.to_json();
  CHECK(RunConfig::from_json(j) == c);
  std::set<std::string> keys;
  for (const auto& f : run_config_fields()) {
    CHECK(keys.insert(std::string(f.key)).second);
    CHECK(j.contains(std::string(f.key)));
    CHECK_FALSE(f.help.empty());
  }
  CHECK(keys.size() == j.size());
}

TEST_CASE("derived objects") {
  RunConfig c;
  c.seed = 4;
  CHECK(c.derived_seed("train") == c.derived_seed("train"));
  CHECK(c.derived_seed("train") != c.derived_seed("augment"));
  RunConfig d = c;
  d.seed = 5;
  CHECK(c.derived_seed("train") != d.derived_seed("train"));

  const auto m = c.model(40);
  CHECK(m.vocab_size == 40);
  CHECK(m.d_model == c.d_model);
  const auto ft = c.train(Phase::Finetune);
  CHECK(ft.alpha == c.alpha);
  CHECK(ft.learning_rate == c.finetune_learning_rate);
  CHECK(ft.max_steps == c.finetune_max_steps);
  const auto mt = c.train(Phase::MT);
  CHECK(mt.max_steps == c.max_steps);
  CHECK(mt.min_delta == c.min_delta);

  c.strategy = "replace-only";
  CHECK(c.corruption({"x", "y"}).strategy == CorruptionStrategy::ReplaceOnly);

  const auto lex = synthetic_lexicon(10);
  CHECK_NOTHROW(lex.validate());
  CHECK(lex.nouns.size() == 30);
  CHECK(synthetic_lexicon(10).nouns[7].source == lex.nouns[7].source);
  c.nouns_per_gender = 10;
  CHECK(c.lexicon().nouns.size() == 30);
}
