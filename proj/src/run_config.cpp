#include "corefcl/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

#include "corefcl/error.hpp"
#include "corefcl/rng.hpp"

namespace corefcl {

using nlohmann::json;

std::string_view version() { return COREFCL_VERSION; }

const std::vector<RunConfigField>& run_config_fields() {
  using R = RunConfig;
  static const std::vector<RunConfigField> fields = {
      {"seed", &R::seed, "master seed; every stage seed derives from it"},
      {"work_dir", &R::work_dir, "directory holding all pipeline artifacts"},
      {"threads", &R::threads, "cap on data-stage worker threads"},
      {"docs", &R::docs, "synthetic documents to generate"},
      {"sentences_per_doc", &R::sentences_per_doc, "sentences per synthetic document"},
      {"pronoun_rate", &R::pronoun_rate, "fraction of sentences that are pronoun follow-ups"},
      {"pronoun", &R::pronoun, "source pronoun used by follow-ups"},
      {"nouns_per_gender", &R::nouns_per_gender, "pseudo-word nouns per gender (0: built-in lexicon)"},
      {"verb_cue", &R::verb_cue, "probability that a follow-up verb agrees with the antecedent's gender"},
      {"input", &R::input, "corpus to ingest (default: the generated corpus)"},
      {"format", &R::format, "input corpus format"},
      {"context_size", &R::context_size, "preceding sentences used as context"},
      {"train_ratio", &R::train_ratio, "share of documents for training"},
      {"valid_ratio", &R::valid_ratio, "share of documents for validation"},
      {"test_ratio", &R::test_ratio, "share of documents for testing"},
      {"bpe_merges", &R::bpe_merges, "BPE merge operations (0: word level)"},
      {"min_count", &R::min_count, "minimum token frequency for the vocabulary"},
      {"rules", &R::rules, "annotation rules file (default: derived from the lexicon)"},
      {"p_omit", &R::p_omit, "probability of omitting, rather than replacing, a masked token"},
      {"strategy", &R::strategy, "corruption strategy: both, omit-only, replace-only"},
      {"variants", &R::variants, "corrupted versions per example"},
      {"sample_one_chain", &R::sample_one_chain, "corrupt one random chain instead of all"},
      {"variant", &R::variant, "model: sent, concat, multi-enc, multi-enc-hier"},
      {"d_model", &R::d_model, "hidden size"},
      {"n_layers", &R::n_layers, "encoder and decoder layers"},
      {"n_heads", &R::n_heads, "attention heads"},
      {"d_ff", &R::d_ff, "feed-forward inner size"},
      {"dropout", &R::dropout, "dropout rate"},
      {"max_len", &R::max_len, "longest accepted sequence"},
      {"share_embeddings", &R::share_embeddings, "tie source and target embeddings"},
      {"learning_rate", &R::learning_rate, "ADAM learning rate, MT phase"},
      {"beta1", &R::beta1, "ADAM beta1"},
      {"beta2", &R::beta2, "ADAM beta2"},
      {"adam_epsilon", &R::adam_epsilon, "ADAM epsilon"},
      {"batch_size", &R::batch_size, "examples per batch"},
      {"max_steps", &R::max_steps, "step budget, MT phase"},
      {"eval_every", &R::eval_every, "steps between validation evaluations"},
      {"patience", &R::patience, "evaluations without improvement before stopping"},
      {"min_delta", &R::min_delta, "smallest validation-loss decrease counted as improvement"},
      {"finetune_learning_rate", &R::finetune_learning_rate, "ADAM learning rate, fine-tuning"},
      {"finetune_max_steps", &R::finetune_max_steps, "step budget, fine-tuning"},
      {"alpha", &R::alpha, "contrastive weight in the joint loss"},
      {"eta", &R::eta, "margin of the contrastive loss"},
      {"beam_size", &R::beam_size, "beam width for translation (1: greedy)"},
      {"length_norm", &R::length_norm, "length-normalise beam scores"},
      {"decode_max_len", &R::decode_max_len, "longest generated translation"},
      {"smoothing", &R::smoothing, "BLEU smoothing: none, add-epsilon"},
      {"lowercase", &R::lowercase, "case-insensitive BLEU"},
      {"char_level", &R::char_level, "character-level BLEU"},
  };
  return fields;
}

namespace {

const RunConfigField& field(std::string_view key) {
  for (const auto& f : run_config_fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

void RunConfig::merge(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& f = field(key);
    const auto mismatch = [&](const char* want) {
      return ConfigError("config key '" + key + "' expects " + want + ", got " + value.type_name());
    };
    std::visit(
        [&](auto member) {
          using V = std::remove_reference_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<V, bool>) {
            if (!value.is_boolean()) throw mismatch("a boolean");
            this->*member = value.get<bool>();
          } else if constexpr (std::is_same_v<V, std::string>) {
            if (!value.is_string()) throw mismatch("a string");
            this->*member = value.get<std::string>();
          } else if constexpr (std::is_same_v<V, double>) {
            if (!value.is_number()) throw mismatch("a number");
            this->*member = value.get<double>();
          } else if constexpr (std::is_same_v<V, std::uint64_t>) {
            if (!value.is_number_unsigned()) throw mismatch("a non-negative integer");
            this->*member = value.get<std::uint64_t>();
          } else {
            if (!value.is_number_integer()) throw mismatch("an integer");
            this->*member = value.get<int>();
          }
        },
        f.member);
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  merge(j);
}

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& f = field(key);
  std::visit(
      [&](auto member) {
        using V = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<V, bool>) {
          if (value == "true" || value == "1") this->*member = true;
          else if (value == "false" || value == "0") this->*member = false;
          else throw ConfigError("config key '" + std::string(key) + "' expects true or false");
        } else if constexpr (std::is_same_v<V, std::string>) {
          this->*member = std::string(value);
        } else {
          this->*member = parse_number<V>(key, value);
        }
      },
      f.member);
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (docs < 1 || sentences_per_doc < 1) throw ConfigError("docs and sentences_per_doc must be positive");
  if (nouns_per_gender < 0) throw ConfigError("nouns_per_gender must be non-negative");
  if (context_size < 0) throw ConfigError("context_size must be non-negative");
  for (double r : split_ratios()) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(train_ratio + valid_ratio + test_ratio - 1.0) > 1e-9) {
    throw ConfigError("train_ratio + valid_ratio + test_ratio must equal 1");
  }
  if (bpe_merges < 0 || min_count < 1) throw ConfigError("bpe_merges must be >= 0 and min_count >= 1");
  if (format != "jsonl") throw ConfigError("unsupported corpus format '" + format + "'");
  parse_strategy(strategy);
  parse_smoothing(smoothing);
  parse_variant(variant);
  if (beam_size < 1 || decode_max_len < 1) throw ConfigError("beam_size and decode_max_len must be positive");
  corruption({"x", "y"}).validate();
  model(kNumReserved + 1).validate();
  train(Phase::MT).validate();
  train(Phase::Finetune).validate();
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : run_config_fields()) {
    std::visit([&](auto member) { j[std::string(f.key)] = this->*member; }, f.member);
  }
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.merge(j);
  return c;
}

std::uint64_t RunConfig::derived_seed(std::string_view stage) const { return mix64(seed ^ fnv1a64(stage)); }

Lexicon synthetic_lexicon(int per_gender) {
  static constexpr const char* kSyllables[] = {"ba", "ko", "mi", "ru", "te", "sa", "lo", "ni", "pe", "du", "fa", "gi"};
  Lexicon lex = Lexicon::default_lexicon();
  std::set<std::string> taken;
  for (const auto& w : lex.verbs) taken.insert(w.source);
  for (const auto& w : lex.adjectives) taken.insert(w.source);
  lex.nouns.clear();
  Philox rng(mix64(0x6c6578), 0);
  for (Gender g : {Gender::M, Gender::F, Gender::N}) {
    for (int i = 0; i < per_gender; ++i) {
      std::string word;
      do {
        word.clear();
        for (int k = 0; k < 3; ++k) word += kSyllables[rng.below(std::size(kSyllables))];
      } while (!taken.insert(word).second);
      lex.nouns.push_back({word, word + "en", g});
    }
  }
  lex.validate();
  return lex;
}

Lexicon RunConfig::lexicon() const {
  return nouns_per_gender > 0 ? synthetic_lexicon(nouns_per_gender) : Lexicon::default_lexicon();
}

GenerationConfig RunConfig::generation() const {
  GenerationConfig g;
  g.num_docs = docs;
  g.sentences_per_doc = sentences_per_doc;
  g.pronoun_rate = pronoun_rate;
  g.seed = derived_seed("synth-gen");
  g.pronoun = pronoun;
  g.verb_cue = verb_cue;
  return g;
}

CorruptionConfig RunConfig::corruption(Tokens replacement_pool) const {
  CorruptionConfig c;
  c.p_omit = p_omit;
  c.seed = derived_seed("augment");
  c.replacement_pool = std::move(replacement_pool);
  c.strategy = parse_strategy(strategy);
  c.variants = variants;
  c.sample_one_chain = sample_one_chain;
  return c;
}

ModelConfig RunConfig::model(int vocab_size) const {
  ModelConfig m;
  m.variant = parse_variant(variant);
  m.d_model = d_model;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_ff = d_ff;
  m.dropout = dropout;
  m.max_len = max_len;
  m.vocab_size = vocab_size;
  m.context_size = context_size;
  m.share_embeddings = share_embeddings;
  return m;
}

TrainConfig RunConfig::train(Phase phase) const {
  TrainConfig t;
  t.learning_rate = phase == Phase::MT ? learning_rate : finetune_learning_rate;
  t.beta1 = beta1;
  t.beta2 = beta2;
  t.epsilon = adam_epsilon;
  t.batch_size = batch_size;
  t.max_steps = phase == Phase::MT ? max_steps : finetune_max_steps;
  t.eval_every = eval_every;
  t.patience = patience;
  t.min_delta = min_delta;
  t.alpha = alpha;
  t.eta = eta;
  t.seed = derived_seed(phase == Phase::MT ? "train" : "finetune");
  t.phase = phase;
  return t;
}

DecodeOptions RunConfig::decoding() const { return {decode_max_len, beam_size, length_norm}; }

BleuOptions RunConfig::bleu() const {
  BleuOptions b;
  b.smoothing = parse_smoothing(smoothing);
  b.lowercase = lowercase;
  b.char_level = char_level;
  return b;
}

}  // namespace corefcl
