#include "corefcl/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "corefcl/error.hpp"

namespace corefcl::pipeline {

using nlohmann::json;

Paths::Paths(const RunConfig& config) : dir(config.work_dir) {}

fs::path Paths::augmented(std::string_view tag) const {
  return dir / (tag.empty() ? std::string("augmented.jsonl") : "augmented." + std::string(tag) + ".jsonl");
}

fs::path Paths::cl_checkpoint(std::string_view tag) const {
  return dir / (tag.empty() ? std::string("cl.ckpt") : "cl." + std::string(tag) + ".ckpt");
}

fs::path Paths::log_for(const fs::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".log.jsonl");
}

fs::path Paths::metrics_for(const fs::path& checkpoint) {
  auto p = checkpoint;
  return p.replace_extension(".metrics.json");
}

json artifact_meta(const RunConfig& config) {
  return {{"tool", "corefcl"}, {"version", std::string(version())}, {"config", config.to_json()}};
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  return out;
}

std::ifstream open_in(const fs::path& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("missing " + std::string(what) + " '" + path.string() + "' (run the earlier pipeline stages first)");
  }
  return in;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; results must be
// written to per-index slots so the outcome does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<EncodedExample> encode_all(const std::vector<ContextualExample>& examples, const Dataset& d) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(ex, d.vocab, d.bpe_ptr()));
  return out;
}

std::size_t context_size(const RunConfig& config) { return static_cast<std::size_t>(config.context_size); }

}  // namespace

void write_sidecar(const fs::path& artifact, const RunConfig& config) {
  auto out = open_out(fs::path(artifact.string() + ".meta.json"));
  out << artifact_meta(config).dump(2) << '\n';
}

void write_report(const fs::path& path, json value, const RunConfig& config) {
  for (auto& [k, v] : artifact_meta(config).items()) value[k] = v;
  auto out = open_out(path);
  out << value.dump(2) << '\n';
}

RuleSet rules(const RunConfig& config) {
  return config.rules.empty() ? RuleSet::from_lexicon(config.lexicon()) : RuleSet::load(config.rules);
}

Dataset load_dataset(const RunConfig& config) {
  const Paths paths(config);
  Dataset d;
  {
    auto in = open_in(paths.vocab(), "vocabulary");
    d.vocab = Vocabulary::parse(in);
  }
  if (config.bpe_merges > 0) d.bpe = BpeModel::load(paths.bpe());
  const auto n = context_size(config);
  d.train = extract_examples(load_corpus(paths.split("train")), n);
  d.valid = extract_examples(load_corpus(paths.split("valid")), n);
  d.test = extract_examples(load_corpus(paths.split("test")), n);
  d.train_enc = encode_all(d.train, d);
  d.valid_enc = encode_all(d.valid, d);
  d.test_enc = encode_all(d.test, d);
  return d;
}

std::vector<Document> synth_gen(const RunConfig& config) {
  config.validate();
  const auto docs = generate_corpus(config.lexicon(), config.generation());
  const Paths paths(config);
  auto out = open_out(paths.corpus());
  write_corpus(out, docs);
  write_sidecar(paths.corpus(), config);
  return docs;
}

json IngestSummary::to_json() const {
  return {{"docs", docs},           {"train_docs", train_docs}, {"valid_docs", valid_docs},
          {"test_docs", test_docs}, {"vocab_size", vocab_size}, {"suite_items", suite_items}};
}

IngestSummary ingest(const RunConfig& config) {
  config.validate();
  const Paths paths(config);
  const fs::path source = config.input.empty() ? paths.corpus() : fs::path(config.input);
  if (!fs::exists(source)) throw Error("missing corpus '" + source.string() + "'");
  const auto docs = load_corpus(source, config.format);
  const auto split = split_by_documents(docs, config.split_ratios(), config.derived_seed("split"));
  for (const auto& [name, part] : {std::pair{"train", &split.train}, {"valid", &split.valid}, {"test", &split.test}}) {
    auto out = open_out(paths.split(name));
    write_corpus(out, *part);
    write_sidecar(paths.split(name), config);
  }

  const auto train_examples = extract_examples(split.train, context_size(config));
  std::optional<BpeModel> bpe;
  if (config.bpe_merges > 0) {
    bpe = BpeModel::train(vocabulary_sentences(train_examples), config.bpe_merges);
    bpe->save(paths.bpe());
    write_sidecar(paths.bpe(), config);
  }
  const auto vocab =
      Vocabulary::build(vocabulary_sentences(train_examples, bpe ? &*bpe : nullptr), config.min_count);
  vocab.save(paths.vocab());
  write_sidecar(paths.vocab(), config);

  // The suite only finds items in corpora that follow the synthetic pattern.
  const auto suite = generate_contrastive_suite(split.test, config.lexicon(), context_size(config));
  {
    auto out = open_out(paths.suite());
    write_suite(out, suite);
  }
  write_sidecar(paths.suite(), config);

  IngestSummary s;
  s.docs = docs.size();
  s.train_docs = split.train.size();
  s.valid_docs = split.valid.size();
  s.test_docs = split.test.size();
  s.vocab_size = vocab.size();
  s.suite_items = suite.size();
  return s;
}

json AnnotationSummary::to_json() const {
  return {{"examples", examples}, {"annotated", annotated}, {"chains", chains}, {"annotation_rate", rate}};
}

AnnotationSummary summarize(const std::vector<AnnotatedExample>& annotated) {
  AnnotationSummary s;
  s.examples = annotated.size();
  for (const auto& a : annotated) {
    s.annotated += a.chains.empty() ? 0 : 1;
    s.chains += a.chains.size();
  }
  s.rate = annotated.empty() ? 0.0 : annotation_rate(annotated);
  return s;
}

AnnotationSummary annotate(const RunConfig& config) {
  config.validate();
  const Paths paths(config);
  const auto examples = extract_examples(load_corpus(paths.split("train")), context_size(config));
  const auto ruleset = rules(config);
  std::vector<AnnotatedExample> annotated(examples.size());
  parallel_for(examples.size(), config.threads, [&](std::size_t i) { annotated[i] = resolve(examples[i], ruleset); });
  auto out = open_out(paths.annotated());
  write_annotated(out, annotated);
  write_sidecar(paths.annotated(), config);
  return summarize(annotated);
}

std::size_t augment(const RunConfig& config, const fs::path& out_path) {
  config.validate();
  const Paths paths(config);
  auto in = open_in(paths.annotated(), "annotations");
  const auto filtered = filter_annotated(parse_annotated(in));
  const auto pairs = build_contrastive_dataset(filtered, config.corruption(rules(config).nouns()));
  auto out = open_out(out_path);
  write_augmented(out, pairs);
  write_sidecar(out_path, config);
  return pairs.size();
}

namespace {

void write_log(const fs::path& path, const TrainHistory& history, const RunConfig& config) {
  auto out = open_out(path);
  write_training_log(out, history);
  write_sidecar(path, config);
}

json checkpoint_meta(const RunConfig& config, const TrainHistory& history) {
  auto meta = artifact_meta(config);
  meta["stop_reason"] = history.stop_reason;
  meta["best_step"] = history.best_step;
  meta["best_val_mt_loss"] = history.best_val_mt_loss;
  return meta;
}

}  // namespace

TrainHistory train(const RunConfig& config) {
  config.validate();
  const Paths paths(config);
  const auto data = load_dataset(config);
  auto params = init_params<float>(config.model(data.vocab.size()), config.derived_seed("init"));
  OptimizerState<float> state;
  const auto history = train_mt<float>(params, data.train_enc, data.valid_enc, config.train(Phase::MT), &state);
  save_checkpoint<float>(paths.mt_checkpoint(), params, &state, checkpoint_meta(config, history));
  write_log(Paths::log_for(paths.mt_checkpoint()), history, config);
  return history;
}

ModelParams<float> load_model(const RunConfig& config, const fs::path& checkpoint, const Dataset& data) {
  const auto expected = config.model(data.vocab.size());
  try {
    return load_checkpoint<float>(checkpoint, &expected).params;
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()) + " (checkpoint '" + checkpoint.string() + "' vs run configuration)");
  }
}

TrainHistory finetune(const RunConfig& config, const fs::path& augmented, const fs::path& checkpoint) {
  config.validate();
  const Paths paths(config);
  const auto data = load_dataset(config);
  auto params = load_model(config, paths.mt_checkpoint(), data);
  auto in = open_in(augmented, "augmented data");
  const auto pairs = parse_augmented(in);
  std::vector<ContrastiveItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back(encode_contrastive_pair(p, data.vocab, data.bpe_ptr()));
  // Fresh optimizer moments for the new phase.
  OptimizerState<float> state;
  const auto history = finetune_contrastive<float>(params, data.train_enc, items, data.valid_enc,
                                                   config.train(Phase::Finetune), &state);
  save_checkpoint<float>(checkpoint, params, &state, checkpoint_meta(config, history));
  write_log(Paths::log_for(checkpoint), history, config);
  return history;
}

json Evaluation::to_json() const {
  json j{{"bleu", bleu.to_json()}};
  j["contrastive"] = contrastive ? contrastive->to_json() : json(nullptr);
  return j;
}

namespace {

std::vector<std::string> decode_texts(const std::vector<std::vector<int>>& ids, const Dataset& d) {
  std::vector<std::string> out;
  for (const auto& s : ids) out.push_back(join_tokens(decode(s, d.vocab, d.bpe_ptr())));
  return out;
}

std::vector<EncodedContrastiveItem> encode_suite(const std::vector<ContrastiveTestItem>& suite, const Dataset& d) {
  std::vector<EncodedContrastiveItem> out;
  for (const auto& item : suite) out.push_back(encode_test_item(item, d.vocab, d.bpe_ptr()));
  return out;
}

}  // namespace

Evaluation evaluate(const RunConfig& config, const fs::path& checkpoint) {
  config.validate();
  const Paths paths(config);
  const auto data = load_dataset(config);
  const auto params = load_model(config, checkpoint, data);
  if (data.test.empty()) throw Error("evaluate: empty test split");
  const auto hyp_ids = translate(params, std::span<const EncodedExample>(data.test_enc), config.decoding());
  std::vector<Tokens> hyps, refs;
  for (std::size_t i = 0; i < hyp_ids.size(); ++i) {
    hyps.push_back(decode(hyp_ids[i], data.vocab, data.bpe_ptr()));
    refs.push_back(data.test[i].target);
  }
  Evaluation e;
  e.bleu = corpus_bleu(hyps, refs, config.bleu());
  const auto suite = load_suite(paths.suite());
  if (!suite.empty()) {
    e.contrastive = contrastive_accuracy(params, std::span<const EncodedContrastiveItem>(encode_suite(suite, data)));
  }
  auto report = e.to_json();
  report["checkpoint"] = checkpoint.filename().string();
  report["decoding"] = {{"beam_size", config.beam_size}, {"length_norm", config.length_norm},
                        {"max_len", config.decode_max_len}};
  write_report(Paths::metrics_for(checkpoint), report, config);
  return e;
}

ContrastiveResult score_contrastive(const RunConfig& config, const fs::path& checkpoint, const fs::path& suite_path) {
  const auto data = load_dataset(config);
  const auto params = load_model(config, checkpoint, data);
  const auto suite = load_suite(suite_path);
  return contrastive_accuracy(params, std::span<const EncodedContrastiveItem>(encode_suite(suite, data)));
}

std::vector<std::string> translate(const RunConfig& config, const fs::path& checkpoint, const fs::path& corpus) {
  const auto data = load_dataset(config);
  const auto params = load_model(config, checkpoint, data);
  const auto examples = extract_examples(load_corpus(corpus, config.format), context_size(config));
  const auto encoded = encode_all(examples, data);
  return decode_texts(translate(params, std::span<const EncodedExample>(encoded), config.decoding()), data);
}

std::vector<AblationRow> ablate(const RunConfig& config) {
  const Paths paths(config);
  std::vector<AblationRow> rows;
  const auto base = evaluate(config, paths.mt_checkpoint());
  if (!base.contrastive) throw Error("ablate: the contrastive suite is empty");
  rows.push_back({"mt-only", base.contrastive->accuracy, base.bleu.bleu});
  for (const char* strategy : {"both", "omit-only", "replace-only"}) {
    RunConfig c = config;
    c.strategy = strategy;
    augment(c, paths.augmented(strategy));
    const auto ckpt = paths.cl_checkpoint(strategy);
    finetune(c, paths.augmented(strategy), ckpt);
    const auto e = evaluate(c, ckpt);
    rows.push_back({std::string("corefcl/") + strategy, e.contrastive->accuracy, e.bleu.bleu});
  }
  json table = json::array();
  for (const auto& r : rows) table.push_back({{"name", r.name}, {"accuracy", r.accuracy}, {"bleu", r.bleu}});
  write_report(paths.dir / "ablation.json", {{"rows", table}}, config);
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-24s %10s %8s\n", "setting", "accuracy", "BLEU");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-24s %9.2f%% %8.2f\n", r.name.c_str(), 100.0 * r.accuracy, r.bleu);
    out << line;
  }
  return out.str();
}

json stats(const RunConfig& config) {
  const Paths paths(config);
  json j;
  const fs::path corpus = config.input.empty() ? paths.corpus() : fs::path(config.input);
  if (fs::exists(corpus)) {
    const auto docs = load_corpus(corpus, config.format);
    std::size_t sentences = 0;
    for (const auto& d : docs) sentences += d.pairs.size();
    j["corpus"] = {{"docs", docs.size()}, {"sentences", sentences},
                   {"pronoun_followups", count_pronoun_followups(docs, config.lexicon())}};
  }
  if (fs::exists(paths.annotated())) {
    auto in = open_in(paths.annotated(), "annotations");
    j["annotation"] = summarize(parse_annotated(in)).to_json();
  }
  if (j.is_null()) throw Error("stats: nothing to report in '" + paths.dir.string() + "'");
  return j;
}

Evaluation run_all(const RunConfig& config) {
  const Paths paths(config);
  if (config.input.empty()) synth_gen(config);
  ingest(config);
  annotate(config);
  augment(config, paths.augmented());
  train(config);
  evaluate(config, paths.mt_checkpoint());
  finetune(config, paths.augmented(), paths.cl_checkpoint());
  return evaluate(config, paths.cl_checkpoint());
}

}  // namespace corefcl::pipeline
