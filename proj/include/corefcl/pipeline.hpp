#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "corefcl/coref.hpp"
#include "corefcl/eval.hpp"
#include "corefcl/run_config.hpp"
#include "corefcl/tokenizer.hpp"
#include "corefcl/train.hpp"

// File-based pipeline stages. Every stage reads and writes artifacts under
// RunConfig::work_dir; JSON-lines artifacts get a `<file>.meta.json` sidecar
// with the resolved configuration, checkpoints and reports embed it.
namespace corefcl::pipeline {

namespace fs = std::filesystem;

struct Paths {
  explicit Paths(const RunConfig& config);

  fs::path dir;
  fs::path corpus() const { return dir / "corpus.jsonl"; }
  fs::path split(std::string_view name) const { return dir / (std::string(name) + ".jsonl"); }
  fs::path vocab() const { return dir / "vocab.jsonl"; }
  fs::path bpe() const { return dir / "bpe.txt"; }
  fs::path suite() const { return dir / "suite.jsonl"; }
  fs::path annotated() const { return dir / "annotated.jsonl"; }
  fs::path augmented(std::string_view tag = {}) const;
  fs::path mt_checkpoint() const { return dir / "mt.ckpt"; }
  fs::path cl_checkpoint(std::string_view tag = {}) const;
  static fs::path log_for(const fs::path& checkpoint);
  static fs::path metrics_for(const fs::path& checkpoint);
};

nlohmann::json artifact_meta(const RunConfig& config);
void write_sidecar(const fs::path& artifact, const RunConfig& config);
/// Writes `value` as pretty JSON with "tool", "version" and "config" added.
void write_report(const fs::path& path, nlohmann::json value, const RunConfig& config);

RuleSet rules(const RunConfig& config);

/// Everything the training and evaluation stages need, loaded from the work dir.
struct Dataset {
  Vocabulary vocab;
  std::optional<BpeModel> bpe;
  std::vector<ContextualExample> train, valid, test;
  std::vector<EncodedExample> train_enc, valid_enc, test_enc;

  const BpeModel* bpe_ptr() const { return bpe ? &*bpe : nullptr; }
};

Dataset load_dataset(const RunConfig& config);

std::vector<Document> synth_gen(const RunConfig& config);

struct IngestSummary {
  std::size_t docs = 0, train_docs = 0, valid_docs = 0, test_docs = 0;
  int vocab_size = 0;
  std::size_t suite_items = 0;
  nlohmann::json to_json() const;
};

/// Validates the corpus (config.input, or the generated one), splits it by
/// document, builds the vocabulary (and BPE) on the training split and derives
/// the contrastive suite from the test split.
IngestSummary ingest(const RunConfig& config);

struct AnnotationSummary {
  std::size_t examples = 0;
  std::size_t annotated = 0;
  std::size_t chains = 0;
  double rate = 0.0;
  nlohmann::json to_json() const;
};

AnnotationSummary summarize(const std::vector<AnnotatedExample>& annotated);

/// Annotates every training example.
AnnotationSummary annotate(const RunConfig& config);

/// Filters and corrupts the annotated examples under config.strategy.
std::size_t augment(const RunConfig& config, const fs::path& out);

TrainHistory train(const RunConfig& config);

/// Fine-tunes the MT checkpoint on `augmented`, writing `checkpoint` and its log.
TrainHistory finetune(const RunConfig& config, const fs::path& augmented, const fs::path& checkpoint);

ModelParams<float> load_model(const RunConfig& config, const fs::path& checkpoint, const Dataset& data);

struct Evaluation {
  BleuReport bleu;
  std::optional<ContrastiveResult> contrastive;
  nlohmann::json to_json() const;
};

/// Test-split BLEU and contrastive-suite accuracy; writes the metrics report
/// next to the checkpoint.
Evaluation evaluate(const RunConfig& config, const fs::path& checkpoint);

ContrastiveResult score_contrastive(const RunConfig& config, const fs::path& checkpoint,
                                    const fs::path& suite);

/// Detokenized translations of every sentence of a corpus file.
std::vector<std::string> translate(const RunConfig& config, const fs::path& checkpoint, const fs::path& corpus);

struct AblationRow {
  std::string name;
  double accuracy = 0.0;
  double bleu = 0.0;
};

/// MT-only baseline plus fine-tuning under each corruption strategy.
std::vector<AblationRow> ablate(const RunConfig& config);
std::string format_ablation(const std::vector<AblationRow>& rows);

nlohmann::json stats(const RunConfig& config);

/// synth-gen (unless config.input is set), ingest, annotate, augment, train,
/// finetune, evaluate.
Evaluation run_all(const RunConfig& config);

}  // namespace corefcl::pipeline
