#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "corefcl/augment.hpp"
#include "corefcl/model.hpp"

namespace corefcl {

enum class Phase { MT, Finetune };

std::string_view to_string(Phase p);
Phase parse_phase(std::string_view s);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 32;
  int max_steps = 2000;
  int eval_every = 100;
  /// Evaluations without improvement tolerated before stopping.
  int patience = 3;
  /// Only validation improvements larger than this reset the patience count;
  /// the returned parameters are still the best ones seen.
  double min_delta = 0.0;
  double alpha = 0.5;
  double eta = 1.0;
  std::uint64_t seed = 0;
  Phase phase = Phase::MT;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

template <typename T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
  std::int64_t step = 0;
};

/// An example together with its corrupted-context versions; target and source
/// are shared, only the contexts differ.
struct ContrastiveItem {
  EncodedExample original;
  std::vector<std::vector<std::vector<int>>> corrupted_contexts;
};

ContrastiveItem encode_contrastive_pair(const ContrastivePair& pair, const Vocabulary& vocab,
                                        const BpeModel* bpe = nullptr);

// --- losses ------------------------------------------------------------------

/// Mean negative log-likelihood over non-PAD target tokens.
template <typename T>
ad::Tensor<T> mt_loss(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                      const ForwardOptions& options = {});

/// mean_i max{eta + neg_i - pos_i, 0} over sequence log-probabilities.
template <typename T>
ad::Tensor<T> margin_loss(const ad::Tensor<T>& pos, const ad::Tensor<T>& neg, T eta);

/// Max-margin loss between true and corrupted contexts. With several
/// corrupted versions per item the hinges are averaged inside the item.
template <typename T>
ad::Tensor<T> cl_loss(const ModelParams<T>& params, std::span<const ContrastiveItem> batch, T eta,
                      const ForwardOptions& options = {});

/// (1 - alpha) * mt + alpha * cl.
template <typename T>
ad::Tensor<T> joint_loss(const ad::Tensor<T>& mt, const ad::Tensor<T>& cl, T alpha);

template <typename T>
ad::Tensor<T> joint_loss(const ModelParams<T>& params, std::span<const EncodedExample> mt_batch,
                         std::span<const ContrastiveItem> cl_batch, T alpha, T eta,
                         const ForwardOptions& options = {});

/// Token-weighted validation loss without dropout or recording.
template <typename T>
double evaluate_mt_loss(const ModelParams<T>& params, std::span<const EncodedExample> data, int batch_size = 64);

// --- optimization ------------------------------------------------------------

/// Bias-corrected ADAM over the owning tensors of `params`, reading their
/// gradient buffers. Throws before touching anything if a gradient is not finite.
template <typename T>
void adam_step(ModelParams<T>& params, OptimizerState<T>& state, const TrainConfig& config);

struct EvalRecord {
  std::int64_t step = 0;
  double mt_loss = 0.0;  ///< mean training MT loss since the previous evaluation
  std::optional<double> cl_loss;
  double val_mt_loss = 0.0;
};

struct TrainHistory {
  std::vector<double> step_losses;
  std::vector<EvalRecord> evals;
  std::string stop_reason;
  std::int64_t best_step = 0;  ///< 0 when no evaluation improved
  double best_val_mt_loss = 0.0;

  bool operator==(const TrainHistory&) const = default;
};

bool operator==(const EvalRecord& a, const EvalRecord& b);

using EvalCallback = std::function<void(const EvalRecord&)>;

/// Seeded shuffling, early stopping on validation MT loss; on return `params`
/// holds the best-validation weights (the final ones without validation data).
template <typename T>
TrainHistory train_mt(ModelParams<T>& params, std::span<const EncodedExample> train,
                      std::span<const EncodedExample> valid, const TrainConfig& config,
                      OptimizerState<T>* state = nullptr, const EvalCallback& on_eval = {});

/// Joint-loss fine-tuning. The MT batch stream is the one train_mt would draw
/// with the same seed; contrastive batches come from an independent stream.
template <typename T>
TrainHistory finetune_contrastive(ModelParams<T>& params, std::span<const EncodedExample> mt_train,
                                  std::span<const ContrastiveItem> contrastive,
                                  std::span<const EncodedExample> valid, const TrainConfig& config,
                                  OptimizerState<T>* state = nullptr, const EvalCallback& on_eval = {});

void write_training_log(std::ostream& out, const TrainHistory& history);

// --- checkpoints -------------------------------------------------------------

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  OptimizerState<T> state;
  nlohmann::json metadata;  ///< free-form, e.g. the resolved run configuration
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params,
                     const OptimizerState<T>* state = nullptr, const nlohmann::json& metadata = {});

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& params, const OptimizerState<T>* state,
                                 const nlohmann::json& metadata);

/// Verifies magic, checksum, dtype and every tensor shape against the stored
/// config (and `expected` when given) before returning anything.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr);

}  // namespace corefcl
