#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "corefcl/autodiff.hpp"
#include "corefcl/rng.hpp"
#include "corefcl/tokenizer.hpp"

namespace corefcl {

enum class Variant { Sent, Concat, MultiEnc, MultiEncHier };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct ModelConfig {
  Variant variant = Variant::MultiEnc;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  double dropout = 0.1;
  int max_len = 128;
  int vocab_size = 0;
  int context_size = 2;
  bool share_embeddings = true;

  /// transformer-base: 512 hidden, 6 layers, 8 heads, 2048 FFN, dropout 0.1.
  static ModelConfig transformer_base(Variant variant, int vocab_size);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors. Aliases resolve to the same tensor object, so
/// weight sharing is visible through same_storage().
template <typename T>
class ModelParams {
 public:
  ModelConfig config;

  void add(const std::string& name, ad::Tensor<T> tensor);
  void alias(const std::string& name, const std::string& target);

  const ad::Tensor<T>& get(const std::string& name) const;
  ad::Tensor<T>& get(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.contains(name) || aliases_.contains(name); }
  bool is_alias(const std::string& name) const { return aliases_.contains(name); }

  /// Every name in registration order, aliases included.
  const std::vector<std::string>& names() const { return order_; }
  /// Owning names only; each tensor appears once.
  std::vector<std::string> unique_names() const;
  std::size_t parameter_count() const;

  void zero_grad();
  /// Deep copy with the same alias structure.
  ModelParams clone() const;
  /// Copies values of every owning tensor; shapes must match.
  void assign(const ModelParams& other);

 private:
  std::vector<std::string> order_;
  std::map<std::string, ad::Tensor<T>> tensors_;
  std::map<std::string, std::string> aliases_;
};

/// Uniform Glorot weights, zero biases, unit layer-norm gains; deterministic
/// in (config, seed).
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  bool training = false;
  Philox* rng = nullptr;  ///< dropout stream; required when training
  /// When set, receives every gate value of the context combination.
  std::vector<double>* gate_trace = nullptr;
};

template <typename T>
struct TeacherForced {
  ad::Tensor<T> logits;      ///< [batch, steps, vocab]
  std::vector<int> targets;  ///< [batch * steps], -1 at padding
  std::size_t batch = 0;
  std::size_t steps = 0;
};

template <typename T>
TeacherForced<T> forward_teacher_forced(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                        const ForwardOptions& options = {});

/// Total target log-likelihood per example, shape [batch].
template <typename T>
ad::Tensor<T> sequence_log_probs(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                 const ForwardOptions& options = {});

/// log P(y | x, C) in inference mode.
template <typename T>
T log_prob(const ModelParams<T>& params, const EncodedExample& example);

template <typename T>
struct EncoderMemory {
  ad::Tensor<T> states;           ///< [batch, length, d_model]
  std::vector<std::uint8_t> pad;  ///< [batch * length], 1 at padding
  std::size_t batch = 0;
  std::size_t length = 0;

  EncoderMemory select(std::span<const std::size_t> rows) const;
};

/// Encoder side (contexts combined per variant); inference mode unless
/// options say otherwise.
template <typename T>
EncoderMemory<T> encode_batch(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                              const ForwardOptions& options = {});

/// Decoder logits for each prefix (starting with BOS), shape [batch, len, vocab];
/// all prefixes must have equal length.
template <typename T>
ad::Tensor<T> decoder_logits(const ModelParams<T>& params, const EncoderMemory<T>& memory,
                             const std::vector<std::vector<int>>& prefixes, const ForwardOptions& options = {});

/// Sinusoidal position table [length, d_model].
std::vector<double> sinusoidal_positions(std::size_t length, std::size_t d_model);

}  // namespace corefcl
