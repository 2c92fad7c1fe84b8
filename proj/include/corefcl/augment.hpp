#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "corefcl/coref.hpp"
#include "corefcl/rng.hpp"

namespace corefcl {

enum class CorruptionStrategy { Both, OmitOnly, ReplaceOnly };

std::string_view to_string(CorruptionStrategy s);
CorruptionStrategy parse_strategy(std::string_view s);

struct CorruptionConfig {
  double p_omit = 0.5;
  std::uint64_t seed = 0;
  Tokens replacement_pool;
  CorruptionStrategy strategy = CorruptionStrategy::Both;
  /// Contrastive variants per example.
  int variants = 1;
  /// Corrupt a single randomly chosen chain instead of all chains.
  bool sample_one_chain = false;

  /// Omission probability after applying the strategy switch.
  double effective_p_omit() const;
  void validate() const;
};

/// Contexts with antecedent tokens flagged. The placeholder is a flag, never a
/// vocabulary token, so it cannot leak into training data.
struct MaskedContexts {
  std::vector<Tokens> tokens;
  std::vector<std::vector<bool>> masked;

  std::size_t mask_count() const;
  /// Rendering with "MASK" at masked positions (diagnostics only).
  std::vector<Tokens> render() const;
};

enum class EditKind { Omit, Replace };

struct Edit {
  int context = 0;
  int position = 0;  ///< token index in the original context sentence
  EditKind kind = EditKind::Omit;
  std::string token;  ///< replacement token, empty for omissions

  bool operator==(const Edit&) const = default;
};

struct CorruptedContexts {
  std::vector<Tokens> contexts;
  std::vector<Edit> edits;

  bool operator==(const CorruptedContexts&) const = default;
};

struct ContrastivePair {
  AnnotatedExample original;
  /// One or more corrupted versions of the original contexts.
  std::vector<CorruptedContexts> variants;
};

/// Masks every antecedent token of every chain, or of chain `only_chain`.
MaskedContexts mask_antecedents(const AnnotatedExample& example,
                                std::optional<std::size_t> only_chain = std::nullopt);

/// Draw order: masked tokens in (context, position) order; each consumes one
/// uniform() for the omit decision and, if replaced, one below(m) indexing the
/// pool with the original token removed.
CorruptedContexts corrupt(const MaskedContexts& masked, const CorruptionConfig& config, Philox& rng);

/// One pair per input; variant v of the example uses
/// Philox(example_seed(seed, doc_id, index), v).
std::vector<ContrastivePair> build_contrastive_dataset(const std::vector<AnnotatedExample>& annotated,
                                                       const CorruptionConfig& config);

void write_augmented(std::ostream& out, const std::vector<ContrastivePair>& pairs);
std::vector<ContrastivePair> parse_augmented(std::istream& in);

}  // namespace corefcl
