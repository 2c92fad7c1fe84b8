#include "corefcl/augment.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;

std::string_view to_string(CorruptionStrategy s) {
  switch (s) {
    case CorruptionStrategy::Both: return "both";
    case CorruptionStrategy::OmitOnly: return "omit-only";
    case CorruptionStrategy::ReplaceOnly: return "replace-only";
  }
  return "both";
}

CorruptionStrategy parse_strategy(std::string_view s) {
  if (s == "both") return CorruptionStrategy::Both;
  if (s == "omit-only") return CorruptionStrategy::OmitOnly;
  if (s == "replace-only") return CorruptionStrategy::ReplaceOnly;
  throw ConfigError("unknown corruption strategy '" + std::string(s) +
                    "' (expected both, omit-only or replace-only)");
}

double CorruptionConfig::effective_p_omit() const {
  switch (strategy) {
    case CorruptionStrategy::OmitOnly: return 1.0;
    case CorruptionStrategy::ReplaceOnly: return 0.0;
    case CorruptionStrategy::Both: break;
  }
  return p_omit;
}

void CorruptionConfig::validate() const {
  if (!(p_omit >= 0.0 && p_omit <= 1.0)) throw ConfigError("p_omit must lie in [0, 1]");
  if (variants < 1) throw ConfigError("variants must be at least 1");
  if (effective_p_omit() < 1.0 && replacement_pool.empty()) {
    throw ConfigError("replacement_pool must be non-empty when replacement is possible");
  }
}

std::size_t MaskedContexts::mask_count() const {
  std::size_t n = 0;
  for (const auto& row : masked) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), true));
  return n;
}

std::vector<Tokens> MaskedContexts::render() const {
  auto out = tokens;
  for (std::size_t c = 0; c < out.size(); ++c) {
    for (std::size_t j = 0; j < out[c].size(); ++j) {
      if (masked[c][j]) out[c][j] = "MASK";
    }
  }
  return out;
}

MaskedContexts mask_antecedents(const AnnotatedExample& example, std::optional<std::size_t> only_chain) {
  if (example.chains.empty()) throw Error("mask_antecedents: example has no coreference chain");
  if (only_chain && *only_chain >= example.chains.size()) throw Error("mask_antecedents: chain index out of range");
  MaskedContexts out;
  out.tokens = example.example.contexts;
  for (const auto& c : out.tokens) out.masked.emplace_back(c.size(), false);
  for (std::size_t k = 0; k < example.chains.size(); ++k) {
    if (only_chain && k != *only_chain) continue;
    for (const auto& m : example.chains[k].antecedents) {
      if (m.location < 0 || m.location >= static_cast<int>(out.tokens.size()) || m.start < 0 ||
          m.end > static_cast<int>(out.tokens[m.location].size()) || m.start >= m.end) {
        throw Error("mask_antecedents: antecedent span out of bounds");
      }
      for (int j = m.start; j < m.end; ++j) out.masked[m.location][j] = true;
    }
  }
  return out;
}

CorruptedContexts corrupt(const MaskedContexts& masked, const CorruptionConfig& config, Philox& rng) {
  if (masked.mask_count() == 0) throw Error("corrupt: contexts contain no masked token");
  const double p_omit = config.effective_p_omit();
  CorruptedContexts out;
  std::vector<const std::string*> pool;
  for (std::size_t c = 0; c < masked.tokens.size(); ++c) {
    Tokens sentence;
    for (std::size_t j = 0; j < masked.tokens[c].size(); ++j) {
      const auto& original = masked.tokens[c][j];
      if (!masked.masked[c][j]) {
        sentence.push_back(original);
        continue;
      }
      const double u = rng.uniform();
      if (u < p_omit) {
        out.edits.push_back(Edit{static_cast<int>(c), static_cast<int>(j), EditKind::Omit, {}});
        continue;
      }
      pool.clear();
      for (const auto& t : config.replacement_pool) {
        if (t != original) pool.push_back(&t);
      }
      if (pool.empty()) throw Error("corrupt: replacement pool exhausted for token '" + original + "'");
      const auto& pick = *pool[rng.below(pool.size())];
      sentence.push_back(pick);
      out.edits.push_back(Edit{static_cast<int>(c), static_cast<int>(j), EditKind::Replace, pick});
    }
    out.contexts.push_back(std::move(sentence));
  }
  return out;
}

std::vector<ContrastivePair> build_contrastive_dataset(const std::vector<AnnotatedExample>& annotated,
                                                       const CorruptionConfig& config) {
  config.validate();
  std::vector<ContrastivePair> out;
  out.reserve(annotated.size());
  for (const auto& a : annotated) {
    ContrastivePair pair{a, {}};
    const auto key = example_seed(config.seed, a.example.doc_id, a.example.index);
    for (int v = 0; v < config.variants; ++v) {
      Philox rng(key, static_cast<std::uint64_t>(v));
      std::optional<std::size_t> chain;
      if (config.sample_one_chain) chain = rng.below(a.chains.size());
      pair.variants.push_back(corrupt(mask_antecedents(a, chain), config, rng));
    }
    out.push_back(std::move(pair));
  }
  return out;
}

namespace {

json contexts_json(const std::vector<Tokens>& ctx) {
  json out = json::array();
  for (const auto& c : ctx) out.push_back(c);
  return out;
}

json edits_json(const std::vector<Edit>& edits) {
  json out = json::array();
  for (const auto& e : edits) {
    if (e.kind == EditKind::Omit) out.push_back({e.context, e.position, "O"});
    else out.push_back({e.context, e.position, "R", e.token});
  }
  return out;
}

CorruptedContexts variant_from(const json& ctx, const json& edits) {
  CorruptedContexts v;
  for (const auto& c : ctx) v.contexts.push_back(c.get<Tokens>());
  for (const auto& e : edits) {
    Edit edit;
    edit.context = e.at(0).get<int>();
    edit.position = e.at(1).get<int>();
    const auto kind = e.at(2).get<std::string>();
    if (kind == "O") edit.kind = EditKind::Omit;
    else if (kind == "R") edit.kind = EditKind::Replace, edit.token = e.at(3).get<std::string>();
    else throw Error("unknown edit kind '" + kind + "'");
    v.edits.push_back(std::move(edit));
  }
  return v;
}

}  // namespace

void write_augmented(std::ostream& out, const std::vector<ContrastivePair>& pairs) {
  for (const auto& p : pairs) {
    std::ostringstream base;
    write_annotated(base, {p.original});
    json rec = json::parse(base.str());
    if (!p.variants.empty()) {
      rec["ctx_corrupt"] = contexts_json(p.variants[0].contexts);
      rec["edits"] = edits_json(p.variants[0].edits);
    }
    if (p.variants.size() > 1) {
      json extra = json::array();
      for (std::size_t v = 1; v < p.variants.size(); ++v) {
        extra.push_back({{"ctx_corrupt", contexts_json(p.variants[v].contexts)},
                         {"edits", edits_json(p.variants[v].edits)}});
      }
      rec["extra_variants"] = extra;
    }
    out << rec.dump() << '\n';
  }
}

std::vector<ContrastivePair> parse_augmented(std::istream& in) {
  std::vector<ContrastivePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream one(line);
    auto annotated = parse_annotated(one);
    try {
      const json rec = json::parse(line);
      ContrastivePair p{std::move(annotated.at(0)), {}};
      p.variants.push_back(variant_from(rec.at("ctx_corrupt"), rec.at("edits")));
      if (rec.contains("extra_variants")) {
        for (const auto& v : rec["extra_variants"]) {
          p.variants.push_back(variant_from(v.at("ctx_corrupt"), v.at("edits")));
        }
      }
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad augmented record: ") + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace corefcl
