#include "corefcl/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;

std::string_view to_string(Smoothing s) { return s == Smoothing::None ? "none" : "add-epsilon"; }

Smoothing parse_smoothing(std::string_view s) {
  if (s == "none") return Smoothing::None;
  if (s == "add-epsilon") return Smoothing::AddEpsilon;
  throw ConfigError("unknown smoothing '" + std::string(s) + "' (expected none or add-epsilon)");
}

json BleuReport::to_json() const {
  return {{"bleu", bleu},
          {"precisions", precisions},
          {"matches", matches},
          {"totals", totals},
          {"brevity_penalty", brevity_penalty},
          {"hyp_length", hyp_length},
          {"ref_length", ref_length},
          {"max_n", options.max_n},
          {"smoothing", std::string(to_string(options.smoothing))},
          {"epsilon", options.epsilon},
          {"lowercase", options.lowercase},
          {"char_level", options.char_level}};
}

namespace {

Tokens utf8_chars(const Tokens& tokens) {
  Tokens out;
  for (const auto& tok : tokens) {
    for (std::size_t i = 0; i < tok.size();) {
      const auto c = static_cast<unsigned char>(tok[i]);
      std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xe ? 3 : (c >> 3) == 0x1e ? 4 : 1;
      len = std::min(len, tok.size() - i);
      out.push_back(tok.substr(i, len));
      i += len;
    }
  }
  return out;
}

Tokens prepare(const Tokens& tokens, const BleuOptions& options) {
  Tokens out = tokens;
  if (options.lowercase) {
    for (auto& t : out) {
      std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    }
  }
  return options.char_level ? utf8_chars(out) : out;
}

std::map<Tokens, int> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<Tokens, int> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references,
                       const BleuOptions& options) {
  if (hypotheses.empty()) throw Error("corpus_bleu: empty hypothesis set");
  if (hypotheses.size() != references.size()) {
    throw Error("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                std::to_string(references.size()) + " references");
  }
  if (options.max_n < 1) throw ConfigError("corpus_bleu: max_n must be positive");
  if (!(options.epsilon > 0.0)) throw ConfigError("corpus_bleu: epsilon must be positive");

  BleuReport r;
  r.options = options;
  const auto N = static_cast<std::size_t>(options.max_n);
  r.matches.assign(N, 0);
  r.totals.assign(N, 0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = prepare(hypotheses[s], options);
    const auto ref = prepare(references[s], options);
    r.hyp_length += static_cast<std::int64_t>(hyp.size());
    r.ref_length += static_cast<std::int64_t>(ref.size());
    for (std::size_t n = 1; n <= N; ++n) {
      const auto h = ngram_counts(hyp, n);
      const auto g = ngram_counts(ref, n);
      for (const auto& [gram, count] : h) {
        r.totals[n - 1] += count;
        if (auto it = g.find(gram); it != g.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  r.precisions.assign(N, 0.0);
  double log_sum = 0.0;
  int orders = 0;
  bool zero = false;
  for (std::size_t n = 0; n < N; ++n) {
    if (r.totals[n] == 0) continue;
    double m = static_cast<double>(r.matches[n]);
    if (m == 0.0 && options.smoothing == Smoothing::AddEpsilon) m = options.epsilon;
    r.precisions[n] = m / static_cast<double>(r.totals[n]);
    if (r.precisions[n] == 0.0) zero = true;
    else log_sum += std::log(r.precisions[n]);
    ++orders;
  }
  const double c = static_cast<double>(r.hyp_length), ref = static_cast<double>(r.ref_length);
  r.brevity_penalty = c == 0.0 ? 0.0 : (c > ref ? 1.0 : std::exp(1.0 - ref / c));
  if (orders == 0 || zero) r.bleu = 0.0;
  else r.bleu = 100.0 * r.brevity_penalty * std::exp(log_sum / orders);
  return r;
}

// --- decoding ------------------------------------------------------------------

namespace {

bool never_emitted(int id) { return id == kPad || id == kBos || id == kBoc; }

// Log-probabilities of the next token at the last position of each row.
template <typename T>
std::vector<std::vector<double>> next_token_scores(const ModelParams<T>& params, const EncoderMemory<T>& memory,
                                                   const std::vector<std::vector<int>>& prefixes) {
  auto logits = decoder_logits(params, memory, prefixes);
  const std::size_t B = logits.dim(0), L = logits.dim(1), V = logits.dim(2);
  std::vector<std::vector<double>> out(B, std::vector<double>(V));
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = logits.values().subspan((b * L + prefixes[b].size() - 1) * V, V);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) {
      if (!never_emitted(static_cast<int>(v))) mx = std::max(mx, static_cast<double>(row[v]));
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      if (!never_emitted(static_cast<int>(v))) sum += std::exp(static_cast<double>(row[v]) - mx);
    }
    const double lse = mx + std::log(sum);
    for (std::size_t v = 0; v < V; ++v) {
      out[b][v] = never_emitted(static_cast<int>(v)) ? -std::numeric_limits<double>::infinity()
                                                     : static_cast<double>(row[v]) - lse;
    }
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<std::vector<int>> greedy_decode(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                            int max_len) {
  if (batch.empty()) return {};
  ad::NoGrad<T> no_grad;
  const auto memory = encode_batch(params, batch);
  std::vector<std::vector<int>> out(batch.size());
  std::vector<std::size_t> active(batch.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  for (int step = 0; step < max_len && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (auto i : active) {
      std::vector<int> p{kBos};
      p.insert(p.end(), out[i].begin(), out[i].end());
      prefixes.push_back(std::move(p));
    }
    const auto scores = next_token_scores(params, memory.select(active), prefixes);
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      const auto best = static_cast<int>(std::max_element(scores[r].begin(), scores[r].end()) - scores[r].begin());
      if (best == kEos) continue;
      out[active[r]].push_back(best);
      still.push_back(active[r]);
    }
    active = std::move(still);
  }
  return out;
}

template <typename T>
std::vector<int> beam_decode(const ModelParams<T>& params, const EncodedExample& example,
                             const DecodeOptions& options) {
  if (options.beam_size < 1) throw ConfigError("beam_size must be at least 1");
  ad::NoGrad<T> no_grad;
  const auto memory = encode_batch(params, std::span<const EncodedExample>(&example, 1));
  struct Hyp {
    std::vector<int> tokens;
    double score = 0.0;
  };
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  const auto k = static_cast<std::size_t>(options.beam_size);
  for (int step = 0; step < options.max_len && !alive.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : alive) {
      std::vector<int> p{kBos};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const std::vector<std::size_t> rows(alive.size(), 0);
    const auto scores = next_token_scores(params, memory.select(rows), prefixes);
    struct Cand {
      double score;
      std::size_t beam;
      int token;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      for (std::size_t v = 0; v < scores[b].size(); ++v) {
        if (std::isinf(scores[b][v])) continue;
        cands.push_back({alive[b].score + scores[b][v], b, static_cast<int>(v)});
      }
    }
    const auto take = std::min(k, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t c = 0; c < take; ++c) {
      Hyp h{alive[cands[c].beam].tokens, cands[c].score};
      if (cands[c].token == kEos) {
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }
  for (auto& h : alive) finished.push_back(std::move(h));
  auto rank = [&](const Hyp& h) {
    if (!options.length_norm) return h.score;
    return h.score / std::pow(static_cast<double>(h.tokens.size() + 1), 0.6);
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (rank(finished[i]) > rank(finished[best])) best = i;
  }
  return finished.empty() ? std::vector<int>{} : finished[best].tokens;
}

template <typename T>
std::vector<std::vector<int>> translate(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                        const DecodeOptions& options) {
  if (options.beam_size == 1 && !options.length_norm) return greedy_decode(params, batch, options.max_len);
  std::vector<std::vector<int>> out;
  for (const auto& ex : batch) out.push_back(beam_decode(params, ex, options));
  return out;
}

// --- contrastive scoring ---------------------------------------------------------

EncodedContrastiveItem encode_test_item(const ContrastiveTestItem& item, const Vocabulary& vocab,
                                        const BpeModel* bpe) {
  ContextualExample ex;
  ex.source = item.source;
  ex.target = item.target_correct;
  ex.contexts = item.contexts;
  EncodedContrastiveItem out;
  out.correct = encode_example(ex, vocab, bpe);
  for (const auto& wrong : item.targets_incorrect) {
    ex.target = wrong;
    out.incorrect_targets.push_back(encode_example(ex, vocab, bpe).target);
  }
  return out;
}

json ContrastiveResult::to_json(bool with_items) const {
  json j{{"accuracy", accuracy}, {"correct", correct}, {"total", total}};
  if (with_items) {
    json arr = json::array();
    for (const auto& it : items) arr.push_back({{"correct", it.correct}, {"incorrect", it.incorrect}, {"ok", it.is_correct}});
    j["items"] = std::move(arr);
  }
  return j;
}

template <typename T>
ContrastiveResult contrastive_accuracy(const ModelParams<T>& params, std::span<const EncodedContrastiveItem> suite,
                                       int batch_size) {
  if (suite.empty()) throw Error("contrastive_accuracy: empty suite");
  std::vector<EncodedExample> seqs;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    if (suite[i].incorrect_targets.empty()) {
      throw Error("contrastive_accuracy: item " + std::to_string(i) + " has no incorrect variants");
    }
    seqs.push_back(suite[i].correct);
    for (const auto& t : suite[i].incorrect_targets) seqs.push_back({suite[i].correct.contexts, suite[i].correct.source, t});
  }
  std::vector<double> scores;
  {
    ad::NoGrad<T> no_grad;
    const auto step = static_cast<std::size_t>(std::max(batch_size, 1));
    for (std::size_t start = 0; start < seqs.size(); start += step) {
      const auto chunk = std::span<const EncodedExample>(seqs).subspan(start, std::min(step, seqs.size() - start));
      const auto lp = sequence_log_probs(params, chunk);
      for (T v : lp.values()) scores.push_back(static_cast<double>(v));
    }
  }
  ContrastiveResult result;
  result.total = suite.size();
  std::size_t k = 0;
  for (const auto& item : suite) {
    ItemScore s;
    s.correct = scores[k++];
    s.is_correct = true;
    for (std::size_t j = 0; j < item.incorrect_targets.size(); ++j) {
      s.incorrect.push_back(scores[k++]);
      if (!(s.correct > s.incorrect.back())) s.is_correct = false;
    }
    result.correct += s.is_correct ? 1 : 0;
    result.items.push_back(std::move(s));
  }
  result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
  return result;
}

void write_suite(std::ostream& out, const std::vector<ContrastiveTestItem>& suite) {
  for (const auto& item : suite) {
    json ctx = json::array();
    for (const auto& c : item.contexts) ctx.push_back(join_tokens(c));
    json wrong = json::array();
    for (const auto& w : item.targets_incorrect) wrong.push_back(join_tokens(w));
    out << json{{"ctx", ctx}, {"src", join_tokens(item.source)}, {"tgt", join_tokens(item.target_correct)}, {"wrong", wrong}}
               .dump()
        << '\n';
  }
}

std::vector<ContrastiveTestItem> parse_suite(std::istream& in) {
  std::vector<ContrastiveTestItem> suite;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      ContrastiveTestItem item;
      for (const auto& c : j.at("ctx")) item.contexts.push_back(split_whitespace(c.get<std::string>()));
      item.source = split_whitespace(j.at("src").get<std::string>());
      item.target_correct = split_whitespace(j.at("tgt").get<std::string>());
      for (const auto& w : j.at("wrong")) item.targets_incorrect.push_back(split_whitespace(w.get<std::string>()));
      if (item.source.empty() || item.target_correct.empty()) throw FormatError("empty src or tgt", lineno);
      if (item.targets_incorrect.empty()) throw FormatError("item has no incorrect variants", lineno);
      const auto& w0 = item.targets_incorrect.front();
      for (std::size_t p = 0; p < std::min(w0.size(), item.target_correct.size()); ++p) {
        if (w0[p] != item.target_correct[p]) {
          item.pronoun_position = static_cast<int>(p);
          break;
        }
      }
      suite.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad suite record: ") + e.what(), lineno);
    }
  }
  return suite;
}

std::vector<ContrastiveTestItem> load_suite(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open suite '" + path.string() + "'");
  return parse_suite(in);
}

#define COREFCL_EVAL_INSTANTIATE(T)                                                                             \
  template std::vector<std::vector<int>> greedy_decode<T>(const ModelParams<T>&, std::span<const EncodedExample>, \
                                                          int);                                                 \
  template std::vector<int> beam_decode<T>(const ModelParams<T>&, const EncodedExample&, const DecodeOptions&);  \
  template std::vector<std::vector<int>> translate<T>(const ModelParams<T>&, std::span<const EncodedExample>,    \
                                                      const DecodeOptions&);                                    \
  template ContrastiveResult contrastive_accuracy<T>(const ModelParams<T>&,                                     \
                                                     std::span<const EncodedContrastiveItem>, int);

COREFCL_EVAL_INSTANTIATE(float)
COREFCL_EVAL_INSTANTIATE(double)

}  // namespace corefcl
