#include "corefcl/model.hpp"

#include <algorithm>
#include <cmath>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;
namespace ad = corefcl::ad;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Sent: return "sent";
    case Variant::Concat: return "concat";
    case Variant::MultiEnc: return "multi-enc";
    case Variant::MultiEncHier: return "multi-enc-hier";
  }
  return "sent";
}

Variant parse_variant(std::string_view s) {
  if (s == "sent" || s == "sent-level") return Variant::Sent;
  if (s == "concat") return Variant::Concat;
  if (s == "multi-enc") return Variant::MultiEnc;
  if (s == "multi-enc-hier") return Variant::MultiEncHier;
  throw ConfigError("unknown model variant '" + std::string(s) +
                    "' (expected sent, concat, multi-enc or multi-enc-hier)");
}

ModelConfig ModelConfig::transformer_base(Variant variant, int vocab_size) {
  ModelConfig c;
  c.variant = variant;
  c.d_model = 512;
  c.n_layers = 6;
  c.n_heads = 8;
  c.d_ff = 2048;
  c.dropout = 0.1;
  c.max_len = 512;
  c.vocab_size = vocab_size;
  return c;
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_len <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (vocab_size <= kNumReserved) throw ConfigError("vocab_size must exceed the reserved ids");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (context_size < 0) throw ConfigError("context_size must be non-negative");
}

json ModelConfig::to_json() const {
  return {{"variant", std::string(to_string(variant))},
          {"d_model", d_model},
          {"n_layers", n_layers},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"dropout", dropout},
          {"max_len", max_len},
          {"vocab_size", vocab_size},
          {"context_size", context_size},
          {"share_embeddings", share_embeddings}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_size = j.at("context_size").get<int>();
  c.share_embeddings = j.at("share_embeddings").get<bool>();
  return c;
}

// --- ModelParams -----------------------------------------------------------

template <typename T>
void ModelParams<T>::add(const std::string& name, ad::Tensor<T> tensor) {
  if (contains(name)) throw Error("duplicate parameter name '" + name + "'");
  tensors_.emplace(name, std::move(tensor));
  order_.push_back(name);
}

template <typename T>
void ModelParams<T>::alias(const std::string& name, const std::string& target) {
  if (contains(name)) throw Error("duplicate parameter name '" + name + "'");
  if (!tensors_.contains(target)) throw Error("alias target '" + target + "' is not an owning parameter");
  aliases_.emplace(name, target);
  order_.push_back(name);
}

template <typename T>
const ad::Tensor<T>& ModelParams<T>::get(const std::string& name) const {
  if (auto a = aliases_.find(name); a != aliases_.end()) return tensors_.at(a->second);
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
ad::Tensor<T>& ModelParams<T>::get(const std::string& name) {
  return const_cast<ad::Tensor<T>&>(static_cast<const ModelParams&>(*this).get(name));
}

template <typename T>
std::vector<std::string> ModelParams<T>::unique_names() const {
  std::vector<std::string> out;
  for (const auto& n : order_) {
    if (!aliases_.contains(n)) out.push_back(n);
  }
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams out;
  out.config = config;
  for (const auto& n : order_) {
    if (auto a = aliases_.find(n); a != aliases_.end()) out.alias(n, a->second);
    else out.add(n, tensors_.at(n).clone(true));
  }
  return out;
}

template <typename T>
void ModelParams<T>::assign(const ModelParams& other) {
  for (auto& [name, t] : tensors_) {
    const auto& src = other.get(name);
    if (src.shape() != t.shape()) {
      throw ShapeError("parameter '" + name + "': shape " + ad::shape_str(src.shape()) + " vs " +
                       ad::shape_str(t.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), t.mutable_values().begin());
  }
}

// --- initialization ---------------------------------------------------------

namespace {

template <typename T>
struct Initializer {
  ModelParams<T>& params;
  std::uint64_t key;
  std::uint64_t stream = 0;

  void glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, ad::Shape shape) {
    Philox rng(key, stream++);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
    params.add(name, ad::Tensor<T>::from(std::move(shape), std::move(v), true));
  }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    glorot(name + ".w", in, out, {in, out});
    constant(name + ".b", out, T(0));
  }
  void constant(const std::string& name, std::size_t n, T value) {
    ++stream;
    params.add(name, ad::Tensor<T>::full({n}, value, true));
  }
  void layer_norm(const std::string& name, std::size_t d) {
    constant(name + ".g", d, T(1));
    constant(name + ".b", d, T(0));
  }
  void attention(const std::string& name, std::size_t d) {
    for (const char* p : {"q", "k", "v", "o"}) linear(name + "." + p, d, d);
  }
  void ffn(const std::string& name, std::size_t d, std::size_t ff) {
    linear(name + ".1", d, ff);
    linear(name + ".2", ff, d);
  }
};

const char* const kAttentionParts[] = {"q", "k", "v", "o"};

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> p;
  p.config = config;
  Initializer<T> init{p, mix64(seed)};
  const auto D = static_cast<std::size_t>(config.d_model);
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto F = static_cast<std::size_t>(config.d_ff);

  init.glorot("embed.src", V, D, {V, D});
  if (config.share_embeddings) p.alias("embed.tgt", "embed.src");
  else init.glorot("embed.tgt", V, D, {V, D});

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    init.layer_norm(pre + ".ln1", D);
    init.attention(pre + ".attn", D);
    init.layer_norm(pre + ".ln2", D);
    init.ffn(pre + ".ffn", D, F);
  }
  init.layer_norm("enc.ln", D);

  if (config.variant == Variant::MultiEnc || config.variant == Variant::MultiEncHier) {
    // The context encoder is the source encoder under a second name.
    for (const auto& name : std::vector<std::string>(p.names())) {
      if (name.rfind("enc.", 0) == 0) p.alias("ctx_" + name, name);
    }
    if (config.variant == Variant::MultiEncHier) {
      init.glorot("hier.pool.q", D, 1, {D, 1});
      init.layer_norm("hier.sent.ln1", D);
      init.attention("hier.sent.attn", D);
      init.layer_norm("hier.sent.ln2", D);
      init.ffn("hier.sent.ffn", D, F);
      init.layer_norm("hier.sent.ln", D);
    }
    init.attention("s2c.attn", D);
    init.linear("gate", 2 * D, D);
  }

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    init.layer_norm(pre + ".ln1", D);
    init.attention(pre + ".self", D);
    init.layer_norm(pre + ".ln2", D);
    init.attention(pre + ".cross", D);
    init.layer_norm(pre + ".ln3", D);
    init.ffn(pre + ".ffn", D, F);
  }
  init.layer_norm("dec.ln", D);
  init.linear("out", D, V);
  return p;
}

std::vector<double> sinusoidal_positions(std::size_t length, std::size_t d_model) {
  std::vector<double> pe(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      pe[pos * d_model + i] = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  }
  return pe;
}

// --- forward pass -------------------------------------------------------------

namespace {

// A right-padded batch of id sequences.
struct Padded {
  std::vector<int> ids;
  std::vector<std::uint8_t> pad;  // 1 where padding
  std::vector<int> positions;     // position index per token
  std::size_t batch = 0;
  std::size_t length = 0;
};

Padded pad_sequences(const std::vector<std::vector<int>>& seqs,
                     const std::vector<std::vector<int>>* positions = nullptr) {
  Padded p;
  p.batch = seqs.size();
  for (const auto& s : seqs) p.length = std::max(p.length, s.size());
  p.length = std::max<std::size_t>(p.length, 1);
  p.ids.assign(p.batch * p.length, kPad);
  p.pad.assign(p.batch * p.length, 1);
  p.positions.assign(p.batch * p.length, 0);
  for (std::size_t b = 0; b < p.batch; ++b) {
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      p.ids[b * p.length + t] = seqs[b][t];
      p.pad[b * p.length + t] = 0;
      p.positions[b * p.length + t] = positions ? (*positions)[b][t] : static_cast<int>(t);
    }
  }
  return p;
}

template <typename T>
class Forward {
 public:
  Forward(const ModelParams<T>& params, const ForwardOptions& options)
      : p_(params), cfg_(params.config), opt_(options),
        D_(static_cast<std::size_t>(cfg_.d_model)), H_(static_cast<std::size_t>(cfg_.n_heads)) {
    if (opt_.training && cfg_.dropout > 0.0 && opt_.rng == nullptr) {
      throw Error("forward: training mode with dropout needs an RNG");
    }
  }

  EncoderMemory<T> encode(std::span<const EncodedExample> batch) {
    check_lengths(batch);
    const std::size_t B = batch.size();
    std::vector<std::vector<int>> sources;
    for (const auto& ex : batch) sources.push_back(ex.source);

    if (cfg_.variant == Variant::Concat) {
      std::vector<std::vector<int>> seqs;
      for (const auto& ex : batch) {
        std::vector<int> s;
        for (const auto& c : contexts_of(ex)) s.insert(s.end(), c.begin(), c.end());
        s.insert(s.end(), ex.source.begin(), ex.source.end());
        if (s.size() > static_cast<std::size_t>(cfg_.max_len)) throw Error("concatenated input exceeds max_len");
        seqs.push_back(std::move(s));
      }
      auto in = pad_sequences(seqs);
      return {encoder(in, "enc"), in.pad, B, in.length};
    }

    auto src = pad_sequences(sources);
    auto hs = encoder(src, "enc");
    EncoderMemory<T> mem{hs, src.pad, B, src.length};
    if (cfg_.variant == Variant::Sent) return mem;

    std::vector<std::uint8_t> has_ctx(B, 0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
      has_ctx[b] = contexts_of(batch[b]).empty() ? 0 : 1;
      any = any || has_ctx[b];
    }
    // Gate bypass: without any context the source states pass through unchanged.
    if (!any) return mem;

    ad::Tensor<T> keys;
    std::vector<std::uint8_t> key_pad;
    std::size_t key_len = 0;
    if (cfg_.variant == Variant::MultiEnc) {
      std::vector<std::vector<int>> ctx;
      for (const auto& ex : batch) {
        std::vector<int> s;
        for (const auto& c : contexts_of(ex)) s.insert(s.end(), c.begin(), c.end());
        ctx.push_back(std::move(s));
      }
      auto in = pad_sequences(ctx);
      keys = encoder(in, "ctx_enc");
      key_pad = in.pad;
      key_len = in.length;
    } else {
      auto [sent, sent_pad, n] = hierarchical_context(batch);
      keys = sent;
      key_pad = sent_pad;
      key_len = n;
    }

    // Source-to-context attention, then h = g*h_src + (1-g)*h_ctx with
    // g = sigmoid(W_g [h_src; h_ctx] + b_g).
    auto hc = attention("s2c.attn", hs, keys, src.length, key_len, key_pad, false);
    auto g = ad::sigmoid(linear(ad::concat<T>({hs, hc}, 2), "gate"));
    if (opt_.gate_trace) {
      for (std::size_t b = 0; b < B; ++b) {
        if (!has_ctx[b]) continue;
        for (std::size_t t = 0; t < src.length; ++t) {
          if (src.pad[b * src.length + t]) continue;
          const auto row = g.values().subspan((b * src.length + t) * D_, D_);
          opt_.gate_trace->insert(opt_.gate_trace->end(), row.begin(), row.end());
        }
      }
    }
    auto combined = ad::add(hc, ad::mul(g, ad::sub(hs, hc)));
    std::vector<std::uint8_t> take(B * src.length);
    for (std::size_t b = 0; b < B; ++b) {
      std::fill_n(take.begin() + b * src.length, src.length, has_ctx[b]);
    }
    mem.states = ad::where_rows(std::span<const std::uint8_t>(take), combined, hs);
    return mem;
  }

  ad::Tensor<T> decode(const EncoderMemory<T>& mem, const std::vector<std::vector<int>>& prefixes) {
    if (prefixes.size() != mem.batch) throw ShapeError("decode: prefix count differs from memory batch");
    auto in = pad_sequences(prefixes);
    const std::size_t B = in.batch, L = in.length;
    auto x = embed(in, "embed.tgt");
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      auto h = norm(x, pre + ".ln1");
      x = ad::add(x, drop(attention(pre + ".self", h, h, L, L, in.pad, true)));
      h = norm(x, pre + ".ln2");
      x = ad::add(x, drop(attention(pre + ".cross", h, mem.states, L, mem.length, mem.pad, false)));
      h = norm(x, pre + ".ln3");
      x = ad::add(x, drop(ffn(h, pre + ".ffn")));
    }
    x = norm(x, "dec.ln");
    auto logits = linear(x, "out");
    (void)B;
    return logits;
  }

 private:
  const std::vector<std::vector<int>>& contexts_of(const EncodedExample& ex) const {
    static const std::vector<std::vector<int>> none;
    return cfg_.context_size == 0 ? none : ex.contexts;
  }

  void check_lengths(std::span<const EncodedExample> batch) const {
    if (batch.empty()) throw Error("forward: empty batch");
    const auto max_len = static_cast<std::size_t>(cfg_.max_len);
    for (const auto& ex : batch) {
      if (ex.source.empty()) throw Error("forward: empty source");
      if (ex.source.size() > max_len || ex.target.size() > max_len) {
        throw Error("forward: sequence longer than max_len " + std::to_string(max_len));
      }
      std::size_t ctx_total = 0;
      for (const auto& c : ex.contexts) {
        if (c.size() > max_len) throw Error("forward: context longer than max_len");
        ctx_total += c.size();
      }
      if (cfg_.variant == Variant::MultiEnc && ctx_total > max_len) {
        throw Error("forward: flattened contexts longer than max_len");
      }
    }
  }

  ad::Tensor<T> param(const std::string& name) const { return p_.get(name); }

  ad::Tensor<T> drop(const ad::Tensor<T>& x) {
    return ad::dropout(x, cfg_.dropout, *rng_or_dummy(), opt_.training);
  }

  Philox* rng_or_dummy() {
    static thread_local Philox dummy(0);
    return opt_.rng ? opt_.rng : &dummy;
  }

  ad::Tensor<T> linear(const ad::Tensor<T>& x, const std::string& name) {
    return ad::add(ad::matmul(x, param(name + ".w")), param(name + ".b"));
  }

  ad::Tensor<T> norm(const ad::Tensor<T>& x, const std::string& name) {
    return ad::layer_norm(x, param(name + ".g"), param(name + ".b"));
  }

  ad::Tensor<T> ffn(const ad::Tensor<T>& x, const std::string& name) {
    return linear(ad::relu(linear(x, name + ".1")), name + ".2");
  }

  ad::Tensor<T> positions(const Padded& in) const {
    const std::size_t n = in.batch * in.length;
    int max_pos = 0;
    for (int p : in.positions) max_pos = std::max(max_pos, p);
    const auto table = sinusoidal_positions(static_cast<std::size_t>(max_pos) + 1, D_);
    std::vector<T> v(n * D_);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < D_; ++j) v[i * D_ + j] = static_cast<T>(table[in.positions[i] * D_ + j]);
    }
    return ad::Tensor<T>::from({in.batch, in.length, D_}, std::move(v));
  }

  ad::Tensor<T> embed(const Padded& in, const std::string& table) {
    auto e = ad::embedding_lookup(param(table), std::span<const int>(in.ids));
    e = ad::scale(ad::reshape(e, {in.batch, in.length, D_}), static_cast<T>(std::sqrt(static_cast<double>(D_))));
    return drop(ad::add(e, positions(in)));
  }

  // Pre-LN encoder stack; `prefix` selects the weights (ctx_enc aliases enc).
  ad::Tensor<T> encoder(const Padded& in, const std::string& prefix) {
    auto x = embed(in, "embed.src");
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = prefix + "." + std::to_string(l);
      auto h = norm(x, pre + ".ln1");
      x = ad::add(x, drop(attention(pre + ".attn", h, h, in.length, in.length, in.pad, false)));
      h = norm(x, pre + ".ln2");
      x = ad::add(x, drop(ffn(h, pre + ".ffn")));
    }
    return norm(x, prefix + ".ln");
  }

  // Multi-head attention. q_in [B, Lq, D], kv_in [B, Lk, D]; key_pad [B * Lk].
  ad::Tensor<T> attention(const std::string& name, const ad::Tensor<T>& q_in, const ad::Tensor<T>& kv_in,
                          std::size_t Lq, std::size_t Lk, const std::vector<std::uint8_t>& key_pad, bool causal) {
    const std::size_t B = q_in.dim(0);
    const std::size_t dh = D_ / H_;
    auto heads = [&](const ad::Tensor<T>& x, std::size_t L) {
      return ad::transpose(ad::reshape(x, {B, L, H_, dh}), {0, 2, 1, 3});
    };
    auto q = heads(linear(q_in, name + ".q"), Lq);
    auto k = heads(linear(kv_in, name + ".k"), Lk);
    auto v = heads(linear(kv_in, name + ".v"), Lk);
    auto scores = ad::scale(ad::matmul(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    std::vector<std::uint8_t> mask(B * H_ * Lq * Lk, 0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H_; ++h) {
        for (std::size_t i = 0; i < Lq; ++i) {
          std::uint8_t* row = mask.data() + ((b * H_ + h) * Lq + i) * Lk;
          for (std::size_t j = 0; j < Lk; ++j) row[j] = key_pad[b * Lk + j] || (causal && j > i);
        }
      }
    }
    auto probs = ad::softmax(ad::masked_fill(scores, std::span<const std::uint8_t>(mask)));
    auto out = ad::matmul(probs, v);
    out = ad::reshape(ad::transpose(out, {0, 2, 1, 3}), {B, Lq, D_});
    return linear(out, name + ".o");
  }

  // Token-level encoding of each context sentence, attention pooling with a
  // learned query, then one sentence-level self-attention layer. Sentence
  // positions count backwards from the most recent context.
  std::tuple<ad::Tensor<T>, std::vector<std::uint8_t>, std::size_t> hierarchical_context(
      std::span<const EncodedExample> batch) {
    const std::size_t B = batch.size();
    std::size_t n = 1;
    for (const auto& ex : batch) n = std::max(n, contexts_of(ex).size());
    std::vector<std::vector<int>> sentences(B * n);
    std::vector<std::uint8_t> sent_pad(B * n, 1);
    std::vector<int> sent_pos(B * n, 0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& ctx = contexts_of(batch[b]);
      for (std::size_t j = 0; j < ctx.size(); ++j) {
        sentences[b * n + j] = ctx[j];
        sent_pad[b * n + j] = 0;
        sent_pos[b * n + j] = static_cast<int>(ctx.size() - 1 - j);
      }
    }
    auto in = pad_sequences(sentences);
    const std::size_t Lc = in.length;
    auto tokens = encoder(in, "ctx_enc");  // [B*n, Lc, D]

    auto scores = ad::reshape(ad::matmul(tokens, param("hier.pool.q")), {B * n, 1, Lc});
    scores = ad::scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(D_))));
    auto weights = ad::softmax(ad::masked_fill(scores, std::span<const std::uint8_t>(in.pad)));
    auto pooled = ad::reshape(ad::matmul(weights, tokens), {B, n, D_});

    Padded sent_layout;
    sent_layout.batch = B;
    sent_layout.length = n;
    sent_layout.positions = sent_pos;
    auto x = ad::add(pooled, positions(sent_layout));
    auto h = norm(x, "hier.sent.ln1");
    x = ad::add(x, drop(attention("hier.sent.attn", h, h, n, n, sent_pad, false)));
    h = norm(x, "hier.sent.ln2");
    x = ad::add(x, drop(ffn(h, "hier.sent.ffn")));
    return {norm(x, "hier.sent.ln"), sent_pad, n};
  }

  const ModelParams<T>& p_;
  const ModelConfig& cfg_;
  ForwardOptions opt_;
  std::size_t D_;
  std::size_t H_;
};

}  // namespace

template <typename T>
EncoderMemory<T> EncoderMemory<T>::select(std::span<const std::size_t> rows) const {
  const std::size_t D = states.dim(2);
  EncoderMemory out;
  out.batch = rows.size();
  out.length = length;
  std::vector<T> v(rows.size() * length * D);
  out.pad.resize(rows.size() * length);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = states.values().subspan(rows[r] * length * D, length * D);
    std::copy(src.begin(), src.end(), v.begin() + r * length * D);
    std::copy_n(pad.begin() + rows[r] * length, length, out.pad.begin() + r * length);
  }
  out.states = ad::Tensor<T>::from({rows.size(), length, D}, std::move(v));
  return out;
}

template <typename T>
EncoderMemory<T> encode_batch(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                              const ForwardOptions& options) {
  return Forward<T>(params, options).encode(batch);
}

template <typename T>
ad::Tensor<T> decoder_logits(const ModelParams<T>& params, const EncoderMemory<T>& memory,
                             const std::vector<std::vector<int>>& prefixes, const ForwardOptions& options) {
  return Forward<T>(params, options).decode(memory, prefixes);
}

template <typename T>
TeacherForced<T> forward_teacher_forced(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                        const ForwardOptions& options) {
  Forward<T> fwd(params, options);
  auto memory = fwd.encode(batch);
  std::vector<std::vector<int>> inputs;
  std::size_t steps = 1;
  for (const auto& ex : batch) {
    if (ex.target.size() < 2 || ex.target.front() != kBos) {
      throw Error("forward: target must start with BOS and contain at least one more token");
    }
    inputs.emplace_back(ex.target.begin(), ex.target.end() - 1);
    steps = std::max(steps, ex.target.size() - 1);
  }
  TeacherForced<T> out;
  out.logits = fwd.decode(memory, inputs);
  out.batch = batch.size();
  out.steps = steps;
  out.targets.assign(batch.size() * steps, -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& tgt = batch[b].target;
    for (std::size_t t = 1; t < tgt.size(); ++t) {
      out.targets[b * steps + t - 1] = tgt[t] == kPad ? -1 : tgt[t];
    }
  }
  return out;
}

template <typename T>
ad::Tensor<T> sequence_log_probs(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                                 const ForwardOptions& options) {
  auto tf = forward_teacher_forced(params, batch, options);
  auto picked = ad::gather_last(ad::log_softmax(tf.logits), std::span<const int>(tf.targets));
  std::vector<int> segment(tf.targets.size());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    segment[i] = tf.targets[i] < 0 ? -1 : static_cast<int>(i / tf.steps);
  }
  return ad::segment_sum(picked, std::span<const int>(segment), tf.batch);
}

template <typename T>
T log_prob(const ModelParams<T>& params, const EncodedExample& example) {
  ad::NoGrad<T> no_grad;
  return sequence_log_probs(params, std::span<const EncodedExample>(&example, 1)).item();
}

#define COREFCL_MODEL_INSTANTIATE(T)                                                                      \
  template class ModelParams<T>;                                                                          \
  template struct EncoderMemory<T>;                                                                       \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t);                              \
  template TeacherForced<T> forward_teacher_forced<T>(const ModelParams<T>&, std::span<const EncodedExample>, \
                                                      const ForwardOptions&);                             \
  template ad::Tensor<T> sequence_log_probs<T>(const ModelParams<T>&, std::span<const EncodedExample>,    \
                                               const ForwardOptions&);                                    \
  template T log_prob<T>(const ModelParams<T>&, const EncodedExample&);                                   \
  template EncoderMemory<T> encode_batch<T>(const ModelParams<T>&, std::span<const EncodedExample>,       \
                                            const ForwardOptions&);                                       \
  template ad::Tensor<T> decoder_logits<T>(const ModelParams<T>&, const EncoderMemory<T>&,                \
                                           const std::vector<std::vector<int>>&, const ForwardOptions&);

COREFCL_MODEL_INSTANTIATE(float)
COREFCL_MODEL_INSTANTIATE(double)

}  // namespace corefcl
