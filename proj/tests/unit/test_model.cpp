#include "doctest.h"

#include <cmath>

#include "corefcl/error.hpp"
#include "corefcl/model.hpp"
#include "corefcl/train.hpp"
#include "gradcheck.hpp"

using namespace corefcl;
using ad::Tensor;

namespace {

ModelConfig tiny(Variant v, int d = 8, int vocab = 11) {
  ModelConfig c;
  c.variant = v;
  c.d_model = d;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 2 * d;
  c.dropout = 0.0;
  c.max_len = 32;
  c.vocab_size = vocab;
  return c;
}

// Overwrites every parameter (biases and gains included) with seeded noise so
// that zero-initialized entries are exercised too.
template <typename T>
void randomize(ModelParams<T>& p, std::uint64_t seed, double scale = 0.5) {
  Philox rng(seed, 3);
  for (const auto& name : p.unique_names()) {
    for (auto& x : p.get(name).mutable_values()) x = static_cast<T>(scale * (2 * rng.uniform() - 1));
  }
}

EncodedExample ex(std::vector<std::vector<int>> ctx, std::vector<int> src, std::vector<int> tgt) {
  return {std::move(ctx), std::move(src), std::move(tgt)};
}

std::vector<EncodedExample> sample_batch() {
  return {
      ex({{kBoc, 5, 6, 7}, {kBoc, 8}}, {kBos, 9, 10, kEos}, {kBos, 6, 7, 8, kEos}),
      ex({}, {kBos, 5, kEos}, {kBos, 9, kEos}),
      ex({{kBoc, 10, 10}}, {kBos, 7, 8, 6, 5, kEos}, {kBos, 5, kEos}),
  };
}

// --- naive reference forward for the sentence-level model -------------------

using Mat = std::vector<std::vector<double>>;

std::vector<double> vals(const ModelParams<double>& p, const std::string& name) {
  auto v = p.get(name).values();
  return {v.begin(), v.end()};
}

Mat linear(const ModelParams<double>& p, const Mat& x, const std::string& name) {
  const auto w = vals(p, name + ".w"), b = vals(p, name + ".b");
  const std::size_t out = b.size(), in = w.size() / out;
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < in; ++k) s += x[i][k] * w[k * out + o];
      y[i][o] = s;
    }
  }
  return y;
}

Mat norm(const ModelParams<double>& p, const Mat& x, const std::string& name) {
  const auto g = vals(p, name + ".g"), b = vals(p, name + ".b");
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= x[i].size();
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= x[i].size();
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

Mat attend(const ModelParams<double>& p, const Mat& q_in, const Mat& kv_in, const std::string& name, int heads,
           bool causal) {
  const auto q = linear(p, q_in, name + ".q"), k = linear(p, kv_in, name + ".k"), v = linear(p, kv_in, name + ".v");
  const std::size_t D = q[0].size(), dh = D / heads;
  Mat out(q.size(), std::vector<double>(D, 0.0));
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s;
      const std::size_t limit = causal ? i + 1 : k.size();
      for (std::size_t j = 0; j < limit; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        s.push_back(dot / std::sqrt(static_cast<double>(dh)));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < s.size(); ++j)
        for (std::size_t c = 0; c < dh; ++c) out[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
    }
  }
  return linear(p, out, name + ".o");
}

Mat ffn(const ModelParams<double>& p, const Mat& x, const std::string& name) {
  auto h = linear(p, x, name + ".1");
  for (auto& r : h)
    for (auto& v : r) v = std::max(v, 0.0);
  return linear(p, h, name + ".2");
}

Mat embed(const ModelParams<double>& p, const std::vector<int>& ids, const std::string& table) {
  const auto e = vals(p, table);
  const std::size_t D = p.config.d_model;
  const auto pe = sinusoidal_positions(ids.size(), D);
  Mat x(ids.size(), std::vector<double>(D));
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t j = 0; j < D; ++j) x[t][j] = e[ids[t] * D + j] * std::sqrt(static_cast<double>(D)) + pe[t * D + j];
  return x;
}

Mat reference_logits(const ModelParams<double>& p, const EncodedExample& e) {
  const int H = p.config.n_heads;
  auto x = embed(p, e.source, "embed.src");
  x = add(x, attend(p, norm(p, x, "enc.0.ln1"), norm(p, x, "enc.0.ln1"), "enc.0.attn", H, false));
  x = add(x, ffn(p, norm(p, x, "enc.0.ln2"), "enc.0.ffn"));
  const auto mem = norm(p, x, "enc.ln");

  std::vector<int> in(e.target.begin(), e.target.end() - 1);
  auto y = embed(p, in, "embed.tgt");
  auto h = norm(p, y, "dec.0.ln1");
  y = add(y, attend(p, h, h, "dec.0.self", H, true));
  y = add(y, attend(p, norm(p, y, "dec.0.ln2"), mem, "dec.0.cross", H, false));
  y = add(y, ffn(p, norm(p, y, "dec.0.ln3"), "dec.0.ffn"));
  return linear(p, norm(p, y, "dec.ln"), "out");
}

}  // namespace

TEST_CASE("variant names round-trip") {
  for (auto v : {Variant::Sent, Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK(parse_variant("sent-level") == Variant::Sent);
  CHECK_THROWS_AS(parse_variant("bogus"), ConfigError);
}

TEST_CASE("config validation and transformer-base") {
  auto base = ModelConfig::transformer_base(Variant::MultiEnc, 1000);
  CHECK(base.d_model == 512);
  CHECK(base.n_layers == 6);
  CHECK(base.n_heads == 8);
  CHECK(base.d_ff == 2048);
  CHECK(base.dropout == 0.1);
  CHECK_NOTHROW(base.validate());
  CHECK(ModelConfig::from_json(base.to_json()) == base);

  auto c = tiny(Variant::Sent);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(Variant::Sent);
  c.vocab_size = kNumReserved;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(Variant::Sent);
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("initialization: determinism, Glorot bounds, zero biases, unit gains") {
  const auto cfg = tiny(Variant::MultiEncHier);
  auto a = init_params<double>(cfg, 7);
  auto b = init_params<double>(cfg, 7);
  auto c = init_params<double>(cfg, 8);
  bool differs = false;
  for (const auto& name : a.unique_names()) {
    const auto va = a.get(name).values(), vb = b.get(name).values(), vc = c.get(name).values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
    differs = differs || !std::equal(va.begin(), va.end(), vc.begin());
    const auto& shape = a.get(name).shape();
    const bool is_bias = name.ends_with(".b");
    const bool is_gain = name.ends_with(".g");
    for (double v : va) {
      if (is_bias) CHECK(v == 0.0);
      else if (is_gain) CHECK(v == 1.0);
      else {
        const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        CHECK(std::abs(v) <= limit);
      }
    }
  }
  CHECK(differs);
}

TEST_CASE("parameter sharing") {
  auto p = init_params<double>(tiny(Variant::MultiEnc), 1);
  CHECK(p.get("embed.tgt").same_storage(p.get("embed.src")));
  CHECK(p.get("ctx_enc.0.attn.q.w").same_storage(p.get("enc.0.attn.q.w")));
  CHECK(p.is_alias("ctx_enc.ln.g"));
  CHECK(p.contains("gate.w"));
  CHECK(p.get("gate.w").shape() == ad::Shape{16, 8});

  auto cfg = tiny(Variant::Sent);
  cfg.share_embeddings = false;
  auto q = init_params<double>(cfg, 1);
  CHECK_FALSE(q.get("embed.tgt").same_storage(q.get("embed.src")));
  CHECK_FALSE(q.contains("gate.w"));
  CHECK_FALSE(q.contains("ctx_enc.ln.g"));

  auto h = init_params<double>(tiny(Variant::MultiEncHier), 1);
  CHECK(h.contains("hier.pool.q"));
  CHECK(h.contains("hier.sent.attn.q.w"));

  auto cl = p.clone();
  CHECK(cl.get("embed.tgt").same_storage(cl.get("embed.src")));
  CHECK_FALSE(cl.get("embed.src").same_storage(p.get("embed.src")));
}

TEST_CASE("forward pass matches a hand-written reference (d_model 4)") {
  auto cfg = tiny(Variant::Sent, 4, 11);
  auto p = init_params<double>(cfg, 3);
  randomize(p, 4);
  const auto batch = sample_batch();
  auto tf = forward_teacher_forced(p, std::span<const EncodedExample>(batch));
  const std::size_t V = 11;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto ref = reference_logits(p, batch[b]);
    for (std::size_t t = 0; t < ref.size(); ++t) {
      for (std::size_t v = 0; v < V; ++v) {
        CHECK(tf.logits.at((b * tf.steps + t) * V + v) == doctest::Approx(ref[t][v]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("multi-encoder output without context equals the sentence-level model") {
  auto sent = init_params<double>(tiny(Variant::Sent), 5);
  for (auto v : {Variant::MultiEnc, Variant::MultiEncHier}) {
    auto p = init_params<double>(tiny(v), 5);
    randomize(p, 6);
    randomize(sent, 6);  // same owning-name order for the shared part
    for (const auto& name : sent.unique_names()) {
      auto src = p.get(name).values();
      std::copy(src.begin(), src.end(), sent.get(name).mutable_values().begin());
    }
    const std::vector<EncodedExample> batch{ex({}, {kBos, 5, 6, kEos}, {kBos, 7, 8, kEos})};
    const double a = log_prob(p, batch[0]);
    const double b = log_prob(sent, batch[0]);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("context sensitivity per variant") {
  const auto with = ex({{kBoc, 5, 6}}, {kBos, 7, kEos}, {kBos, 8, kEos});
  auto without = with;
  without.contexts = {{kBoc, 9, 10}};
  for (auto v : {Variant::Sent, Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier}) {
    auto p = init_params<double>(tiny(v), 9);
    randomize(p, 10);
    const double a = log_prob(p, with), b = log_prob(p, without);
    if (v == Variant::Sent) CHECK(a == b);
    else CHECK(a != b);
  }
}

TEST_CASE("padding and batch composition do not change results") {
  for (auto v : {Variant::Sent, Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier}) {
    auto p = init_params<double>(tiny(v), 11);
    randomize(p, 12);
    const auto batch = sample_batch();
    auto lp = sequence_log_probs(p, std::span<const EncodedExample>(batch));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(lp.at(i) == doctest::Approx(log_prob(p, batch[i])).epsilon(1e-12));
    }
  }
}

TEST_CASE("decoder is causal") {
  auto p = init_params<double>(tiny(Variant::Sent), 13);
  randomize(p, 14);
  auto a = ex({}, {kBos, 5, kEos}, {kBos, 6, 7, 8, kEos});
  auto b = a;
  b.target[3] = 9;
  auto ta = forward_teacher_forced(p, std::span<const EncodedExample>(&a, 1));
  auto tb = forward_teacher_forced(p, std::span<const EncodedExample>(&b, 1));
  const std::size_t V = 11;
  for (std::size_t i = 0; i < 3 * V; ++i) CHECK(ta.logits.at(i) == tb.logits.at(i));
  bool later_differs = false;
  for (std::size_t i = 3 * V; i < 4 * V; ++i) later_differs = later_differs || ta.logits.at(i) != tb.logits.at(i);
  CHECK(later_differs);
}

TEST_CASE("uniform output layer gives length * log(1/V)") {
  auto p = init_params<double>(tiny(Variant::Sent, 8, 6), 1);
  for (auto& x : p.get("out.w").mutable_values()) x = 0;
  const auto e = ex({}, {kBos, 5, kEos}, {kBos, 5, 5, kEos});
  CHECK(log_prob(p, e) == doctest::Approx(3 * std::log(1.0 / 6)).epsilon(1e-12));
}

TEST_CASE("gate values lie in (0, 1) and only cover examples with context") {
  auto p = init_params<float>(tiny(Variant::MultiEnc), 2);
  const auto batch = sample_batch();
  std::vector<double> trace;
  ForwardOptions opt;
  opt.gate_trace = &trace;
  encode_batch(p, std::span<const EncodedExample>(batch), opt);
  // examples 0 and 2 have context; their sources have 4 and 6 tokens
  CHECK(trace.size() == (4 + 6) * 8);
  for (double g : trace) {
    CHECK(g > 0.0);
    CHECK(g < 1.0);
  }
}

TEST_CASE("input validation") {
  auto p = init_params<float>(tiny(Variant::Sent), 2);
  const std::vector<EncodedExample> none;
  CHECK_THROWS_AS(sequence_log_probs(p, std::span<const EncodedExample>(none)), Error);
  auto bad = ex({}, {kBos, 5, kEos}, {5, kEos});
  CHECK_THROWS_AS(log_prob(p, bad), Error);
  auto longer = ex({}, std::vector<int>(40, 5), {kBos, 5, kEos});
  CHECK_THROWS_AS(log_prob(p, longer), Error);
  ForwardOptions train;
  train.training = true;
  auto cfg = tiny(Variant::Sent);
  cfg.dropout = 0.1;
  auto q = init_params<float>(cfg, 1);
  const auto batch = sample_batch();
  CHECK_THROWS_AS(sequence_log_probs(q, std::span<const EncodedExample>(batch), train), Error);
}

TEST_CASE("gradient oracle: full joint loss of a tiny model (d_model 8, 1 layer, vocab 11)") {
  const auto batch = sample_batch();
  std::vector<ContrastiveItem> items;
  items.push_back({batch[0], {{{kBoc, 5, 6}, {kBoc}}, {{kBoc, 9, 7}, {kBoc, 8}}}});
  items.push_back({batch[2], {{{kBoc, 10}}}});
  for (auto v : {Variant::Sent, Variant::Concat, Variant::MultiEnc, Variant::MultiEncHier}) {
    auto p = init_params<double>(tiny(v), 21);
    randomize(p, 22, 0.3);
    std::vector<Tensor<double>> leaves;
    std::vector<std::string> names;
    for (const auto& n : p.unique_names()) {
      leaves.push_back(p.get(n));
      names.push_back(n);
    }
    auto f = [&] {
      return joint_loss<double>(p, std::span<const EncodedExample>(batch), std::span<const ContrastiveItem>(items), 0.5,
                                1.0);
    };
    auto r = testutil::gradcheck(f, leaves, names);
    INFO(to_string(v) << " " << r.where);
    CHECK(r.checked == p.parameter_count());
    CHECK(r.max_rel < 1e-4);
  }
}
