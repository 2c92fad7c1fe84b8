#include "corefcl/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "corefcl/error.hpp"

namespace corefcl {

using nlohmann::json;

std::string_view to_string(Phase p) { return p == Phase::MT ? "mt" : "finetune"; }

Phase parse_phase(std::string_view s) {
  if (s == "mt") return Phase::MT;
  if (s == "finetune") return Phase::Finetune;
  throw ConfigError("unknown training phase '" + std::string(s) + "' (expected mt or finetune)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be non-negative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(eta >= 0.0)) throw ConfigError("eta must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"beta1", beta1},         {"beta2", beta2},
          {"epsilon", epsilon},             {"batch_size", batch_size}, {"max_steps", max_steps},
          {"eval_every", eval_every},       {"patience", patience},   {"min_delta", min_delta},
          {"alpha", alpha},
          {"eta", eta},                     {"seed", seed},           {"phase", std::string(to_string(phase))}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_steps = j.at("max_steps").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.patience = j.at("patience").get<int>();
  c.min_delta = j.value("min_delta", 0.0);
  c.alpha = j.at("alpha").get<double>();
  c.eta = j.at("eta").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.phase = parse_phase(j.at("phase").get<std::string>());
  return c;
}

bool operator==(const EvalRecord& a, const EvalRecord& b) {
  return a.step == b.step && a.mt_loss == b.mt_loss && a.cl_loss == b.cl_loss && a.val_mt_loss == b.val_mt_loss;
}

ContrastiveItem encode_contrastive_pair(const ContrastivePair& pair, const Vocabulary& vocab, const BpeModel* bpe) {
  ContrastiveItem item;
  item.original = encode_example(pair.original.example, vocab, bpe);
  for (const auto& variant : pair.variants) {
    std::vector<std::vector<int>> ctx;
    for (const auto& c : variant.contexts) ctx.push_back(encode_context(c, vocab, bpe));
    item.corrupted_contexts.push_back(std::move(ctx));
  }
  return item;
}

// --- losses ------------------------------------------------------------------

template <typename T>
ad::Tensor<T> mt_loss(const ModelParams<T>& params, std::span<const EncodedExample> batch,
                      const ForwardOptions& options) {
  if (batch.empty()) throw Error("mt_loss: empty batch");
  auto tf = forward_teacher_forced(params, batch, options);
  const auto tokens = std::count_if(tf.targets.begin(), tf.targets.end(), [](int t) { return t >= 0; });
  auto picked = ad::gather_last(ad::log_softmax(tf.logits), std::span<const int>(tf.targets));
  return ad::scale(ad::sum(picked), static_cast<T>(-1.0 / static_cast<double>(tokens)));
}

template <typename T>
ad::Tensor<T> margin_loss(const ad::Tensor<T>& pos, const ad::Tensor<T>& neg, T eta) {
  return ad::mean(ad::relu(ad::add_scalar(ad::sub(neg, pos), eta)));
}

template <typename T>
ad::Tensor<T> cl_loss(const ModelParams<T>& params, std::span<const ContrastiveItem> batch, T eta,
                      const ForwardOptions& options) {
  if (batch.empty()) throw Error("cl_loss: empty batch");
  // Originals first, then every corrupted version, scored in one batch.
  std::vector<EncodedExample> seqs;
  std::vector<int> owner;
  std::vector<T> weight;
  for (const auto& item : batch) seqs.push_back(item.original);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    if (item.corrupted_contexts.empty()) throw Error("cl_loss: item without corrupted contexts");
    for (const auto& ctx : item.corrupted_contexts) {
      seqs.push_back({ctx, item.original.source, item.original.target});
      owner.push_back(static_cast<int>(i));
      weight.push_back(static_cast<T>(1.0 / static_cast<double>(item.corrupted_contexts.size())));
    }
  }
  auto lp = sequence_log_probs(params, std::span<const EncodedExample>(seqs), options);
  const std::size_t N = batch.size(), M = owner.size();
  auto column = ad::reshape(lp, {N + M, 1});
  auto pos = ad::reshape(ad::embedding_lookup(column, std::span<const int>(owner)), {M});
  std::vector<int> neg_rows(M);
  std::iota(neg_rows.begin(), neg_rows.end(), static_cast<int>(N));
  auto neg = ad::reshape(ad::embedding_lookup(column, std::span<const int>(neg_rows)), {M});
  auto hinge = ad::relu(ad::add_scalar(ad::sub(neg, pos), eta));
  auto weighted = ad::mul(hinge, ad::Tensor<T>::from({M}, std::move(weight)));
  return ad::mean(ad::segment_sum(weighted, std::span<const int>(owner), N));
}

template <typename T>
ad::Tensor<T> joint_loss(const ad::Tensor<T>& mt, const ad::Tensor<T>& cl, T alpha) {
  return ad::add(ad::scale(mt, T(1) - alpha), ad::scale(cl, alpha));
}

template <typename T>
ad::Tensor<T> joint_loss(const ModelParams<T>& params, std::span<const EncodedExample> mt_batch,
                         std::span<const ContrastiveItem> cl_batch, T alpha, T eta, const ForwardOptions& options) {
  if (!(alpha >= T(0) && alpha <= T(1))) throw ConfigError("joint_loss: alpha must lie in [0, 1]");
  auto mt = mt_loss(params, mt_batch, options);
  // With alpha = 0 the contrastive term has no influence; skipping it keeps
  // the dropout stream identical to plain MT training.
  if (alpha == T(0)) return joint_loss(mt, ad::Tensor<T>::scalar(T(0)), alpha);
  return joint_loss(mt, cl_loss(params, cl_batch, eta, options), alpha);
}

template <typename T>
double evaluate_mt_loss(const ModelParams<T>& params, std::span<const EncodedExample> data, int batch_size) {
  if (data.empty()) throw Error("evaluate_mt_loss: empty data");
  ad::NoGrad<T> no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = data.subspan(start, std::min<std::size_t>(batch_size, data.size() - start));
    auto tf = forward_teacher_forced(params, chunk);
    auto picked = ad::gather_last(ad::log_softmax(tf.logits), std::span<const int>(tf.targets));
    for (T v : picked.values()) total -= static_cast<double>(v);
    tokens += static_cast<std::size_t>(std::count_if(tf.targets.begin(), tf.targets.end(), [](int t) { return t >= 0; }));
  }
  return total / static_cast<double>(tokens);
}

// --- optimization --------------------------------------------------------------

template <typename T>
void adam_step(ModelParams<T>& params, OptimizerState<T>& state, const TrainConfig& config) {
  const auto names = params.unique_names();
  for (const auto& name : names) {
    const auto& p = params.get(name);
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw Error("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (const auto& name : names) {
    auto& p = params.get(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    if (m.size() != p.numel()) throw ShapeError("optimizer state does not match parameter '" + name + "'");
    auto w = p.mutable_values();
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const T>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = has ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      w[i] -= static_cast<T>(config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x62617463;  // "batc"
constexpr std::uint64_t kContrastiveStream = 0x636c6261;
constexpr std::uint64_t kDropoutStream = 0x64726f70;

// Endless sequence of batches over a fixed data set; each epoch is a fresh
// Fisher-Yates permutation drawn from Philox(key, epoch).
class BatchStream {
 public:
  BatchStream(std::size_t size, std::size_t batch, std::uint64_t key) : size_(size), batch_(batch), key_(key) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < std::min(batch_, size_)) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
      if (cursor_ == order_.size()) break;  // batches never straddle epochs
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(size_);
    std::iota(order_.begin(), order_.end(), 0);
    Philox rng(key_, epoch_++);
    for (std::size_t i = size_; i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    cursor_ = 0;
  }

  std::size_t size_;
  std::size_t batch_;
  std::uint64_t key_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

template <typename Item>
std::vector<Item> gather(std::span<const Item> data, const std::vector<std::size_t>& idx) {
  std::vector<Item> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

template <typename T>
TrainHistory run_training(ModelParams<T>& params, std::span<const EncodedExample> mt_train,
                          std::span<const ContrastiveItem> contrastive, std::span<const EncodedExample> valid,
                          const TrainConfig& config, OptimizerState<T>* state_in, const EvalCallback& on_eval,
                          bool joint) {
  config.validate();
  OptimizerState<T> local;
  OptimizerState<T>& state = state_in ? *state_in : local;
  const std::uint64_t key = mix64(config.seed);
  BatchStream mt_stream(mt_train.size(), static_cast<std::size_t>(config.batch_size), key ^ kShuffleStream);
  BatchStream cl_stream(contrastive.size(), static_cast<std::size_t>(config.batch_size), key ^ kContrastiveStream);
  Philox dropout_rng(key, kDropoutStream);
  ForwardOptions options{.training = true, .rng = &dropout_rng};
  const T alpha = static_cast<T>(config.alpha), eta = static_cast<T>(config.eta);

  TrainHistory history;
  std::optional<ModelParams<T>> best;
  double best_val = 0.0;
  double reference = 0.0;  // validation loss at the last improvement larger than min_delta
  int bad = 0;
  double mt_sum = 0.0, cl_sum = 0.0;
  int since_eval = 0;
  history.stop_reason = "max_steps";

  for (int step = 1; step <= config.max_steps; ++step) {
    const auto mt_batch = gather(mt_train, mt_stream.next());
    params.zero_grad();
    ad::Tape<T> tape;
    double cl_value = 0.0;
    ad::Tensor<T> loss;
    {
      auto guard = tape.record();
      auto mt = mt_loss(params, std::span<const EncodedExample>(mt_batch), options);
      mt_sum += static_cast<double>(mt.item());
      if (joint && alpha != T(0)) {
        const auto cl_batch = gather(contrastive, cl_stream.next());
        auto cl = cl_loss(params, std::span<const ContrastiveItem>(cl_batch), eta, options);
        cl_value = static_cast<double>(cl.item());
        loss = joint_loss(mt, cl, alpha);
      } else if (joint) {
        loss = joint_loss(mt, ad::Tensor<T>::scalar(T(0)), alpha);
      } else {
        loss = mt;
      }
    }
    tape.backward(loss);
    adam_step(params, state, config);
    history.step_losses.push_back(static_cast<double>(loss.item()));
    cl_sum += cl_value;
    ++since_eval;

    if (step % config.eval_every != 0 && step != config.max_steps) continue;
    EvalRecord rec;
    rec.step = step;
    rec.mt_loss = mt_sum / since_eval;
    if (joint) rec.cl_loss = cl_sum / since_eval;
    mt_sum = cl_sum = 0.0;
    since_eval = 0;
    if (valid.empty()) {
      rec.val_mt_loss = std::nan("");
      history.evals.push_back(rec);
      if (on_eval) on_eval(rec);
      continue;
    }
    rec.val_mt_loss = evaluate_mt_loss(params, valid, std::max(config.batch_size, 64));
    history.evals.push_back(rec);
    if (on_eval) on_eval(rec);
    const bool first = !best;
    if (first || rec.val_mt_loss < best_val) {
      best_val = rec.val_mt_loss;
      best = params.clone();
      history.best_step = step;
      history.best_val_mt_loss = best_val;
    }
    if (first || rec.val_mt_loss < reference - config.min_delta) {
      reference = rec.val_mt_loss;
      bad = 0;
    } else if (++bad > config.patience) {
      history.stop_reason = "early_stopping";
      break;
    }
  }
  if (best) params.assign(*best);
  return history;
}

}  // namespace

template <typename T>
TrainHistory train_mt(ModelParams<T>& params, std::span<const EncodedExample> train,
                      std::span<const EncodedExample> valid, const TrainConfig& config, OptimizerState<T>* state,
                      const EvalCallback& on_eval) {
  if (train.empty()) throw Error("train_mt: empty training data");
  if (config.phase != Phase::MT) throw ConfigError("train_mt: config phase must be mt");
  return run_training<T>(params, train, {}, valid, config, state, on_eval, false);
}

template <typename T>
TrainHistory finetune_contrastive(ModelParams<T>& params, std::span<const EncodedExample> mt_train,
                                  std::span<const ContrastiveItem> contrastive,
                                  std::span<const EncodedExample> valid, const TrainConfig& config,
                                  OptimizerState<T>* state, const EvalCallback& on_eval) {
  if (contrastive.empty()) throw Error("finetune_contrastive: empty contrastive set");
  if (mt_train.empty()) throw Error("finetune_contrastive: empty MT training data");
  if (config.phase != Phase::Finetune) throw ConfigError("finetune_contrastive: config phase must be finetune");
  return run_training<T>(params, mt_train, contrastive, valid, config, state, on_eval, true);
}

void write_training_log(std::ostream& out, const TrainHistory& history) {
  for (const auto& r : history.evals) {
    json j{{"step", r.step}, {"mt_loss", r.mt_loss}};
    if (r.cl_loss) j["cl_loss"] = *r.cl_loss;
    if (std::isnan(r.val_mt_loss)) j["val_mt_loss"] = nullptr;
    else j["val_mt_loss"] = r.val_mt_loss;
    out << j.dump() << '\n';
  }
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'C', 'L', '1'};

template <typename T>
constexpr std::uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

// Little-endian writer/reader; checkpoints are portable across hosts.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void le(U value) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
    auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <typename U>
  U le() {
    need(sizeof(U));
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<Bits>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }
  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError("checkpoint: unexpected end of data");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 4;
};

template <typename T>
void write_tensor(Writer& w, const std::string& name, const ad::Shape& shape, std::span<const T> values) {
  w.str(name);
  w.le<std::uint8_t>(dtype_code<T>());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.le<std::uint64_t>(d);
  for (T v : values) w.le<T>(v);
}

}  // namespace

template <typename T>
std::string serialize_checkpoint(const ModelParams<T>& params, const OptimizerState<T>* state,
                                 const json& metadata) {
  Writer w;
  w.bytes(kMagic, 4);
  json header{{"model", params.config.to_json()},
              {"adam_step", state ? state->step : 0},
              {"metadata", metadata.is_null() ? json::object() : metadata}};
  w.str(header.dump());
  const auto names = params.unique_names();
  std::uint32_t count = static_cast<std::uint32_t>(names.size());
  if (state && state->step > 0) count *= 3;
  w.le<std::uint32_t>(count);
  for (const auto& n : names) {
    const auto& t = params.get(n);
    write_tensor<T>(w, n, t.shape(), t.values());
  }
  if (state && state->step > 0) {
    for (const auto& n : names) {
      const auto& t = params.get(n);
      const auto& m = state->m.at(n);
      const auto& v = state->v.at(n);
      write_tensor<T>(w, "adam.m." + n, t.shape(), std::span<const T>(m));
      write_tensor<T>(w, "adam.v." + n, t.shape(), std::span<const T>(v));
    }
  }
  const auto sum = fnv1a64(w.buffer());
  w.le<std::uint64_t>(sum);
  return std::move(w.buffer());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params,
                     const OptimizerState<T>* state, const json& metadata) {
  const auto bytes = serialize_checkpoint(params, state, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes, const ModelConfig* expected) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic (not a CCL1 checkpoint)");
  }
  if (bytes.size() < 12) throw FormatError("checkpoint: truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[body + i])) << (8 * i);
  if (fnv1a64(std::string_view(bytes.data(), body)) != stored) {
    throw FormatError("checkpoint: checksum mismatch (corrupt or truncated file)");
  }

  Reader r(bytes, body);
  json header;
  try {
    header = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  const auto config = ModelConfig::from_json(header.at("model"));
  Checkpoint<T> ck{init_params<T>(config, 0), {}, header.value("metadata", json::object())};
  ck.state.step = header.value("adam_step", std::int64_t{0});

  // Shape problems against the caller's expectation are reported first and
  // by parameter name.
  if (expected && !(*expected == config)) {
    auto want = init_params<T>(*expected, 0);
    for (const auto& n : want.unique_names()) {
      if (!ck.params.contains(n)) throw ShapeError("checkpoint lacks parameter '" + n + "'");
      const auto& a = ck.params.get(n).shape();
      const auto& b = want.get(n).shape();
      if (a != b) {
        throw ShapeError("parameter '" + n + "': checkpoint shape " + ad::shape_str(a) + " vs expected " +
                         ad::shape_str(b));
      }
    }
    throw ConfigError("checkpoint model config differs from the expected one");
  }

  const auto count = r.le<std::uint32_t>();
  std::vector<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.str();
    if (r.le<std::uint8_t>() != dtype_code<T>()) throw FormatError("checkpoint: dtype of '" + name + "' differs");
    const auto rank = r.le<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint64_t>();
    std::vector<T> values(ad::numel(shape));
    for (auto& v : values) v = r.le<T>();

    std::string base = name;
    std::vector<T>* slot = nullptr;
    if (name.rfind("adam.m.", 0) == 0) base = name.substr(7), slot = &ck.state.m[base];
    else if (name.rfind("adam.v.", 0) == 0) base = name.substr(7), slot = &ck.state.v[base];
    if (!ck.params.contains(base) || ck.params.is_alias(base)) {
      throw FormatError("checkpoint: unexpected tensor '" + name + "'");
    }
    const auto& want = ck.params.get(base).shape();
    if (shape != want) {
      throw ShapeError("parameter '" + name + "': checkpoint shape " + ad::shape_str(shape) + " vs config " +
                       ad::shape_str(want));
    }
    if (slot) *slot = std::move(values);
    else std::copy(values.begin(), values.end(), ck.params.get(base).mutable_values().begin());
    seen.push_back(name);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes before checksum");
  const auto owners = ck.params.unique_names();
  if (std::count_if(seen.begin(), seen.end(), [](const std::string& s) { return s.rfind("adam.", 0) != 0; }) !=
      static_cast<std::ptrdiff_t>(owners.size())) {
    throw FormatError("checkpoint: parameter set incomplete");
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint<T>(ss.str(), expected);
}

#define COREFCL_TRAIN_INSTANTIATE(T)                                                                              \
  template ad::Tensor<T> mt_loss<T>(const ModelParams<T>&, std::span<const EncodedExample>, const ForwardOptions&); \
  template ad::Tensor<T> margin_loss<T>(const ad::Tensor<T>&, const ad::Tensor<T>&, T);                            \
  template ad::Tensor<T> cl_loss<T>(const ModelParams<T>&, std::span<const ContrastiveItem>, T,                   \
                                    const ForwardOptions&);                                                       \
  template ad::Tensor<T> joint_loss<T>(const ad::Tensor<T>&, const ad::Tensor<T>&, T);                             \
  template ad::Tensor<T> joint_loss<T>(const ModelParams<T>&, std::span<const EncodedExample>,                    \
                                       std::span<const ContrastiveItem>, T, T, const ForwardOptions&);            \
  template double evaluate_mt_loss<T>(const ModelParams<T>&, std::span<const EncodedExample>, int);               \
  template void adam_step<T>(ModelParams<T>&, OptimizerState<T>&, const TrainConfig&);                            \
  template TrainHistory train_mt<T>(ModelParams<T>&, std::span<const EncodedExample>,                             \
                                    std::span<const EncodedExample>, const TrainConfig&, OptimizerState<T>*,      \
                                    const EvalCallback&);                                                         \
  template TrainHistory finetune_contrastive<T>(ModelParams<T>&, std::span<const EncodedExample>,                 \
                                                std::span<const ContrastiveItem>, std::span<const EncodedExample>, \
                                                const TrainConfig&, OptimizerState<T>*, const EvalCallback&);     \
  template std::string serialize_checkpoint<T>(const ModelParams<T>&, const OptimizerState<T>*, const json&);     \
  template void save_checkpoint<T>(const std::filesystem::path&, const ModelParams<T>&, const OptimizerState<T>*, \
                                   const json&);                                                                  \
  template Checkpoint<T> parse_checkpoint<T>(const std::string&, const ModelConfig*);                             \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&, const ModelConfig*);

COREFCL_TRAIN_INSTANTIATE(float)
COREFCL_TRAIN_INSTANTIATE(double)

}  // namespace corefcl
