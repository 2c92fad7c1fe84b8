#include "doctest.h"

#include <cmath>
#include <limits>
#include <map>

#include "corefcl/error.hpp"
#include "gradcheck.hpp"

using namespace corefcl;
using ad::Tensor;
using testutil::away_from_zero;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Projects an arbitrary output onto a fixed random direction so every output
// entry contributes to the scalar being differentiated.
Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed = 99) {
  static std::map<std::pair<ad::Shape, std::uint64_t>, Tensor<double>> cache;
  auto key = std::make_pair(out.shape(), seed);
  auto it = cache.find(key);
  if (it == cache.end()) {
    auto w = random_tensor(out.shape(), seed);
    it = cache.emplace(key, w.clone(false)).first;
  }
  return ad::sum(ad::mul(out, it->second));
}

void check(const char* op, const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves) {
  auto r = gradcheck(f, std::move(leaves));
  INFO(op << ": " << r.where);
  CHECK(r.checked > 0);
  CHECK(r.max_rel < kTol);
}

}  // namespace

TEST_CASE("forward values of elementary ops") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto m = ad::matmul(a, b);
  CHECK(std::vector<double>(m.values().begin(), m.values().end()) == std::vector<double>{19, 22, 43, 50});
  auto mt = ad::matmul(a, b, true);
  CHECK(std::vector<double>(mt.values().begin(), mt.values().end()) == std::vector<double>{17, 23, 39, 53});

  auto s = ad::softmax(Tensor<double>::from({3}, {0, 0, 0}));
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3));
  auto ls = ad::log_softmax(Tensor<double>::from({2}, {0, 0}));
  CHECK(ls.at(0) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  // large logits stay finite after max subtraction
  auto big = ad::softmax(Tensor<double>::from({2}, {1000, 1000}));
  CHECK(big.at(0) == doctest::Approx(0.5));

  const double inf = std::numeric_limits<double>::infinity();
  auto allmasked = ad::softmax(Tensor<double>::from({2}, {-inf, -inf}));
  CHECK(allmasked.at(0) == 0.0);
  CHECK(allmasked.at(1) == 0.0);

  auto ln = ad::layer_norm(Tensor<double>::from({1, 2}, {1, 3}), Tensor<double>::full({2}, 1.0),
                           Tensor<double>::zeros({2}));
  CHECK(ln.at(0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(ln.at(1) == doctest::Approx(1.0).epsilon(1e-5));

  auto g = ad::gather_last(Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}), std::vector<int>{2, -1});
  CHECK(g.at(0) == 3.0);
  CHECK(g.at(1) == 0.0);

  auto seg = ad::segment_sum(Tensor<double>::from({4}, {1, 2, 3, 4}), std::vector<int>{0, 1, 0, -1}, 2);
  CHECK(seg.at(0) == 4.0);
  CHECK(seg.at(1) == 2.0);

  auto t = ad::transpose(Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}), {1, 0});
  CHECK(t.shape() == ad::Shape{3, 2});
  CHECK(std::vector<double>(t.values().begin(), t.values().end()) == std::vector<double>{1, 4, 2, 5, 3, 6});

  auto c = ad::concat<double>({a, b}, 1);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});
  auto sl = ad::slice(c, 1, 1, 3);
  CHECK(std::vector<double>(sl.values().begin(), sl.values().end()) == std::vector<double>{2, 5, 4, 7});
}

TEST_CASE("shape errors") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, Tensor<double>::zeros({2})), ShapeError);
  CHECK_THROWS_AS(ad::reshape(a, {4}), ShapeError);
}

TEST_CASE("gradient oracle: every op against central differences") {
  auto A = random_tensor({2, 3, 4}, 1);
  auto B = random_tensor({4, 5}, 2);
  auto Bb = random_tensor({2, 5, 4}, 3);
  auto C = random_tensor({2, 3, 4}, 4);
  auto row = random_tensor({4}, 5);

  check("matmul", [&] { return probe(ad::matmul(A, B)); }, {A, B});
  check("matmul batched", [&] { return probe(ad::matmul(A, ad::transpose(Bb, {0, 2, 1}))); }, {A, Bb});
  check("matmul transpose_b", [&] { return probe(ad::matmul(A, Bb, true)); }, {A, Bb});
  check("add", [&] { return probe(ad::add(A, C)); }, {A, C});
  check("add broadcast", [&] { return probe(ad::add(A, row)); }, {A, row});
  check("sub", [&] { return probe(ad::sub(A, C)); }, {A, C});
  check("mul", [&] { return probe(ad::mul(A, C)); }, {A, C});
  check("scale", [&] { return probe(ad::scale(A, 0.37)); }, {A});
  check("add_scalar", [&] { return probe(ad::add_scalar(A, 1.5)); }, {A});
  check("concat", [&] { return probe(ad::concat<double>({A, C}, 2)); }, {A, C});
  check("concat axis0", [&] { return probe(ad::concat<double>({A, C}, 0)); }, {A, C});
  check("slice", [&] { return probe(ad::slice(A, 1, 1, 3)); }, {A});
  check("reshape", [&] { return probe(ad::reshape(A, {6, 4})); }, {A});
  check("transpose", [&] { return probe(ad::transpose(A, {2, 0, 1})); }, {A});
  check("transpose 4d", [&] { return probe(ad::transpose(ad::reshape(A, {2, 3, 2, 2}), {0, 2, 1, 3})); }, {A});

  auto table = random_tensor({6, 3}, 6);
  const std::vector<int> ids{0, 5, 2, 5, 1};
  check("embedding_lookup", [&] { return probe(ad::embedding_lookup(table, std::span<const int>(ids))); }, {table});

  auto logits = random_tensor({3, 5}, 7, -3, 3);
  check("softmax", [&] { return probe(ad::softmax(logits)); }, {logits});
  check("log_softmax", [&] { return probe(ad::log_softmax(logits)); }, {logits});

  auto gain = random_tensor({4}, 8, 0.5, 1.5);
  auto bias = random_tensor({4}, 9);
  check("layer_norm", [&] { return probe(ad::layer_norm(A, gain, bias)); }, {A, gain, bias});

  auto K = away_from_zero({2, 3, 4}, 10);
  check("relu", [&] { return probe(ad::relu(K)); }, {K});
  check("sigmoid", [&] { return probe(ad::sigmoid(A)); }, {A});

  check("dropout", [&] {
    Philox rng(123, 0);  // same mask on every evaluation
    return probe(ad::dropout(A, 0.3, rng, true));
  }, {A});

  std::vector<std::uint8_t> mask(15, 0);
  mask[1] = mask[7] = mask[14] = 1;
  check("masked_fill + softmax", [&] { return probe(ad::softmax(ad::masked_fill(logits, std::span<const std::uint8_t>(mask)))); },
        {logits});
  check("masked_fill value", [&] { return probe(ad::masked_fill(logits, std::span<const std::uint8_t>(mask), 2.0)); },
        {logits});

  check("sum", [&] { return ad::sum(ad::mul(A, A)); }, {A});
  check("mean", [&] { return ad::mean(ad::mul(A, C)); }, {A, C});

  const std::vector<std::uint8_t> take{1, 0, 1, 0, 0, 1};
  check("where_rows", [&] { return probe(ad::where_rows(std::span<const std::uint8_t>(take), A, C)); }, {A, C});

  const std::vector<int> idx{4, -1, 0};
  check("gather_last", [&] { return probe(ad::gather_last(logits, std::span<const int>(idx))); }, {logits});
  const std::vector<int> segs{1, 0, -1, 1, 0};
  auto v5 = random_tensor({5}, 11);
  check("segment_sum", [&] { return probe(ad::segment_sum(v5, std::span<const int>(segs), 2)); }, {v5});

  // a composite that reuses a tensor on several paths
  check("fan-out", [&] { return ad::sum(ad::mul(ad::sigmoid(A), ad::add(A, ad::scale(A, 2.0)))); }, {A});
}

TEST_CASE("gradients accumulate on leaves and NoGrad records nothing") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  ad::Tape<double> tape;
  Tensor<double> loss;
  {
    auto guard = tape.record();
    loss = ad::sum(ad::mul(x, x));
  }
  tape.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  tape.backward(loss);
  CHECK(x.grad()[0] == 4.0);  // leaves accumulate

  ad::Tape<double> tape2;
  {
    auto guard = tape2.record();
    ad::NoGrad<double> ng;
    auto y = ad::mul(x, x);
    CHECK(tape2.size() == 0);
  }
}

TEST_CASE("dropout scaling and identity at inference") {
  auto x = Tensor<double>::full({1000}, 1.0);
  Philox rng(5, 0);
  auto y = ad::dropout(x, 0.5, rng, true);
  int kept = 0;
  for (double v : y.values()) {
    CHECK((v == 0.0 || v == doctest::Approx(2.0)));
    kept += v != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
  auto z = ad::dropout(x, 0.5, rng, false);
  for (double v : z.values()) CHECK(v == 1.0);
}

TEST_CASE("the oracle itself flags a wrong gradient") {
  auto x = random_tensor({3}, 12);
  // Recorded and unrecorded evaluations disagree by a factor of two.
  auto r = gradcheck([&] {
    const double s = ad::Tape<double>::active() ? 2.0 : 1.0;
    return ad::sum(ad::scale(ad::mul(x, x), s));
  }, {x});
  CHECK(r.max_rel > 0.4);
}
