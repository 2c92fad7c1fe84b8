#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "corefcl/autodiff.hpp"

namespace testutil {

using corefcl::ad::Tensor;

struct GradCheck {
  double max_rel = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is ~0 from turning roundoff into huge relative errors.
inline double rel_error(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences of f over every entry of every leaf, compared with the
// gradients from one backward pass.
inline GradCheck gradcheck(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves,
                           const std::vector<std::string>& names = {}, double h = 1e-6,
                           std::size_t max_entries_per_leaf = static_cast<std::size_t>(-1)) {
  for (auto& l : leaves) l.zero_grad();
  {
    corefcl::ad::Tape<double> tape;
    Tensor<double> loss;
    {
      auto guard = tape.record();
      loss = f();
    }
    tape.backward(loss);
  }
  GradCheck out;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_values();
    const std::size_t n = values.size();
    const std::size_t stride = n > max_entries_per_leaf ? n / max_entries_per_leaf + 1 : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      double fp, fm;
      {
        corefcl::ad::NoGrad<double> ng;
        values[i] = orig + h;
        fp = f().item();
        values[i] = orig - h;
        fm = f().item();
      }
      values[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double e = rel_error(analytic[i], numeric);
      ++out.checked;
      if (e > out.max_rel) {
        out.max_rel = e;
        out.where = (li < names.size() ? names[li] : "leaf " + std::to_string(li)) + "[" + std::to_string(i) +
                    "] analytic " + std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline Tensor<double> random_tensor(corefcl::ad::Shape shape, std::uint64_t seed, double lo = -1.0,
                                    double hi = 1.0) {
  corefcl::Philox rng(seed, 7);
  std::vector<double> v(corefcl::ad::numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

// Random values kept at least `gap` away from zero (for kinks such as relu).
inline Tensor<double> away_from_zero(corefcl::ad::Shape shape, std::uint64_t seed, double gap = 0.05) {
  auto t = random_tensor(std::move(shape), seed);
  for (auto& x : t.mutable_values()) {
    if (std::abs(x) < gap) x = x < 0 ? -gap - std::abs(x) : gap + x;
  }
  return t;
}

}  // namespace testutil
