#include "corefcl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "corefcl/error.hpp"

namespace corefcl::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& why = "") {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b) +
                   (why.empty() ? "" : " (" + why + ")"));
}

template <typename T>
thread_local Tape<T>* g_active = nullptr;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Creates the output node and, when recording, registers its backward rule.
template <typename T, typename Fn>
Tensor<T> finish(Shape shape, std::vector<T> value, const char* op,
                 std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  Tape<T>* tape = g_active<T>;
  if (tape != nullptr) {
    bool needs = false;
    for (const auto* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->backward = std::forward<Fn>(backward);
      tape->push(node);
    }
  }
  return Tensor<T>(std::move(node));
}

// Variant for ops with a runtime-sized input list.
template <typename T, typename Fn>
Tensor<T> finish_many(Shape shape, std::vector<T> value, const char* op,
                      const std::vector<Tensor<T>>& inputs, Fn&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  Tape<T>* tape = g_active<T>;
  if (tape != nullptr &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); })) {
    node->requires_grad = true;
    node->backward = std::forward<Fn>(backward);
    tape->push(node);
  }
  return Tensor<T>(std::move(node));
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void mm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * Bt[N,K]^T
template <typename T>
void mm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* Bt, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = Bt + j * K;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += At[K,M]^T * B[K,N]
template <typename T>
void mm_tn(std::size_t M, std::size_t K, std::size_t N, const T* At, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = At + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T(0)) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

// --- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(ad::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(ad::numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return std::span<const T>(node_->grad_data(), node_->value.size());
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return std::span<T>(node_->grad_data(), node_->value.size());
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

// --- Tape -----------------------------------------------------------------

template <typename T>
Tape<T>::Guard::Guard(Tape* tape) : previous_(g_active<T>) {
  g_active<T> = tape;
}

template <typename T>
Tape<T>::Guard::~Guard() {
  g_active<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active<T>;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1 || !loss.shape().empty()) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n->grad.clear();
  Node<T>* root = loss.node();
  root->grad_data()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

// --- ops ------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_fail("matmul", as, bs, "rank < 2");
  const std::size_t K = as.back();
  const std::size_t bK = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t N = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (K != bK) shape_fail("matmul", as, bs, "inner dimensions differ");

  std::size_t batches = 1, M = 0;
  bool batched = false;
  if (bs.size() == 2) {
    M = a.numel() / K;
  } else {
    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      shape_fail("matmul", as, bs, "batched operands need equal leading dims");
    }
    batched = true;
    M = as[as.size() - 2];
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batches *= as[i];
  }
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(N);
  std::vector<T> out(ad::numel(out_shape), T(0));
  const T* A = a.values().data();
  const T* B = b.values().data();
  const std::size_t a_stride = batched ? M * K : 0, b_stride = batched ? K * N : 0, c_stride = batched ? M * N : 0;
  for (std::size_t t = 0; t < batches; ++t) {
    if (transpose_b) mm_nt(M, K, N, A + t * a_stride, B + t * b_stride, out.data() + t * c_stride);
    else mm_nn(M, K, N, A + t * a_stride, B + t * b_stride, out.data() + t * c_stride);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(std::move(out_shape), std::move(out), "matmul", {&a, &b},
                   [an, bn, transpose_b, batches, M, K, N, a_stride, b_stride, c_stride](Node<T>& self) {
                     const T* G = self.grad.data();
                     if (an->requires_grad) {
                       T* dA = an->grad_data();
                       const T* B = bn->value.data();
                       for (std::size_t t = 0; t < batches; ++t) {
                         if (transpose_b) mm_nn(M, N, K, G + t * c_stride, B + t * b_stride, dA + t * a_stride);
                         else mm_nt(M, N, K, G + t * c_stride, B + t * b_stride, dA + t * a_stride);
                       }
                     }
                     if (bn->requires_grad) {
                       T* dB = bn->grad_data();
                       const T* A = an->value.data();
                       for (std::size_t t = 0; t < batches; ++t) {
                         if (transpose_b) mm_tn(N, M, K, G + t * c_stride, A + t * a_stride, dB + t * b_stride);
                         else mm_tn(K, M, N, A + t * a_stride, G + t * c_stride, dB + t * b_stride);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool same = as == bs;
  if (!same && (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - bs.size()))) {
    shape_fail("add", as, bs, "b must match a or a's trailing dims");
  }
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* B = b.values().data();
  for (std::size_t i = 0; i < n; i += m) {
    for (std::size_t j = 0; j < m; ++j) out[i + j] += B[j];
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(as, std::move(out), "add", {&a, &b}, [an, bn, n, m](Node<T>& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      T* d = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i];
    }
    if (bn->requires_grad) {
      T* d = bn->grad_data();
      for (std::size_t i = 0; i < n; i += m) {
        for (std::size_t j = 0; j < m; ++j) d[j] += G[i + j];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(a.shape(), std::move(out), "sub", {&a, &b}, [an, bn, n](Node<T>& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      T* d = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i];
    }
    if (bn->requires_grad) {
      T* d = bn->grad_data();
      for (std::size_t i = 0; i < n; ++i) d[i] -= G[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return finish<T>(a.shape(), std::move(out), "mul", {&a, &b}, [an, bn, n](Node<T>& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      T* d = an->grad_data();
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      T* d = bn->grad_data();
      for (std::size_t i = 0; i < n; ++i) d[i] += G[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * s;
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "scale", {&a}, [an, n, s](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] + s;
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "add_scalar", {&a}, [an, n](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s, "rank differs");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s, "non-axis dims differ");
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(ad::numel(out_shape));
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const T* src = p.values().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy(src + o * w, src + (o + 1) * w, out.data() + o * out_row + off);
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return finish_many<T>(std::move(out_shape), std::move(out), "concat", parts,
                        [nodes, widths, offsets, outer, out_row](Node<T>& self) {
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            if (!nodes[k]->requires_grad) continue;
                            T* d = nodes[k]->grad_data();
                            const std::size_t w = widths[k];
                            for (std::size_t o = 0; o < outer; ++o) {
                              const T* g = self.grad.data() + o * out_row + offsets[k];
                              for (std::size_t j = 0; j < w; ++j) d[o * w + j] += g[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = end - start;
  const std::size_t in_row = s[axis] * inner, w = (end - start) * inner, off = start * inner;
  std::vector<T> out(outer * w);
  const T* src = a.values().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy(src + o * in_row + off, src + o * in_row + off + w, out.data() + o * w);
  auto an = a.node_ptr();
  return finish<T>(std::move(out_shape), std::move(out), "slice", {&a}, [an, outer, in_row, w, off](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) d[o * in_row + off + j] += self.grad[o * w + j];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (ad::numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape, "element count differs");
  std::vector<T> out(a.values().begin(), a.values().end());
  auto an = a.node_ptr();
  return finish<T>(std::move(shape), std::move(out), "reshape", {&a}, [an](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) shape_fail("transpose", s, Shape(perm.begin(), perm.end()), "permutation rank differs");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) shape_fail("transpose", s, Shape(perm.begin(), perm.end()), "not a permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // src_index[k] = flat input index of output element k
  const std::size_t n = a.numel();
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t flat = 0;
    for (std::size_t i = 0; i < r; ++i) flat += idx[i] * in_stride[perm[i]];
    src_index[k] = flat;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(n);
  const T* src = a.values().data();
  for (std::size_t k = 0; k < n; ++k) out[k] = src[src_index[k]];
  auto an = a.node_ptr();
  return finish<T>(std::move(out_shape), std::move(out), "transpose", {&a},
                   [an, src_index = std::move(src_index)](Node<T>& self) {
                     T* d = an->grad_data();
                     for (std::size_t k = 0; k < src_index.size(); ++k) d[src_index[k]] += self.grad[k];
                   });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(ids.size() * D);
  const T* src = table.values().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    }
    std::copy(src + ids[i] * D, src + (ids[i] + 1) * D, out.data() + i * D);
  }
  auto tn = table.node_ptr();
  std::vector<int> idv(ids.begin(), ids.end());
  return finish<T>({ids.size(), D}, std::move(out), "embedding_lookup", {&table},
                   [tn, idv = std::move(idv), D](Node<T>& self) {
                     T* d = tn->grad_data();
                     for (std::size_t i = 0; i < idv.size(); ++i) {
                       T* row = d + idv[i] * D;
                       const T* g = self.grad.data() + i * D;
                       for (std::size_t j = 0; j < D; ++j) row[j] += g[j];
                     }
                   });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t D = last_dim(a.shape());
  const std::size_t rows = a.numel() / D;
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T* yr = out.data() + r * D;
    const T mx = *std::max_element(xr, xr + D);
    if (mx == -std::numeric_limits<T>::infinity()) {
      std::fill(yr, yr + D, T(0));
      continue;
    }
    T total = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < D; ++j) yr[j] /= total;
  }
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "softmax", {&a}, [an, rows, D](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * D;
      const T* g = self.grad.data() + r * D;
      T dot = T(0);
      for (std::size_t j = 0; j < D; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < D; ++j) d[r * D + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t D = last_dim(a.shape());
  const std::size_t rows = a.numel() / D;
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T* yr = out.data() + r * D;
    const T mx = *std::max_element(xr, xr + D);
    T total = T(0);
    for (std::size_t j = 0; j < D; ++j) total += std::exp(xr[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < D; ++j) yr[j] = std::min(xr[j] - lse, T(0));
  }
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "log_softmax", {&a}, [an, rows, D](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * D;
      const T* g = self.grad.data() + r * D;
      T gs = T(0);
      for (std::size_t j = 0; j < D; ++j) gs += g[j];
      for (std::size_t j = 0; j < D; ++j) d[r * D + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t D = last_dim(x.shape());
  if (gain.numel() != D || bias.numel() != D) shape_fail("layer_norm", x.shape(), gain.shape(), "gain/bias must match the last dim");
  const std::size_t rows = x.numel() / D;
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * D;
    T mu = T(0);
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (xr[j] - mu) * is;
      out[r * D + j] = xhat[r * D + j] * gv[j] + bv[j];
    }
  }
  auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return finish<T>(x.shape(), std::move(out), "layer_norm", {&x, &gain, &bias},
                   [xn, gn, bn, rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                     const T* g = self.grad.data();
                     if (gn->requires_grad || bn->requires_grad) {
                       T* dg = gn->requires_grad ? gn->grad_data() : nullptr;
                       T* db = bn->requires_grad ? bn->grad_data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < D; ++j) {
                           if (dg) dg[j] += g[r * D + j] * xhat[r * D + j];
                           if (db) db[j] += g[r * D + j];
                         }
                       }
                     }
                     if (xn->requires_grad) {
                       T* dx = xn->grad_data();
                       const T* gv = gn->value.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         T m1 = T(0), m2 = T(0);
                         for (std::size_t j = 0; j < D; ++j) {
                           const T dxh = g[r * D + j] * gv[j];
                           m1 += dxh;
                           m2 += dxh * xhat[r * D + j];
                         }
                         m1 /= static_cast<T>(D);
                         m2 /= static_cast<T>(D);
                         for (std::size_t j = 0; j < D; ++j) {
                           const T dxh = g[r * D + j] * gv[j];
                           dx[r * D + j] += inv_std[r] * (dxh - m1 - xhat[r * D + j] * m2);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "relu", {&a}, [an, n](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      if (an->value[i] > T(0)) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = a.values()[i];
    // Split by sign so exp never overflows.
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "sigmoid", {&a}, [an, n](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      const T y = self.value[i];
      d[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, Philox& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return a;
  const std::size_t n = a.numel();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(n);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() >= p ? keep_scale : T(0);
    out[i] = a.values()[i] * mask[i];
  }
  auto an = a.node_ptr();
  return finish<T>(a.shape(), std::move(out), "dropout", {&a}, [an, mask = std::move(mask)](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < mask.size(); ++i) d[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask, T value) {
  if (mask.size() != a.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " entries for tensor " + shape_str(a.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) out[i] = value;
  }
  auto an = a.node_ptr();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return finish<T>(a.shape(), std::move(out), "masked_fill", {&a}, [an, m = std::move(m)](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask) {
  return masked_fill(a, mask, -std::numeric_limits<T>::infinity());
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v;
  auto an = a.node_ptr();
  const std::size_t n = a.numel();
  return finish<T>({}, {total}, "sum", {&a}, [an, n](Node<T>& self) {
    T* d = an->grad_data();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  T total = T(0);
  for (T v : a.values()) total += v;
  const std::size_t n = a.numel();
  auto an = a.node_ptr();
  return finish<T>({}, {total / static_cast<T>(n)}, "mean", {&a}, [an, n](Node<T>& self) {
    T* d = an->grad_data();
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

template <typename T>
Tensor<T> where_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("where_rows", a.shape(), b.shape());
  const std::size_t D = last_dim(a.shape());
  const std::size_t rows = a.numel() / D;
  if (take_a.size() != rows) {
    throw ShapeError("where_rows: " + std::to_string(take_a.size()) + " selectors for " + std::to_string(rows) + " rows");
  }
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = (take_a[r] ? a : b).values().data() + r * D;
    std::copy(src, src + D, out.data() + r * D);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  std::vector<std::uint8_t> sel(take_a.begin(), take_a.end());
  return finish<T>(a.shape(), std::move(out), "where_rows", {&a, &b}, [an, bn, sel = std::move(sel), D](Node<T>& self) {
    for (std::size_t r = 0; r < sel.size(); ++r) {
      auto& target = sel[r] ? an : bn;
      if (!target->requires_grad) continue;
      T* d = target->grad_data() + r * D;
      const T* g = self.grad.data() + r * D;
      for (std::size_t j = 0; j < D; ++j) d[j] += g[j];
    }
  });
}

template <typename T>
Tensor<T> gather_last(const Tensor<T>& a, std::span<const int> idx) {
  const std::size_t D = last_dim(a.shape());
  const std::size_t rows = a.numel() / D;
  if (idx.size() != rows) {
    throw ShapeError("gather_last: " + std::to_string(idx.size()) + " indices for " + std::to_string(rows) + " rows");
  }
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0) continue;
    if (static_cast<std::size_t>(idx[r]) >= D) throw ShapeError("gather_last: index " + std::to_string(idx[r]) + " >= " + std::to_string(D));
    out[r] = a.values()[r * D + idx[r]];
  }
  auto an = a.node_ptr();
  std::vector<int> iv(idx.begin(), idx.end());
  return finish<T>({rows}, std::move(out), "gather_last", {&a}, [an, iv = std::move(iv), D](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t r = 0; r < iv.size(); ++r) {
      if (iv[r] >= 0) d[r * D + iv[r]] += self.grad[r];
    }
  });
}

template <typename T>
Tensor<T> segment_sum(const Tensor<T>& a, std::span<const int> segment, std::size_t segments) {
  if (segment.size() != a.numel()) throw ShapeError("segment_sum: segment ids must match the element count");
  std::vector<T> out(segments, T(0));
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] < 0) continue;
    if (static_cast<std::size_t>(segment[i]) >= segments) throw ShapeError("segment_sum: segment id out of range");
    out[segment[i]] += a.values()[i];
  }
  auto an = a.node_ptr();
  std::vector<int> sv(segment.begin(), segment.end());
  return finish<T>({segments}, std::move(out), "segment_sum", {&a}, [an, sv = std::move(sv)](Node<T>& self) {
    T* d = an->grad_data();
    for (std::size_t i = 0; i < sv.size(); ++i) {
      if (sv[i] >= 0) d[i] += self.grad[sv[i]];
    }
  });
}

#define COREFCL_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                      \
  template class Tape<T>;                                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                         \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> transpose(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);                   \
  template Tensor<T> softmax(const Tensor<T>&);                                                  \
  template Tensor<T> log_softmax(const Tensor<T>&);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> dropout(const Tensor<T>&, double, Philox&, bool);                           \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, T);            \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>);               \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> where_rows(std::span<const std::uint8_t>, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> gather_last(const Tensor<T>&, std::span<const int>);                        \
  template Tensor<T> segment_sum(const Tensor<T>&, std::span<const int>, std::size_t);

COREFCL_INSTANTIATE(float)
COREFCL_INSTANTIATE(double)

}  // namespace corefcl::ad
