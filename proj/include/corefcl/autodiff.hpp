#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "corefcl/rng.hpp"

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Operations record themselves on the calling thread's active Tape (see
// Tape::record). Without an active tape nothing is recorded and results carry
// no backward rule, which is the inference path.
namespace corefcl::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  ///< empty until gradient flows in
  bool requires_grad = false;
  const char* op = "leaf";
  std::function<void(Node&)> backward;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  /// Gradient buffer; zeros when nothing has flowed into this tensor.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  T item() const;
  T at(std::size_t flat) const { return node_->value.at(flat); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  /// Deep copy of values as a new leaf.
  Tensor clone(bool requires_grad) const;

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Topologically ordered record of the operations executed while active.
template <typename T>
class Tape {
 public:
  class Guard {
   public:
    explicit Guard(Tape* tape);
    ~Guard();
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes this tape the active one on the current thread until the guard dies.
  [[nodiscard]] Guard record() { return Guard(this); }
  static Tape* active();

  void push(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule in
  /// reverse order. Leaf gradients accumulate; intermediate ones are reset.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Disables recording for the current thread while alive.
template <typename T>
class NoGrad {
 public:
  NoGrad() : guard_(nullptr) {}

 private:
  typename Tape<T>::Guard guard_;
};

// --- operations -----------------------------------------------------------

/// a[..., M, K] x b[K, N], or batched when b has a's leading dims. With
/// transpose_b the last two axes of b are swapped.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
/// Elementwise, or b broadcast over a's leading dims when b.shape equals a's trailing dims.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T> Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T> Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);
/// Row-wise over the last axis, max-subtracted. Rows that are entirely -inf
/// produce all zeros.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
/// Bernoulli keep-mask scaled by 1/(1-p); identity when !training or p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double p, Philox& rng, bool training);
/// Sets positions with mask != 0 to `value` (default -inf); they receive no gradient.
template <typename T> Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask, T value);
template <typename T> Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Row r (over the last axis) taken from a when take_a[r] != 0, else from b.
template <typename T> Tensor<T> where_rows(std::span<const std::uint8_t> take_a, const Tensor<T>& a, const Tensor<T>& b);
/// out[r] = a[r, idx[r]] over the last axis; idx < 0 yields 0 and no gradient.
template <typename T> Tensor<T> gather_last(const Tensor<T>& a, std::span<const int> idx);
/// out[s] = sum of a[r] with segment[r] == s; segment < 0 is skipped.
template <typename T> Tensor<T> segment_sum(const Tensor<T>& a, std::span<const int> segment, std::size_t segments);

}  // namespace corefcl::ad
