#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "elmur/random.hpp"

// Dense tensors with tape-based reverse-mode differentiation.
//
// Every op records itself on the thread's active Tape when at least one input
// requires a gradient. Without an active tape nothing is recorded, which is
// how evaluation runs.

namespace elmur {

using Shape = std::vector<int>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, only for nodes that require grad
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Raw write access. Only meaningful on leaves (parameters, inputs).
  std::span<T> data() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_data() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Same values, cut from any tape.
  Tensor detach() const;
  // Deep copy keeping the requires_grad flag; the copy is a fresh leaf.
  Tensor clone() const;

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(detail::Node<T>& out)>;

  void record(std::shared_ptr<detail::Node<T>> out, Backward fn);

  // Seeds d(loss)/d(loss) = 1 and walks the record in reverse, which is a
  // reverse topological order because ops are recorded as they execute.
  void backward(const Tensor<T>& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  template <typename>
  friend class NoGradScope;

  struct Entry {
    std::shared_ptr<detail::Node<T>> out;
    Backward fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;

  static Tape*& active_slot();
};

// Makes `tape` the recording target for this thread until destruction.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_slot()) { Tape<T>::active_slot() = &tape; }
  ~TapeScope() { Tape<T>::active_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<T>::active_slot()) { Tape<T>::active_slot() = nullptr; }
  ~NoGradScope() { Tape<T>::active_slot() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Boolean keep-mask, broadcastable against the tensor it masks.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  static Mask all(Shape shape);
  static Mask causal(int length);  // [length, length], keep j <= i
};

namespace detail {

// Output requires grad iff a tape is active and some input requires grad.
template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, bool track, const char* op);

template <typename T>
void record(const Tensor<T>& out, typename Tape<T>::Backward fn);

// Flat input index for every output element under numpy broadcasting.
std::vector<std::uint32_t> broadcast_index(const Shape& out, const Shape& in);
Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace detail

// Elementwise, numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// [..., m, k] x [..., k, n]; batch dims broadcast.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);
template <typename T> Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);

// Softmax over the last dim. Masked entries get exactly 0.
template <typename T> Tensor<T> masked_softmax(const Tensor<T>& logits, const Mask& mask);
template <typename T> Tensor<T> softmax(const Tensor<T>& logits);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits);

inline constexpr double kLayerNormEps = 1e-5;
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = kLayerNormEps);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Sum over the last dim, keeping it as size 1.
template <typename T> Tensor<T> sum_last(const Tensor<T>& x);

// Row lookup: table [R, C], indices with shape `index_shape` -> index_shape + [C].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> indices, Shape index_shape);
// Inverse of gather_rows for a flat index list: src [n, C] -> [rows, C].
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& src, std::span<const int> indices, int rows);
// Gather along the last dim: x [..., n], indices [..., k] -> [..., k].
template <typename T>
Tensor<T> take_last(const Tensor<T>& x, std::span<const int> indices, int k);

template <typename T>
struct TopK {
  Tensor<T> values;
  std::vector<int> indices;  // [..., k], descending by value, ties to lower index
};
template <typename T> TopK<T> topk(const Tensor<T>& x, int k);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length);

// Inverted dropout. Identity when p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

}  // namespace elmur
