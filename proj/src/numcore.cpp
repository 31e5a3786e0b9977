#include "elmur/numcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace elmur {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (int d : shape)
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
}

int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  std::vector<T> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  return node_->shape[norm_axis(axis, rank())];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->value, node_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot();
}

template <typename T>
void Tape<T>::record(std::shared_ptr<detail::Node<T>> out, Backward fn) {
  if (consumed_) throw std::logic_error("tape: record after backward without reset");
  entries_.push_back({std::move(out), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw std::logic_error("tape: backward called twice without reset");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (entries_.empty()) throw std::logic_error("backward: tape is empty");
  if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on tracked tensors");
  consumed_ = true;
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    detail::Node<T>& out = *it->out;
    if (out.grad.empty()) continue;  // no gradient reached this node
    it->fn(out);
  }
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  consumed_ = false;
}

Mask Mask::all(Shape shape) {
  Mask m;
  m.keep.assign(shape_numel(shape), 1);
  m.shape = std::move(shape);
  return m;
}

Mask Mask::causal(int length) {
  Mask m;
  m.shape = {length, length};
  m.keep.assign(static_cast<std::size_t>(length) * length, 0);
  for (int i = 0; i < length; ++i)
    for (int j = 0; j <= i; ++j) m.keep[static_cast<std::size_t>(i) * length + j] = 1;
  return m;
}

// ---------------------------------------------------------------------------
// helpers

namespace detail {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, bool track, const char* op) {
  for (const T& v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  return Tensor<T>(std::move(shape), std::move(values), track);
}

template <typename T>
void record(const Tensor<T>& out, typename Tape<T>::Backward fn) {
  if (!out.requires_grad()) return;
  Tape<T>::active()->record(out.node(), std::move(fn));
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

std::vector<std::uint32_t> broadcast_index(const Shape& out, const Shape& in) {
  std::size_t r = out.size();
  if (in.size() > r) throw ShapeError("broadcast: input rank exceeds output rank");
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t oi = r - 1 - i;
    int d = in[in.size() - 1 - i];
    if (d != 1 && d != out[oi])
      throw ShapeError("cannot broadcast " + shape_str(in) + " to " + shape_str(out));
    stride[oi] = d == 1 ? 0 : s;
    s *= static_cast<std::size_t>(d);
  }
  std::size_t n = shape_numel(out);
  std::vector<std::uint32_t> idx(n);
  std::vector<int> pos(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = static_cast<std::uint32_t>(cur);
    for (std::size_t k = r; k-- > 0;) {
      ++pos[k];
      cur += stride[k];
      if (pos[k] < out[k]) break;
      cur -= stride[k] * static_cast<std::size_t>(pos[k]);
      pos[k] = 0;
    }
  }
  return idx;
}

}  // namespace detail

using detail::make_result;
using detail::record;
using detail::tracking;

namespace {

struct BinaryPlan {
  Shape out;
  std::vector<std::uint32_t> ai, bi;  // empty means identity
  std::size_t a(std::size_t i) const { return ai.empty() ? i : ai[i]; }
  std::size_t b(std::size_t i) const { return bi.empty() ? i : bi[i]; }
};

std::shared_ptr<BinaryPlan> make_plan(const Shape& a, const Shape& b) {
  auto p = std::make_shared<BinaryPlan>();
  p->out = detail::broadcast_shapes(a, b);
  if (a != p->out) p->ai = detail::broadcast_index(p->out, a);
  if (b != p->out) p->bi = detail::broadcast_index(p->out, b);
  return p;
}

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;
template <typename T>
using MMap = Eigen::Map<MatR<T>>;

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto p = make_plan(a.shape(), b.shape());
  std::size_t n = shape_numel(p->out);
  std::vector<T> v(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[p->a(i)] + bv[p->b(i)];
  auto out = make_result(p->out, std::move(v), tracking({&a, &b}), "add");
  record<T>(out, [an = a.node(), bn = b.node(), p](detail::Node<T>& o) {
    std::size_t n = o.value.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[p->a(i)] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) bn->grad[p->b(i)] += o.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto p = make_plan(a.shape(), b.shape());
  std::size_t n = shape_numel(p->out);
  std::vector<T> v(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[p->a(i)] - bv[p->b(i)];
  auto out = make_result(p->out, std::move(v), tracking({&a, &b}), "sub");
  record<T>(out, [an = a.node(), bn = b.node(), p](detail::Node<T>& o) {
    std::size_t n = o.value.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[p->a(i)] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) bn->grad[p->b(i)] -= o.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto p = make_plan(a.shape(), b.shape());
  std::size_t n = shape_numel(p->out);
  std::vector<T> v(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[p->a(i)] * bv[p->b(i)];
  auto out = make_result(p->out, std::move(v), tracking({&a, &b}), "mul");
  record<T>(out, [an = a.node(), bn = b.node(), p](detail::Node<T>& o) {
    std::size_t n = o.value.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[p->a(i)] += o.grad[i] * bn->value[p->b(i)];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) bn->grad[p->b(i)] += o.grad[i] * an->value[p->a(i)];
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto p = make_plan(a.shape(), b.shape());
  std::size_t n = shape_numel(p->out);
  std::vector<T> v(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[p->a(i)] / bv[p->b(i)];
  auto out = make_result(p->out, std::move(v), tracking({&a, &b}), "div");
  record<T>(out, [an = a.node(), bn = b.node(), p](detail::Node<T>& o) {
    std::size_t n = o.value.size();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[p->a(i)] += o.grad[i] / bn->value[p->b(i)];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T bvv = bn->value[p->b(i)];
        bn->grad[p->b(i)] -= o.grad[i] * an->value[p->a(i)] / (bvv * bvv);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.values().begin(), a.values().end());
  for (T& x : v) x *= s;
  auto out = make_result(a.shape(), std::move(v), tracking({&a}), "scale");
  record<T>(out, [an = a.node(), s](detail::Node<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * s;
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const int m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape ab(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);

  const bool track = tracking({&a, &b});
  const T* av = a.values().data();
  const T* bv = b.values().data();

  if (b.rank() == 2) {
    // Fold a's batch into rows: one GEMM.
    const int rows = static_cast<int>(a.numel() / static_cast<std::size_t>(k));
    std::vector<T> v(static_cast<std::size_t>(rows) * n);
    MMap<T>(v.data(), rows, n).noalias() = CMap<T>(av, rows, k) * CMap<T>(bv, k, n);
    Shape os = a.shape();
    os.back() = n;
    auto out = make_result(std::move(os), std::move(v), track, "matmul");
    record<T>(out, [an = a.node(), bn = b.node(), rows, k, n](detail::Node<T>& o) {
      CMap<T> g(o.grad.data(), rows, n);
      if (an->requires_grad) {
        an->ensure_grad();
        MMap<T>(an->grad.data(), rows, k).noalias() += g * CMap<T>(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        MMap<T>(bn->grad.data(), k, n).noalias() += CMap<T>(an->value.data(), rows, k).transpose() * g;
      }
    });
    return out;
  }

  Shape batch = ab.empty() && bb.empty() ? Shape{} : detail::broadcast_shapes(ab.empty() ? Shape{1} : ab, bb.empty() ? Shape{1} : bb);
  if (batch.empty()) batch = {1};
  auto ai = std::make_shared<std::vector<std::uint32_t>>(detail::broadcast_index(batch, ab.empty() ? Shape{1} : ab));
  auto bi = std::make_shared<std::vector<std::uint32_t>>(detail::broadcast_index(batch, bb.empty() ? Shape{1} : bb));
  const std::size_t nb = shape_numel(batch);
  const std::size_t as = static_cast<std::size_t>(m) * k, bs = static_cast<std::size_t>(k) * n,
                    cs = static_cast<std::size_t>(m) * n;
  std::vector<T> v(nb * cs);
  for (std::size_t i = 0; i < nb; ++i)
    MMap<T>(v.data() + i * cs, m, n).noalias() = CMap<T>(av + (*ai)[i] * as, m, k) * CMap<T>(bv + (*bi)[i] * bs, k, n);
  Shape os = (ab.empty() && bb.empty()) ? Shape{} : batch;
  os.push_back(m);
  os.push_back(n);
  auto out = make_result(std::move(os), std::move(v), track, "matmul");
  record<T>(out, [an = a.node(), bn = b.node(), ai, bi, nb, m, k, n, as, bs, cs](detail::Node<T>& o) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t i = 0; i < nb; ++i) {
      CMap<T> g(o.grad.data() + i * cs, m, n);
      if (an->requires_grad)
        MMap<T>(an->grad.data() + (*ai)[i] * as, m, k).noalias() +=
            g * CMap<T>(bn->value.data() + (*bi)[i] * bs, k, n).transpose();
      if (bn->requires_grad)
        MMap<T>(bn->grad.data() + (*bi)[i] * bs, k, n).noalias() +=
            CMap<T>(an->value.data() + (*ai)[i] * as, m, k).transpose() * g;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> v(a.values().begin(), a.values().end());
  auto out = Tensor<T>(std::move(shape), std::move(v), tracking({&a}));
  record<T>(out, [an = a.node()](detail::Node<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute: axes/rank mismatch");
  std::vector<int> seen(r, 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= r || seen[ax]++) throw ShapeError("permute: invalid axes");
  }
  const Shape& in = a.shape();
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = in[axes[i]];
  std::vector<std::size_t> in_stride(r);
  std::size_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_stride[i] = s;
    s *= in[i];
  }
  const std::size_t n = a.numel();
  auto idx = std::make_shared<std::vector<std::uint32_t>>(n);
  std::vector<int> pos(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*idx)[i] = static_cast<std::uint32_t>(cur);
    for (int d = r - 1; d >= 0; --d) {
      ++pos[d];
      cur += in_stride[axes[d]];
      if (pos[d] < os[d]) break;
      cur -= in_stride[axes[d]] * static_cast<std::size_t>(pos[d]);
      pos[d] = 0;
    }
  }
  std::vector<T> v(n);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[(*idx)[i]];
  auto out = Tensor<T>(std::move(os), std::move(v), tracking({&a}));
  record<T>(out, [an = a.node(), idx](detail::Node<T>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[(*idx)[i]] += o.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  std::vector<int> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[norm_axis(axis0, a.rank())], axes[norm_axis(axis1, a.rank())]);
  return permute(a, axes);
}

// ---------------------------------------------------------------------------
// softmax family

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Mask& mask) {
  const int n = logits.dim(-1);
  const std::size_t rows = logits.numel() / n;
  std::vector<std::uint32_t> mi;
  if (mask.shape != logits.shape()) mi = detail::broadcast_index(logits.shape(), mask.shape);
  auto keep = [&](std::size_t i) { return mask.keep[mi.empty() ? i : mi[i]] != 0; };

  const T* x = logits.values().data();
  std::vector<T> y(logits.numel(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    T mx = T(0);
    bool any = false;
    for (int j = 0; j < n; ++j)
      if (keep(base + j)) {
        mx = any ? std::max(mx, x[base + j]) : x[base + j];
        any = true;
      }
    if (!any) throw NumericError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    T z = T(0);
    for (int j = 0; j < n; ++j)
      if (keep(base + j)) {
        y[base + j] = std::exp(x[base + j] - mx);
        z += y[base + j];
      }
    for (int j = 0; j < n; ++j) y[base + j] /= z;
  }
  auto out = make_result(logits.shape(), std::move(y), tracking({&logits}), "masked_softmax");
  record<T>(out, [ln = logits.node(), n, rows](detail::Node<T>& o) {
    ln->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      T dot = T(0);
      for (int j = 0; j < n; ++j) dot += o.grad[base + j] * o.value[base + j];
      for (int j = 0; j < n; ++j) ln->grad[base + j] += o.value[base + j] * (o.grad[base + j] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  return masked_softmax(logits, Mask::all({logits.dim(-1)}));
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const int n = logits.dim(-1);
  const std::size_t rows = logits.numel() / n;
  const T* x = logits.values().data();
  std::vector<T> y(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T mx = *std::max_element(xr, xr + n);
    T z = T(0);
    for (int j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    T lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) y[r * n + j] = xr[j] - lse;
  }
  auto out = make_result(logits.shape(), std::move(y), tracking({&logits}), "log_softmax");
  record<T>(out, [ln = logits.node(), n, rows](detail::Node<T>& o) {
    ln->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      T gs = T(0);
      for (int j = 0; j < n; ++j) gs += o.grad[base + j];
      for (int j = 0; j < n; ++j) ln->grad[base + j] += o.grad[base + j] - std::exp(o.value[base + j]) * gs;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization / activations

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  const int n = x.dim(-1);
  if (n < 2) throw ShapeError("layer_norm: last dim must be >= 2");
  if (gain.numel() != static_cast<std::size_t>(n) || bias.numel() != static_cast<std::size_t>(n))
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  const std::size_t rows = x.numel() / n;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> y(x.numel());
  const T* xv = x.values().data();
  const T* g = gain.values().data();
  const T* b = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * n;
    T mu = T(0);
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= T(n);
    T var = T(0);
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(n);
    T rs = T(1) / std::sqrt(var + T(eps));
    (*rstd)[r] = rs;
    for (int j = 0; j < n; ++j) {
      T h = (xr[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      y[r * n + j] = h * g[j] + b[j];
    }
  }
  auto out = make_result(x.shape(), std::move(y), tracking({&x, &gain, &bias}), "layer_norm");
  record<T>(out, [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat, rstd, n, rows](detail::Node<T>& o) {
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      T m1 = T(0), m2 = T(0);
      for (int j = 0; j < n; ++j) {
        T dy = o.grad[base + j];
        T h = (*xhat)[base + j];
        if (gn->requires_grad) gn->grad[j] += dy * h;
        if (bn->requires_grad) bn->grad[j] += dy;
        T dh = dy * gn->value[j];
        m1 += dh;
        m2 += dh * h;
      }
      if (!xn->requires_grad) continue;
      m1 /= T(n);
      m2 /= T(n);
      for (int j = 0; j < n; ++j) {
        T dh = o.grad[base + j] * gn->value[j];
        xn->grad[base + j] += (*rstd)[r] * (dh - m1 - (*xhat)[base + j] * m2);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<T> y(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * T(kInvSqrt2)));
  auto out = make_result(x.shape(), std::move(y), tracking({&x}), "gelu");
  record<T>(out, [xn = x.node()](detail::Node<T>& o) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      T v = xn->value[i];
      T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
      T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
      xn->grad[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> y(x.values().begin(), x.values().end());
  for (T& v : y) v = v > T(0) ? v : T(0);
  auto out = make_result(x.shape(), std::move(y), tracking({&x}), "relu");
  record<T>(out, [xn = x.node()](detail::Node<T>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += o.grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  auto out = make_result<T>({1}, {s}, tracking({&x}), "sum");
  record<T>(out, [xn = x.node()](detail::Node<T>& o) {
    xn->ensure_grad();
    for (T& g : xn->grad) g += o.grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<T> y(rows, T(0));
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) y[r] += xv[r * n + j];
  Shape os = x.shape();
  os.back() = 1;
  auto out = make_result(std::move(os), std::move(y), tracking({&x}), "sum_last");
  record<T>(out, [xn = x.node(), n, rows](detail::Node<T>& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (int j = 0; j < n; ++j) xn->grad[r * n + j] += o.grad[r];
  });
  return out;
}

// ---------------------------------------------------------------------------
// indexing

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> indices, Shape index_shape) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
  if (shape_numel(index_shape) != indices.size()) throw ShapeError("gather_rows: index count/shape mismatch");
  const int rows = table.dim(0), c = table.dim(1);
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  for (int i : *idx)
    if (i < 0 || i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  std::vector<T> v(idx->size() * c);
  const T* tv = table.values().data();
  for (std::size_t i = 0; i < idx->size(); ++i) std::copy_n(tv + static_cast<std::size_t>((*idx)[i]) * c, c, v.data() + i * c);
  index_shape.push_back(c);
  auto out = make_result(std::move(index_shape), std::move(v), tracking({&table}), "gather_rows");
  record<T>(out, [tn = table.node(), idx, c](detail::Node<T>& o) {
    tn->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      T* dst = tn->grad.data() + static_cast<std::size_t>((*idx)[i]) * c;
      const T* src = o.grad.data() + i * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& src, std::span<const int> indices, int rows) {
  if (src.rank() != 2 || static_cast<std::size_t>(src.dim(0)) != indices.size())
    throw ShapeError("scatter_add_rows: src must be [n, C] with n indices");
  const int c = src.dim(1);
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  std::vector<T> v(static_cast<std::size_t>(rows) * c, T(0));
  const T* sv = src.values().data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    int r = (*idx)[i];
    if (r < 0 || r >= rows) throw ShapeError("scatter_add_rows: index out of range");
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(r) * c + j] += sv[i * c + j];
  }
  auto out = make_result<T>({rows, c}, std::move(v), tracking({&src}), "scatter_add_rows");
  record<T>(out, [sn = src.node(), idx, c](detail::Node<T>& o) {
    sn->ensure_grad();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (int j = 0; j < c; ++j) sn->grad[i * c + j] += o.grad[static_cast<std::size_t>((*idx)[i]) * c + j];
  });
  return out;
}

template <typename T>
Tensor<T> take_last(const Tensor<T>& x, std::span<const int> indices, int k) {
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  if (indices.size() != rows * static_cast<std::size_t>(k)) throw ShapeError("take_last: index count mismatch");
  auto idx = std::make_shared<std::vector<int>>(indices.begin(), indices.end());
  std::vector<T> v(idx->size());
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) {
      int c = (*idx)[r * k + j];
      if (c < 0 || c >= n) throw ShapeError("take_last: index out of range");
      v[r * k + j] = xv[r * n + c];
    }
  Shape os = x.shape();
  os.back() = k;
  auto out = make_result(std::move(os), std::move(v), tracking({&x}), "take_last");
  record<T>(out, [xn = x.node(), idx, n, k, rows](detail::Node<T>& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (int j = 0; j < k; ++j) xn->grad[r * n + (*idx)[r * k + j]] += o.grad[r * k + j];
  });
  return out;
}

template <typename T>
TopK<T> topk(const Tensor<T>& x, int k) {
  const int n = x.dim(-1);
  if (k < 1 || k > n) throw ShapeError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  const std::size_t rows = x.numel() / n;
  std::vector<int> idx(rows * k);
  std::vector<int> order(n);
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), 0);
    const T* xr = xv + r * n;
    std::stable_sort(order.begin(), order.end(), [xr](int a, int b) { return xr[a] > xr[b]; });
    std::copy_n(order.begin(), k, idx.begin() + r * k);
  }
  TopK<T> out;
  out.values = take_last(x, idx, k);
  out.indices = std::move(idx);
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  const int ax = norm_axis(axis, r);
  Shape os = parts[0].shape();
  os[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) throw ShapeError("concat: shape mismatch");
    os[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= os[d];
  for (int d = ax + 1; d < r; ++d) inner *= os[d];
  const std::size_t out_chunk = static_cast<std::size_t>(os[ax]) * inner;
  std::vector<T> v(shape_numel(os));
  std::size_t offset = 0;
  bool track = false;
  auto nodes = std::make_shared<std::vector<std::shared_ptr<detail::Node<T>>>>();
  for (const auto& p : parts) {
    const std::size_t chunk = static_cast<std::size_t>(p.shape()[ax]) * inner;
    const T* pv = p.values().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(pv + o * chunk, chunk, v.data() + o * out_chunk + offset);
    offset += chunk;
    track = track || tracking({&p});
    nodes->push_back(p.node());
  }
  auto out = make_result(std::move(os), std::move(v), track, "concat");
  record<T>(out, [nodes, ax, outer, inner, out_chunk](detail::Node<T>& o) {
    std::size_t offset = 0;
    for (auto& pn : *nodes) {
      const std::size_t chunk = static_cast<std::size_t>(pn->shape[ax]) * inner;
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (std::size_t q = 0; q < outer; ++q)
          for (std::size_t j = 0; j < chunk; ++j) pn->grad[q * chunk + j] += o.grad[q * out_chunk + offset + j];
      }
      offset += chunk;
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length) {
  const int r = x.rank();
  const int ax = norm_axis(axis, r);
  if (start < 0 || length < 1 || start + length > x.shape()[ax]) throw ShapeError("slice: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (int d = ax + 1; d < r; ++d) inner *= x.shape()[d];
  const std::size_t in_chunk = static_cast<std::size_t>(x.shape()[ax]) * inner;
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  std::vector<T> v(outer * chunk);
  const T* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv + o * in_chunk + off, chunk, v.data() + o * chunk);
  Shape os = x.shape();
  os[ax] = length;
  auto out = make_result(std::move(os), std::move(v), tracking({&x}), "slice");
  record<T>(out, [xn = x.node(), outer, in_chunk, chunk, off](detail::Node<T>& o) {
    xn->ensure_grad();
    for (std::size_t q = 0; q < outer; ++q)
      for (std::size_t j = 0; j < chunk; ++j) xn->grad[q * in_chunk + off + j] += o.grad[q * chunk + j];
  });
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  auto m = std::make_shared<std::vector<T>>(x.numel());
  for (T& v : *m) v = rng.bernoulli(p) ? T(0) : keep_scale;
  std::vector<T> y(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * (*m)[i];
  auto out = make_result(x.shape(), std::move(y), tracking({&x}), "dropout");
  record<T>(out, [xn = x.node(), m](detail::Node<T>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * (*m)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------

#define ELMUR_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                    \
  template class Tape<T>;                                                                      \
  template bool detail::tracking<T>(std::initializer_list<const Tensor<T>*>);                  \
  template Tensor<T> detail::make_result<T>(Shape, std::vector<T>, bool, const char*);         \
  template void detail::record<T>(const Tensor<T>&, typename Tape<T>::Backward);               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> neg<T>(const Tensor<T>&);                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                    \
  template Tensor<T> transpose<T>(const Tensor<T>&, int, int);                                 \
  template Tensor<T> masked_softmax<T>(const Tensor<T>&, const Mask&);                         \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                             \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                \
  template Tensor<T> sum_last<T>(const Tensor<T>&);                                            \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const int>, Shape);            \
  template Tensor<T> scatter_add_rows<T>(const Tensor<T>&, std::span<const int>, int);         \
  template Tensor<T> take_last<T>(const Tensor<T>&, std::span<const int>, int);                \
  template TopK<T> topk<T>(const Tensor<T>&, int);                                             \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                            \
  template Tensor<T> slice<T>(const Tensor<T>&, int, int, int);                                \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, Rng&);

ELMUR_INSTANTIATE(float)
ELMUR_INSTANTIATE(double)

}  // namespace elmur
