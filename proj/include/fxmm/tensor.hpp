#pragma once

// Dense row-major tensors with reverse-mode autodiff. The operation set is
// exactly what the model needs; shapes must match exactly except for scalar
// scaling and the documented leading-rows convention of matmul.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fxmm/error.hpp"

namespace fxmm {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class TapeMode { train, infer };

// Records one closure per differentiable op in execution order (a valid
// topological order); backward replays them once, in reverse.
template <typename S>
class Tape {
 public:
  TapeMode mode() const noexcept { return mode_; }
  void set_mode(TapeMode m) noexcept { mode_ = m; }
  bool recording() const noexcept { return mode_ == TapeMode::train; }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  void clear() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }

  void replay_reverse() const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  TapeMode mode_ = TapeMode::train;
  std::vector<std::function<void()>> entries_;
};

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated on first backward touch
  bool requires_grad = false;
  Tape<S>* tape = nullptr;
  std::string name;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<S> values) {
    auto n = std::make_shared<detail::TensorNode<S>>();
    if (values.size() != shape_numel(shape))
      throw shape_error("tensor: " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S fill) {
    std::vector<S> v(shape_numel(shape), fill);
    return constant(std::move(shape), std::move(v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static Tensor scalar(S v) { return constant(Shape{}, {v}); }

  // Differentiable leaf attached to a tape (parameters and checked inputs).
  static Tensor leaf(Tape<S>& tape, Shape shape, std::string name = {}) {
    Tensor t = zeros(std::move(shape));
    t.node_->tape = &tape;
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::span<S> data() { return node_->value; }
  std::span<const S> data() const { return node_->value; }
  std::span<const S> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  Tape<S>* tape() const { return node_->tape; }

  S item() const {
    if (numel() != 1)
      throw shape_error("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  S operator()(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  S operator()(int i, int j) const {
    return node_->value[static_cast<std::size_t>(i) * dim(1) + j];
  }
  S operator()(int i, int j, int k) const {
    return node_->value[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  void zero_grad() { node_->grad.clear(); }

  void fill(S v) { std::fill(node_->value.begin(), node_->value.end(), v); }

  detail::TensorNode<S>* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode<S>> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode<S>> node_;

  template <typename T>
  friend Tensor<T> make_op_result(Shape, std::initializer_list<Tensor<T>>);
};

// Result node wiring: inherits the tape of its inputs; requires grad (and
// gets recorded) only while that tape is in train mode.
template <typename S>
Tensor<S> make_op_result(Shape shape, std::initializer_list<Tensor<S>> inputs) {
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  Tape<S>* tape = nullptr;
  bool any_grad = false;
  for (const auto& in : inputs) {
    if (in.tape() != nullptr) {
      if (tape != nullptr && tape != in.tape())
        throw state_error("op: inputs belong to different tapes");
      tape = in.tape();
    }
    any_grad = any_grad || in.requires_grad();
  }
  out.node()->tape = tape;
  out.node()->requires_grad = any_grad && tape != nullptr && tape->recording();
  return out;
}

namespace detail {

template <typename S>
void record_if_needed(const Tensor<S>& out, std::function<void()> fn) {
  if (out.requires_grad()) out.tape()->record(std::move(fn));
}

// Skip closures whose output never received a gradient; such nodes are not
// on any path to the loss.
template <typename S>
bool upstream_empty(const Tensor<S>& out) {
  return !out.has_grad();
}

// c[m,n] += a[m,k] * b[k,n]
template <typename S>
void mm_nn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const S av = a[static_cast<std::size_t>(i) * k + p];
      if (av == S(0)) continue;
      const S* brow = b + static_cast<std::size_t>(p) * n;
      S* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const S* arow = a + static_cast<std::size_t>(i) * k;
      const S* brow = b + static_cast<std::size_t>(j) * k;
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    const S* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      S* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor<S> out = make_op_result<S>(a.shape(), {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::record_if_needed(out, [a, b, out]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) a.node()->grad[i] += g[i];
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) b.node()->grad[i] += g[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor<S> out = make_op_result<S>(a.shape(), {a, b});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::record_if_needed(out, [a, b, out]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) a.node()->grad[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) b.node()->grad[i] += g[i] * a.data()[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = make_op_result<S>(a.shape(), {a});
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = c * a.data()[i];
  detail::record_if_needed(out, [a, out, c]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) a.node()->grad[i] += c * g[i];
  });
  return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = v * detail::sigmoid(v);
  }
  detail::record_if_needed(out, [x, out]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = x.data()[i];
      const S s = detail::sigmoid(v);
      x.node()->grad[i] += g[i] * s * (S(1) + v * (S(1) - s));
    }
  });
  return out;
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  detail::record_if_needed(out, [x, out]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      x.node()->grad[i] += g[i] * detail::sigmoid(x.data()[i]);
  });
  return out;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const int len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(x.dim(i));

  Tensor<S> out = make_op_result<S>(x.shape(), {x});
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(len) * inner + in;
      S m = neg_inf;
      for (int j = 0; j < len; ++j) m = std::max(m, x.data()[base + j * inner]);
      if (m == neg_inf)
        throw state_error("softmax: slice is entirely -inf, distribution undefined");
      S z = 0;
      for (int j = 0; j < len; ++j) {
        const S v = x.data()[base + j * inner];
        const S e = (v == neg_inf) ? S(0) : std::exp(v - m);
        out.data()[base + j * inner] = e;
        z += e;
      }
      for (int j = 0; j < len; ++j) out.data()[base + j * inner] /= z;
    }
  detail::record_if_needed(out, [x, out, outer, inner, len]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * static_cast<std::size_t>(len) * inner + in;
        S dot = 0;
        for (int j = 0; j < len; ++j) {
          const std::size_t at = base + j * inner;
          dot += out.data()[at] * g[at];
        }
        for (int j = 0; j < len; ++j) {
          const std::size_t at = base + j * inner;
          x.node()->grad[at] += out.data()[at] * (g[at] - dot);
        }
      }
  });
  return out;
}

// x / sqrt(mean(x^2) + eps) * gain along the last axis; eps = 1e-6.
template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain) {
  if (x.rank() < 1 || gain.rank() != 1 || x.dim(x.rank() - 1) != gain.dim(0))
    throw shape_error("rms_norm: last extent of " + shape_str(x.shape()) +
                      " must equal gain " + shape_str(gain.shape()));
  const int d = gain.dim(0);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  constexpr S eps = S(1e-6);

  Tensor<S> out = make_op_result<S>(x.shape(), {x, gain});
  std::vector<S> inv_rms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const S* row = x.data().data() + i * d;
    S ms = 0;
    for (int j = 0; j < d; ++j) ms += row[j] * row[j];
    ms /= static_cast<S>(d);
    const S r = S(1) / std::sqrt(ms + eps);
    inv_rms[i] = r;
    S* orow = out.data().data() + i * d;
    for (int j = 0; j < d; ++j) orow[j] = row[j] * r * gain.data()[j];
  }
  detail::record_if_needed(out, [x, gain, out, inv_rms = std::move(inv_rms), rows, d]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    if (x.requires_grad()) x.node()->ensure_grad();
    if (gain.requires_grad()) gain.node()->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      const S r = inv_rms[i];
      const S* row = x.data().data() + i * d;
      const S* grow = g.data() + i * d;
      if (gain.requires_grad())
        for (int j = 0; j < d; ++j) gain.node()->grad[j] += grow[j] * row[j] * r;
      if (x.requires_grad()) {
        S dot = 0;
        for (int j = 0; j < d; ++j) dot += grow[j] * gain.data()[j] * row[j];
        const S coef = r * r * r * dot / static_cast<S>(d);
        S* xg = x.node()->grad.data() + i * d;
        for (int j = 0; j < d; ++j)
          xg[j] += grow[j] * r * gain.data()[j] - coef * row[j];
      }
    }
  });
  return out;
}

// a [..., p] times b [p, q]; leading extents of a are treated as rows.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.dim(a.rank() - 1) != b.dim(0))
    throw shape_error("matmul: inner extents of " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " do not match");
  const int p = b.dim(0), q = b.dim(1);
  const int rows = static_cast<int>(a.numel()) / p;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(q);

  Tensor<S> out = make_op_result<S>(std::move(out_shape), {a, b});
  detail::mm_nn_acc(a.data().data(), b.data().data(), out.data().data(), rows, p, q);
  detail::record_if_needed(out, [a, b, out, rows, p, q]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      detail::mm_nt_acc(g, b.data().data(), a.node()->grad.data(), rows, q, p);
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      detail::mm_tn_acc(a.data().data(), g, b.node()->grad.data(), rows, p, q);
    }
  });
  return out;
}

// Batched a [B,m,p] times b [B,p,q] -> [B,m,q].
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw shape_error("bmm: shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " are not batch-compatible");
  const int B = a.dim(0), m = a.dim(1), p = a.dim(2), q = b.dim(2);
  Tensor<S> out = make_op_result<S>({B, m, q}, {a, b});
  const std::size_t as = static_cast<std::size_t>(m) * p;
  const std::size_t bs = static_cast<std::size_t>(p) * q;
  const std::size_t os = static_cast<std::size_t>(m) * q;
  for (int i = 0; i < B; ++i)
    detail::mm_nn_acc(a.data().data() + i * as, b.data().data() + i * bs,
                      out.data().data() + i * os, m, p, q);
  detail::record_if_needed(out, [a, b, out, B, m, p, q, as, bs, os]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      for (int i = 0; i < B; ++i)
        detail::mm_nt_acc(g + i * os, b.data().data() + i * bs,
                          a.node()->grad.data() + i * as, m, q, p);
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      for (int i = 0; i < B; ++i)
        detail::mm_tn_acc(a.data().data() + i * as, g + i * os,
                          b.node()->grad.data() + i * bs, m, p, q);
    }
  });
  return out;
}

// Batched a [B,m,p] times b [B,n,p]^T -> [B,m,n].
template <typename S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw shape_error("bmm_nt: shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " are not batch-compatible");
  const int B = a.dim(0), m = a.dim(1), p = a.dim(2), n = b.dim(1);
  Tensor<S> out = make_op_result<S>({B, m, n}, {a, b});
  const std::size_t as = static_cast<std::size_t>(m) * p;
  const std::size_t bs = static_cast<std::size_t>(n) * p;
  const std::size_t os = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < B; ++i)
    detail::mm_nt_acc(a.data().data() + i * as, b.data().data() + i * bs,
                      out.data().data() + i * os, m, p, n);
  detail::record_if_needed(out, [a, b, out, B, m, p, n, as, bs, os]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      for (int i = 0; i < B; ++i)
        detail::mm_nn_acc(g + i * os, b.data().data() + i * bs,
                          a.node()->grad.data() + i * as, m, n, p);
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      for (int i = 0; i < B; ++i)
        detail::mm_tn_acc(g + i * os, a.data().data() + i * as,
                          b.node()->grad.data() + i * bs, m, n, p);
    }
  });
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = make_op_result<S>(Shape{}, {x});
  S acc = 0;
  for (S v : x.data()) acc += v;
  out.data()[0] = acc;
  detail::record_if_needed(out, [x, out]() {
    if (detail::upstream_empty(out)) return;
    const S g = out.grad()[0];
    x.node()->ensure_grad();
    for (auto& gv : x.node()->grad) gv += g;
  });
  return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                      shape_str(new_shape));
  Tensor<S> out = make_op_result<S>(std::move(new_shape), {x});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  detail::record_if_needed(out, [x, out]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) x.node()->grad[i] += g[i];
  });
  return out;
}

// Concatenate along the last axis; all leading extents must agree.
template <typename S>
Tensor<S> concat_last(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw shape_error("concat_last: no inputs");
  const Shape& s0 = parts[0].shape();
  const int r = parts[0].rank();
  int total_last = 0;
  for (const auto& p : parts) {
    if (p.rank() != r ||
        !std::equal(p.shape().begin(), p.shape().end() - 1, s0.begin(), s0.end() - 1))
      throw shape_error("concat_last: incompatible shapes " + shape_str(s0) + " vs " +
                        shape_str(p.shape()));
    total_last += p.dim(r - 1);
  }
  Shape out_shape(s0.begin(), s0.end() - 1);
  out_shape.push_back(total_last);
  std::size_t rows = 1;
  for (int i = 0; i + 1 < r; ++i) rows *= static_cast<std::size_t>(s0[i]);

  std::initializer_list<Tensor<S>> no_inputs{};
  Tensor<S> out = make_op_result<S>(out_shape, no_inputs);
  // wire tape/grad flags manually for the variadic input list
  for (const auto& p : parts) {
    if (p.tape()) out.node()->tape = p.tape();
    if (p.requires_grad()) out.node()->requires_grad = true;
  }
  out.node()->requires_grad =
      out.node()->requires_grad && out.node()->tape && out.node()->tape->recording();

  std::size_t off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(r - 1);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(p.data().data() + i * w, w,
                  out.data().data() + i * total_last + off);
    off += static_cast<std::size_t>(w);
  }
  detail::record_if_needed(out, [parts, out, rows, total_last, r]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    std::size_t off = 0;
    for (const auto& p : parts) {
      const int w = p.dim(r - 1);
      if (p.requires_grad()) {
        p.node()->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
          const S* gs = g + i * total_last + off;
          S* pg = p.node()->grad.data() + i * w;
          for (int j = 0; j < w; ++j) pg[j] += gs[j];
        }
      }
      off += static_cast<std::size_t>(w);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

// Row-gather from a [R,C] table. Gradient scatters back to the gathered rows;
// with zero_grad_row0 set, row 0 (the PAD row) never accumulates gradient.
template <typename S>
Tensor<S> lookup(const Tensor<S>& table, const std::vector<int>& ids, Shape id_shape,
                 bool zero_grad_row0 = false) {
  if (table.rank() != 2)
    throw shape_error("lookup: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.size() != shape_numel(id_shape))
    throw shape_error("lookup: id count does not match id shape " + shape_str(id_shape));
  const int R = table.dim(0), C = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= R)
      throw index_error("lookup: id " + std::to_string(ids[i]) + " at position " +
                        std::to_string(i) + " out of range [0," + std::to_string(R) + ")");
  Shape out_shape = std::move(id_shape);
  out_shape.push_back(C);
  Tensor<S> out = make_op_result<S>(std::move(out_shape), {table});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * C, C,
                out.data().data() + i * C);
  detail::record_if_needed(out, [table, out, ids, C, zero_grad_row0]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    table.node()->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (zero_grad_row0 && ids[i] == 0) continue;
      S* trow = table.node()->grad.data() + static_cast<std::size_t>(ids[i]) * C;
      const S* gs = g + i * C;
      for (int j = 0; j < C; ++j) trow[j] += gs[j];
    }
  });
  return out;
}

// Element-gather from a rank-1 table (bias tables).
template <typename S>
Tensor<S> gather1d(const Tensor<S>& table, const std::vector<int>& ids, Shape out_shape) {
  if (table.rank() != 1)
    throw shape_error("gather1d: table must be rank 1, got " + shape_str(table.shape()));
  if (ids.size() != shape_numel(out_shape))
    throw shape_error("gather1d: id count does not match " + shape_str(out_shape));
  const int R = table.dim(0);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= R)
      throw index_error("gather1d: id " + std::to_string(ids[i]) + " at position " +
                        std::to_string(i) + " out of range [0," + std::to_string(R) + ")");
  Tensor<S> out = make_op_result<S>(std::move(out_shape), {table});
  for (std::size_t i = 0; i < ids.size(); ++i) out.data()[i] = table.data()[ids[i]];
  detail::record_if_needed(out, [table, out, ids]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    table.node()->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) table.node()->grad[ids[i]] += g[i];
  });
  return out;
}

// Select rows of a [T,C] matrix.
template <typename S>
Tensor<S> take_rows(const Tensor<S>& x, const std::vector<int>& idx) {
  if (x.rank() != 2)
    throw shape_error("take_rows: expected rank 2, got " + shape_str(x.shape()));
  const int T = x.dim(0), C = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= T)
      throw index_error("take_rows: row " + std::to_string(i) + " out of range");
  Tensor<S> out = make_op_result<S>({static_cast<int>(idx.size()), C}, {x});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data().data() + static_cast<std::size_t>(idx[i]) * C, C,
                out.data().data() + i * C);
  detail::record_if_needed(out, [x, out, idx, C]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      S* xr = x.node()->grad.data() + static_cast<std::size_t>(idx[i]) * C;
      const S* gs = g + i * C;
      for (int j = 0; j < C; ++j) xr[j] += gs[j];
    }
  });
  return out;
}

// Inverse of take_rows: place rows of x [K,C] at idx within [T,C], zeros
// elsewhere; duplicate indices accumulate.
template <typename S>
Tensor<S> scatter_rows(const Tensor<S>& x, const std::vector<int>& idx, int T) {
  if (x.rank() != 2 || static_cast<std::size_t>(x.dim(0)) != idx.size())
    throw shape_error("scatter_rows: row count of " + shape_str(x.shape()) +
                      " must match index count " + std::to_string(idx.size()));
  const int C = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= T)
      throw index_error("scatter_rows: row " + std::to_string(i) + " out of range");
  Tensor<S> out = make_op_result<S>({T, C}, {x});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    S* orow = out.data().data() + static_cast<std::size_t>(idx[i]) * C;
    const S* xr = x.data().data() + i * C;
    for (int j = 0; j < C; ++j) orow[j] += xr[j];
  }
  detail::record_if_needed(out, [x, out, idx, C]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const S* gs = g + static_cast<std::size_t>(idx[i]) * C;
      S* xr = x.node()->grad.data() + i * C;
      for (int j = 0; j < C; ++j) xr[j] += gs[j];
    }
  });
  return out;
}

// Row-wise scaling of x [K,C] by s [K].
template <typename S>
Tensor<S> mul_rows(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.rank() != 2 || s.rank() != 1 || x.dim(0) != s.dim(0))
    throw shape_error("mul_rows: shapes " + shape_str(x.shape()) + " and " +
                      shape_str(s.shape()) + " are incompatible");
  const int K = x.dim(0), C = x.dim(1);
  Tensor<S> out = make_op_result<S>({K, C}, {x, s});
  for (int i = 0; i < K; ++i) {
    const S sv = s.data()[i];
    for (int j = 0; j < C; ++j)
      out.data()[static_cast<std::size_t>(i) * C + j] =
          x.data()[static_cast<std::size_t>(i) * C + j] * sv;
  }
  detail::record_if_needed(out, [x, s, out, K, C]() {
    if (detail::upstream_empty(out)) return;
    const S* g = out.grad().data();
    if (x.requires_grad()) x.node()->ensure_grad();
    if (s.requires_grad()) s.node()->ensure_grad();
    for (int i = 0; i < K; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * C;
      if (x.requires_grad()) {
        const S sv = s.data()[i];
        for (int j = 0; j < C; ++j) x.node()->grad[off + j] += g[off + j] * sv;
      }
      if (s.requires_grad()) {
        S acc = 0;
        for (int j = 0; j < C; ++j) acc += g[off + j] * x.data()[off + j];
        s.node()->grad[i] += acc;
      }
    }
  });
  return out;
}

// Gather scalars by flat offsets.
template <typename S>
Tensor<S> take_scalars(const Tensor<S>& x, const std::vector<std::size_t>& flat_idx) {
  for (std::size_t i : flat_idx)
    if (i >= x.numel())
      throw index_error("take_scalars: offset " + std::to_string(i) + " out of range");
  Tensor<S> out = make_op_result<S>({static_cast<int>(flat_idx.size())}, {x});
  for (std::size_t i = 0; i < flat_idx.size(); ++i) out.data()[i] = x.data()[flat_idx[i]];
  detail::record_if_needed(out, [x, out, flat_idx]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < flat_idx.size(); ++i) x.node()->grad[flat_idx[i]] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Routing and scoring primitives
// ---------------------------------------------------------------------------

// Keep the k largest entries of each row (ties broken by lower index); the
// rest become -inf so a following softmax assigns them exactly zero weight.
template <typename S>
Tensor<S> keep_top_k(const Tensor<S>& x, int k) {
  if (x.rank() != 2)
    throw shape_error("keep_top_k: expected rank 2, got " + shape_str(x.shape()));
  const int T = x.dim(0), N = x.dim(1);
  if (k < 1 || k > N)
    throw config_error("keep_top_k: k=" + std::to_string(k) + " outside [1," +
                       std::to_string(N) + "]");
  Tensor<S> out = make_op_result<S>({T, N}, {x});
  std::vector<char> kept(static_cast<std::size_t>(T) * N, 0);
  std::vector<int> order(static_cast<std::size_t>(N));
  const S neg_inf = -std::numeric_limits<S>::infinity();
  for (int t = 0; t < T; ++t) {
    const S* row = x.data().data() + static_cast<std::size_t>(t) * N;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [row](int i, int j) {
                        return row[i] > row[j] || (row[i] == row[j] && i < j);
                      });
    S* orow = out.data().data() + static_cast<std::size_t>(t) * N;
    std::fill_n(orow, N, neg_inf);
    for (int r = 0; r < k; ++r) {
      orow[order[r]] = row[order[r]];
      kept[static_cast<std::size_t>(t) * N + order[r]] = 1;
    }
  }
  detail::record_if_needed(out, [x, out, kept = std::move(kept)]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (kept[i]) x.node()->grad[i] += g[i];
  });
  return out;
}

namespace detail {

template <typename S>
struct CosParts {
  S na, nb, dot, cos;
};

template <typename S>
CosParts<S> cos_parts(const S* a, const S* b, int d) {
  constexpr S eps = S(1e-12);
  S naa = 0, nbb = 0, dot = 0;
  for (int j = 0; j < d; ++j) {
    naa += a[j] * a[j];
    nbb += b[j] * b[j];
    dot += a[j] * b[j];
  }
  const S na = std::max(std::sqrt(naa), eps);
  const S nb = std::max(std::sqrt(nbb), eps);
  return {na, nb, dot, dot / (na * nb)};
}

// d cos / d a, accumulated with upstream g. The norm clamp makes the norm
// constant below eps, so the quotient-rule term vanishes there.
template <typename S>
void cos_backprop_side(S* ga, const S* a, const S* b, S na, S nb, S cosv, S g, int d) {
  constexpr S eps = S(1e-12);
  const S inv = S(1) / (na * nb);
  const bool clamped = na <= eps;
  for (int j = 0; j < d; ++j) {
    S t = b[j] * inv;
    if (!clamped) t -= cosv * a[j] / (na * na);
    ga[j] += g * t;
  }
}

}  // namespace detail

// Row-wise cosine similarity of two [T,C] matrices -> [T].
template <typename S>
Tensor<S> cosine_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape() || a.rank() != 2)
    throw shape_error("cosine_rows: shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " must be equal rank-2");
  const int T = a.dim(0), C = a.dim(1);
  Tensor<S> out = make_op_result<S>({T}, {a, b});
  std::vector<detail::CosParts<S>> parts(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    parts[t] = detail::cos_parts(a.data().data() + static_cast<std::size_t>(t) * C,
                                 b.data().data() + static_cast<std::size_t>(t) * C, C);
    out.data()[t] = parts[t].cos;
  }
  detail::record_if_needed(out, [a, b, out, parts = std::move(parts), T, C]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    if (a.requires_grad()) a.node()->ensure_grad();
    if (b.requires_grad()) b.node()->ensure_grad();
    for (int t = 0; t < T; ++t) {
      const auto& p = parts[t];
      const std::size_t off = static_cast<std::size_t>(t) * C;
      if (a.requires_grad())
        detail::cos_backprop_side(a.node()->grad.data() + off, a.data().data() + off,
                                  b.data().data() + off, p.na, p.nb, p.cos, g[t], C);
      if (b.requires_grad())
        detail::cos_backprop_side(b.node()->grad.data() + off, b.data().data() + off,
                                  a.data().data() + off, p.nb, p.na, p.cos, g[t], C);
    }
  });
  return out;
}

// cosine_similarity(a [d], b [d]) -> scalar.
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0))
    throw shape_error("cosine_similarity: vectors " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " must have equal length");
  const int d = a.dim(0);
  return reshape(cosine_rows(reshape(a, {1, d}), reshape(b, {1, d})), Shape{});
}

// Fused gather+cosine: out[t,g] = cos(x[t,:], table[ids[t,g],:]).
// Gradients flow to x and to the gathered table rows (never row 0 when
// zero_grad_row0 is set).
template <typename S>
Tensor<S> cosine_scores(const Tensor<S>& x, const Tensor<S>& table,
                        const std::vector<int>& ids, int groups,
                        bool zero_grad_row0 = true) {
  if (x.rank() != 2 || table.rank() != 2 || x.dim(1) != table.dim(1))
    throw shape_error("cosine_scores: widths of " + shape_str(x.shape()) + " and " +
                      shape_str(table.shape()) + " must match");
  const int T = x.dim(0), C = x.dim(1), R = table.dim(0);
  if (ids.size() != static_cast<std::size_t>(T) * groups)
    throw shape_error("cosine_scores: expected " + std::to_string(T * groups) + " ids");
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= R)
      throw index_error("cosine_scores: id " + std::to_string(ids[i]) + " at position " +
                        std::to_string(i) + " out of range [0," + std::to_string(R) + ")");
  Tensor<S> out = make_op_result<S>({T, groups}, {x, table});
  std::vector<detail::CosParts<S>> parts(ids.size());
  for (int t = 0; t < T; ++t) {
    const S* xr = x.data().data() + static_cast<std::size_t>(t) * C;
    for (int g = 0; g < groups; ++g) {
      const std::size_t at = static_cast<std::size_t>(t) * groups + g;
      const S* er = table.data().data() + static_cast<std::size_t>(ids[at]) * C;
      parts[at] = detail::cos_parts(xr, er, C);
      out.data()[at] = parts[at].cos;
    }
  }
  detail::record_if_needed(
      out, [x, table, out, ids, parts = std::move(parts), T, C, groups, zero_grad_row0]() {
        if (detail::upstream_empty(out)) return;
        const auto g = out.grad();
        if (x.requires_grad()) x.node()->ensure_grad();
        if (table.requires_grad()) table.node()->ensure_grad();
        for (int t = 0; t < T; ++t) {
          const std::size_t xoff = static_cast<std::size_t>(t) * C;
          const S* xr = x.data().data() + xoff;
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t at = static_cast<std::size_t>(t) * groups + gi;
            if (g[at] == S(0)) continue;
            const auto& p = parts[at];
            const std::size_t eoff = static_cast<std::size_t>(ids[at]) * C;
            const S* er = table.data().data() + eoff;
            if (x.requires_grad())
              detail::cos_backprop_side(x.node()->grad.data() + xoff, xr, er, p.na, p.nb,
                                        p.cos, g[at], C);
            if (table.requires_grad() && !(zero_grad_row0 && ids[at] == 0))
              detail::cos_backprop_side(table.node()->grad.data() + eoff, er, xr, p.nb,
                                        p.na, p.cos, g[at], C);
          }
        }
      });
  return out;
}

// Per-token sampled-softmax negative log-likelihood:
//   nll[t] = -log( e^{pos_t} / (e^{pos_t} + sum_j e^{neg_tj}) )
// stabilized by subtracting the row max before exponentiation.
template <typename S>
Tensor<S> sampled_softmax_nll(const Tensor<S>& pos, const Tensor<S>& neg) {
  if (pos.rank() != 1 || neg.rank() != 2 || pos.dim(0) != neg.dim(0))
    throw shape_error("sampled_softmax_nll: shapes " + shape_str(pos.shape()) + " and " +
                      shape_str(neg.shape()) + " are incompatible");
  const int T = pos.dim(0), G = neg.dim(1);
  Tensor<S> out = make_op_result<S>({T}, {pos, neg});
  std::vector<S> probs(static_cast<std::size_t>(T) * (G + 1));
  for (int t = 0; t < T; ++t) {
    const S* nr = neg.data().data() + static_cast<std::size_t>(t) * G;
    S m = pos.data()[t];
    for (int j = 0; j < G; ++j) m = std::max(m, nr[j]);
    const S ep = std::exp(pos.data()[t] - m);
    S z = ep;
    for (int j = 0; j < G; ++j) z += std::exp(nr[j] - m);
    S* pr = probs.data() + static_cast<std::size_t>(t) * (G + 1);
    pr[0] = ep / z;
    for (int j = 0; j < G; ++j) pr[1 + j] = std::exp(nr[j] - m) / z;
    out.data()[t] = std::log(z) + m - pos.data()[t];
  }
  detail::record_if_needed(out, [pos, neg, out, probs = std::move(probs), T, G]() {
    if (detail::upstream_empty(out)) return;
    const auto g = out.grad();
    if (pos.requires_grad()) pos.node()->ensure_grad();
    if (neg.requires_grad()) neg.node()->ensure_grad();
    for (int t = 0; t < T; ++t) {
      const S* pr = probs.data() + static_cast<std::size_t>(t) * (G + 1);
      if (pos.requires_grad()) pos.node()->grad[t] += g[t] * (pr[0] - S(1));
      if (neg.requires_grad()) {
        S* ng = neg.node()->grad.data() + static_cast<std::size_t>(t) * G;
        for (int j = 0; j < G; ++j) ng[j] += g[t] * pr[1 + j];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
// accumulate additively; callers zero them between steps.
template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>* tape = loss.tape();
  if (tape == nullptr)
    throw state_error("backward: loss is not attached to a tape");
  if (tape->mode() != TapeMode::train)
    throw state_error("backward: tape is in inference mode");
  if (loss.numel() != 1)
    throw shape_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  tape->replay_reverse();
}

}  // namespace fxmm
