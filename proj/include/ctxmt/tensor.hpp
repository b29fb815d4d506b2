/* ctxmt - a desk-scale laboratory for context-aware neural machine translation.
 * Copyright (C) 2026 The ctxmt authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ctxmt/rng.hpp"

namespace ctxmt {

// Dense tensors with flat row-major storage, plus a reverse-mode tape.
// Scalar type is a template parameter: float for training, double for the
// finite-difference oracle suites.

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& msg) {
  throw std::invalid_argument("shape error: " + msg);
}

inline uint64_t next_tensor_uid() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}

/// A live tape holds every intermediate buffer of a step, which pushes
/// activation-sized allocations over glibc's mmap threshold; each one then
/// re-faults its pages. Keeping them on the heap arena makes the buffers
/// reusable across steps.
inline void retain_large_allocations() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)once;
#endif
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  uint64_t uid = next_tensor_uid();

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tape;

/// Shared handle to a tensor node. Shape is fixed at construction; values
/// are treated as immutable while a tape graph referencing them is alive
/// (parameters are updated between tapes).
template <class S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    return filled(std::move(shape), v, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<S> data,
                     bool requires_grad = false) {
    check_dims(shape);
    if (int64_t(data.size()) != numel(shape))
      shape_error("tensor data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    return node_->shape[size_t(i)];
  }
  int64_t size() const { return int64_t(node_->value.size()); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& value() { return node_->value; }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& grad() { return node_->grad; }

  S item() const {
    if (size() != 1) shape_error("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Deep copy sharing nothing with this tensor; grad not copied.
  Tensor detached_copy() const {
    return from(node_->shape, node_->value, false);
  }

 private:
  static void check_dims(const Shape& shape) {
    for (int d : shape)
      if (d <= 0) shape_error("non-positive dimension in " + shape_str(shape));
  }

  static Tensor filled(Shape shape, S fill, bool requires_grad) {
    check_dims(shape);
    auto n = std::make_shared<Node>();
    n->value.assign(size_t(numel(shape)), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

/// Reverse-mode tape. Construction makes it the active tape for the current
/// thread (nestable); ops record onto the active tape when any input
/// requires a gradient. A tape serves one forward/backward pass and is
/// single-threaded.
template <class S>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<S>>;

  Tape() : parent_(tl_active) {
    retain_large_allocations();
    tl_active = this;
  }
  ~Tape() { tl_active = parent_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return tl_active; }

  size_t size() const { return entries_.size(); }

  void record(std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backprop) {
    entries_.push_back(
        Entry{std::move(inputs), std::move(output), std::move(backprop)});
  }

  template <class T>
  friend void backward(const Tensor<T>& loss, Tape<T>& tape);

 private:
  struct Entry {
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backprop;
  };

  std::vector<Entry> entries_;
  Tape* parent_ = nullptr;
  static thread_local Tape* tl_active;
};

template <class S>
thread_local Tape<S>* Tape<S>::tl_active = nullptr;

/// Seeds dLoss/dLoss = 1 and sweeps the tape once in reverse, running only
/// entries on a path to the loss. Gradients accumulate additively, so a
/// node consumed twice receives the sum of both path contributions.
template <class S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
  if (loss.size() != 1)
    shape_error("backward: loss must be scalar, got " +
                shape_str(loss.shape()));
  if (tape.entries_.empty()) return;

  std::unordered_set<const TensorNode<S>*> reachable;
  reachable.insert(loss.node().get());
  std::vector<char> run(tape.entries_.size(), 0);
  for (size_t i = tape.entries_.size(); i-- > 0;) {
    const auto& e = tape.entries_[i];
    if (!reachable.count(e.output.get())) continue;
    run[i] = 1;
    for (const auto& in : e.inputs) reachable.insert(in.get());
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (size_t i = tape.entries_.size(); i-- > 0;)
    if (run[i]) tape.entries_[i].backprop();
}

namespace detail {

template <class S>
bool recording(std::initializer_list<const Tensor<S>*> inputs) {
  if (!Tape<S>::active()) return false;
  for (const Tensor<S>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
void record_op(std::initializer_list<const Tensor<S>*> inputs,
               const Tensor<S>& out, std::function<void()> backprop) {
  std::vector<typename Tape<S>::NodePtr> ins;
  ins.reserve(inputs.size());
  for (const Tensor<S>* t : inputs) ins.push_back(t->node());
  Tape<S>::active()->record(std::move(ins), out.node(), std::move(backprop));
}

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EMat<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

/// Matrix product. Ranks 2x2, 3x3 (same leading batch) and 3x2 (rhs
/// broadcast over the batch) are supported; transpose_b multiplies by the
/// transpose of b without materializing it.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b,
                 bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    shape_error("matmul: incompatible shapes " + shape_str(sa) + " and " +
                shape_str(sb) + (transpose_b ? " (transpose_b)" : ""));
  };
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) fail();
  if (b.rank() == 3 && a.rank() == 2) fail();

  int batch = a.rank() == 3 ? sa[0] : 1;
  int m = sa[size_t(a.rank()) - 2], k = sa[size_t(a.rank()) - 1];
  int bk = transpose_b ? sb[size_t(b.rank()) - 1] : sb[size_t(b.rank()) - 2];
  int n = transpose_b ? sb[size_t(b.rank()) - 2] : sb[size_t(b.rank()) - 1];
  bool b_batched = b.rank() == 3;
  if (bk != k) fail();
  if (b_batched && sb[0] != batch) fail();

  Shape out_shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  // A shared rhs collapses the whole batch into one GEMM over the
  // flattened leading dimensions; a batched rhs multiplies slice by slice.
  const int eff_batch = b_batched ? batch : 1;
  const int eff_m = b_batched ? m : batch * m;
  const int64_t a_stride = int64_t(eff_m) * k;
  const int64_t b_stride = b_batched ? int64_t(n) * k : 0;
  const int64_t c_stride = int64_t(eff_m) * n;
  // Small per-slice products (per-head attention) skip Eigen's blocked
  // GEMM, whose packing setup dominates at these sizes.
  const bool lazy = int64_t(eff_m) * n * k <= (1 << 14);
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* pc = out.value().data();
  for (int bi = 0; bi < eff_batch; ++bi) {
    detail::ConstMatMap<S> A(pa + bi * a_stride, eff_m, k);
    detail::MatMap<S> C(pc + bi * c_stride, eff_m, n);
    if (transpose_b) {
      detail::ConstMatMap<S> B(pb + bi * b_stride, n, k);
      if (lazy)
        C.noalias() = A.lazyProduct(B.transpose());
      else
        C.noalias() = A * B.transpose();
    } else {
      detail::ConstMatMap<S> B(pb + bi * b_stride, k, n);
      if (lazy)
        C.noalias() = A.lazyProduct(B);
      else
        C.noalias() = A * B;
    }
  }

  if (detail::recording<S>({&a, &b})) {
    out.node()->requires_grad = true;
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    detail::record_op<S>({&a, &b}, out, [=]() {
      // dA = dC B^T (or dC B), dB = A^T dC (or dC^T A); a shared rhs sums
      // its gradient over the batch through the same flattened view.
      const S* gout = on->grad.data();
      for (int bi = 0; bi < eff_batch; ++bi) {
        detail::ConstMatMap<S> dC(gout + bi * c_stride, eff_m, n);
        detail::ConstMatMap<S> A(an->value.data() + bi * a_stride, eff_m, k);
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MatMap<S> dA(an->grad.data() + bi * a_stride, eff_m, k);
          if (transpose_b) {
            detail::ConstMatMap<S> B(bn->value.data() + bi * b_stride, n, k);
            if (lazy)
              dA.noalias() += dC.lazyProduct(B);
            else
              dA.noalias() += dC * B;
          } else {
            detail::ConstMatMap<S> B(bn->value.data() + bi * b_stride, k, n);
            if (lazy)
              dA.noalias() += dC.lazyProduct(B.transpose());
            else
              dA.noalias() += dC * B.transpose();
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          if (transpose_b) {
            detail::MatMap<S> dB(bn->grad.data() + bi * b_stride, n, k);
            if (lazy)
              dB.noalias() += dC.transpose().lazyProduct(A);
            else
              dB.noalias() += dC.transpose() * A;
          } else {
            detail::MatMap<S> dB(bn->grad.data() + bi * b_stride, k, n);
            if (lazy)
              dB.noalias() += A.transpose().lazyProduct(dC);
            else
              dB.noalias() += A.transpose() * dC;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

namespace detail {

/// Resolves a possibly negative axis and computes (outer, axis_len, inner)
/// strides for slice iteration.
inline void axis_extents(const Shape& shape, int axis, int64_t& outer,
                         int64_t& len, int64_t& inner) {
  int r = int(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    shape_error("axis " + std::to_string(axis) + " out of range for " +
                shape_str(shape));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[size_t(i)];
  len = shape[size_t(axis)];
  for (int i = axis + 1; i < r; ++i) inner *= shape[size_t(i)];
}

}  // namespace detail

/// Softmax along `axis` with the per-slice max subtracted before
/// exponentiation.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  int64_t outer, len, inner;
  detail::axis_extents(x.shape(), axis, outer, len, inner);

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.value().data();
  S* py = out.value().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      S mx = px[base];
      for (int64_t j = 1; j < len; ++j)
        mx = std::max(mx, px[base + j * inner]);
      S sum = 0;
      for (int64_t j = 0; j < len; ++j) {
        S e = std::exp(px[base + j * inner] - mx);
        py[base + j * inner] = e;
        sum += e;
      }
      for (int64_t j = 0; j < len; ++j) py[base + j * inner] /= sum;
    }
  }

  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* y = on->value.data();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * len * inner + in;
          S dot = 0;
          for (int64_t j = 0; j < len; ++j)
            dot += dy[base + j * inner] * y[base + j * inner];
          for (int64_t j = 0; j < len; ++j)
            dx[base + j * inner] +=
                y[base + j * inner] * (dy[base + j * inner] - dot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// masked softmax (attention weights)

/// Key-validity mask for attention. `valid` is batch x keys; a scores row
/// n maps to mask row n / (scores_batch / batch), so heads flattened into
/// the leading dimension share their sentence's mask. With `causal`, query
/// position i additionally only sees keys j <= i.
struct AttnMask {
  int batch = 0;
  int keys = 0;
  std::vector<uint8_t> valid;
  bool causal = false;

  bool key_valid(int b, int j) const { return valid[size_t(b) * keys + j] != 0; }
};

/// Softmax over the key axis of scores [n, q, k] restricted to unmasked
/// keys; masked keys get exactly zero weight. A fully-masked row takes the
/// sentinel path: all weight on key 0 and no gradient through the row.
template <class S>
Tensor<S> masked_softmax(const Tensor<S>& scores, const AttnMask& mask) {
  if (scores.rank() != 3)
    shape_error("masked_softmax: scores must be rank 3, got " +
                shape_str(scores.shape()));
  const int n = scores.dim(0), q = scores.dim(1), k = scores.dim(2);
  if (mask.keys != k || mask.batch <= 0 || n % mask.batch != 0)
    shape_error("masked_softmax: mask " + std::to_string(mask.batch) + "x" +
                std::to_string(mask.keys) + " incompatible with scores " +
                shape_str(scores.shape()));
  const int group = n / mask.batch;

  Tensor<S> out = Tensor<S>::zeros(scores.shape());
  const S* px = scores.value().data();
  S* py = out.value().data();
  for (int ni = 0; ni < n; ++ni) {
    const int b = ni / group;
    for (int qi = 0; qi < q; ++qi) {
      const int64_t base = (int64_t(ni) * q + qi) * k;
      S mx = 0;
      bool any = false;
      for (int j = 0; j < k; ++j) {
        if (!mask.key_valid(b, j) || (mask.causal && j > qi)) continue;
        S v = px[base + j];
        mx = any ? std::max(mx, v) : v;
        any = true;
      }
      if (!any) {
        py[base + 0] = S(1);  // sentinel: empty attention span
        continue;
      }
      S sum = 0;
      for (int j = 0; j < k; ++j) {
        if (!mask.key_valid(b, j) || (mask.causal && j > qi)) continue;
        S e = std::exp(px[base + j] - mx);
        py[base + j] = e;
        sum += e;
      }
      for (int j = 0; j < k; ++j) py[base + j] /= sum;
    }
  }

  if (detail::recording<S>({&scores})) {
    out.node()->requires_grad = true;
    auto xn = scores.node();
    auto on = out.node();
    detail::record_op<S>({&scores}, out, [=]() {
      xn->ensure_grad();
      const S* y = on->value.data();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int ni = 0; ni < n; ++ni) {
        const int b = ni / group;
        for (int qi = 0; qi < q; ++qi) {
          const int64_t base = (int64_t(ni) * q + qi) * k;
          bool any = false;
          for (int j = 0; j < k && !any; ++j)
            any = mask.key_valid(b, j) && (!mask.causal || j <= qi);
          if (!any) continue;  // sentinel row is constant
          S dot = 0;
          for (int j = 0; j < k; ++j) dot += dy[base + j] * y[base + j];
          for (int j = 0; j < k; ++j) {
            if (!mask.key_valid(b, j) || (mask.causal && j > qi)) continue;
            dx[base + j] += y[base + j] * (dy[base + j] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm

/// Layer normalization over the last axis followed by the gamma/beta
/// affine map. gamma and beta are length-d vectors; eps must be positive.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, double eps = 1e-5) {
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const int d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d)
    shape_error("layer_norm: gamma/beta length must match last dim " +
                std::to_string(d));
  const int64_t rows = x.size() / d;

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> inv_std(size_t(rows), S(0)), mean(size_t(rows), S(0));
  const S* px = x.value().data();
  const S* pg = gamma.value().data();
  const S* pb = beta.value().data();
  S* py = out.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= S(d);
    S var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= S(d);
    S is = S(1) / std::sqrt(var + S(eps));
    mean[size_t(r)] = mu;
    inv_std[size_t(r)] = is;
    S* yr = py + r * d;
    for (int j = 0; j < d; ++j) yr[j] = pg[j] * ((xr[j] - mu) * is) + pb[j];
  }

  if (detail::recording<S>({&x, &gamma, &beta})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node();
    detail::record_op<S>({&x, &gamma, &beta}, out,
                         [=, mean = std::move(mean),
                          inv_std = std::move(inv_std)]() {
      const S* dy = on->grad.data();
      const S* xv = xn->value.data();
      const S* gv = gn->value.data();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const S mu = mean[size_t(r)];
        const S is = inv_std[size_t(r)];
        const S* xr = xv + r * d;
        const S* dyr = dy + r * d;
        if (gn->requires_grad || bn->requires_grad) {
          for (int j = 0; j < d; ++j) {
            if (gn->requires_grad)
              gn->grad[size_t(j)] += dyr[j] * (xr[j] - mu) * is;
            if (bn->requires_grad) bn->grad[size_t(j)] += dyr[j];
          }
        }
        if (xn->requires_grad) {
          // dxhat = dy * gamma; dx = is * (dxhat - mean(dxhat)
          //                                - xhat * mean(dxhat * xhat))
          S sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int j = 0; j < d; ++j) {
            S xhat = (xr[j] - mu) * is;
            S dxhat = dyr[j] * gv[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          S* dxr = xn->grad.data() + r * d;
          for (int j = 0; j < d; ++j) {
            S xhat = (xr[j] - mu) * is;
            S dxhat = dyr[j] * gv[j];
            dxr[j] += is * (dxhat - sum_dxhat / S(d) -
                            xhat * sum_dxhat_xhat / S(d));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout / noise

/// Inverted dropout: in training each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p); inference returns the input
/// unchanged. p = 0 is the identity and consumes no draws.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool training,
                  RngStream& rng) {
  if (p < 0 || p >= 1)
    throw std::invalid_argument("dropout: p must be in [0, 1), got " +
                                std::to_string(p));
  if (!training || p == 0) return x;

  const int64_t n = x.size();
  std::vector<S> keep(size_t(n), S(0));
  const S scale = S(1.0 / (1.0 - p));
  for (int64_t i = 0; i < n; ++i)
    keep[size_t(i)] = rng.uniform() < p ? S(0) : scale;

  std::vector<S> vals(size_t(n), S(0));
  const S* px = x.value().data();
  for (int64_t i = 0; i < n; ++i) vals[size_t(i)] = px[i] * keep[size_t(i)];
  Tensor<S> out = Tensor<S>::from(x.shape(), std::move(vals));

  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=, keep = std::move(keep)]() {
      xn->ensure_grad();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * keep[size_t(i)];
    });
  }
  return out;
}

/// I.i.d. N(0, sigma^2) leaf tensor. sigma = 0 returns exact zeros without
/// consuming any draws, so a disabled noise path leaves the stream
/// untouched.
template <class S>
Tensor<S> gaussian_sample(Shape shape, double sigma, RngStream& rng) {
  if (sigma < 0) throw std::invalid_argument("gaussian_sample: sigma < 0");
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  if (sigma == 0) return out;
  for (S& v : out.value()) v = S(rng.gaussian(sigma));
  return out;
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

/// Binary broadcast: shapes must be equal, or the smaller operand must be
/// either a single element or a trailing-suffix of the larger shape.
template <class S>
void check_broadcast(const Tensor<S>& a, const Tensor<S>& b,
                     const char* opname) {
  const Shape& big = a.size() >= b.size() ? a.shape() : b.shape();
  const Shape& small = a.size() >= b.size() ? b.shape() : a.shape();
  if (numel(small) == 1) return;
  if (small.size() > big.size())
    shape_error(std::string(opname) + ": incompatible shapes " +
                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i])
      shape_error(std::string(opname) + ": incompatible shapes " +
                  shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

template <class S, class Fwd, class BwdA, class BwdB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b,
                    const char* opname, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  check_broadcast(a, b, opname);
  const int64_t na = a.size(), nb = b.size();
  const bool a_big = na >= nb;
  const Tensor<S>& big = a_big ? a : b;
  const int64_t n = big.size();
  // Suffix broadcasting repeats the smaller operand block-periodically, so
  // indexing needs no modulo: position i maps to i, and the smaller side
  // cycles through [0, block).
  const int64_t block = a_big ? nb : na;

  std::vector<S> vals(size_t(n), S(0));
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  if (na == nb) {
    for (int64_t i = 0; i < n; ++i) vals[size_t(i)] = fwd(pa[i], pb[i]);
  } else if (a_big) {
    for (int64_t base = 0; base < n; base += block)
      for (int64_t j = 0; j < block; ++j)
        vals[size_t(base + j)] = fwd(pa[base + j], pb[j]);
  } else {
    for (int64_t base = 0; base < n; base += block)
      for (int64_t j = 0; j < block; ++j)
        vals[size_t(base + j)] = fwd(pa[j], pb[base + j]);
  }
  Tensor<S> out = Tensor<S>::from(big.shape(), std::move(vals));

  if (recording<S>({&a, &b})) {
    out.node()->requires_grad = true;
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    record_op<S>({&a, &b}, out, [=]() {
      const S* dy = on->grad.data();
      const S* av = an->value.data();
      const S* bv = bn->value.data();
      auto index_a = [&](int64_t i, int64_t j) {
        return na == nb ? i + j : (a_big ? i + j : j);
      };
      auto index_b = [&](int64_t i, int64_t j) {
        return na == nb ? i + j : (a_big ? j : i + j);
      };
      if (an->requires_grad) {
        an->ensure_grad();
        S* da = an->grad.data();
        for (int64_t base = 0; base < n; base += block)
          for (int64_t j = 0; j < block; ++j)
            da[index_a(base, j)] +=
                bwd_a(dy[base + j], av[index_a(base, j)], bv[index_b(base, j)]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        S* db = bn->grad.data();
        for (int64_t base = 0; base < n; base += block)
          for (int64_t j = 0; j < block; ++j)
            db[index_b(base, j)] +=
                bwd_b(dy[base + j], av[index_a(base, j)], bv[index_b(base, j)]);
      }
    });
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S dy, S, S) { return dy; }, [](S dy, S, S) { return dy; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S dy, S, S) { return dy; }, [](S dy, S, S) { return -dy; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S dy, S, S y) { return dy * y; }, [](S dy, S x, S) { return dy * x; });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, double c) {
  std::vector<S> vals(x.value().begin(), x.value().end());
  for (S& v : vals) v *= S(c);
  Tensor<S> out = Tensor<S>::from(x.shape(), std::move(vals));
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int64_t i = 0; i < int64_t(xn->value.size()); ++i)
        dx[i] += S(c) * dy[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> vals(size_t(x.size()), S(0));
  const S* px = x.value().data();
  for (int64_t i = 0; i < x.size(); ++i) {
    S v = px[i];
    vals[size_t(i)] =
        v >= 0 ? S(1) / (S(1) + std::exp(-v))
               : std::exp(v) / (S(1) + std::exp(v));
  }
  Tensor<S> out = Tensor<S>::from(x.shape(), std::move(vals));
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* y = on->value.data();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int64_t i = 0; i < int64_t(xn->value.size()); ++i)
        dx[i] += dy[i] * y[i] * (S(1) - y[i]);
    });
  }
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  std::vector<S> vals(size_t(x.size()), S(0));
  const S* px = x.value().data();
  for (int64_t i = 0; i < x.size(); ++i) vals[size_t(i)] = std::max(S(0), px[i]);
  Tensor<S> out = Tensor<S>::from(x.shape(), std::move(vals));
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* xv = xn->value.data();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int64_t i = 0; i < int64_t(xn->value.size()); ++i)
        if (xv[i] > 0) dx[i] += dy[i];
    });
  }
  return out;
}

/// Concatenation along the last axis; all leading dimensions must agree.
template <class S>
Tensor<S> concat_last(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != b.rank())
    shape_error("concat_last: rank mismatch " + shape_str(a.shape()) +
                " vs " + shape_str(b.shape()));
  for (int i = 0; i + 1 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      shape_error("concat_last: leading dims differ " + shape_str(a.shape()) +
                  " vs " + shape_str(b.shape()));
  const int da = a.dim(-1), db = b.dim(-1);
  const int64_t rows = a.size() / da;
  Shape out_shape = a.shape();
  out_shape.back() = da + db;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* py = out.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(pa + r * da, pa + (r + 1) * da, py + r * (da + db));
    std::copy(pb + r * db, pb + (r + 1) * db, py + r * (da + db) + da);
  }
  if (detail::recording<S>({&a, &b})) {
    out.node()->requires_grad = true;
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    detail::record_op<S>({&a, &b}, out, [=]() {
      const S* dy = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < da; ++j)
            an->grad[size_t(r * da + j)] += dy[r * (da + db) + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < db; ++j)
            bn->grad[size_t(r * db + j)] += dy[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

/// Sum of all elements, as a [1] tensor.
template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = 0;
  for (S v : x.value()) total += v;
  Tensor<S> out = Tensor<S>::from({1}, {total});
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S dy = on->grad[0];
      for (S& g : xn->grad) g += dy;
    });
  }
  return out;
}

/// Copy into a new shape with the same element count.
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                shape_str(new_shape));
  Tensor<S> out = Tensor<S>::from(std::move(new_shape), x.value());
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// head split/merge (fixed permutations used by multi-head attention)

/// [batch, len, d] -> [batch*heads, len, d/heads].
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int heads) {
  if (x.rank() != 3) shape_error("split_heads: need rank 3 input");
  const int b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (d % heads != 0)
    shape_error("split_heads: d=" + std::to_string(d) +
                " not divisible by heads=" + std::to_string(heads));
  const int hd = d / heads;
  Tensor<S> out = Tensor<S>::zeros({b * heads, l, hd});
  const S* px = x.value().data();
  S* py = out.value().data();
  for (int bi = 0; bi < b; ++bi)
    for (int li = 0; li < l; ++li)
      for (int h = 0; h < heads; ++h)
        std::copy(px + ((int64_t(bi) * l + li) * d + h * hd),
                  px + ((int64_t(bi) * l + li) * d + (h + 1) * hd),
                  py + ((int64_t(bi) * heads + h) * l + li) * hd);
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int bi = 0; bi < b; ++bi)
        for (int li = 0; li < l; ++li)
          for (int h = 0; h < heads; ++h)
            for (int j = 0; j < hd; ++j)
              dx[(int64_t(bi) * l + li) * d + h * hd + j] +=
                  dy[((int64_t(bi) * heads + h) * l + li) * hd + j];
    });
  }
  return out;
}

/// [batch*heads, len, hd] -> [batch, len, heads*hd]; inverse of split_heads.
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, int heads) {
  if (x.rank() != 3) shape_error("merge_heads: need rank 3 input");
  const int bh = x.dim(0), l = x.dim(1), hd = x.dim(2);
  if (bh % heads != 0)
    shape_error("merge_heads: leading dim not divisible by heads");
  const int b = bh / heads, d = heads * hd;
  Tensor<S> out = Tensor<S>::zeros({b, l, d});
  const S* px = x.value().data();
  S* py = out.value().data();
  for (int bi = 0; bi < b; ++bi)
    for (int li = 0; li < l; ++li)
      for (int h = 0; h < heads; ++h)
        std::copy(px + ((int64_t(bi) * heads + h) * l + li) * hd,
                  px + ((int64_t(bi) * heads + h) * l + li) * hd + hd,
                  py + (int64_t(bi) * l + li) * d + h * hd);
  if (detail::recording<S>({&x})) {
    out.node()->requires_grad = true;
    auto xn = x.node();
    auto on = out.node();
    detail::record_op<S>({&x}, out, [=]() {
      xn->ensure_grad();
      const S* dy = on->grad.data();
      S* dx = xn->grad.data();
      for (int bi = 0; bi < b; ++bi)
        for (int li = 0; li < l; ++li)
          for (int h = 0; h < heads; ++h)
            for (int j = 0; j < hd; ++j)
              dx[((int64_t(bi) * heads + h) * l + li) * hd + j] +=
                  dy[(int64_t(bi) * l + li) * d + h * hd + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// integer id matrices and embedding lookup

/// Dense matrix of token ids (a batch of padded sequences).
struct IdMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<int32_t> ids;

  IdMatrix() = default;
  IdMatrix(int r, int c, int32_t fill = 0)
      : rows(r), cols(c), ids(size_t(r) * size_t(c), fill) {}

  int32_t& at(int r, int c) { return ids[size_t(r) * cols + c]; }
  int32_t at(int r, int c) const { return ids[size_t(r) * cols + c]; }
  int64_t size() const { return int64_t(rows) * cols; }
};

/// Gather rows of `table` by id, times `mult`: out[r, c, :] =
/// mult * table[ids(r, c), :].
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const IdMatrix& ids,
                           double mult = 1.0) {
  if (table.rank() != 2) shape_error("embedding_lookup: table must be rank 2");
  const int v = table.dim(0), d = table.dim(1);
  for (int32_t id : ids.ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding_lookup: id " +
                                  std::to_string(id) + " outside vocab of " +
                                  std::to_string(v));
  Tensor<S> out = Tensor<S>::zeros({ids.rows, ids.cols, d});
  const S* pt = table.value().data();
  S* py = out.value().data();
  for (int64_t i = 0; i < ids.size(); ++i) {
    const S* row = pt + int64_t(ids.ids[size_t(i)]) * d;
    for (int j = 0; j < d; ++j) py[i * d + j] = S(mult) * row[j];
  }
  if (detail::recording<S>({&table})) {
    out.node()->requires_grad = true;
    auto tn = table.node();
    auto on = out.node();
    detail::record_op<S>({&table}, out, [=]() {
      tn->ensure_grad();
      const S* dy = on->grad.data();
      S* dt = tn->grad.data();
      for (int64_t i = 0; i < int64_t(ids.ids.size()); ++i) {
        S* row = dt + int64_t(ids.ids[size_t(i)]) * d;
        for (int j = 0; j < d; ++j) row[j] += S(mult) * dy[i * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// label-smoothed cross entropy

/// Label-smoothed cross entropy averaged over non-PAD target positions.
/// The smoothed target distribution is (1-eps) on the gold id plus eps/V
/// spread uniformly over the full vocabulary.
template <class S>
Tensor<S> cross_entropy_label_smoothed(const Tensor<S>& logits,
                                       const IdMatrix& targets, int pad_id,
                                       double smoothing) {
  if (logits.rank() != 3)
    shape_error("cross_entropy: logits must be [batch, len, vocab]");
  const int b = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
  if (targets.rows != b || targets.cols != t)
    shape_error("cross_entropy: target grid " + std::to_string(targets.rows) +
                "x" + std::to_string(targets.cols) + " vs logits " +
                shape_str(logits.shape()));
  if (smoothing < 0 || smoothing >= 1)
    throw std::invalid_argument("cross_entropy: smoothing must be in [0,1)");

  int64_t count = 0;
  for (int32_t id : targets.ids)
    if (id != pad_id) ++count;
  if (count == 0)
    throw std::invalid_argument("cross_entropy: every target position is PAD");

  const S eps = S(smoothing);
  const S* px = logits.value().data();
  double total = 0;
  for (int64_t pos = 0; pos < int64_t(b) * t; ++pos) {
    const int32_t y = targets.ids[size_t(pos)];
    if (y == pad_id) continue;
    const S* row = px + pos * v;
    S mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S sum_exp = 0, sum_logits = 0;
    for (int j = 0; j < v; ++j) {
      sum_exp += std::exp(row[j] - mx);
      sum_logits += row[j];
    }
    const S log_z = mx + std::log(sum_exp);
    // -sum_k q_k log p_k with q = (1-eps) one_hot + eps/V
    total += double(log_z - (S(1) - eps) * row[y] -
                    eps / S(v) * sum_logits);
  }
  Tensor<S> out = Tensor<S>::from({1}, {S(total / double(count))});

  if (detail::recording<S>({&logits})) {
    out.node()->requires_grad = true;
    auto xn = logits.node();
    auto on = out.node();
    detail::record_op<S>({&logits}, out, [=]() {
      xn->ensure_grad();
      const S dy = on->grad[0];
      const S* xv = xn->value.data();
      S* dx = xn->grad.data();
      const S inv_count = S(1) / S(count);
      for (int64_t pos = 0; pos < int64_t(b) * t; ++pos) {
        const int32_t y = targets.ids[size_t(pos)];
        if (y == pad_id) continue;
        const S* row = xv + pos * v;
        S mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        S sum_exp = 0;
        for (int j = 0; j < v; ++j) sum_exp += std::exp(row[j] - mx);
        S* drow = dx + pos * v;
        for (int j = 0; j < v; ++j) {
          S p = std::exp(row[j] - mx) / sum_exp;
          S q = eps / S(v) + (j == y ? S(1) - eps : S(0));
          drow[j] += dy * inv_count * (p - q);
        }
      }
    });
  }
  return out;
}

}  // namespace ctxmt
