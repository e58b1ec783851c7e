#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "smoltolk/common.hpp"
#include "smoltolk/threading.hpp"

namespace smoltolk {

// Reverse-mode autodiff over dense row-major tensors. Scalar type is a
// template parameter: float for training, double for gradient verification.
//
// Determinism: every kernel either parallelizes over independent output
// elements or runs its cross-element accumulations serially in a fixed
// order, so results are bit-identical for any thread count.

namespace detail {

template <class S>
struct Node {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // allocated on demand, same length as val
  std::vector<S> aux;   // op-specific saved values for backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  i64 numel() const { return static_cast<i64>(val.size()); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

}  // namespace detail

// Thread-local switch: with grads disabled, ops build no graph (pure
// inference). RAII guard below.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <class S>
class Tensor {
 public:
  using NodeT = detail::Node<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(shape);
    n->val.assign(static_cast<size_t>(numel_of(n->shape)), S(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<i64>(data.size()))
      throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v) {
    auto t = zeros(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor scalar(S v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  i64 dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  i64 numel() const { return node_->numel(); }

  S* data() { return node_->val.data(); }
  const S* data() const { return node_->val.data(); }
  std::vector<S>& values() { return node_->val; }
  const std::vector<S>& values() const { return node_->val; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  S* grad() {
    node_->ensure_grad();
    return node_->grad.data();
  }
  const std::vector<S>& grad_values() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->val[0];
  }

  // Run reverse-mode accumulation from this scalar.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
    std::vector<NodeT*> order;
    topo_sort(order);
    for (NodeT* n : order)
      if (n->requires_grad) n->ensure_grad();
    node_->ensure_grad();
    node_->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

  std::shared_ptr<NodeT> node() const { return node_; }

  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

 private:
  void topo_sort(std::vector<NodeT*>& order) const {
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        NodeT* p = n->parents[idx++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<NodeT> node_;
};

namespace detail {

template <class S>
Tensor<S> make_out(Shape shape) {
  return Tensor<S>::zeros(std::move(shape));
}

template <class S, class... Parents>
void wire(Tensor<S>& out, std::function<void(Node<S>&)> bw, const Parents&... parents) {
  bool rg = (parents.requires_grad() || ...);
  if (!GradMode::enabled() || !rg) return;
  out.node()->requires_grad = true;
  (out.node()->parents.push_back(parents.node()), ...);
  out.node()->backward = std::move(bw);
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

constexpr i64 kParallelCutoff = 16384;

template <class S>
void ewise_parallel(i64 n, const std::function<void(i64, i64)>& fn) {
  if (n < kParallelCutoff) {
    fn(0, n);
  } else {
    parallel_for(n, fn);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

// add(a, b): same shape; or b is a length-C vector broadcast over the rows of
// a (R, C); or b is a scalar.
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  using Node = detail::Node<S>;
  const i64 n = a.numel();
  Tensor<S> out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();

  if (b.shape() == a.shape()) {
    detail::ewise_parallel<S>(n, [&](i64 lo, i64 hi) {
      for (i64 i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
    });
    detail::wire<S>(
        out,
        [](Node& o) {
          Node* an = o.parents[0].get();
          Node* bn = o.parents[1].get();
          const S* g = o.grad.data();
          const i64 m = o.numel();
          if (an->requires_grad) {
            S* ga = an->grad.data();
            for (i64 i = 0; i < m; ++i) ga[i] += g[i];
          }
          if (bn->requires_grad) {
            S* gb = bn->grad.data();
            for (i64 i = 0; i < m; ++i) gb[i] += g[i];
          }
        },
        a, b);
    return out;
  }

  if (b.numel() == 1) {
    const S c = pb[0];
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] + c;
    detail::wire<S>(
        out,
        [](Node& o) {
          Node* an = o.parents[0].get();
          Node* bn = o.parents[1].get();
          const S* g = o.grad.data();
          const i64 m = o.numel();
          if (an->requires_grad) {
            S* ga = an->grad.data();
            for (i64 i = 0; i < m; ++i) ga[i] += g[i];
          }
          if (bn->requires_grad) bn->grad[0] += fixed_tree_sum(g, m);
        },
        a, b);
    return out;
  }

  if (a.ndim() == 2 && b.ndim() == 1 && b.dim(0) == a.dim(1)) {
    const i64 rows = a.dim(0), cols = a.dim(1);
    detail::ewise_parallel<S>(rows, [&](i64 lo, i64 hi) {
      for (i64 r = lo; r < hi; ++r)
        for (i64 c = 0; c < cols; ++c) po[r * cols + c] = pa[r * cols + c] + pb[c];
    });
    detail::wire<S>(
        out,
        [rows, cols](Node& o) {
          Node* an = o.parents[0].get();
          Node* bn = o.parents[1].get();
          const S* g = o.grad.data();
          if (an->requires_grad) {
            S* ga = an->grad.data();
            const i64 m = o.numel();
            for (i64 i = 0; i < m; ++i) ga[i] += g[i];
          }
          if (bn->requires_grad) {
            S* gb = bn->grad.data();
            for (i64 r = 0; r < rows; ++r)  // serial: deterministic bias reduction
              for (i64 c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
          }
        },
        a, b);
    return out;
  }

  throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  using Node = detail::Node<S>;
  detail::check_same_shape("mul", a, b);
  const i64 n = a.numel();
  Tensor<S> out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  detail::ewise_parallel<S>(n, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
  });
  detail::wire<S>(
      out,
      [](Node& o) {
        Node* an = o.parents[0].get();
        Node* bn = o.parents[1].get();
        const S* g = o.grad.data();
        const i64 m = o.numel();
        if (an->requires_grad) {
          S* ga = an->grad.data();
          const S* vb = bn->val.data();
          for (i64 i = 0; i < m; ++i) ga[i] += g[i] * vb[i];
        }
        if (bn->requires_grad) {
          S* gb = bn->grad.data();
          const S* va = an->val.data();
          for (i64 i = 0; i < m; ++i) gb[i] += g[i] * va[i];
        }
      },
      a, b);
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  using Node = detail::Node<S>;
  const i64 n = a.numel();
  Tensor<S> out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (i64 i = 0; i < n; ++i) po[i] = pa[i] * c;
  detail::wire<S>(
      out,
      [c](Node& o) {
        Node* an = o.parents[0].get();
        if (!an->requires_grad) return;
        const S* g = o.grad.data();
        S* ga = an->grad.data();
        const i64 m = o.numel();
        for (i64 i = 0; i < m; ++i) ga[i] += g[i] * c;
      },
      a);
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
  using Node = detail::Node<S>;
  const i64 n = a.numel();
  Tensor<S> out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  detail::ewise_parallel<S>(n, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) {
      S sg = S(1) / (S(1) + std::exp(-pa[i]));
      po[i] = pa[i] * sg;
    }
  });
  detail::wire<S>(
      out,
      [](Node& o) {
        Node* an = o.parents[0].get();
        if (!an->requires_grad) return;
        const S* g = o.grad.data();
        const S* x = an->val.data();
        S* ga = an->grad.data();
        const i64 m = o.numel();
        detail::ewise_parallel<S>(m, [&](i64 lo, i64 hi) {
          for (i64 i = lo; i < hi; ++i) {
            S sg = S(1) / (S(1) + std::exp(-x[i]));
            ga[i] += g[i] * sg * (S(1) + x[i] * (S(1) - sg));
          }
        });
      },
      a);
  return out;
}

// x * ln(x) with the 0 * ln 0 = 0 convention (entropy terms).
template <class S>
Tensor<S> xlogx(const Tensor<S>& a) {
  using Node = detail::Node<S>;
  const i64 n = a.numel();
  Tensor<S> out = detail::make_out<S>(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (i64 i = 0; i < n; ++i) po[i] = pa[i] > S(0) ? pa[i] * std::log(pa[i]) : S(0);
  detail::wire<S>(
      out,
      [](Node& o) {
        Node* an = o.parents[0].get();
        if (!an->requires_grad) return;
        const S* g = o.grad.data();
        const S* x = an->val.data();
        S* ga = an->grad.data();
        const i64 m = o.numel();
        for (i64 i = 0; i < m; ++i)
          if (x[i] > S(0)) ga[i] += g[i] * (std::log(x[i]) + S(1));
      },
      a);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products and column concatenation
// ---------------------------------------------------------------------------

namespace detail {

// C[mxn] (+)= A[mxk] * B[kxn]; row-major, (i,k,j) loop order for contiguous
// vectorizable inner loops. Each output row is written by one chunk only.
template <class S>
void mm_accum(const S* a, const S* b, S* c, i64 m, i64 k, i64 n, bool zero_first) {
  parallel_for(m, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) {
      S* crow = c + i * n;
      if (zero_first) std::fill(crow, crow + n, S(0));
      const S* arow = a + i * k;
      for (i64 p = 0; p < k; ++p) {
        const S av = arow[p];
        if (av == S(0)) continue;
        const S* brow = b + p * n;
        for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// dA[mxk] += G[mxn] * B^T; dA[i,p] = dot(G[i,:], B[p,:])
template <class S>
void mm_grad_a(const S* g, const S* b, S* da, i64 m, i64 k, i64 n) {
  parallel_for(m, [&](i64 lo, i64 hi) {
    for (i64 i = lo; i < hi; ++i) {
      const S* grow = g + i * n;
      S* darow = da + i * k;
      for (i64 p = 0; p < k; ++p) {
        const S* brow = b + p * n;
        S acc = 0;
        for (i64 j = 0; j < n; ++j) acc += grow[j] * brow[j];
        darow[p] += acc;
      }
    }
  });
}

// dB[kxn] += A^T * G; row p of dB accumulated serially over i (deterministic)
template <class S>
void mm_grad_b(const S* a, const S* g, S* db, i64 m, i64 k, i64 n) {
  parallel_for(k, [&](i64 lo, i64 hi) {
    for (i64 p = lo; p < hi; ++p) {
      S* dbrow = db + p * n;
      for (i64 i = 0; i < m; ++i) {
        const S av = a[i * k + p];
        if (av == S(0)) continue;
        const S* grow = g + i * n;
        for (i64 j = 0; j < n; ++j) dbrow[j] += av * grow[j];
      }
    }
  });
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  using Node = detail::Node<S>;
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = detail::make_out<S>({m, n});
  detail::mm_accum(a.data(), b.data(), out.data(), m, k, n, true);
  detail::wire<S>(
      out,
      [m, k, n](Node& o) {
        Node* an = o.parents[0].get();
        Node* bn = o.parents[1].get();
        const S* g = o.grad.data();
        if (an->requires_grad) detail::mm_grad_a(g, bn->val.data(), an->grad.data(), m, k, n);
        if (bn->requires_grad) detail::mm_grad_b(an->val.data(), g, bn->grad.data(), m, k, n);
      },
      a, b);
  return out;
}

template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  using Node = detail::Node<S>;
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const i64 r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<S> out = detail::make_out<S>({r, ca + cb});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (i64 i = 0; i < r; ++i) {
    std::copy(pa + i * ca, pa + (i + 1) * ca, po + i * (ca + cb));
    std::copy(pb + i * cb, pb + (i + 1) * cb, po + i * (ca + cb) + ca);
  }
  detail::wire<S>(
      out,
      [r, ca, cb](Node& o) {
        Node* an = o.parents[0].get();
        Node* bn = o.parents[1].get();
        const S* g = o.grad.data();
        for (i64 i = 0; i < r; ++i) {
          if (an->requires_grad) {
            S* ga = an->grad.data() + i * ca;
            const S* gr = g + i * (ca + cb);
            for (i64 j = 0; j < ca; ++j) ga[j] += gr[j];
          }
          if (bn->requires_grad) {
            S* gb = bn->grad.data() + i * cb;
            const S* gr = g + i * (ca + cb) + ca;
            for (i64 j = 0; j < cb; ++j) gb[j] += gr[j];
          }
        }
      },
      a, b);
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalization and softmax
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& gain, S eps = S(1e-5)) {
  using Node = detail::Node<S>;
  if (x.ndim() != 2 || gain.ndim() != 1 || gain.dim(0) != x.dim(1))
    throw ShapeError("rmsnorm: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(gain.shape()));
  const i64 rows = x.dim(0), cols = x.dim(1);
  Tensor<S> out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  const S* pg = gain.data();
  S* po = out.data();
  parallel_for(rows, [&](i64 lo, i64 hi) {
    for (i64 r = lo; r < hi; ++r) {
      const S* xr = px + r * cols;
      S ms = 0;
      for (i64 c = 0; c < cols; ++c) ms += xr[c] * xr[c];
      ms /= static_cast<S>(cols);
      const S inv = S(1) / std::sqrt(ms + eps);
      S* orow = po + r * cols;
      for (i64 c = 0; c < cols; ++c) orow[c] = xr[c] * inv * pg[c];
    }
  });
  detail::wire<S>(
      out,
      [rows, cols, eps](Node& o) {
        Node* xn = o.parents[0].get();
        Node* gn = o.parents[1].get();
        const S* g = o.grad.data();
        const S* xv = xn->val.data();
        const S* gv = gn->val.data();
        if (xn->requires_grad) {
          S* gx = xn->grad.data();
          parallel_for(rows, [&](i64 lo, i64 hi) {
            for (i64 r = lo; r < hi; ++r) {
              const S* xr = xv + r * cols;
              const S* gr = g + r * cols;
              S ms = 0;
              for (i64 c = 0; c < cols; ++c) ms += xr[c] * xr[c];
              ms /= static_cast<S>(cols);
              const S inv = S(1) / std::sqrt(ms + eps);
              S dot = 0;  // sum_c g_c * gain_c * x_c
              for (i64 c = 0; c < cols; ++c) dot += gr[c] * gv[c] * xr[c];
              const S coef = dot * inv * inv * inv / static_cast<S>(cols);
              S* gxr = gx + r * cols;
              for (i64 c = 0; c < cols; ++c) gxr[c] += gr[c] * gv[c] * inv - coef * xr[c];
            }
          });
        }
        if (gn->requires_grad) {
          S* gg = gn->grad.data();
          for (i64 r = 0; r < rows; ++r) {  // serial over rows
            const S* xr = xv + r * cols;
            const S* gr = g + r * cols;
            S ms = 0;
            for (i64 c = 0; c < cols; ++c) ms += xr[c] * xr[c];
            ms /= static_cast<S>(cols);
            const S inv = S(1) / std::sqrt(ms + eps);
            for (i64 c = 0; c < cols; ++c) gg[c] += gr[c] * xr[c] * inv;
          }
        }
      },
      x, gain);
  return out;
}

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  using Node = detail::Node<S>;
  if (x.ndim() != 2) throw ShapeError("softmax_lastdim expects 2-d, got " + shape_str(x.shape()));
  const i64 rows = x.dim(0), cols = x.dim(1);
  Tensor<S> out = detail::make_out<S>(x.shape());
  const S* px = x.data();
  S* po = out.data();
  parallel_for(rows, [&](i64 lo, i64 hi) {
    for (i64 r = lo; r < hi; ++r) {
      const S* xr = px + r * cols;
      S* orow = po + r * cols;
      S mx = xr[0];
      for (i64 c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
      S sum = 0;
      for (i64 c = 0; c < cols; ++c) {
        orow[c] = std::exp(xr[c] - mx);
        sum += orow[c];
      }
      const S inv = S(1) / sum;
      for (i64 c = 0; c < cols; ++c) orow[c] *= inv;
    }
  });
  detail::wire<S>(
      out,
      [rows, cols](Node& o) {
        Node* xn = o.parents[0].get();
        if (!xn->requires_grad) return;
        const S* g = o.grad.data();
        const S* p = o.val.data();
        S* gx = xn->grad.data();
        parallel_for(rows, [&](i64 lo, i64 hi) {
          for (i64 r = lo; r < hi; ++r) {
            const S* pr = p + r * cols;
            const S* gr = g + r * cols;
            S dot = 0;
            for (i64 c = 0; c < cols; ++c) dot += pr[c] * gr[c];
            S* gxr = gx + r * cols;
            for (i64 c = 0; c < cols; ++c) gxr[c] += pr[c] * (gr[c] - dot);
          }
        });
      },
      x);
  return out;
}

// Per-row negative log-likelihood of the target column: returns shape (R).
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<i32>& targets) {
  using Node = detail::Node<S>;
  if (logits.ndim() != 2 || static_cast<i64>(targets.size()) != logits.dim(0))
    throw ShapeError("cross_entropy_rows: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const i64 rows = logits.dim(0), cols = logits.dim(1);
  for (i32 t : targets)
    if (t < 0 || t >= cols) throw ValueError("cross_entropy_rows: target out of range");
  Tensor<S> out = detail::make_out<S>({rows});
  out.node()->aux.resize(static_cast<size_t>(rows));  // per-row logsumexp
  const S* pl = logits.data();
  S* po = out.data();
  S* lse = out.node()->aux.data();
  parallel_for(rows, [&](i64 lo, i64 hi) {
    for (i64 r = lo; r < hi; ++r) {
      const S* lr = pl + r * cols;
      S mx = lr[0];
      for (i64 c = 1; c < cols; ++c) mx = std::max(mx, lr[c]);
      S sum = 0;
      for (i64 c = 0; c < cols; ++c) sum += std::exp(lr[c] - mx);
      const S l = mx + std::log(sum);
      lse[r] = l;
      po[r] = l - lr[targets[static_cast<size_t>(r)]];
    }
  });
  detail::wire<S>(
      out,
      [rows, cols, targets](Node& o) {
        Node* ln = o.parents[0].get();
        if (!ln->requires_grad) return;
        const S* g = o.grad.data();
        const S* lv = ln->val.data();
        const S* lse = o.aux.data();
        S* gl = ln->grad.data();
        parallel_for(rows, [&](i64 lo, i64 hi) {
          for (i64 r = lo; r < hi; ++r) {
            const S* lr = lv + r * cols;
            S* glr = gl + r * cols;
            const S gr = g[r];
            for (i64 c = 0; c < cols; ++c) glr[c] += gr * std::exp(lr[c] - lse[r]);
            glr[targets[static_cast<size_t>(r)]] -= gr;
          }
        });
      },
      logits);
  return out;
}

// ---------------------------------------------------------------------------
// Lookups, gathers and row splicing
// ---------------------------------------------------------------------------

// Embedding over a logically concatenated table [low; high]: ids below
// low.rows index low, the rest index high. Keeping the halves as separate
// parameters makes group-wise freezing and optimizer masking trivial.
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& low, const Tensor<S>& high,
                           const std::vector<i32>& ids) {
  using Node = detail::Node<S>;
  if (low.ndim() != 2 || high.ndim() != 2 || low.dim(1) != high.dim(1))
    throw ShapeError("embedding_lookup: table shapes " + shape_str(low.shape()) + " vs " +
                     shape_str(high.shape()));
  const i64 split = low.dim(0), total = split + high.dim(0), d = low.dim(1);
  const i64 n = static_cast<i64>(ids.size());
  for (i32 id : ids)
    if (id < 0 || id >= total) throw ValueError("embedding_lookup: id out of range");
  Tensor<S> out = detail::make_out<S>({n, d});
  const S* plo = low.data();
  const S* phi = high.data();
  S* po = out.data();
  for (i64 i = 0; i < n; ++i) {
    const i32 id = ids[static_cast<size_t>(i)];
    const S* src = id < split ? plo + static_cast<i64>(id) * d : phi + (id - split) * d;
    std::copy(src, src + d, po + i * d);
  }
  detail::wire<S>(
      out,
      [split, d, ids](Node& o) {
        Node* lo = o.parents[0].get();
        Node* hi = o.parents[1].get();
        const S* g = o.grad.data();
        const i64 n = static_cast<i64>(ids.size());
        for (i64 i = 0; i < n; ++i) {  // serial scatter-add
          const i32 id = ids[static_cast<size_t>(i)];
          const S* gr = g + i * d;
          if (id < split) {
            if (!lo->requires_grad) continue;
            S* dst = lo->grad.data() + static_cast<i64>(id) * d;
            for (i64 c = 0; c < d; ++c) dst[c] += gr[c];
          } else {
            if (!hi->requires_grad) continue;
            S* dst = hi->grad.data() + (id - split) * d;
            for (i64 c = 0; c < d; ++c) dst[c] += gr[c];
          }
        }
      },
      low, high);
  return out;
}

template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<i64>& idx) {
  using Node = detail::Node<S>;
  if (x.ndim() != 2) throw ShapeError("gather_rows expects 2-d, got " + shape_str(x.shape()));
  const i64 rows = x.dim(0), cols = x.dim(1);
  for (i64 i : idx)
    if (i < 0 || i >= rows) throw ValueError("gather_rows: index out of range");
  const i64 n = static_cast<i64>(idx.size());
  Tensor<S> out = detail::make_out<S>({n, cols});
  const S* px = x.data();
  S* po = out.data();
  for (i64 i = 0; i < n; ++i)
    std::copy(px + idx[static_cast<size_t>(i)] * cols, px + (idx[static_cast<size_t>(i)] + 1) * cols,
              po + i * cols);
  detail::wire<S>(
      out,
      [cols, idx](Node& o) {
        Node* xn = o.parents[0].get();
        if (!xn->requires_grad) return;
        const S* g = o.grad.data();
        S* gx = xn->grad.data();
        const i64 n = static_cast<i64>(idx.size());
        for (i64 i = 0; i < n; ++i) {  // serial scatter-add, idx may repeat
          S* dst = gx + idx[static_cast<size_t>(i)] * cols;
          const S* gr = g + i * cols;
          for (i64 c = 0; c < cols; ++c) dst[c] += gr[c];
        }
      },
      x);
  return out;
}

// Copy of `base` with base[idx[i], :] replaced by rows[i, :]. idx must not
// repeat (each output row has exactly one source).
template <class S>
Tensor<S> overwrite_rows(const Tensor<S>& base, const Tensor<S>& rows, const std::vector<i64>& idx) {
  using Node = detail::Node<S>;
  if (base.ndim() != 2 || rows.ndim() != 2 || base.dim(1) != rows.dim(1) ||
      rows.dim(0) != static_cast<i64>(idx.size()))
    throw ShapeError("overwrite_rows: incompatible shapes " + shape_str(base.shape()) + " vs " +
                     shape_str(rows.shape()));
  const i64 cols = base.dim(1);
  Tensor<S> out = detail::make_out<S>(base.shape());
  std::copy(base.data(), base.data() + base.numel(), out.data());
  const S* pr = rows.data();
  S* po = out.data();
  const i64 n = static_cast<i64>(idx.size());
  for (i64 i = 0; i < n; ++i)
    std::copy(pr + i * cols, pr + (i + 1) * cols, po + idx[static_cast<size_t>(i)] * cols);
  detail::wire<S>(
      out,
      [cols, idx](Node& o) {
        Node* bn = o.parents[0].get();
        Node* rn = o.parents[1].get();
        const S* g = o.grad.data();
        const i64 n = static_cast<i64>(idx.size());
        if (bn->requires_grad) {
          S* gb = bn->grad.data();
          const i64 m = o.numel();
          std::vector<char> replaced(static_cast<size_t>(o.shape[0]), 0);
          for (i64 i = 0; i < n; ++i) replaced[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
          for (i64 r = 0; r < o.shape[0]; ++r) {
            if (replaced[static_cast<size_t>(r)]) continue;
            for (i64 c = 0; c < cols; ++c) gb[r * cols + c] += g[r * cols + c];
          }
          (void)m;
        }
        if (rn->requires_grad) {
          S* gr = rn->grad.data();
          for (i64 i = 0; i < n; ++i) {
            const S* src = g + idx[static_cast<size_t>(i)] * cols;
            for (i64 c = 0; c < cols; ++c) gr[i * cols + c] += src[c];
          }
        }
      },
      base, rows);
  return out;
}

// ---------------------------------------------------------------------------
// Rotary position encoding
// ---------------------------------------------------------------------------

// Rotates each head_dim block of every row by its position angle; pairs are
// (j, j + head_dim/2). Works for query and key matrices alike (the head
// count is inferred from the column count).
template <class S>
Tensor<S> rotary_apply(const Tensor<S>& x, const std::vector<i32>& positions, int head_dim,
                       S base = S(10000)) {
  using Node = detail::Node<S>;
  if (x.ndim() != 2 || x.dim(1) % head_dim != 0 || head_dim % 2 != 0)
    throw ShapeError("rotary_apply: shape " + shape_str(x.shape()) + " with head_dim " +
                     std::to_string(head_dim));
  if (static_cast<i64>(positions.size()) != x.dim(0))
    throw ShapeError("rotary_apply: positions length mismatch");
  const i64 rows = x.dim(0), cols = x.dim(1);
  const int half = head_dim / 2;
  std::vector<S> freqs(static_cast<size_t>(half));
  for (int j = 0; j < half; ++j)
    freqs[static_cast<size_t>(j)] = std::pow(base, S(-2) * S(j) / S(head_dim));

  auto rotate = [rows, cols, head_dim, half, freqs, positions](const S* in, S* out, S sign) {
    parallel_for(rows, [&](i64 lo, i64 hi) {
      for (i64 r = lo; r < hi; ++r) {
        const S pos = static_cast<S>(positions[static_cast<size_t>(r)]);
        for (i64 h0 = 0; h0 < cols; h0 += head_dim) {
          const S* xi = in + r * cols + h0;
          S* xo = out + r * cols + h0;
          for (int j = 0; j < half; ++j) {
            const S theta = pos * freqs[static_cast<size_t>(j)];
            const S c = std::cos(theta), s = std::sin(theta) * sign;
            const S a = xi[j], b = xi[j + half];
            xo[j] = a * c - b * s;
            xo[j + half] = a * s + b * c;
          }
        }
      }
    });
  };

  Tensor<S> out = detail::make_out<S>(x.shape());
  rotate(x.data(), out.data(), S(1));
  detail::wire<S>(
      out,
      [rotate, cols](Node& o) {
        Node* xn = o.parents[0].get();
        if (!xn->requires_grad) return;
        std::vector<S> tmp(o.grad.size());
        rotate(o.grad.data(), tmp.data(), S(-1));  // transpose of a rotation
        S* gx = xn->grad.data();
        for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
        (void)cols;
      },
      x);
  return out;
}

// ---------------------------------------------------------------------------
// Segmented causal multi-head attention
// ---------------------------------------------------------------------------

using Segments = std::vector<std::pair<i64, i64>>;  // [begin, end) row ranges

// q: (N, H*hd); k, v: (N, KH*hd) with KH | H (grouped queries). Attention is
// causal and confined to each segment; rows outside every segment get zero
// output and propagate no gradient. Softmax probabilities are recomputed in
// backward rather than stored.
template <class S>
Tensor<S> segmented_causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                     const Segments& segs, int n_heads, int n_kv_heads) {
  using Node = detail::Node<S>;
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw ShapeError("attention: expects 2-d q/k/v");
  const i64 rows = q.dim(0), dq = q.dim(1), dkv = k.dim(1);
  if (k.shape() != v.shape() || k.dim(0) != rows || dq % n_heads != 0 ||
      dkv % n_kv_heads != 0 || n_heads % n_kv_heads != 0 || dq / n_heads != dkv / n_kv_heads)
    throw ShapeError("attention: incompatible shapes " + shape_str(q.shape()) + " / " +
                     shape_str(k.shape()) + " for heads " + std::to_string(n_heads) + "/" +
                     std::to_string(n_kv_heads));
  for (auto [b, e] : segs)
    if (b < 0 || e > rows || b >= e) throw ValueError("attention: bad segment range");

  const i64 hd = dq / n_heads;
  const i64 group = n_heads / n_kv_heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));

  Tensor<S> out = detail::make_out<S>(q.shape());
  const S* pq = q.data();
  const S* pk = k.data();
  const S* pv = v.data();
  S* po = out.data();

  const i64 tasks = static_cast<i64>(segs.size()) * n_heads;
  parallel_for(tasks, [&](i64 lo, i64 hi) {
    std::vector<S> p;
    for (i64 t = lo; t < hi; ++t) {
      const auto [b, e] = segs[static_cast<size_t>(t / n_heads)];
      const int h = static_cast<int>(t % n_heads);
      const int kh = static_cast<int>(h / group);
      const i64 m = e - b;
      if (static_cast<i64>(p.size()) < m) p.resize(static_cast<size_t>(m));
      for (i64 i = 0; i < m; ++i) {
        const S* qi = pq + (b + i) * dq + h * hd;
        S mx = -std::numeric_limits<S>::infinity();
        for (i64 j = 0; j <= i; ++j) {
          const S* kj = pk + (b + j) * dkv + kh * hd;
          S s = 0;
          for (i64 c = 0; c < hd; ++c) s += qi[c] * kj[c];
          p[static_cast<size_t>(j)] = s * inv_sqrt;
          mx = std::max(mx, p[static_cast<size_t>(j)]);
        }
        S sum = 0;
        for (i64 j = 0; j <= i; ++j) {
          p[static_cast<size_t>(j)] = std::exp(p[static_cast<size_t>(j)] - mx);
          sum += p[static_cast<size_t>(j)];
        }
        const S inv = S(1) / sum;
        S* orow = po + (b + i) * dq + h * hd;
        std::fill(orow, orow + hd, S(0));
        for (i64 j = 0; j <= i; ++j) {
          const S w = p[static_cast<size_t>(j)] * inv;
          const S* vj = pv + (b + j) * dkv + kh * hd;
          for (i64 c = 0; c < hd; ++c) orow[c] += w * vj[c];
        }
      }
    }
  });

  detail::wire<S>(
      out,
      [segs, n_heads, n_kv_heads, hd, group, inv_sqrt, dq, dkv](Node& o) {
        Node* qn = o.parents[0].get();
        Node* kn = o.parents[1].get();
        Node* vn = o.parents[2].get();
        const S* pq = qn->val.data();
        const S* pk = kn->val.data();
        const S* pv = vn->val.data();
        const S* g = o.grad.data();
        S* gq = qn->requires_grad ? qn->grad.data() : nullptr;
        S* gk = kn->requires_grad ? kn->grad.data() : nullptr;
        S* gv = vn->requires_grad ? vn->grad.data() : nullptr;

        // Parallel over (segment, kv-head): every dk/dv row is owned by one
        // task, and accumulation over queries stays serial inside it.
        const i64 tasks = static_cast<i64>(segs.size()) * n_kv_heads;
        parallel_for(tasks, [&](i64 lo, i64 hi) {
          std::vector<S> p, ds;
          for (i64 t = lo; t < hi; ++t) {
            const auto [b, e] = segs[static_cast<size_t>(t / n_kv_heads)];
            const int kh = static_cast<int>(t % n_kv_heads);
            const i64 m = e - b;
            if (static_cast<i64>(p.size()) < m) {
              p.resize(static_cast<size_t>(m));
              ds.resize(static_cast<size_t>(m));
            }
            for (i64 hg = 0; hg < group; ++hg) {
              const i64 h = kh * group + hg;
              for (i64 i = 0; i < m; ++i) {
                const S* qi = pq + (b + i) * dq + h * hd;
                S mx = -std::numeric_limits<S>::infinity();
                for (i64 j = 0; j <= i; ++j) {
                  const S* kj = pk + (b + j) * dkv + kh * hd;
                  S s = 0;
                  for (i64 c = 0; c < hd; ++c) s += qi[c] * kj[c];
                  p[static_cast<size_t>(j)] = s * inv_sqrt;
                  mx = std::max(mx, p[static_cast<size_t>(j)]);
                }
                S sum = 0;
                for (i64 j = 0; j <= i; ++j) {
                  p[static_cast<size_t>(j)] = std::exp(p[static_cast<size_t>(j)] - mx);
                  sum += p[static_cast<size_t>(j)];
                }
                const S inv = S(1) / sum;
                const S* go = g + (b + i) * dq + h * hd;
                S pdot = 0;
                for (i64 j = 0; j <= i; ++j) {
                  const S w = p[static_cast<size_t>(j)] * inv;
                  const S* vj = pv + (b + j) * dkv + kh * hd;
                  S dd = 0;
                  for (i64 c = 0; c < hd; ++c) dd += go[c] * vj[c];
                  ds[static_cast<size_t>(j)] = w * dd;
                  pdot += w * dd;
                  if (gv) {
                    S* gvj = gv + (b + j) * dkv + kh * hd;
                    for (i64 c = 0; c < hd; ++c) gvj[c] += w * go[c];
                  }
                }
                for (i64 j = 0; j <= i; ++j) {
                  const S w = p[static_cast<size_t>(j)] * inv;
                  const S dsj = (ds[static_cast<size_t>(j)] - w * pdot) * inv_sqrt;
                  const S* kj = pk + (b + j) * dkv + kh * hd;
                  if (gq) {
                    S* gqi = gq + (b + i) * dq + h * hd;
                    for (i64 c = 0; c < hd; ++c) gqi[c] += dsj * kj[c];
                  }
                  if (gk) {
                    S* gkj = gk + (b + j) * dkv + kh * hd;
                    for (i64 c = 0; c < hd; ++c) gkj[c] += dsj * qi[c];
                  }
                }
              }
            }
          }
        });
      },
      q, k, v);
  return out;
}

// ---------------------------------------------------------------------------
// Layer pooling and reductions
// ---------------------------------------------------------------------------

// out[i,:] = sum_l w_l(i) * layers[l][i,:], with w of shape (L) (static
// weights) or (N, L) (per-position weights).
template <class S>
Tensor<S> weighted_layer_sum(const std::vector<Tensor<S>>& layers, const Tensor<S>& w) {
  using Node = detail::Node<S>;
  if (layers.empty()) throw ShapeError("weighted_layer_sum: no layers");
  const i64 L = static_cast<i64>(layers.size());
  const i64 rows = layers[0].dim(0), cols = layers[0].dim(1);
  for (const auto& l : layers)
    if (l.shape() != layers[0].shape())
      throw ShapeError("weighted_layer_sum: ragged layer shapes");
  const bool dyn = w.ndim() == 2;
  if (dyn ? (w.dim(0) != rows || w.dim(1) != L) : (w.ndim() != 1 || w.dim(0) != L))
    throw ShapeError("weighted_layer_sum: weight shape " + shape_str(w.shape()));

  Tensor<S> out = detail::make_out<S>({rows, cols});
  std::vector<const S*> lv(static_cast<size_t>(L));
  for (i64 l = 0; l < L; ++l) lv[static_cast<size_t>(l)] = layers[static_cast<size_t>(l)].data();
  const S* pw = w.data();
  S* po = out.data();
  parallel_for(rows, [&](i64 lo, i64 hi) {
    for (i64 r = lo; r < hi; ++r) {
      S* orow = po + r * cols;
      std::fill(orow, orow + cols, S(0));
      for (i64 l = 0; l < L; ++l) {
        const S wv = dyn ? pw[r * L + l] : pw[l];
        const S* xr = lv[static_cast<size_t>(l)] + r * cols;
        for (i64 c = 0; c < cols; ++c) orow[c] += wv * xr[c];
      }
    }
  });

  Tensor<S> result = out;
  bool any_rg = w.requires_grad();
  for (const auto& l : layers) any_rg = any_rg || l.requires_grad();
  if (GradMode::enabled() && any_rg) {
    auto on = result.node();
    on->requires_grad = true;
    for (const auto& l : layers) on->parents.push_back(l.node());
    on->parents.push_back(w.node());
    on->backward = [L, rows, cols, dyn](Node& o) {
      Node* wn = o.parents[static_cast<size_t>(L)].get();
      const S* g = o.grad.data();
      const S* pw = wn->val.data();
      for (i64 l = 0; l < L; ++l) {
        Node* ln = o.parents[static_cast<size_t>(l)].get();
        if (!ln->requires_grad) continue;
        S* gl = ln->grad.data();
        parallel_for(rows, [&](i64 lo, i64 hi) {
          for (i64 r = lo; r < hi; ++r) {
            const S wv = dyn ? pw[r * L + l] : pw[l];
            const S* gr = g + r * cols;
            S* glr = gl + r * cols;
            for (i64 c = 0; c < cols; ++c) glr[c] += wv * gr[c];
          }
        });
      }
      if (wn->requires_grad) {
        S* gw = wn->grad.data();
        if (dyn) {
          parallel_for(rows, [&](i64 lo, i64 hi) {
            for (i64 r = lo; r < hi; ++r) {
              const S* gr = g + r * cols;
              for (i64 l = 0; l < L; ++l) {
                const S* xr = o.parents[static_cast<size_t>(l)]->val.data() + r * cols;
                S acc = 0;
                for (i64 c = 0; c < cols; ++c) acc += gr[c] * xr[c];
                gw[r * L + l] += acc;
              }
            }
          });
        } else {
          for (i64 l = 0; l < L; ++l) {
            const S* xv = o.parents[static_cast<size_t>(l)]->val.data();
            S acc = 0;
            for (i64 r = 0; r < rows; ++r) {  // serial reduction per layer
              const S* gr = g + r * cols;
              const S* xr = xv + r * cols;
              for (i64 c = 0; c < cols; ++c) acc += gr[c] * xr[c];
            }
            gw[l] += acc;
          }
        }
      }
    };
  }
  return result;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  using Node = detail::Node<S>;
  Tensor<S> out = Tensor<S>::scalar(fixed_tree_sum(a.data(), a.numel()));
  detail::wire<S>(
      out,
      [](Node& o) {
        Node* an = o.parents[0].get();
        if (!an->requires_grad) return;
        const S g = o.grad[0];
        S* ga = an->grad.data();
        const i64 m = an->numel();
        for (i64 i = 0; i < m; ++i) ga[i] += g;
      },
      a);
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

}  // namespace smoltolk
