#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvsds/core/parallel.hpp"
#include "mvsds/core/tensor.hpp"

namespace mvsds {

// Reverse-mode autodiff over dense tensors. A Var is a shared node in a
// dynamically built graph; ops allocate their output value eagerly and
// record a pull-style backward closure. Graphs are per-step and freed when
// the last Var referencing them goes out of scope. Ops that see no
// grad-requiring parent return plain constants, so no-grad forwards (e.g.
// frozen-model evaluation) build no graph at all.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
  }
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> make_param(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

// Shares the value, cuts the graph.
template <typename T>
Var<T> detach(const Var<T>& v) {
  return constant(v->value);
}

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  bool needs = false;
  for (const auto& p : parents) needs |= p->requires_grad;
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

}  // namespace detail

template <typename T>
void backward(const Var<T>& root) {
  MVSDS_CHECK(root->value.numel() == 1, "backward root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order toposort.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Var<T> unary_op(const Var<T>& a, FwdFn fwd, BwdFn dydx) {
  const Tensor<T>& x = a->value;
  Tensor<T> y = Tensor<T>::uninitialized(x.shape());
  const int64_t n = x.numel();
  const T* xp = x.data();
  T* yp = y.data();
  parallel_for(
      n, [&](int64_t i) { yp[i] = fwd(xp[i]); }, 1 << 14);
  return make_op<T>(
      std::move(y), {a}, [a, dydx](Node<T>& out) {
        const T* xp = a->value.data();
        const T* gp = out.grad.data();
        T* gx = a->grad.data();
        const int64_t n = a->value.numel();
        parallel_for(
            n, [&](int64_t i) { gx[i] += gp[i] * dydx(xp[i]); }, 1 << 14);
      });
}

// Vectorized elementwise kernels: fn(src, dst, count) over fixed-size blocks,
// so results do not depend on the worker count.
template <typename T, typename Fn>
void blocked_apply(const T* x, T* y, int64_t n, const Fn& fn) {
  const int64_t block = 1 << 15;
  parallel_for((n + block - 1) / block, [&](int64_t b) {
    int64_t lo = b * block;
    fn(x + lo, y + lo, std::min(block, n - lo));
  });
}

template <typename T>
using EArr = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using EArrMap = Eigen::Map<EArr<T>>;
template <typename T>
using EArrCMap = Eigen::Map<const EArr<T>>;

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  MVSDS_REQUIRE(a->value.same_shape(b->value), "add: shape mismatch ",
                shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  const int64_t n = y.numel();
  const T *ap = a->value.data(), *bp = b->value.data();
  T* yp = y.data();
  parallel_for(
      n, [&](int64_t i) { yp[i] = ap[i] + bp[i]; }, 1 << 14);
  return detail::make_op<T>(std::move(y), {a, b}, [a, b](Node<T>& out) {
    const T* g = out.grad.data();
    const int64_t n = out.grad.numel();
    if (a->requires_grad) {
      T* ga = a->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      T* gb = b->grad.data();
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  MVSDS_REQUIRE(a->value.same_shape(b->value), "sub: shape mismatch ",
                shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  const int64_t n = y.numel();
  const T *ap = a->value.data(), *bp = b->value.data();
  T* yp = y.data();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] - bp[i];
  return detail::make_op<T>(std::move(y), {a, b}, [a, b](Node<T>& out) {
    const T* g = out.grad.data();
    const int64_t n = out.grad.numel();
    if (a->requires_grad) {
      T* ga = a->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      T* gb = b->grad.data();
      for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  MVSDS_REQUIRE(a->value.same_shape(b->value), "mul: shape mismatch ",
                shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  const int64_t n = y.numel();
  const T *ap = a->value.data(), *bp = b->value.data();
  T* yp = y.data();
  parallel_for(
      n, [&](int64_t i) { yp[i] = ap[i] * bp[i]; }, 1 << 14);
  return detail::make_op<T>(std::move(y), {a, b}, [a, b](Node<T>& out) {
    const T* g = out.grad.data();
    const T *ap = a->value.data(), *bp = b->value.data();
    const int64_t n = out.grad.numel();
    if (a->requires_grad) {
      T* ga = a->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bp[i];
    }
    if (b->requires_grad) {
      T* gb = b->grad.data();
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * ap[i];
    }
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary_op(
      a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <typename T>
Var<T> exp_op(const Var<T>& a) {
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  detail::blocked_apply<T>(a->value.data(), y.data(), a->value.numel(),
                           [](const T* x, T* out, int64_t n) {
                             detail::EArrMap<T>(out, n) =
                                 detail::EArrCMap<T>(x, n).exp();
                           });
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    detail::blocked_apply<T>(out.value.data(), a->grad.data(), out.value.numel(),
                             [&out, &a](const T* y, T* gx, int64_t n) {
                               int64_t off = y - out.value.data();
                               detail::EArrMap<T>(gx, n) +=
                                   detail::EArrCMap<T>(out.grad.data() + off, n) *
                                   detail::EArrCMap<T>(y, n);
                             });
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  detail::blocked_apply<T>(a->value.data(), y.data(), a->value.numel(),
                           [](const T* x, T* out, int64_t n) {
                             detail::EArrMap<T>(out, n) =
                                 T(1) / (T(1) + (-detail::EArrCMap<T>(x, n)).exp());
                           });
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    detail::blocked_apply<T>(out.value.data(), a->grad.data(), out.value.numel(),
                             [&out](const T* y, T* gx, int64_t n) {
                               int64_t off = y - out.value.data();
                               auto s = detail::EArrCMap<T>(y, n);
                               detail::EArrMap<T>(gx, n) +=
                                   detail::EArrCMap<T>(out.grad.data() + off, n) * s *
                                   (T(1) - s);
                             });
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  detail::blocked_apply<T>(a->value.data(), y.data(), a->value.numel(),
                           [](const T* x, T* out, int64_t n) {
                             auto xa = detail::EArrCMap<T>(x, n);
                             detail::EArrMap<T>(out, n) =
                                 xa / (T(1) + (-xa).exp());
                           });
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    detail::blocked_apply<T>(a->value.data(), a->grad.data(), a->value.numel(),
                             [&out, &a](const T* x, T* gx, int64_t n) {
                               int64_t off = x - a->value.data();
                               auto xa = detail::EArrCMap<T>(x, n);
                               auto s = (T(1) / (T(1) + (-xa).exp())).eval();
                               detail::EArrMap<T>(gx, n) +=
                                   detail::EArrCMap<T>(out.grad.data() + off, n) * s *
                                   (T(1) + xa * (T(1) - s));
                             });
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x) { return x > T(0) ? T(1) : T(0); });
}

// log(1 + exp(x + shift)), numerically stable (linear beyond z = 25).
template <typename T>
Var<T> softplus_shifted(const Var<T>& a, T shift) {
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  detail::blocked_apply<T>(a->value.data(), y.data(), a->value.numel(),
                           [shift](const T* x, T* out, int64_t n) {
                             auto z = (detail::EArrCMap<T>(x, n) + shift).eval();
                             auto zc = z.min(T(25));
                             detail::EArrMap<T>(out, n) =
                                 (T(1) + zc.exp()).log() + (z - zc);
                           });
  return detail::make_op<T>(std::move(y), {a}, [a, shift](Node<T>& out) {
    detail::blocked_apply<T>(a->value.data(), a->grad.data(), a->value.numel(),
                             [&out, &a, shift](const T* x, T* gx, int64_t n) {
                               int64_t off = x - a->value.data();
                               auto z = (detail::EArrCMap<T>(x, n) + shift).eval();
                               detail::EArrMap<T>(gx, n) +=
                                   detail::EArrCMap<T>(out.grad.data() + off, n) /
                                   (T(1) + (-z).exp());
                             });
  });
}

// Elementwise ops against constant tensors (no grad through the constant).
template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  MVSDS_REQUIRE(a->value.same_shape(c), "mul_const: shape mismatch");
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  const int64_t n = y.numel();
  const T *ap = a->value.data(), *cp = c.data();
  T* yp = y.data();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * cp[i];
  return detail::make_op<T>(std::move(y), {a}, [a, c](Node<T>& out) {
    const T* g = out.grad.data();
    const T* cp = c.data();
    T* ga = a->grad.data();
    const int64_t n = out.grad.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * cp[i];
  });
}

template <typename T>
Var<T> add_const(const Var<T>& a, const Tensor<T>& c) {
  MVSDS_REQUIRE(a->value.same_shape(c), "add_const: shape mismatch");
  Tensor<T> y = Tensor<T>::uninitialized(a->value.shape());
  const int64_t n = y.numel();
  const T *ap = a->value.data(), *cp = c.data();
  T* yp = y.data();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + cp[i];
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    const T* g = out.grad.data();
    T* ga = a->grad.data();
    const int64_t n = out.grad.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a->value.reshaped(shape);
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    const T* g = out.grad.data();
    T* ga = a->grad.data();
    const int64_t n = out.grad.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

// Concatenation along axis 0 of same-shaped tails.
template <typename T>
Var<T> concat_axis0(const std::vector<Var<T>>& parts) {
  MVSDS_REQUIRE(!parts.empty(), "concat_axis0: empty input");
  Shape tail = parts[0]->value.shape();
  int64_t rows = 0;
  for (const auto& p : parts) {
    Shape s = p->value.shape();
    MVSDS_REQUIRE(s.size() == tail.size(), "concat_axis0: rank mismatch");
    for (size_t i = 1; i < s.size(); ++i)
      MVSDS_REQUIRE(s[i] == tail[i], "concat_axis0: tail shape mismatch");
    rows += s[0];
  }
  Shape out_shape = tail;
  out_shape[0] = rows;
  Tensor<T> y = Tensor<T>::uninitialized(out_shape);
  int64_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.numel(),
              y.data() + offset);
    offset += p->value.numel();
  }
  return detail::make_op<T>(std::move(y), parts, [parts](Node<T>& out) {
    const T* g = out.grad.data();
    int64_t offset = 0;
    for (const auto& p : parts) {
      const int64_t n = p->value.numel();
      if (p->requires_grad) {
        T* gp = p->grad.data();
        for (int64_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

// [N, C1, H, W] ++ [N, C2, H, W] -> [N, C1+C2, H, W]
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  MVSDS_REQUIRE(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] &&
                    sa[2] == sb[2] && sa[3] == sb[3],
                "concat_channels: incompatible shapes");
  const int64_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> y = Tensor<T>::uninitialized({n, ca + cb, sa[2], sa[3]});
  const T *ap = a->value.data(), *bp = b->value.data();
  T* yp = y.data();
  for (int64_t i = 0; i < n; ++i) {
    std::copy(ap + i * ca * hw, ap + (i + 1) * ca * hw, yp + i * (ca + cb) * hw);
    std::copy(bp + i * cb * hw, bp + (i + 1) * cb * hw,
              yp + i * (ca + cb) * hw + ca * hw);
  }
  return detail::make_op<T>(
      std::move(y), {a, b}, [a, b, n, ca, cb, hw](Node<T>& out) {
        const T* g = out.grad.data();
        for (int64_t i = 0; i < n; ++i) {
          if (a->requires_grad) {
            T* ga = a->grad.data() + i * ca * hw;
            const T* gs = g + i * (ca + cb) * hw;
            for (int64_t j = 0; j < ca * hw; ++j) ga[j] += gs[j];
          }
          if (b->requires_grad) {
            T* gb = b->grad.data() + i * cb * hw;
            const T* gs = g + i * (ca + cb) * hw + ca * hw;
            for (int64_t j = 0; j < cb * hw; ++j) gb[j] += gs[j];
          }
        }
      });
}

// Concatenation along the last axis of 2-D tensors: [N,k1]++[N,k2]++...
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  MVSDS_REQUIRE(!parts.empty(), "concat_cols: empty input");
  const int64_t n = parts[0]->value.dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    MVSDS_REQUIRE(p->value.rank() == 2 && p->value.dim(0) == n,
                  "concat_cols: need [N,k] parts with equal N");
    cols += p->value.dim(1);
  }
  Tensor<T> y = Tensor<T>::uninitialized({n, cols});
  int64_t col0 = 0;
  for (const auto& p : parts) {
    const int64_t k = p->value.dim(1);
    const T* src = p->value.data();
    T* dst = y.data();
    for (int64_t i = 0; i < n; ++i)
      std::copy(src + i * k, src + (i + 1) * k, dst + i * cols + col0);
    col0 += k;
  }
  return detail::make_op<T>(std::move(y), parts, [parts, n, cols](Node<T>& out) {
    const T* g = out.grad.data();
    int64_t col0 = 0;
    for (const auto& p : parts) {
      const int64_t k = p->value.dim(1);
      if (p->requires_grad) {
        T* gp = p->grad.data();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < k; ++j) gp[i * k + j] += g[i * cols + col0 + j];
      }
      col0 += k;
    }
  });
}

// [A,B,C,D] -> [A,C,B,D]
template <typename T>
Var<T> transpose_12(const Var<T>& x) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 4, "transpose_12: need rank-4 input");
  const int64_t A = s[0], B = s[1], C = s[2], D = s[3];
  Tensor<T> y = Tensor<T>::uninitialized({A, C, B, D});
  const T* xp = x->value.data();
  T* yp = y.data();
  parallel_for(A * B * C, [&](int64_t idx) {
    int64_t a = idx / (B * C);
    int64_t b = (idx / C) % B;
    int64_t c = idx % C;
    std::copy(xp + ((a * B + b) * C + c) * D, xp + ((a * B + b) * C + c + 1) * D,
              yp + ((a * C + c) * B + b) * D);
  });
  return detail::make_op<T>(std::move(y), {x}, [x, A, B, C, D](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t a = 0; a < A; ++a)
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const T* gs = g + ((a * C + c) * B + b) * D;
          T* gd = gx + ((a * B + b) * C + c) * D;
          for (int64_t d = 0; d < D; ++d) gd[d] += gs[d];
        }
  });
}

// [R,C] -> [C,R]
template <typename T>
Var<T> transpose2d(const Var<T>& x) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 2, "transpose2d: need rank-2 input");
  const int64_t R = s[0], C = s[1];
  Tensor<T> y = Tensor<T>::uninitialized({C, R});
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) yp[c * R + r] = xp[r * C + c];
  return detail::make_op<T>(std::move(y), {x}, [x, R, C](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < C; ++c) gx[r * C + c] += g[c * R + r];
  });
}

// Repeats each of the B groups `times` times: [B,L,D] -> [B*times,L,D].
template <typename T>
Var<T> repeat_groups(const Var<T>& x, int64_t times) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 3, "repeat_groups: need rank-3 input");
  const int64_t B = s[0], block = s[1] * s[2];
  Tensor<T> y = Tensor<T>::uninitialized({B * times, s[1], s[2]});
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < times; ++t)
      std::copy(xp + b * block, xp + (b + 1) * block, yp + (b * times + t) * block);
  return detail::make_op<T>(std::move(y), {x}, [x, B, times, block](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < times; ++t) {
        const T* gs = g + (b * times + t) * block;
        T* gd = gx + b * block;
        for (int64_t i = 0; i < block; ++i) gd[i] += gs[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(a->value.sum()));
  return detail::make_op<T>(std::move(y), {a}, [a](Node<T>& out) {
    const T g = out.grad[0];
    T* ga = a->grad.data();
    const int64_t n = a->value.numel();
    for (int64_t i = 0; i < n; ++i) ga[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const int64_t n = a->value.numel();
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(a->value.mean()));
  return detail::make_op<T>(std::move(y), {a}, [a, n](Node<T>& out) {
    const T g = out.grad[0] / static_cast<T>(n);
    T* ga = a->grad.data();
    for (int64_t i = 0; i < n; ++i) ga[i] += g;
  });
}

// Mean squared error, mean over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  MVSDS_REQUIRE(a->value.same_shape(b->value), "mse: shape mismatch ",
                shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
  const int64_t n = a->value.numel();
  const T *ap = a->value.data(), *bp = b->value.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(ap[i]) - static_cast<double>(bp[i]);
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  return detail::make_op<T>(std::move(y), {a, b}, [a, b, n](Node<T>& out) {
    const T g = out.grad[0] * T(2) / static_cast<T>(n);
    const T *ap = a->value.data(), *bp = b->value.data();
    if (a->requires_grad) {
      T* ga = a->grad.data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g * (ap[i] - bp[i]);
    }
    if (b->requires_grad) {
      T* gb = b->grad.data();
      for (int64_t i = 0; i < n; ++i) gb[i] -= g * (ap[i] - bp[i]);
    }
  });
}

// Sum of |param - ref| (ref is a plain tensor), for parameter-preservation
// penalties.
template <typename T>
Var<T> sum_abs_dev(const Var<T>& a, const Tensor<T>& ref) {
  MVSDS_REQUIRE(a->value.same_shape(ref), "sum_abs_dev: shape mismatch");
  const int64_t n = a->value.numel();
  const T* ap = a->value.data();
  const T* rp = ref.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i)
    acc += std::abs(static_cast<double>(ap[i]) - static_cast<double>(rp[i]));
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc));
  return detail::make_op<T>(std::move(y), {a}, [a, ref, n](Node<T>& out) {
    const T g = out.grad[0];
    const T* ap = a->value.data();
    const T* rp = ref.data();
    T* ga = a->grad.data();
    for (int64_t i = 0; i < n; ++i) {
      T d = ap[i] - rp[i];
      ga[i] += g * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
    }
  });
}

// Sum over the last axis: [..., S] -> [...].
template <typename T>
Var<T> sum_lastdim(const Var<T>& x) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() >= 1, "sum_lastdim: rank must be >= 1");
  const int64_t S = s.back();
  const int64_t rows = x->value.numel() / S;
  Shape out_shape(s.begin(), s.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> y = Tensor<T>::uninitialized(out_shape);
  const T* xp = x->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t i = 0; i < S; ++i) acc += static_cast<double>(xp[r * S + i]);
    y[r] = static_cast<T>(acc);
  }
  return detail::make_op<T>(std::move(y), {x}, [x, rows, S](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < S; ++i) gx[r * S + i] += g[r];
  });
}

// Exclusive prefix sum over the last axis.
template <typename T>
Var<T> cumsum_exclusive_lastdim(const Var<T>& x) {
  const Shape& s = x->value.shape();
  const int64_t S = s.back();
  const int64_t rows = x->value.numel() / S;
  Tensor<T> y = Tensor<T>::uninitialized(s);
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t i = 0; i < S; ++i) {
      yp[r * S + i] = static_cast<T>(acc);
      acc += static_cast<double>(xp[r * S + i]);
    }
  }
  return detail::make_op<T>(std::move(y), {x}, [x, rows, S](Node<T>& out) {
    // d out_j / d x_i = 1 for i < j: reverse exclusive suffix sum.
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int64_t i = S - 1; i >= 0; --i) {
        gx[r * S + i] += static_cast<T>(acc);
        acc += static_cast<double>(g[r * S + i]);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Row-structured helpers (used by volume rendering and losses)
// ---------------------------------------------------------------------------

// Scales row i of x (first-axis slices) by mask[i] (constant).
template <typename T>
Var<T> scale_rows_const(const Var<T>& x, const Tensor<T>& mask) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(mask.rank() == 1 && mask.dim(0) == s[0],
                "scale_rows_const: mask must be [rows]");
  const int64_t rows = s[0];
  const int64_t block = x->value.numel() / rows;
  Tensor<T> y = Tensor<T>::uninitialized(s);
  const T* xp = x->value.data();
  const T* mp = mask.data();
  T* yp = y.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < block; ++i) yp[r * block + i] = xp[r * block + i] * mp[r];
  return detail::make_op<T>(std::move(y), {x}, [x, mask, rows, block](Node<T>& out) {
    const T* g = out.grad.data();
    const T* mp = mask.data();
    T* gx = x->grad.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < block; ++i) gx[r * block + i] += g[r * block + i] * mp[r];
  });
}

// out[r, c] = sum_s w[r, s] * col[r, s, c]
template <typename T>
Var<T> weighted_sum_mid(const Var<T>& w, const Var<T>& col) {
  const Shape& sw = w->value.shape();
  const Shape& sc = col->value.shape();
  MVSDS_REQUIRE(sw.size() == 2 && sc.size() == 3 && sw[0] == sc[0] && sw[1] == sc[1],
                "weighted_sum_mid: need w[R,S], col[R,S,C]");
  const int64_t R = sw[0], S = sw[1], C = sc[2];
  Tensor<T> y = Tensor<T>::uninitialized({R, C});
  const T* wp = w->value.data();
  const T* cp = col->value.data();
  T* yp = y.data();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t s = 0; s < S; ++s)
        acc += static_cast<double>(wp[r * S + s]) *
               static_cast<double>(cp[(r * S + s) * C + c]);
      yp[r * C + c] = static_cast<T>(acc);
    }
  return detail::make_op<T>(std::move(y), {w, col}, [w, col, R, S, C](Node<T>& out) {
    const T* g = out.grad.data();
    const T* wp = w->value.data();
    const T* cp = col->value.data();
    if (w->requires_grad) {
      T* gw = w->grad.data();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t s = 0; s < S; ++s) {
          double acc = 0.0;
          for (int64_t c = 0; c < C; ++c)
            acc += static_cast<double>(g[r * C + c]) *
                   static_cast<double>(cp[(r * S + s) * C + c]);
          gw[r * S + s] += static_cast<T>(acc);
        }
    }
    if (col->requires_grad) {
      T* gc = col->grad.data();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t s = 0; s < S; ++s)
          for (int64_t c = 0; c < C; ++c)
            gc[(r * S + s) * C + c] += g[r * C + c] * wp[r * S + s];
    }
  });
}

// out[r, c] = color[r, c] + (1 - alpha[r]) * bg[c]
template <typename T>
Var<T> composite_over_bg(const Var<T>& color, const Var<T>& alpha,
                         const Tensor<T>& bg) {
  const Shape& sc = color->value.shape();
  MVSDS_REQUIRE(sc.size() == 2 && alpha->value.rank() == 1 &&
                    alpha->value.dim(0) == sc[0] && bg.dim(0) == sc[1],
                "composite_over_bg: need color[R,C], alpha[R], bg[C]");
  const int64_t R = sc[0], C = sc[1];
  Tensor<T> y = Tensor<T>::uninitialized(sc);
  const T* cp = color->value.data();
  const T* ap = alpha->value.data();
  const T* bp = bg.data();
  T* yp = y.data();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c)
      yp[r * C + c] = cp[r * C + c] + (T(1) - ap[r]) * bp[c];
  return detail::make_op<T>(
      std::move(y), {color, alpha}, [color, alpha, bg, R, C](Node<T>& out) {
        const T* g = out.grad.data();
        const T* bp = bg.data();
        if (color->requires_grad) {
          T* gc = color->grad.data();
          for (int64_t i = 0; i < R * C; ++i) gc[i] += g[i];
        }
        if (alpha->requires_grad) {
          T* ga = alpha->grad.data();
          for (int64_t r = 0; r < R; ++r) {
            double acc = 0.0;
            for (int64_t c = 0; c < C; ++c)
              acc -= static_cast<double>(g[r * C + c]) * static_cast<double>(bp[c]);
            ga[r] += static_cast<T>(acc);
          }
        }
      });
}

// Stacks three [N] columns into [N,3].
template <typename T>
Var<T> stack_cols3(const Var<T>& a, const Var<T>& b, const Var<T>& c) {
  const int64_t n = a->value.numel();
  MVSDS_REQUIRE(b->value.numel() == n && c->value.numel() == n,
                "stack_cols3: length mismatch");
  Tensor<T> y = Tensor<T>::uninitialized({n, 3});
  for (int64_t i = 0; i < n; ++i) {
    y[i * 3 + 0] = a->value[i];
    y[i * 3 + 1] = b->value[i];
    y[i * 3 + 2] = c->value[i];
  }
  return detail::make_op<T>(std::move(y), {a, b, c}, [a, b, c, n](Node<T>& out) {
    const T* g = out.grad.data();
    Var<T> parts[3] = {a, b, c};
    for (int k = 0; k < 3; ++k) {
      if (!parts[k]->requires_grad) continue;
      T* gp = parts[k]->grad.data();
      for (int64_t i = 0; i < n; ++i) gp[i] += g[i * 3 + k];
    }
  });
}

// Rows of x[N,3] normalized to unit length; rows with norm < eps produce the
// zero vector (and pass no gradient).
template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 2 && s[1] == 3, "normalize_rows: need [N,3]");
  const int64_t n = s[0];
  Tensor<T> y = Tensor<T>::uninitialized(s);
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t i = 0; i < n; ++i) {
    T nx = xp[i * 3], ny = xp[i * 3 + 1], nz = xp[i * 3 + 2];
    T norm = std::sqrt(nx * nx + ny * ny + nz * nz);
    if (norm < eps) {
      yp[i * 3] = yp[i * 3 + 1] = yp[i * 3 + 2] = T(0);
    } else {
      yp[i * 3] = nx / norm;
      yp[i * 3 + 1] = ny / norm;
      yp[i * 3 + 2] = nz / norm;
    }
  }
  return detail::make_op<T>(std::move(y), {x}, [x, n, eps](Node<T>& out) {
    const T* g = out.grad.data();
    const T* xp = x->value.data();
    T* gx = x->grad.data();
    for (int64_t i = 0; i < n; ++i) {
      T vx = xp[i * 3], vy = xp[i * 3 + 1], vz = xp[i * 3 + 2];
      T norm = std::sqrt(vx * vx + vy * vy + vz * vz);
      if (norm < eps) continue;
      // d(v/|v|)/dv = (I - uu^T)/|v| with u = v/|v|
      T ux = vx / norm, uy = vy / norm, uz = vz / norm;
      T gdotu = g[i * 3] * ux + g[i * 3 + 1] * uy + g[i * 3 + 2] * uz;
      gx[i * 3] += (g[i * 3] - gdotu * ux) / norm;
      gx[i * 3 + 1] += (g[i * 3 + 1] - gdotu * uy) / norm;
      gx[i * 3 + 2] += (g[i * 3 + 2] - gdotu * uz) / norm;
    }
  });
}

// Row-wise dot product with a constant direction tensor: [N,3]·[N,3] -> [N].
template <typename T>
Var<T> dot_rows_const(const Var<T>& x, const Tensor<T>& d) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 2 && d.same_shape(x->value), "dot_rows_const: shape mismatch");
  const int64_t n = s[0], k = s[1];
  Tensor<T> y = Tensor<T>::uninitialized({n});
  const T* xp = x->value.data();
  const T* dp = d.data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < k; ++j)
      acc += static_cast<double>(xp[i * k + j]) * static_cast<double>(dp[i * k + j]);
    y[i] = static_cast<T>(acc);
  }
  return detail::make_op<T>(std::move(y), {x}, [x, d, n, k](Node<T>& out) {
    const T* g = out.grad.data();
    const T* dp = d.data();
    T* gx = x->grad.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) gx[i * k + j] += g[i] * dp[i * k + j];
  });
}

}  // namespace mvsds
