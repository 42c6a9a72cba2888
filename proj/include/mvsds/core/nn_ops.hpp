#pragma once

#include <Eigen/Core>

#include "mvsds/core/autodiff.hpp"

namespace mvsds {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear: x[N,K] * w[M,K]^T + b[M] -> [N,M]
//
// Tall inputs are processed in fixed-size row blocks so the work spreads
// over workers while block boundaries (and therefore the arithmetic) stay
// independent of the thread count.
// ---------------------------------------------------------------------------

namespace detail {
constexpr int64_t kGemmRowBlock = 8192;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& sx = x->value.shape();
  const Shape& sw = w->value.shape();
  MVSDS_REQUIRE(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1],
                "linear: x", shape_str(sx), " incompatible with w", shape_str(sw));
  const int64_t N = sx[0], K = sx[1], M = sw[0];
  Tensor<T> y = Tensor<T>::uninitialized({N, M});
  {
    const int64_t blocks = (N + detail::kGemmRowBlock - 1) / detail::kGemmRowBlock;
    parallel_for(blocks, [&](int64_t blk) {
      int64_t lo = blk * detail::kGemmRowBlock;
      int64_t rows = std::min(detail::kGemmRowBlock, N - lo);
      detail::ECMap<T> X(x->value.data() + lo * K, rows, K);
      detail::ECMap<T> W(w->value.data(), M, K);
      detail::EMap<T> Y(y.data() + lo * M, rows, M);
      Y.noalias() = X * W.transpose();
      if (b)
        Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
            b->value.data(), M);
    });
    if (b) MVSDS_REQUIRE(b->value.numel() == M, "linear: bias size mismatch");
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b}
                                  : std::vector<Var<T>>{x, w};
  return detail::make_op<T>(std::move(y), std::move(parents),
                            [x, w, b, N, K, M](Node<T>& out) {
    const int64_t blocks = (N + detail::kGemmRowBlock - 1) / detail::kGemmRowBlock;
    if (x->requires_grad) {
      parallel_for(blocks, [&](int64_t blk) {
        int64_t lo = blk * detail::kGemmRowBlock;
        int64_t rows = std::min(detail::kGemmRowBlock, N - lo);
        detail::ECMap<T> G(out.grad.data() + lo * M, rows, M);
        detail::EMap<T> GX(x->grad.data() + lo * K, rows, K);
        detail::ECMap<T> W(w->value.data(), M, K);
        GX.noalias() += G * W;
      });
    }
    if (w->requires_grad) {
      // Per-block partials reduced in block order: bitwise independent of
      // the worker count.
      if (blocks == 1) {
        detail::EMap<T> GW(w->grad.data(), M, K);
        detail::ECMap<T> G(out.grad.data(), N, M);
        detail::ECMap<T> X(x->value.data(), N, K);
        GW.noalias() += G.transpose() * X;
      } else {
        Tensor<T> partials = Tensor<T>::uninitialized({blocks, M, K});
        parallel_for(blocks, [&](int64_t blk) {
          int64_t lo = blk * detail::kGemmRowBlock;
          int64_t rows = std::min(detail::kGemmRowBlock, N - lo);
          detail::ECMap<T> G(out.grad.data() + lo * M, rows, M);
          detail::ECMap<T> X(x->value.data() + lo * K, rows, K);
          detail::EMap<T> P(partials.data() + blk * M * K, M, K);
          P.noalias() = G.transpose() * X;
        });
        detail::EMap<T> GW(w->grad.data(), M, K);
        for (int64_t blk = 0; blk < blocks; ++blk)
          GW += detail::ECMap<T>(partials.data() + blk * M * K, M, K);
      }
    }
    if (b && b->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(b->grad.data(), M);
      detail::ECMap<T> G(out.grad.data(), N, M);
      GB += G.colwise().sum();
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  return linear(x, w, Var<T>{});
}

// ---------------------------------------------------------------------------
// Batched matmul: a[G,m,k] x b[G,k,n] -> [G,m,n]; optionally b transposed
// ([G,n,k] inputs).
// ---------------------------------------------------------------------------
template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  MVSDS_REQUIRE(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0],
                "batched_matmul: need [G,m,k] x [G,k,n]");
  const int64_t G = sa[0], m = sa[1], k = sa[2];
  const int64_t n = transpose_b ? sb[1] : sb[2];
  MVSDS_REQUIRE(transpose_b ? sb[2] == k : sb[1] == k,
                "batched_matmul: inner dimension mismatch");
  Tensor<T> y = Tensor<T>::uninitialized({G, m, n});
  parallel_for(G, [&](int64_t g) {
    detail::ECMap<T> A(a->value.data() + g * m * k, m, k);
    detail::EMap<T> Y(y.data() + g * m * n, m, n);
    if (transpose_b) {
      detail::ECMap<T> B(b->value.data() + g * n * k, n, k);
      Y.noalias() = A * B.transpose();
    } else {
      detail::ECMap<T> B(b->value.data() + g * k * n, k, n);
      Y.noalias() = A * B;
    }
  });
  return detail::make_op<T>(std::move(y), {a, b},
                            [a, b, transpose_b, G, m, k, n](Node<T>& out) {
    for (int64_t g = 0; g < G; ++g) {
      detail::ECMap<T> Gy(out.grad.data() + g * m * n, m, n);
      if (a->requires_grad) {
        detail::EMap<T> GA(a->grad.data() + g * m * k, m, k);
        if (transpose_b) {
          detail::ECMap<T> B(b->value.data() + g * n * k, n, k);
          GA.noalias() += Gy * B;
        } else {
          detail::ECMap<T> B(b->value.data() + g * k * n, k, n);
          GA.noalias() += Gy * B.transpose();
        }
      }
      if (b->requires_grad) {
        detail::ECMap<T> A(a->value.data() + g * m * k, m, k);
        if (transpose_b) {
          detail::EMap<T> GB(b->grad.data() + g * n * k, n, k);
          GB.noalias() += Gy.transpose() * A;
        } else {
          detail::EMap<T> GB(b->grad.data() + g * k * n, k, n);
          GB.noalias() += A.transpose() * Gy;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const Shape& s = x->value.shape();
  const int64_t S = s.back();
  const int64_t rows = x->value.numel() / S;
  Tensor<T> y = Tensor<T>::uninitialized(s);
  const T* xp = x->value.data();
  T* yp = y.data();
  parallel_for(rows, [&](int64_t r) {
    const T* xr = xp + r * S;
    T* yr = yp + r * S;
    T mx = xr[0];
    for (int64_t i = 1; i < S; ++i) mx = std::max(mx, xr[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < S; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      denom += static_cast<double>(yr[i]);
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (int64_t i = 0; i < S; ++i) yr[i] *= inv;
  });
  return detail::make_op<T>(std::move(y), {x}, [x, rows, S](Node<T>& out) {
    const T* g = out.grad.data();
    const T* yp = out.value.data();
    T* gx = x->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t i = 0; i < S; ++i)
        dot += static_cast<double>(g[r * S + i]) * static_cast<double>(yp[r * S + i]);
      for (int64_t i = 0; i < S; ++i)
        gx[r * S + i] += yp[r * S + i] * (g[r * S + i] - static_cast<T>(dot));
    }
  });
}

// ---------------------------------------------------------------------------
// 2-D convolution, NCHW, square kernel, zero padding.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* col) {
  // col layout: [C*kh*kw, Ho*Wo]
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        T* dst = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= H) {
            std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
            continue;
          }
          for (int64_t ox = 0; ox < Wo; ++ox) {
            int64_t ix = ox * stride + j - pad;
            dst[oy * Wo + ox] =
                (ix < 0 || ix >= W) ? T(0) : x[(c * H + iy) * W + ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t Ho, int64_t Wo,
                T* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const T* src = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          int64_t iy = oy * stride + i - pad;
          if (iy < 0 || iy >= H) continue;
          for (int64_t ox = 0; ox < Wo; ++ox) {
            int64_t ix = ox * stride + j - pad;
            if (ix < 0 || ix >= W) continue;
            x[(c * H + iy) * W + ix] += src[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              int64_t stride = 1, int64_t pad = 1) {
  const Shape& sx = x->value.shape();
  const Shape& sw = w->value.shape();
  MVSDS_REQUIRE(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1],
                "conv2d: x", shape_str(sx), " incompatible with w", shape_str(sw));
  const int64_t N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const int64_t O = sw[0], kh = sw[2], kw = sw[3];
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  MVSDS_REQUIRE(Ho >= 1 && Wo >= 1, "conv2d: empty output");
  Tensor<T> y = Tensor<T>::uninitialized({N, O, Ho, Wo});
  const int64_t ck = C * kh * kw;
  parallel_for(N, [&](int64_t nidx) {
    std::vector<T> col(static_cast<size_t>(ck * Ho * Wo));
    detail::im2col(x->value.data() + nidx * C * H * W, C, H, W, kh, kw, stride,
                   pad, Ho, Wo, col.data());
    detail::ECMap<T> Wm(w->value.data(), O, ck);
    detail::ECMap<T> Col(col.data(), ck, Ho * Wo);
    detail::EMap<T> Y(y.data() + nidx * O * Ho * Wo, O, Ho * Wo);
    Y.noalias() = Wm * Col;
    if (b) {
      const T* bp = b->value.data();
      T* yp = y.data() + nidx * O * Ho * Wo;
      for (int64_t o = 0; o < O; ++o)
        for (int64_t i = 0; i < Ho * Wo; ++i) yp[o * Ho * Wo + i] += bp[o];
    }
  });
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b}
                                  : std::vector<Var<T>>{x, w};
  return detail::make_op<T>(
      std::move(y), std::move(parents),
      [x, w, b, N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, ck](Node<T>& out) {
        // The im2col buffer is recomputed here rather than cached: it keeps
        // live graph memory proportional to activations, not patch matrices.
        std::vector<T> col(static_cast<size_t>(ck * Ho * Wo));
        std::vector<T> dcol(static_cast<size_t>(ck * Ho * Wo));
        for (int64_t nidx = 0; nidx < N; ++nidx) {
          detail::ECMap<T> Gy(out.grad.data() + nidx * O * Ho * Wo, O, Ho * Wo);
          if (w->requires_grad || x->requires_grad)
            detail::im2col(x->value.data() + nidx * C * H * W, C, H, W, kh, kw,
                           stride, pad, Ho, Wo, col.data());
          if (w->requires_grad) {
            detail::EMap<T> GW(w->grad.data(), O, ck);
            detail::ECMap<T> Col(col.data(), ck, Ho * Wo);
            GW.noalias() += Gy * Col.transpose();
          }
          if (x->requires_grad) {
            detail::ECMap<T> Wm(w->value.data(), O, ck);
            detail::EMap<T> DCol(dcol.data(), ck, Ho * Wo);
            DCol.noalias() = Wm.transpose() * Gy;
            detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               x->grad.data() + nidx * C * H * W);
          }
          if (b && b->requires_grad) {
            T* gb = b->grad.data();
            const T* gp = out.grad.data() + nidx * O * Ho * Wo;
            for (int64_t o = 0; o < O; ++o) {
              double acc = 0.0;
              for (int64_t i = 0; i < Ho * Wo; ++i)
                acc += static_cast<double>(gp[o * Ho * Wo + i]);
              gb[o] += static_cast<T>(acc);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Group normalization over [N,C,H,W].
// ---------------------------------------------------------------------------
template <typename T>
Var<T> group_norm(const Var<T>& x, int64_t groups, const Var<T>& gamma,
                  const Var<T>& beta, T eps = T(1e-5)) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 4 && s[1] % groups == 0,
                "group_norm: channels not divisible by groups");
  const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
  const int64_t cg = C / groups;
  const int64_t gsize = cg * HW;
  Tensor<T> y = Tensor<T>::uninitialized(s);
  Tensor<T> mean_save = Tensor<T>::uninitialized({N, groups});
  Tensor<T> rstd_save = Tensor<T>::uninitialized({N, groups});
  const T* xp = x->value.data();
  T* yp = y.data();
  const T* gm = gamma->value.data();
  const T* bt = beta->value.data();
  parallel_for(N * groups, [&](int64_t ng) {
    const int64_t n = ng / groups, g = ng % groups;
    const T* base = xp + (n * C + g * cg) * HW;
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < gsize; ++i) {
      double v = static_cast<double>(base[i]);
      sum += v;
      sq += v * v;
    }
    double mu = sum / gsize;
    double var = std::max(0.0, sq / gsize - mu * mu);
    double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    mean_save[ng] = static_cast<T>(mu);
    rstd_save[ng] = static_cast<T>(rstd);
    T* out_base = yp + (n * C + g * cg) * HW;
    for (int64_t c = 0; c < cg; ++c) {
      const T scale = gm[g * cg + c] * static_cast<T>(rstd);
      const T shift = bt[g * cg + c];
      const T mu_t = static_cast<T>(mu);
      for (int64_t i = 0; i < HW; ++i)
        out_base[c * HW + i] = (base[c * HW + i] - mu_t) * scale + shift;
    }
  });
  return detail::make_op<T>(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, mean_save, rstd_save, N, C, HW, cg, groups](Node<T>& out) {
        const T* g = out.grad.data();
        const T* xp = x->value.data();
        const T* gm = gamma->value.data();
        const int64_t gsize = cg * HW;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t gi = 0; gi < groups; ++gi) {
            const T mu = mean_save[n * groups + gi];
            const T rstd = rstd_save[n * groups + gi];
            const T* xb = xp + (n * C + gi * cg) * HW;
            const T* gb = g + (n * C + gi * cg) * HW;
            // xhat = (x - mu) * rstd; y = gamma*xhat + beta
            if (gamma->requires_grad || beta->requires_grad) {
              T* ggamma = gamma->grad.data();
              T* gbeta = beta->grad.data();
              for (int64_t c = 0; c < cg; ++c) {
                double dg = 0.0, db = 0.0;
                for (int64_t i = 0; i < HW; ++i) {
                  double xhat = (static_cast<double>(xb[c * HW + i]) -
                                 static_cast<double>(mu)) *
                                static_cast<double>(rstd);
                  dg += static_cast<double>(gb[c * HW + i]) * xhat;
                  db += static_cast<double>(gb[c * HW + i]);
                }
                ggamma[gi * cg + c] += static_cast<T>(dg);
                gbeta[gi * cg + c] += static_cast<T>(db);
              }
            }
            if (x->requires_grad) {
              // dxhat = g * gamma; dx = rstd*(dxhat - mean(dxhat)
              //          - xhat*mean(dxhat*xhat))
              double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
              for (int64_t c = 0; c < cg; ++c)
                for (int64_t i = 0; i < HW; ++i) {
                  double dxhat = static_cast<double>(gb[c * HW + i]) *
                                 static_cast<double>(gm[gi * cg + c]);
                  double xhat = (static_cast<double>(xb[c * HW + i]) -
                                 static_cast<double>(mu)) *
                                static_cast<double>(rstd);
                  mean_dxhat += dxhat;
                  mean_dxhat_xhat += dxhat * xhat;
                }
              mean_dxhat /= gsize;
              mean_dxhat_xhat /= gsize;
              T* gx = x->grad.data() + (n * C + gi * cg) * HW;
              for (int64_t c = 0; c < cg; ++c)
                for (int64_t i = 0; i < HW; ++i) {
                  double dxhat = static_cast<double>(gb[c * HW + i]) *
                                 static_cast<double>(gm[gi * cg + c]);
                  double xhat = (static_cast<double>(xb[c * HW + i]) -
                                 static_cast<double>(mu)) *
                                static_cast<double>(rstd);
                  gx[c * HW + i] += static_cast<T>(
                      static_cast<double>(rstd) *
                      (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Broadcast add of a per-sample channel vector: x[N,C,H,W] + e[N,C].
// ---------------------------------------------------------------------------
template <typename T>
Var<T> add_channel_vec(const Var<T>& x, const Var<T>& e) {
  const Shape& sx = x->value.shape();
  const Shape& se = e->value.shape();
  MVSDS_REQUIRE(sx.size() == 4 && se.size() == 2 && sx[0] == se[0] && sx[1] == se[1],
                "add_channel_vec: need x[N,C,H,W], e[N,C]");
  const int64_t N = sx[0], C = sx[1], HW = sx[2] * sx[3];
  Tensor<T> y = Tensor<T>::uninitialized(sx);
  const T* xp = x->value.data();
  const T* ep = e->value.data();
  T* yp = y.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T add = ep[nc];
    for (int64_t i = 0; i < HW; ++i) yp[nc * HW + i] = xp[nc * HW + i] + add;
  }
  return detail::make_op<T>(std::move(y), {x, e}, [x, e, N, C, HW](Node<T>& out) {
    const T* g = out.grad.data();
    if (x->requires_grad) {
      T* gx = x->grad.data();
      const int64_t n = N * C * HW;
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    }
    if (e->requires_grad) {
      T* ge = e->grad.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(g[nc * HW + i]);
        ge[nc] += static_cast<T>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------
template <typename T>
Var<T> avg_pool2x2(const Var<T>& x) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
                "avg_pool2x2: need even spatial dims");
  const int64_t NC = s[0] * s[1], H = s[2], W = s[3];
  const int64_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y = Tensor<T>::uninitialized({s[0], s[1], Ho, Wo});
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t nc = 0; nc < NC; ++nc)
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        const T* p = xp + nc * H * W + 2 * oy * W + 2 * ox;
        yp[nc * Ho * Wo + oy * Wo + ox] =
            (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
      }
  return detail::make_op<T>(std::move(y), {x}, [x, NC, H, W, Ho, Wo](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t nc = 0; nc < NC; ++nc)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T gv = g[nc * Ho * Wo + oy * Wo + ox] * T(0.25);
          T* p = gx + nc * H * W + 2 * oy * W + 2 * ox;
          p[0] += gv;
          p[1] += gv;
          p[W] += gv;
          p[W + 1] += gv;
        }
  });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const Shape& s = x->value.shape();
  MVSDS_REQUIRE(s.size() == 4, "upsample_nearest2x: need NCHW");
  const int64_t NC = s[0] * s[1], H = s[2], W = s[3];
  Tensor<T> y = Tensor<T>::uninitialized({s[0], s[1], H * 2, W * 2});
  const T* xp = x->value.data();
  T* yp = y.data();
  for (int64_t nc = 0; nc < NC; ++nc)
    for (int64_t iy = 0; iy < H; ++iy)
      for (int64_t ix = 0; ix < W; ++ix) {
        const T v = xp[nc * H * W + iy * W + ix];
        T* p = yp + nc * 4 * H * W + 2 * iy * 2 * W + 2 * ix;
        p[0] = v;
        p[1] = v;
        p[2 * W] = v;
        p[2 * W + 1] = v;
      }
  return detail::make_op<T>(std::move(y), {x}, [x, NC, H, W](Node<T>& out) {
    const T* g = out.grad.data();
    T* gx = x->grad.data();
    for (int64_t nc = 0; nc < NC; ++nc)
      for (int64_t iy = 0; iy < H; ++iy)
        for (int64_t ix = 0; ix < W; ++ix) {
          const T* p = g + nc * 4 * H * W + 2 * iy * 2 * W + 2 * ix;
          gx[nc * H * W + iy * W + ix] += p[0] + p[1] + p[2 * W] + p[2 * W + 1];
        }
  });
}

// ---------------------------------------------------------------------------
// Embedding lookup: table[V,D] rows gathered by ids -> [L,D].
// ---------------------------------------------------------------------------
template <typename T>
Var<T> embedding_lookup(const Var<T>& table, const std::vector<int>& ids) {
  const Shape& s = table->value.shape();
  MVSDS_REQUIRE(s.size() == 2, "embedding_lookup: table must be [V,D]");
  const int64_t V = s[0], D = s[1];
  const int64_t L = static_cast<int64_t>(ids.size());
  Tensor<T> y = Tensor<T>::uninitialized({L, D});
  for (int64_t i = 0; i < L; ++i) {
    MVSDS_REQUIRE(ids[i] >= 0 && ids[i] < V, "embedding_lookup: id ", ids[i],
                  " out of range [0,", V, ")");
    std::copy(table->value.data() + ids[i] * D,
              table->value.data() + (ids[i] + 1) * D, y.data() + i * D);
  }
  return detail::make_op<T>(std::move(y), {table}, [table, ids, D](Node<T>& out) {
    const T* g = out.grad.data();
    T* gt = table->grad.data();
    for (size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt + static_cast<int64_t>(ids[i]) * D;
      const T* src = g + static_cast<int64_t>(i) * D;
      for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
    }
  });
}

}  // namespace mvsds
