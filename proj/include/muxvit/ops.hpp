#pragma once

// Differentiable tape operations plus plain (tape-free) versions of the
// basic numeric ops. Both go through the same computation helpers.

#include <cmath>
#include <cstring>
#include <memory>
#include <utility>
#include <vector>

#include "muxvit/kernels.hpp"
#include "muxvit/tape.hpp"
#include "muxvit/tensor.hpp"

namespace muxvit {

inline constexpr double kLogEps = 1e-12;  // stabilizer inside log for CE

namespace detail {

template <class T>
void layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                        Tensor<T>& out, std::vector<T>& mean, std::vector<T>& rstd) {
  const int R = x.shape[0], d = x.shape[1];
  mean.resize(R);
  rstd.resize(R);
  const T* gn = gain.ptr();
  const T* bs = bias.ptr();
  for (int r = 0; r < R; ++r) {
    const T* xr = x.ptr() + static_cast<std::size_t>(r) * d;
    T* yr = out.ptr() + static_cast<std::size_t>(r) * d;
    const T mu = kern::reduce_sum(xr, d) / static_cast<T>(d);
    const T var = kern::reduce_sqdev(xr, mu, d) / static_cast<T>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + static_cast<double>(eps)));
    mean[r] = mu;
    rstd[r] = rs;
    for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gn[j] + bs[j];
  }
}

template <class T>
void dwconv_forward(const T* x, const T* ker, int B, int h, int w, int d, int K, T* out) {
  const int r = K / 2;
  for (int b = 0; b < B; ++b) {
    const T* xb = x + static_cast<std::size_t>(b) * h * w * d;
    T* ob = out + static_cast<std::size_t>(b) * h * w * d;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T* o = ob + (static_cast<std::size_t>(y) * w + xx) * d;
        std::memset(o, 0, sizeof(T) * d);
        for (int u = 0; u < K; ++u) {
          const int yy = y + u - r;
          if (yy < 0 || yy >= h) continue;
          for (int v = 0; v < K; ++v) {
            const int xv = xx + v - r;
            if (xv < 0 || xv >= w) continue;
            const T* in = xb + (static_cast<std::size_t>(yy) * w + xv) * d;
            const T* kr = ker + (static_cast<std::size_t>(u) * K + v) * d;
            for (int c = 0; c < d; ++c) o[c] += in[c] * kr[c];
          }
        }
      }
  }
}

template <class T>
double ce_rows_value(const Tensor<T>& p, const Tensor<T>& q) {
  const int m = p.shape[0], n = p.shape[1];
  double total = 0;
  for (int i = 0; i < m; ++i) {
    const T* pi = p.ptr() + static_cast<std::size_t>(i) * n;
    const T* qi = q.ptr() + static_cast<std::size_t>(i) * n;
    double row = 0;
    for (int j = 0; j < n; ++j) row += static_cast<double>(qi[j]) * std::log(static_cast<double>(pi[j]) + kLogEps);
    total -= row;
  }
  return total / m;
}

template <class T>
void check_rows_stochastic(const Tensor<T>& t, const char* which) {
  const int m = t.shape[0], n = t.shape[1];
  for (int i = 0; i < m; ++i) {
    double s = 0;
    for (int j = 0; j < n; ++j) s += t(i, j);
    if (std::fabs(s - 1.0) > 1e-4)
      throw DistributionError(std::string(which) + " row " + std::to_string(i) +
                              " sums to " + std::to_string(s) + ", not 1");
  }
}

}  // namespace detail

// ----------------------------------------------------------- plain versions

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape.rank == 2 && b.shape.rank == 2, "matmul expects rank-2 tensors");
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner dimensions disagree: " + a.shape.str() + " vs " + b.shape.str());
  Tensor<T> c({a.shape[0], b.shape[1]});
  kern::gemm_nn<T>(a.shape[0], b.shape[1], a.shape[1], a.ptr(), a.shape[1], b.ptr(), b.shape[1],
                   c.ptr(), b.shape[1]);
  return c;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require(x.shape.rank >= 1, "softmax_rows needs rank >= 1");
  const int n = x.shape[x.shape.rank - 1];
  Tensor<T> y(x.shape);
  kern::softmax_rows_buf(x.ptr(), y.ptr(), static_cast<std::int64_t>(x.numel()) / n, n);
  return y;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  require(x.shape.rank == 2, "layer_norm expects [N x d]");
  require(gain.shape.rank == 1 && gain.shape[0] == x.shape[1], "layer_norm gain size");
  require(bias.shape.rank == 1 && bias.shape[0] == x.shape[1], "layer_norm bias size");
  Tensor<T> y(x.shape);
  std::vector<T> mu, rs;
  detail::layer_norm_forward(x, gain, bias, eps, y, mu, rs);
  return y;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  kern::gelu_forward(x.ptr(), y.ptr(), static_cast<std::int64_t>(x.numel()));
  return y;
}

// Per-channel same-padding cross-correlation, stride 1. x: [h x w x d],
// kernels: [K x K x d] with K odd.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernels) {
  require(x.shape.rank == 3, "depthwise_conv2d expects [h x w x d]");
  require(kernels.shape.rank == 3, "kernels must be [K x K x d]");
  const int K = kernels.shape[0];
  if (K % 2 == 0) throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(K));
  require(kernels.shape[1] == K && kernels.shape[2] == x.shape[2], "kernel shape mismatch");
  Tensor<T> y(x.shape);
  detail::dwconv_forward(x.ptr(), kernels.ptr(), 1, x.shape[0], x.shape[1], x.shape[2], K, y.ptr());
  return y;
}

// CE(student, teacher) = -(1/m) sum_rows sum_j teacher_j * log(student_j + eps).
template <class T>
T cross_entropy_rows(const Tensor<T>& p, const Tensor<T>& q) {
  require(p.shape.rank == 2 && p.shape == q.shape,
          "cross_entropy_rows expects equal [m x n] tensors");
  detail::check_rows_stochastic(p, "student");
  detail::check_rows_stochastic(q, "teacher");
  return static_cast<T>(detail::ce_rows_value(p, q));
}

// ------------------------------------------------------------------ tape ops

namespace op {

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const Tensor<T>&A = t.val(a), &B = t.val(b);
  require(A.shape.rank == 2 && B.shape.rank == 2, "matmul expects rank-2 tensors");
  if (A.shape[1] != B.shape[0])
    throw ShapeError("matmul: inner dimensions disagree: " + A.shape.str() + " vs " + B.shape.str());
  const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor<T> C({m, n});
  kern::gemm_nn<T>(m, n, k, A.ptr(), k, B.ptr(), n, C.ptr(), n);
  return t.op(std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(a))
      kern::gemm_nt<T>(m, k, n, g.ptr(), n, tp.val(b).ptr(), n, tp.grad(a).ptr(), k, true);
    if (tp.needs_grad(b))
      kern::gemm_tn<T>(k, n, m, tp.val(a).ptr(), k, g.ptr(), n, tp.grad(b).ptr(), n, true);
  });
}

// y = x * w + bias (bias broadcast over rows)
template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const Tensor<T>&X = t.val(x), &W = t.val(w), &Bv = t.val(bias);
  require(X.shape.rank == 2 && W.shape.rank == 2, "linear expects matrices");
  if (X.shape[1] != W.shape[0])
    throw ShapeError("linear: inner dimensions disagree: " + X.shape.str() + " vs " + W.shape.str());
  require(Bv.shape.rank == 1 && Bv.shape[0] == W.shape[1], "linear bias size");
  const int R = X.shape[0], din = X.shape[1], dout = W.shape[1];
  Tensor<T> Y({R, dout});
  kern::gemm_nn<T>(R, dout, din, X.ptr(), din, W.ptr(), dout, Y.ptr(), dout);
  for (int r = 0; r < R; ++r) {
    T* yr = Y.ptr() + static_cast<std::size_t>(r) * dout;
    for (int j = 0; j < dout; ++j) yr[j] += Bv(j);
  }
  return t.op(std::move(Y), {x, w, bias}, [x, w, bias, R, din, dout](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(x))
      kern::gemm_nt<T>(R, din, dout, g.ptr(), dout, tp.val(w).ptr(), dout, tp.grad(x).ptr(), din, true);
    if (tp.needs_grad(w))
      kern::gemm_tn<T>(din, dout, R, tp.val(x).ptr(), din, g.ptr(), dout, tp.grad(w).ptr(), dout, true);
    if (tp.needs_grad(bias)) {
      T* db = tp.grad(bias).ptr();
      for (int r = 0; r < R; ++r) {
        const T* gr = g.ptr() + static_cast<std::size_t>(r) * dout;
        for (int j = 0; j < dout; ++j) db[j] += gr[j];
      }
    }
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const Tensor<T>&A = t.val(a), &B = t.val(b);
  if (A.shape != B.shape)
    throw ShapeError("add: shapes differ: " + A.shape.str() + " vs " + B.shape.str());
  Tensor<T> Y(A.shape);
  for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] = A.data[i] + B.data[i];
  return t.op(std::move(Y), {a, b}, [a, b](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    for (Var v : {a, b})
      if (tp.needs_grad(v)) {
        T* dv = tp.grad(v).ptr();
        for (std::size_t i = 0; i < g.numel(); ++i) dv[i] += g.data[i];
      }
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Tensor<T> Y(t.val(a).shape);
  const Tensor<T>& A = t.val(a);
  for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] = A.data[i] * s;
  return t.op(std::move(Y), {a}, [a, s](Tape<T>& tp, int id) {
    if (!tp.needs_grad(a)) return;
    const Tensor<T>& g = tp.grad(id);
    T* da = tp.grad(a).ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) da[i] += s * g.data[i];
  });
}

// x: [B*N x d], pos: [N x d]; adds pos to every image's token block.
template <class T>
Var add_pos(Tape<T>& t, Var x, Var pos, int batch) {
  const Tensor<T>&X = t.val(x), &P = t.val(pos);
  const int N = P.shape[0], d = P.shape[1];
  require(X.shape.rank == 2 && X.shape[0] == batch * N && X.shape[1] == d, "add_pos shape mismatch");
  Tensor<T> Y(X.shape);
  for (int b = 0; b < batch; ++b)
    for (int r = 0; r < N; ++r) {
      const T* xr = X.ptr() + (static_cast<std::size_t>(b) * N + r) * d;
      const T* pr = P.ptr() + static_cast<std::size_t>(r) * d;
      T* yr = Y.ptr() + (static_cast<std::size_t>(b) * N + r) * d;
      for (int j = 0; j < d; ++j) yr[j] = xr[j] + pr[j];
    }
  return t.op(std::move(Y), {x, pos}, [x, pos, batch, N, d](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(x)) {
      T* dx = tp.grad(x).ptr();
      for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g.data[i];
    }
    if (tp.needs_grad(pos)) {
      T* dp = tp.grad(pos).ptr();
      for (int b = 0; b < batch; ++b)
        for (int r = 0; r < N; ++r) {
          const T* gr = g.ptr() + (static_cast<std::size_t>(b) * N + r) * d;
          for (int j = 0; j < d; ++j) dp[static_cast<std::size_t>(r) * d + j] += gr[j];
        }
    }
  });
}

template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const Tensor<T>& X = t.val(x);
  require(X.shape.rank == 2, "layer_norm expects [N x d]");
  require(eps > T(0), "layer_norm eps must be positive");
  const int R = X.shape[0], d = X.shape[1];
  require(t.val(gain).shape == Shape({d}) && t.val(bias).shape == Shape({d}), "layer_norm gain/bias size");
  Tensor<T> Y(X.shape);
  auto saved = std::make_shared<std::pair<std::vector<T>, std::vector<T>>>();
  detail::layer_norm_forward(X, t.val(gain), t.val(bias), eps, Y, saved->first, saved->second);
  return t.op(std::move(Y), {x, gain, bias}, [x, gain, bias, saved, R, d](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& X2 = tp.val(x);
    const T* gn = tp.val(gain).ptr();
    const bool nx = tp.needs_grad(x), ng = tp.needs_grad(gain), nb = tp.needs_grad(bias);
    T* dx = nx ? tp.grad(x).ptr() : nullptr;
    T* dgain = ng ? tp.grad(gain).ptr() : nullptr;
    T* dbias = nb ? tp.grad(bias).ptr() : nullptr;
    thread_local std::vector<T> dxh_buf;
    dxh_buf.resize(static_cast<std::size_t>(d));
    T* dxh = dxh_buf.data();
    for (int r = 0; r < R; ++r) {
      const T* xr = X2.ptr() + static_cast<std::size_t>(r) * d;
      const T* gr = g.ptr() + static_cast<std::size_t>(r) * d;
      const T mu = saved->first[r], rs = saved->second[r];
      for (int j = 0; j < d; ++j) dxh[j] = gr[j] * gn[j];
      const T sum_dxh = kern::reduce_sum(dxh, d);
      // sum over j of dxh * xhat, with xhat = (x - mu) * rs
      const T sum_dxh_xh = (kern::reduce_dot(dxh, xr, d) - mu * sum_dxh) * rs;
      if (ng)
        for (int j = 0; j < d; ++j) dgain[j] += gr[j] * (xr[j] - mu) * rs;
      if (nb)
        for (int j = 0; j < d; ++j) dbias[j] += gr[j];
      if (nx) {
        const T c1 = sum_dxh / static_cast<T>(d);
        const T c2 = sum_dxh_xh / static_cast<T>(d);
        T* dr = dx + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) dr[j] += rs * (dxh[j] - c1 - (xr[j] - mu) * rs * c2);
      }
    }
  });
}

template <class T>
Var gelu(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  Tensor<T> Y(X.shape);
  kern::gelu_forward(X.ptr(), Y.ptr(), static_cast<std::int64_t>(X.numel()));
  return t.op(std::move(Y), {x}, [x](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(id);
    kern::gelu_backward(tp.val(x).ptr(), g.ptr(), tp.grad(x).ptr(),
                        static_cast<std::int64_t>(g.numel()));
  });
}

template <class T>
Var softmax_rows(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  require(X.shape.rank >= 1, "softmax_rows needs rank >= 1");
  const int n = X.shape[X.shape.rank - 1];
  const std::int64_t rows = static_cast<std::int64_t>(X.numel()) / n;
  Tensor<T> Y(X.shape);
  kern::softmax_rows_buf(X.ptr(), Y.ptr(), rows, n);
  return t.op(std::move(Y), {x}, [x, rows, n](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>&g = tp.grad(id), &Y2 = tp.val(Var{id});
    T* dx = tp.grad(x).ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* yr = Y2.ptr() + r * n;
      const T* gr = g.ptr() + r * n;
      const T dot = kern::reduce_dot(gr, yr, n);
      T* dr = dx + r * n;
      for (int j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// Pairwise scaled products between two column blocks of a fused row matrix.
// src: [B*N x width]; per image b and head m:
//   out[b,m] = scale * Q_bm K_bm^T,   Q_bm = src rows of image b, cols
//   [q_off + m*dh, +dh), K_bm likewise at k_off. Covers attention logits
//   (M heads of width dh), relation logits (M=1, dh=block width) and R_H.
template <class T>
Var pair_logits(Tape<T>& t, Var src, int B, int N, int M, int dh, int q_off, int k_off, T scl) {
  const Tensor<T>& S = t.val(src);
  const int width = S.shape[1];
  require(S.shape.rank == 2 && S.shape[0] == B * N, "pair_logits row count");
  require(q_off + M * dh <= width && k_off + M * dh <= width, "pair_logits column blocks");
  Tensor<T> Y({B, M, N, N});
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m) {
      const T* q = S.ptr() + static_cast<std::size_t>(b) * N * width + q_off + m * dh;
      const T* k = S.ptr() + static_cast<std::size_t>(b) * N * width + k_off + m * dh;
      T* o = Y.ptr() + (static_cast<std::size_t>(b) * M + m) * N * N;
      kern::gemm_nt<T>(N, N, dh, q, width, k, width, o, N);
    }
  for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] *= scl;
  return t.op(std::move(Y), {src},
              [src, B, N, M, dh, q_off, k_off, scl, width](Tape<T>& tp, int id) {
    if (!tp.needs_grad(src)) return;
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& S2 = tp.val(src);
    T* ds = tp.grad(src).ptr();
    std::vector<T> tmp(static_cast<std::size_t>(N) * N);
    for (int b = 0; b < B; ++b)
      for (int m = 0; m < M; ++m) {
        const T* gb = g.ptr() + (static_cast<std::size_t>(b) * M + m) * N * N;
        for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = gb[i] * scl;
        const std::size_t base = static_cast<std::size_t>(b) * N * width;
        const T* q = S2.ptr() + base + q_off + m * dh;
        const T* k = S2.ptr() + base + k_off + m * dh;
        // dQ += G K ; dK += G^T Q
        kern::gemm_nn<T>(N, dh, N, tmp.data(), N, k, width, ds + base + q_off + m * dh, width, true);
        kern::gemm_tn<T>(N, dh, N, tmp.data(), N, q, width, ds + base + k_off + m * dh, width, true);
      }
  });
}

// out[b,n] = sum_m F[n,m] * x[b,m] over [N x N] slices (head mixing).
template <class T>
Var mix_heads(Tape<T>& t, Var f, Var x) {
  const Tensor<T>&F = t.val(f), &X = t.val(x);
  require(X.shape.rank == 4, "mix_heads expects [B,M,N,N]");
  const int B = X.shape[0], M = X.shape[1], N = X.shape[2];
  require(F.shape.rank == 2 && F.shape[0] == M && F.shape[1] == M,
          "mix matrix must be " + std::to_string(M) + "x" + std::to_string(M));
  const std::int64_t NN = static_cast<std::int64_t>(N) * N;
  Tensor<T> Y(X.shape);
  for (int b = 0; b < B; ++b)
    kern::gemm_nn<T>(M, NN, M, F.ptr(), M, X.ptr() + b * M * NN, NN, Y.ptr() + b * M * NN, NN);
  return t.op(std::move(Y), {f, x}, [f, x, B, M, NN](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(f)) {
      T* df = tp.grad(f).ptr();
      for (int b = 0; b < B; ++b)
        kern::gemm_nt<T>(M, M, NN, g.ptr() + b * M * NN, NN, tp.val(x).ptr() + b * M * NN, NN, df,
                         M, true);
    }
    if (tp.needs_grad(x)) {
      T* dx = tp.grad(x).ptr();
      for (int b = 0; b < B; ++b)
        kern::gemm_tn<T>(M, NN, M, tp.val(f).ptr(), M, g.ptr() + b * M * NN, NN, dx + b * M * NN,
                         NN, true);
    }
  });
}

// out rows of image b, head-m columns = A[b,m] (N x N) * V_bm (N x d_head);
// V taken from columns [v_off, v_off + M*d_head) of src. Produces
// [B*N x M*d_head].
template <class T>
Var attn_apply(Tape<T>& t, Var attn, Var src, int v_off, int d_head) {
  const Tensor<T>&A = t.val(attn), &S = t.val(src);
  require(A.shape.rank == 4, "attn_apply expects [B,M,N,N]");
  const int B = A.shape[0], M = A.shape[1], N = A.shape[2];
  const int width = S.shape[1];
  require(S.shape[0] == B * N && v_off + M * d_head <= width, "attn_apply src shape");
  const int out_w = M * d_head;
  Tensor<T> Y({B * N, out_w});
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m) {
      const T* a = A.ptr() + (static_cast<std::size_t>(b) * M + m) * N * N;
      const T* v = S.ptr() + static_cast<std::size_t>(b) * N * width + v_off + m * d_head;
      T* o = Y.ptr() + static_cast<std::size_t>(b) * N * out_w + m * d_head;
      kern::gemm_nn<T>(N, d_head, N, a, N, v, width, o, out_w);
    }
  return t.op(std::move(Y), {attn, src},
              [attn, src, v_off, B, M, N, d_head, width](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    const int out_w = M * d_head;
    for (int b = 0; b < B; ++b)
      for (int m = 0; m < M; ++m) {
        const std::size_t base = static_cast<std::size_t>(b) * N * width;
        const T* gb = g.ptr() + static_cast<std::size_t>(b) * N * out_w + m * d_head;
        if (tp.needs_grad(attn)) {
          const T* v = tp.val(src).ptr() + base + v_off + m * d_head;
          T* da = tp.grad(attn).ptr() + (static_cast<std::size_t>(b) * M + m) * N * N;
          kern::gemm_nt<T>(N, N, d_head, gb, out_w, v, width, da, N, true);
        }
        if (tp.needs_grad(src)) {
          const T* a = tp.val(attn).ptr() + (static_cast<std::size_t>(b) * M + m) * N * N;
          T* dv = tp.grad(src).ptr() + base + v_off + m * d_head;
          kern::gemm_tn<T>(N, d_head, N, a, N, gb, out_w, dv, width, true);
        }
      }
  });
}

// Depth-wise same-padding convolution over the token grid.
// x: [B*h*w x d], kernels: [K x K x d].
template <class T>
Var depthwise_conv2d(Tape<T>& t, Var x, Var kernels, int B, int h, int w) {
  const Tensor<T>&X = t.val(x), &Kr = t.val(kernels);
  require(Kr.shape.rank == 3 && Kr.shape[0] == Kr.shape[1], "kernels must be [K x K x d]");
  const int K = Kr.shape[0], d = X.shape[1];
  if (K % 2 == 0) throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(K));
  if (X.shape[0] != B * h * w)
    throw ConfigError("token count " + std::to_string(X.shape[0]) + " does not fill a " +
                      std::to_string(h) + "x" + std::to_string(w) + " grid for batch " +
                      std::to_string(B));
  require(Kr.shape[2] == d, "kernel channels mismatch");
  Tensor<T> Y(X.shape);
  detail::dwconv_forward(X.ptr(), Kr.ptr(), B, h, w, d, K, Y.ptr());
  return t.op(std::move(Y), {x, kernels}, [x, kernels, B, h, w, K, d](Tape<T>& tp, int id) {
    const Tensor<T>& g = tp.grad(id);
    const int r = K / 2;
    const bool nx = tp.needs_grad(x), nk = tp.needs_grad(kernels);
    T* dx = nx ? tp.grad(x).ptr() : nullptr;
    T* dk = nk ? tp.grad(kernels).ptr() : nullptr;
    const T* xv = tp.val(x).ptr();
    const T* kv = tp.val(kernels).ptr();
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T* go = g.ptr() + ((static_cast<std::size_t>(b) * h + y) * w + xx) * d;
          for (int u = 0; u < K; ++u) {
            const int yy = y + u - r;
            if (yy < 0 || yy >= h) continue;
            for (int v = 0; v < K; ++v) {
              const int xv2 = xx + v - r;
              if (xv2 < 0 || xv2 >= w) continue;
              const std::size_t in_off = ((static_cast<std::size_t>(b) * h + yy) * w + xv2) * d;
              const std::size_t k_off = (static_cast<std::size_t>(u) * K + v) * d;
              if (nx) {
                const T* kr = kv + k_off;
                T* dxi = dx + in_off;
                for (int c = 0; c < d; ++c) dxi[c] += go[c] * kr[c];
              }
              if (nk) {
                const T* xi = xv + in_off;
                T* dki = dk + k_off;
                for (int c = 0; c < d; ++c) dki[c] += go[c] * xi[c];
              }
            }
          }
        }
  });
}

template <class T>
Var global_avg_pool(Tape<T>& t, Var x, int B, int N) {
  const Tensor<T>& X = t.val(x);
  const int d = X.shape[1];
  require(X.shape.rank == 2 && X.shape[0] == B * N, "global_avg_pool shape");
  Tensor<T> Y({B, d});
  const T inv = T(1) / static_cast<T>(N);
  for (int b = 0; b < B; ++b) {
    T* yb = Y.ptr() + static_cast<std::size_t>(b) * d;
    for (int r = 0; r < N; ++r) {
      const T* xr = X.ptr() + (static_cast<std::size_t>(b) * N + r) * d;
      for (int j = 0; j < d; ++j) yb[j] += xr[j];
    }
    for (int j = 0; j < d; ++j) yb[j] *= inv;
  }
  return t.op(std::move(Y), {x}, [x, B, N, d, inv](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(id);
    T* dx = tp.grad(x).ptr();
    for (int b = 0; b < B; ++b) {
      const T* gb = g.ptr() + static_cast<std::size_t>(b) * d;
      for (int r = 0; r < N; ++r) {
        T* dr = dx + (static_cast<std::size_t>(b) * N + r) * d;
        for (int j = 0; j < d; ++j) dr[j] += gb[j] * inv;
      }
    }
  });
}

// 2x2 neighbor concatenation: [B*h*w x d] -> [B*(h/2)*(w/2) x 4d].
template <class T>
Var merge_tokens(Tape<T>& t, Var x, int B, int h, int w) {
  const Tensor<T>& X = t.val(x);
  const int d = X.shape[1];
  if (h % 2 || w % 2)
    throw ConfigError("token grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by 2 for merging");
  require(X.shape[0] == B * h * w, "merge_tokens row count");
  const int h2 = h / 2, w2 = w / 2;
  Tensor<T> Y({B * h2 * w2, 4 * d});
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < h2; ++y)
      for (int xx = 0; xx < w2; ++xx) {
        T* o = Y.ptr() + ((static_cast<std::size_t>(b) * h2 + y) * w2 + xx) * 4 * d;
        for (int q = 0; q < 4; ++q) {
          const int sy = 2 * y + q / 2, sx = 2 * xx + q % 2;
          const T* in = X.ptr() + ((static_cast<std::size_t>(b) * h + sy) * w + sx) * d;
          std::memcpy(o + q * d, in, sizeof(T) * d);
        }
      }
  return t.op(std::move(Y), {x}, [x, B, h, w, d](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(id);
    T* dx = tp.grad(x).ptr();
    const int h2 = h / 2, w2 = w / 2;
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) {
          const T* go = g.ptr() + ((static_cast<std::size_t>(b) * h2 + y) * w2 + xx) * 4 * d;
          for (int q = 0; q < 4; ++q) {
            const int sy = 2 * y + q / 2, sx = 2 * xx + q % 2;
            T* di = dx + ((static_cast<std::size_t>(b) * h + sy) * w + sx) * d;
            const T* gq = go + q * d;
            for (int c = 0; c < d; ++c) di[c] += gq[c];
          }
        }
  });
}

// Mean over rows of -sum_j q_j log(p_j + eps). Gradient flows into p (and
// into q when q is a tracked node, which distillation never uses).
template <class T>
Var cross_entropy_rows(Tape<T>& t, Var p, Var q) {
  const Tensor<T>&P = t.val(p), &Q = t.val(q);
  require(P.shape.rank == 2 && P.shape == Q.shape, "cross_entropy_rows expects equal [m x n]");
  detail::check_rows_stochastic(P, "student");
  detail::check_rows_stochastic(Q, "teacher");
  const int m = P.shape[0], n = P.shape[1];
  Tensor<T> Y({1});
  Y.data[0] = static_cast<T>(detail::ce_rows_value(P, Q));
  return t.op(std::move(Y), {p, q}, [p, q, m, n](Tape<T>& tp, int id) {
    const T g = tp.grad(id).data[0];
    const Tensor<T>&P2 = tp.val(p), &Q2 = tp.val(q);
    const T inv_m = T(1) / static_cast<T>(m);
    if (tp.needs_grad(p)) {
      T* dp = tp.grad(p).ptr();
      for (std::size_t i = 0; i < P2.numel(); ++i)
        dp[i] -= g * inv_m * Q2.data[i] / (P2.data[i] + static_cast<T>(kLogEps));
    }
    if (tp.needs_grad(q)) {
      T* dq = tp.grad(q).ptr();
      for (std::size_t i = 0; i < P2.numel(); ++i)
        dq[i] -= g * inv_m * static_cast<T>(std::log(static_cast<double>(P2.data[i]) + kLogEps));
    }
  });
}

template <class T>
Var square(Tape<T>& t, Var a) {
  const Tensor<T>& A = t.val(a);
  Tensor<T> Y(A.shape);
  for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] = A.data[i] * A.data[i];
  return t.op(std::move(Y), {a}, [a](Tape<T>& tp, int id) {
    if (!tp.needs_grad(a)) return;
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& A2 = tp.val(a);
    T* da = tp.grad(a).ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) da[i] += T(2) * A2.data[i] * g.data[i];
  });
}

// Same data, new shape.
template <class T>
Var reshape(Tape<T>& t, Var x, Shape shape) {
  const Tensor<T>& X = t.val(x);
  require(shape.numel() == X.numel(), "reshape must preserve element count");
  Tensor<T> Y(shape, X.data);
  return t.op(std::move(Y), {x}, [x](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(id);
    T* dx = tp.grad(x).ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g.data[i];
  });
}

// Per-sample row scaling with a constant mask (stochastic depth). Rows
// [i*rows_per_sample, (i+1)*rows_per_sample) are scaled by mask[i].
template <class T>
Var row_scale(Tape<T>& t, Var x, std::shared_ptr<const std::vector<T>> mask, int rows_per_sample) {
  const Tensor<T>& X = t.val(x);
  const int R = X.shape[0], d = X.shape[1];
  require(R == static_cast<int>(mask->size()) * rows_per_sample, "row_scale mask size");
  Tensor<T> Y(X.shape);
  for (int r = 0; r < R; ++r) {
    const T s = (*mask)[static_cast<std::size_t>(r / rows_per_sample)];
    const T* xr = X.ptr() + static_cast<std::size_t>(r) * d;
    T* yr = Y.ptr() + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) yr[j] = xr[j] * s;
  }
  return t.op(std::move(Y), {x}, [x, mask, rows_per_sample, R, d](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const Tensor<T>& g = tp.grad(id);
    T* dx = tp.grad(x).ptr();
    for (int r = 0; r < R; ++r) {
      const T s = (*mask)[static_cast<std::size_t>(r / rows_per_sample)];
      const T* gr = g.ptr() + static_cast<std::size_t>(r) * d;
      for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(r) * d + j] += gr[j] * s;
    }
  });
}

template <class T>
Var sum_all(Tape<T>& t, Var x) {
  const Tensor<T>& X = t.val(x);
  Tensor<T> Y({1});
  double s = 0;
  for (std::size_t i = 0; i < X.numel(); ++i) s += X.data[i];
  Y.data[0] = static_cast<T>(s);
  return t.op(std::move(Y), {x}, [x](Tape<T>& tp, int id) {
    if (!tp.needs_grad(x)) return;
    const T g = tp.grad(id).data[0];
    T* dx = tp.grad(x).ptr();
    for (std::size_t i = 0; i < tp.val(x).numel(); ++i) dx[i] += g;
  });
}

// Weighted sum of scalar nodes; the loss assembler.
template <class T>
Var wsum(Tape<T>& t, const std::vector<std::pair<Var, T>>& terms) {
  require(!terms.empty(), "wsum needs at least one term");
  Tensor<T> Y({1});
  double s = 0;
  for (const auto& [v, w] : terms) {
    require(t.val(v).numel() == 1, "wsum terms must be scalars");
    s += static_cast<double>(w) * t.val(v).data[0];
  }
  Y.data[0] = static_cast<T>(s);
  std::vector<Var> parents;
  parents.reserve(terms.size());
  for (const auto& [v, w] : terms) parents.push_back(v);
  return t.op_dyn(std::move(Y), parents, [terms](Tape<T>& tp, int id) {
    const T g = tp.grad(id).data[0];
    for (const auto& [v, w] : terms)
      if (tp.needs_grad(v)) tp.grad(v).data[0] += w * g;
  });
}

}  // namespace op
}  // namespace muxvit
