#pragma once

// Low-level numeric kernels: row-major GEMM variants, vectorized exp/erf,
// row softmax. Single-precision paths use AVX-512/AVX2 when the target
// supports them; every kernel runs a fixed operation order per output
// element, so results are bitwise reproducible run to run. Threaded paths
// partition disjoint output rows only, which keeps them bitwise identical
// for any thread count.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace muxvit {
namespace kern {

// ---------------------------------------------------------------- threading

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int max_threads() const { return max_threads_; }

  // Runs fn(begin, end) over a contiguous partition of [0, total).
  // Partitioning depends only on `total`, never on scheduling, and each
  // index is processed by exactly one invocation, so output is bitwise
  // independent of the thread count. Falls back to serial when the pool
  // is busy (e.g. concurrent training runs) or too small.
  void for_ranges(std::int64_t total, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (total <= 0) return;
    int nt = max_threads_;
    if (nt <= 1 || total < 256 || !lock_.try_lock()) {
      fn(0, total);
      return;
    }
    int parts = static_cast<int>(std::min<std::int64_t>(nt, total));
    std::int64_t chunk = (total + parts - 1) / parts;
    std::atomic<int> remaining(parts - 1);
    {
      std::lock_guard<std::mutex> g(mu_);
      jobs_.clear();
      for (int p = 1; p < parts; ++p) {
        std::int64_t b = p * chunk, e = std::min<std::int64_t>(total, b + chunk);
        if (b >= e) {
          remaining.fetch_sub(1);
          continue;
        }
        jobs_.push_back([&fn, b, e, &remaining] {
          fn(b, e);
          remaining.fetch_sub(1);
        });
      }
      generation_++;
    }
    cv_.notify_all();
    fn(0, std::min<std::int64_t>(total, chunk));
    while (remaining.load(std::memory_order_acquire) > 0) std::this_thread::yield();
    lock_.unlock();
  }

 private:
  ThreadPool() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MUXVIT_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) hw = v;
    }
    max_threads_ = std::max(1, hw);
    for (int i = 1; i < max_threads_; ++i) workers_.emplace_back([this] { worker(); });
  }
  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> g(mu_);
      stop_ = true;
      generation_++;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  void worker() {
    std::uint64_t seen = 0;
    for (;;) {
      std::function<void()> job;
      {
        std::unique_lock<std::mutex> g(mu_);
        cv_.wait(g, [&] { return stop_ || generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        if (!jobs_.empty()) {
          job = std::move(jobs_.back());
          jobs_.pop_back();
        }
      }
      while (job) {
        job();
        std::lock_guard<std::mutex> g(mu_);
        if (!jobs_.empty()) {
          job = std::move(jobs_.back());
          jobs_.pop_back();
        } else {
          job = nullptr;
        }
      }
    }
  }

  std::vector<std::thread> workers_;
  std::vector<std::function<void()>> jobs_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  int max_threads_ = 1;
  std::mutex lock_;
};

inline void parallel_rows(std::int64_t rows, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  ThreadPool::instance().for_ranges(rows, fn);
}

// ------------------------------------------------------------------- exp

// Cephes-style expf: exp(x) = 2^k * p(r). Max relative error ~9e-8.
inline float fast_expf(float v) {
  v = std::min(std::max(v, -87.3f), 88.7f);
  float z = v * 1.44269504088896341f + 12582912.0f;  // round-to-nearest
  float kf = z - 12582912.0f;
  float r = v - kf * 0.693359375f + kf * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.f;
  std::uint32_t ik = (std::bit_cast<std::uint32_t>(z) << 23) + std::bit_cast<std::uint32_t>(1.0f);
  return p * std::bit_cast<float>(ik);
}

#if defined(__AVX512F__)
inline __m512 expf_lanes(__m512 v) {
  v = _mm512_min_ps(_mm512_max_ps(v, _mm512_set1_ps(-87.3f)), _mm512_set1_ps(88.7f));
  const __m512 magic = _mm512_set1_ps(12582912.0f);
  __m512 z = _mm512_fmadd_ps(v, _mm512_set1_ps(1.44269504088896341f), magic);
  __m512 kf = _mm512_sub_ps(z, magic);
  __m512 r = _mm512_fnmadd_ps(kf, _mm512_set1_ps(0.693359375f), v);
  r = _mm512_fmadd_ps(kf, _mm512_set1_ps(2.12194440e-4f), r);
  __m512 p = _mm512_set1_ps(1.9875691500e-4f);
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
  p = _mm512_fmadd_ps(_mm512_mul_ps(p, r), r, _mm512_add_ps(r, _mm512_set1_ps(1.f)));
  __m512i ik = _mm512_add_epi32(_mm512_slli_epi32(_mm512_castps_si512(z), 23),
                                _mm512_castps_si512(_mm512_set1_ps(1.0f)));
  return _mm512_mul_ps(p, _mm512_castsi512_ps(ik));
}
#elif defined(__AVX2__)
inline __m256 expf_lanes(__m256 v) {
  v = _mm256_min_ps(_mm256_max_ps(v, _mm256_set1_ps(-87.3f)), _mm256_set1_ps(88.7f));
  const __m256 magic = _mm256_set1_ps(12582912.0f);
  __m256 z = _mm256_fmadd_ps(v, _mm256_set1_ps(1.44269504088896341f), magic);
  __m256 kf = _mm256_sub_ps(z, magic);
  __m256 r = _mm256_fnmadd_ps(kf, _mm256_set1_ps(0.693359375f), v);
  r = _mm256_fmadd_ps(kf, _mm256_set1_ps(2.12194440e-4f), r);
  __m256 p = _mm256_set1_ps(1.9875691500e-4f);
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.3981999507e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.3334519073e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.1665795894e-2f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.6666665459e-1f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(5.0000001201e-1f));
  p = _mm256_fmadd_ps(_mm256_mul_ps(p, r), r, _mm256_add_ps(r, _mm256_set1_ps(1.f)));
  __m256i ik = _mm256_add_epi32(_mm256_slli_epi32(_mm256_castps_si256(z), 23),
                                _mm256_castps_si256(_mm256_set1_ps(1.0f)));
  return _mm256_mul_ps(p, _mm256_castsi256_ps(ik));
}
#endif

inline void vexp(const float* x, float* y, std::int64_t n) {
  std::int64_t i = 0;
#if defined(__AVX512F__)
  for (; i + 16 <= n; i += 16) _mm512_storeu_ps(y + i, expf_lanes(_mm512_loadu_ps(x + i)));
#elif defined(__AVX2__)
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, expf_lanes(_mm256_loadu_ps(x + i)));
#endif
  for (; i < n; ++i) y[i] = fast_expf(x[i]);
}

inline void vexp(const double* x, double* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

// ------------------------------------------------------------------ reduce

inline float reduce_max(const float* x, std::int64_t n) {
  std::int64_t i = 0;
  float m = x[0];
#if defined(__AVX512F__)
  if (n >= 16) {
    __m512 acc = _mm512_loadu_ps(x);
    for (i = 16; i + 16 <= n; i += 16) acc = _mm512_max_ps(acc, _mm512_loadu_ps(x + i));
    m = _mm512_reduce_max_ps(acc);
  }
#endif
  for (; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

inline double reduce_max(const double* x, std::int64_t n) {
  double m = x[0];
  for (std::int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

// Fixed lane layout; summation order depends only on n.
inline float reduce_sum(const float* x, std::int64_t n) {
  std::int64_t i = 0;
  float s = 0.f;
#if defined(__AVX512F__)
  if (n >= 16) {
    __m512 acc = _mm512_loadu_ps(x);
    for (i = 16; i + 16 <= n; i += 16) acc = _mm512_add_ps(acc, _mm512_loadu_ps(x + i));
    s = _mm512_reduce_add_ps(acc);
  }
#endif
  for (; i < n; ++i) s += x[i];
  return s;
}

inline double reduce_sum(const double* x, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}

inline float reduce_dot(const float* x, const float* y, std::int64_t n) {
  std::int64_t i = 0;
  float s = 0.f;
#if defined(__AVX512F__)
  if (n >= 16) {
    __m512 acc = _mm512_mul_ps(_mm512_loadu_ps(x), _mm512_loadu_ps(y));
    for (i = 16; i + 16 <= n; i += 16)
      acc = _mm512_fmadd_ps(_mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i), acc);
    s = _mm512_reduce_add_ps(acc);
  }
#endif
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline double reduce_dot(const double* x, const double* y, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// sum of (x - mu)^2, fixed lane order
inline float reduce_sqdev(const float* x, float mu, std::int64_t n) {
  std::int64_t i = 0;
  float s = 0.f;
#if defined(__AVX512F__)
  if (n >= 16) {
    const __m512 m = _mm512_set1_ps(mu);
    __m512 c = _mm512_sub_ps(_mm512_loadu_ps(x), m);
    __m512 acc = _mm512_mul_ps(c, c);
    for (i = 16; i + 16 <= n; i += 16) {
      c = _mm512_sub_ps(_mm512_loadu_ps(x + i), m);
      acc = _mm512_fmadd_ps(c, c, acc);
    }
    s = _mm512_reduce_add_ps(acc);
  }
#endif
  for (; i < n; ++i) s += (x[i] - mu) * (x[i] - mu);
  return s;
}

inline double reduce_sqdev(const double* x, double mu, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += (x[i] - mu) * (x[i] - mu);
  return s;
}

// --------------------------------------------------------------------- gemm

// C[M x N] = A[M x K] * B[K x N] (+= when accumulate). Row-major with
// leading dimensions. The f32 path holds a 64-wide slice of the C row in
// registers across the whole K loop.
namespace detail {

template <class T, int NT>
inline void gemm_nn_rows(std::int64_t i0, std::int64_t i1, std::int64_t N, std::int64_t K,
                         const T* __restrict A, std::int64_t lda, const T* __restrict B,
                         std::int64_t ldb, T* __restrict C, std::int64_t ldc, bool accumulate) {
  for (std::int64_t i = i0; i < i1; ++i) {
    const T* a = A + i * lda;
    T* c = C + i * ldc;
    for (std::int64_t j0 = 0; j0 < N; j0 += NT) {
      const std::int64_t jn = std::min<std::int64_t>(NT, N - j0);
      T acc[NT];
      if (accumulate)
        for (std::int64_t j = 0; j < jn; ++j) acc[j] = c[j0 + j];
      else
        for (std::int64_t j = 0; j < jn; ++j) acc[j] = T(0);
      if (jn == NT) {
        for (std::int64_t k = 0; k < K; ++k) {
          const T ak = a[k];
          const T* b = B + k * ldb + j0;
          for (std::int64_t j = 0; j < NT; ++j) acc[j] += ak * b[j];
        }
      } else {
        for (std::int64_t k = 0; k < K; ++k) {
          const T ak = a[k];
          const T* b = B + k * ldb + j0;
          for (std::int64_t j = 0; j < jn; ++j) acc[j] += ak * b[j];
        }
      }
      for (std::int64_t j = 0; j < jn; ++j) c[j0 + j] = acc[j];
    }
  }
}

// Two output rows per pass share the B loads.
template <class T, int NT>
inline void gemm_nn_rows2(std::int64_t i0, std::int64_t i1, std::int64_t N, std::int64_t K,
                          const T* __restrict A, std::int64_t lda, const T* __restrict B,
                          std::int64_t ldb, T* __restrict C, std::int64_t ldc, bool accumulate) {
  std::int64_t i = i0;
  for (; i + 2 <= i1; i += 2) {
    const T* a0 = A + i * lda;
    const T* a1 = a0 + lda;
    T* c0 = C + i * ldc;
    T* c1 = c0 + ldc;
    for (std::int64_t j0 = 0; j0 < N; j0 += NT) {
      const std::int64_t jn = std::min<std::int64_t>(NT, N - j0);
      T acc0[NT], acc1[NT];
      if (accumulate) {
        for (std::int64_t j = 0; j < jn; ++j) acc0[j] = c0[j0 + j];
        for (std::int64_t j = 0; j < jn; ++j) acc1[j] = c1[j0 + j];
      } else {
        for (std::int64_t j = 0; j < jn; ++j) acc0[j] = T(0);
        for (std::int64_t j = 0; j < jn; ++j) acc1[j] = T(0);
      }
      if (jn == NT) {
        for (std::int64_t k = 0; k < K; ++k) {
          const T ak0 = a0[k], ak1 = a1[k];
          const T* b = B + k * ldb + j0;
          for (std::int64_t j = 0; j < NT; ++j) {
            const T bj = b[j];
            acc0[j] += ak0 * bj;
            acc1[j] += ak1 * bj;
          }
        }
      } else {
        for (std::int64_t k = 0; k < K; ++k) {
          const T ak0 = a0[k], ak1 = a1[k];
          const T* b = B + k * ldb + j0;
          for (std::int64_t j = 0; j < jn; ++j) {
            const T bj = b[j];
            acc0[j] += ak0 * bj;
            acc1[j] += ak1 * bj;
          }
        }
      }
      for (std::int64_t j = 0; j < jn; ++j) c0[j0 + j] = acc0[j];
      for (std::int64_t j = 0; j < jn; ++j) c1[j0 + j] = acc1[j];
    }
  }
  if (i < i1) gemm_nn_rows<T, NT>(i, i1, N, K, A, lda, B, ldb, C, ldc, accumulate);
}

}  // namespace detail

template <class T>
inline void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, std::int64_t lda,
                    const T* B, std::int64_t ldb, T* C, std::int64_t ldc, bool accumulate = false) {
  const double work = static_cast<double>(M) * N * K;
  if (std::is_same<T, float>::value && work > (1 << 20) && M >= 64) {
    parallel_rows(M, [&](std::int64_t b, std::int64_t e) {
      detail::gemm_nn_rows2<T, 64>(b, e, N, K, A, lda, B, ldb, C, ldc, accumulate);
    });
  } else {
    detail::gemm_nn_rows2<T, 64>(0, M, N, K, A, lda, B, ldb, C, ldc, accumulate);
  }
}

// C[M x N] = A^T * B where A is [K x M]: used for weight gradients. The k
// loop is outermost so C (small for all call sites) stays cached; two k
// rows per pass halve the C traffic. Per-element accumulation order is
// k-ascending with a fixed pairing.
template <class T>
inline void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const T* __restrict A,
                    std::int64_t lda, const T* __restrict B, std::int64_t ldb, T* __restrict C,
                    std::int64_t ldc, bool accumulate = false) {
  if (!accumulate)
    for (std::int64_t i = 0; i < M; ++i) std::fill(C + i * ldc, C + i * ldc + N, T(0));
  std::int64_t k = 0;
  for (; k + 2 <= K; k += 2) {
    const T* a0 = A + k * lda;
    const T* a1 = a0 + lda;
    const T* b0 = B + k * ldb;
    const T* b1 = b0 + ldb;
    for (std::int64_t i = 0; i < M; ++i) {
      const T ai0 = a0[i], ai1 = a1[i];
      T* c = C + i * ldc;
      for (std::int64_t j = 0; j < N; ++j) c[j] += ai0 * b0[j] + ai1 * b1[j];
    }
  }
  for (; k < K; ++k) {
    const T* a = A + k * lda;
    const T* b = B + k * ldb;
    for (std::int64_t i = 0; i < M; ++i) {
      const T aik = a[i];
      T* c = C + i * ldc;
      for (std::int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C[M x N] = A * B^T where B is [N x K]. B is transposed into scratch and
// the nn kernel reused, so B columns stream contiguously.
template <class T>
inline void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, std::int64_t lda,
                    const T* B, std::int64_t ldb, T* C, std::int64_t ldc, bool accumulate = false) {
  thread_local std::vector<T> scratch;
  scratch.resize(static_cast<std::size_t>(K) * N);
  T* bt = scratch.data();
  for (std::int64_t j = 0; j < N; ++j)
    for (std::int64_t k = 0; k < K; ++k) bt[k * N + j] = B[j * ldb + k];
  detail::gemm_nn_rows2<T, 64>(0, M, N, K, A, lda, bt, N, C, ldc, accumulate);
}

// ------------------------------------------------------------- softmax rows

// In/out may alias. Each row: subtract max, exp, normalize.
template <class T>
inline void softmax_rows_buf(const T* x, T* y, std::int64_t rows, std::int64_t n) {
  auto run = [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const T* xr = x + r * n;
      T* yr = y + r * n;
      const T m = reduce_max(xr, n);
      for (std::int64_t j = 0; j < n; ++j) yr[j] = xr[j] - m;
      vexp(yr, yr, n);
      const T s = reduce_sum(yr, n);
      const T inv = T(1) / s;
      for (std::int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
  };
  if (rows * n > (1 << 16))
    parallel_rows(rows, run);
  else
    run(0, rows);
}

// --------------------------------------------------------------------- erf

// Abramowitz & Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
// Kept as the single-precision erf so the exact-GELU forward stays cheap;
// the double path uses std::erf.
inline float fast_erff(float x) {
  const float t = std::fabs(x);
  const float s = 1.f / (1.f + 0.3275911f * t);
  float p = 1.061405429f;
  p = p * s - 1.453152027f;
  p = p * s + 1.421413741f;
  p = p * s - 0.284496736f;
  p = p * s + 0.254829592f;
  const float e = fast_expf(-t * t);
  const float r = 1.f - p * s * e;
  return x < 0.f ? -r : r;
}

inline double erf_val(double x) { return std::erf(x); }
inline float erf_val(float x) { return fast_erff(x); }

template <class T>
inline T gelu_val(T x) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  return T(0.5) * x * (T(1) + erf_val(static_cast<T>(x * inv_sqrt2)));
}

// d/dx gelu = Phi(x) + x * phi(x)
template <class T>
inline T gelu_grad(T x) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  const T inv_sqrt2pi = T(0.3989422804014326779);
  const T phi_cdf = T(0.5) * (T(1) + erf_val(static_cast<T>(x * inv_sqrt2)));
  T e;
  if constexpr (sizeof(T) == 4)
    e = fast_expf(static_cast<float>(T(-0.5) * x * x));
  else
    e = std::exp(T(-0.5) * x * x);
  return phi_cdf + x * inv_sqrt2pi * e;
}

#if defined(__AVX512F__)
// A&S 7.1.26 erf on 16 lanes; matches fast_erff.
inline __m512 erf_lanes(__m512 x) {
  const __m512 sign_mask = _mm512_set1_ps(-0.0f);
  __m512 t = _mm512_abs_ps(x);
  __m512 s = _mm512_div_ps(_mm512_set1_ps(1.f),
                           _mm512_fmadd_ps(_mm512_set1_ps(0.3275911f), t, _mm512_set1_ps(1.f)));
  __m512 p = _mm512_set1_ps(1.061405429f);
  p = _mm512_fmadd_ps(p, s, _mm512_set1_ps(-1.453152027f));
  p = _mm512_fmadd_ps(p, s, _mm512_set1_ps(1.421413741f));
  p = _mm512_fmadd_ps(p, s, _mm512_set1_ps(-0.284496736f));
  p = _mm512_fmadd_ps(p, s, _mm512_set1_ps(0.254829592f));
  __m512 e = expf_lanes(_mm512_mul_ps(_mm512_sub_ps(_mm512_setzero_ps(), t), t));
  __m512 r = _mm512_fnmadd_ps(_mm512_mul_ps(p, s), e, _mm512_set1_ps(1.f));
  // copysign(r, x)
  return _mm512_castsi512_ps(_mm512_or_si512(
      _mm512_castps_si512(r), _mm512_and_si512(_mm512_castps_si512(x), _mm512_castps_si512(sign_mask))));
}

inline __m512 gelu_lanes(__m512 x) {
  const __m512 half = _mm512_set1_ps(0.5f);
  __m512 phi = _mm512_fmadd_ps(
      erf_lanes(_mm512_mul_ps(x, _mm512_set1_ps(0.70710678118654752f))), half, half);
  return _mm512_mul_ps(x, phi);
}

// Phi(x) + x * phi(x)
inline __m512 gelu_grad_lanes(__m512 x) {
  const __m512 half = _mm512_set1_ps(0.5f);
  __m512 phi_cdf = _mm512_fmadd_ps(
      erf_lanes(_mm512_mul_ps(x, _mm512_set1_ps(0.70710678118654752f))), half, half);
  __m512 e = expf_lanes(_mm512_mul_ps(_mm512_mul_ps(x, x), _mm512_set1_ps(-0.5f)));
  return _mm512_fmadd_ps(_mm512_mul_ps(x, _mm512_set1_ps(0.39894228040143268f)), e, phi_cdf);
}
#endif

template <class T>
inline void gelu_forward(const T* x, T* y, std::int64_t n) {
  if constexpr (sizeof(T) == 4) {
    parallel_rows((n + 4095) / 4096, [&](std::int64_t b, std::int64_t e) {
      const std::int64_t lo = b * 4096, hi = std::min<std::int64_t>(n, e * 4096);
      std::int64_t i = lo;
#if defined(__AVX512F__)
      for (; i + 16 <= hi; i += 16) _mm512_storeu_ps(y + i, gelu_lanes(_mm512_loadu_ps(x + i)));
#endif
      for (; i < hi; ++i) y[i] = gelu_val(x[i]);
    });
  } else {
    for (std::int64_t i = 0; i < n; ++i) y[i] = gelu_val(x[i]);
  }
}

template <class T>
inline void gelu_backward(const T* x, const T* dy, T* dx_accum, std::int64_t n) {
  std::int64_t i = 0;
  if constexpr (sizeof(T) == 4) {
#if defined(__AVX512F__)
    for (; i + 16 <= n; i += 16) {
      __m512 acc = _mm512_loadu_ps(dx_accum + i);
      acc = _mm512_fmadd_ps(_mm512_loadu_ps(dy + i), gelu_grad_lanes(_mm512_loadu_ps(x + i)), acc);
      _mm512_storeu_ps(dx_accum + i, acc);
    }
#endif
  }
  for (; i < n; ++i) dx_accum[i] += dy[i] * gelu_grad(x[i]);
}

}  // namespace kern
}  // namespace muxvit
