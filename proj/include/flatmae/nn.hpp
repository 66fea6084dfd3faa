// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flatmae/common.hpp"

// Small dense NN kernels used by the autoencoder and the probes. All
// matrices are row-major. Backward functions accumulate (+=) into their
// gradient outputs; callers zero the buffers.

namespace flatmae::nn {

// C[M x N] (+)= A[M x K] * B[K x N]
template <typename T, bool Accum = false>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (!Accum)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      T av = a[i * k + l];
      if (av == T(0)) continue;
      const T* br = b + l * n;
      T* cr = c + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// C[M x N] (+)= A[M x K] * B[N x K]^T
template <typename T, bool Accum = false>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T* ar = a + i * k;
      const T* br = b + j * k;
      T acc = Accum ? c[i * n + j] : T(0);
      for (std::size_t l = 0; l < k; ++l) acc += ar[l] * br[l];
      c[i * n + j] = acc;
    }
}

// C[K x N] (+)= A[M x K]^T * B[M x N]
template <typename T, bool Accum = true>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (!Accum)
    for (std::size_t i = 0; i < k * n; ++i) c[i] = T(0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      T av = a[i * k + l];
      if (av == T(0)) continue;
      const T* br = b + i * n;
      T* cr = c + l * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

// y[M x N] = x[M x K] * W[N x K]^T + b[N]
template <typename T>
void linear_fwd(const T* x, const T* w, const T* b, T* y, std::size_t m, std::size_t k,
                std::size_t n) {
  gemm_nt<T>(x, w, y, m, k, n);
  if (b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += b[j];
}

// dx[M x K] += dy * W ; dW[N x K] += dy^T * x ; db[N] += colsum(dy)
template <typename T>
void linear_bwd(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, std::size_t m,
                std::size_t k, std::size_t n) {
  if (dx) gemm_nn<T, true>(dy, w, dx, m, n, k);
  if (dw) gemm_tn<T, true>(dy, x, dw, m, n, k);
  if (db)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
}

inline constexpr double kLnEps = 1e-6;

// LayerNorm over the last dimension; caches xhat and rstd for backward.
template <typename T>
void layernorm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* xhat, T* rstd,
                   std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x + i * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T dv = xi[j] - mean;
      var += dv * dv;
    }
    var /= T(d);
    T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (xi[j] - mean) * r;
      xhat[i * d + j] = h;
      y[i * d + j] = h * gamma[j] + beta[j];
    }
  }
}

template <typename T>
void layernorm_bwd(const T* xhat, const T* rstd, const T* gamma, const T* dy, T* dx, T* dgamma,
                   T* dbeta, std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* hy = xhat + i * d;
    const T* gy = dy + i * d;
    T sum_dh = T(0), sum_dh_h = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T dh = gy[j] * gamma[j];
      sum_dh += dh;
      sum_dh_h += dh * hy[j];
      if (dgamma) dgamma[j] += gy[j] * hy[j];
      if (dbeta) dbeta[j] += gy[j];
    }
    T inv_d = T(1) / T(d);
    for (std::size_t j = 0; j < d; ++j) {
      T dh = gy[j] * gamma[j];
      dx[i * d + j] += rstd[i] * (dh - inv_d * sum_dh - hy[j] * inv_d * sum_dh_h);
    }
  }
}

// Exact (erf) GELU; smooth, so finite-difference checks stay tight.
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <typename T>
T gelu_grad(T x) {
  T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
  return cdf + x * pdf;
}

// In-place row softmax.
template <typename T>
void softmax_rows(T* x, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* r = x + i * n;
    T mx = r[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (std::size_t j = 0; j < n; ++j) r[j] /= sum;
  }
}

// dx = (dy - sum(dy*y)) * y, rowwise, accumulated.
template <typename T>
void softmax_bwd_rows(const T* y, const T* dy, T* dx, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* yr = y + i * n;
    const T* gr = dy + i * n;
    T dot = T(0);
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
    for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += (gr[j] - dot) * yr[j];
  }
}

// ---- multi-head self-attention over N tokens ----

template <typename T>
struct AttentionCache {
  std::vector<T> qkv;   // N x 3d, [q | k | v] per row
  std::vector<T> attn;  // heads x N x N softmax weights
  std::vector<T> ctx;   // N x d, pre-projection
};

// x[N x d] -> out[N x d]. w_qkv[3d x d], w_proj[d x d].
template <typename T>
void attention_fwd(const T* x, const T* w_qkv, const T* b_qkv, const T* w_proj, const T* b_proj,
                   T* out, AttentionCache<T>& cache, std::size_t n_tok, std::size_t d,
                   std::size_t heads) {
  std::size_t dh = d / heads;
  T scale = T(1) / std::sqrt(T(dh));
  cache.qkv.resize(n_tok * 3 * d);
  cache.attn.assign(heads * n_tok * n_tok, T(0));
  cache.ctx.assign(n_tok * d, T(0));
  linear_fwd(x, w_qkv, b_qkv, cache.qkv.data(), n_tok, d, 3 * d);

  auto q = [&](std::size_t i, std::size_t h_) { return cache.qkv.data() + i * 3 * d + h_ * dh; };
  auto k = [&](std::size_t i, std::size_t h_) {
    return cache.qkv.data() + i * 3 * d + d + h_ * dh;
  };
  auto v = [&](std::size_t i, std::size_t h_) {
    return cache.qkv.data() + i * 3 * d + 2 * d + h_ * dh;
  };

  for (std::size_t h = 0; h < heads; ++h) {
    T* aw = cache.attn.data() + h * n_tok * n_tok;
    for (std::size_t i = 0; i < n_tok; ++i)
      for (std::size_t j = 0; j < n_tok; ++j) {
        T s = T(0);
        const T* qi = q(i, h);
        const T* kj = k(j, h);
        for (std::size_t l = 0; l < dh; ++l) s += qi[l] * kj[l];
        aw[i * n_tok + j] = s * scale;
      }
    softmax_rows(aw, n_tok, n_tok);
    for (std::size_t i = 0; i < n_tok; ++i) {
      T* ci = cache.ctx.data() + i * d + h * dh;
      for (std::size_t j = 0; j < n_tok; ++j) {
        T w = aw[i * n_tok + j];
        const T* vj = v(j, h);
        for (std::size_t l = 0; l < dh; ++l) ci[l] += w * vj[l];
      }
    }
  }
  linear_fwd(cache.ctx.data(), w_proj, b_proj, out, n_tok, d, d);
}

template <typename T>
void attention_bwd(const T* x, const T* w_qkv, const T* w_proj, const T* d_out,
                   const AttentionCache<T>& cache, T* dx, T* dw_qkv, T* db_qkv, T* dw_proj,
                   T* db_proj, std::size_t n_tok, std::size_t d, std::size_t heads) {
  std::size_t dh = d / heads;
  T scale = T(1) / std::sqrt(T(dh));

  std::vector<T> d_ctx(n_tok * d, T(0));
  linear_bwd(cache.ctx.data(), w_proj, d_out, d_ctx.data(), dw_proj, db_proj, n_tok, d, d);

  std::vector<T> d_qkv(n_tok * 3 * d, T(0));
  auto q = [&](std::size_t i, std::size_t h_) { return cache.qkv.data() + i * 3 * d + h_ * dh; };
  auto k = [&](std::size_t i, std::size_t h_) {
    return cache.qkv.data() + i * 3 * d + d + h_ * dh;
  };
  auto v = [&](std::size_t i, std::size_t h_) {
    return cache.qkv.data() + i * 3 * d + 2 * d + h_ * dh;
  };
  auto dq = [&](std::size_t i, std::size_t h_) { return d_qkv.data() + i * 3 * d + h_ * dh; };
  auto dk = [&](std::size_t i, std::size_t h_) { return d_qkv.data() + i * 3 * d + d + h_ * dh; };
  auto dv = [&](std::size_t i, std::size_t h_) {
    return d_qkv.data() + i * 3 * d + 2 * d + h_ * dh;
  };

  std::vector<T> d_attn(n_tok * n_tok);
  std::vector<T> d_scores(n_tok * n_tok);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* aw = cache.attn.data() + h * n_tok * n_tok;
    // d_attn and dv from ctx = attn * v
    std::fill(d_attn.begin(), d_attn.end(), T(0));
    for (std::size_t i = 0; i < n_tok; ++i) {
      const T* dci = d_ctx.data() + i * d + h * dh;
      for (std::size_t j = 0; j < n_tok; ++j) {
        const T* vj = v(j, h);
        T* dvj = dv(j, h);
        T acc = T(0);
        T w = aw[i * n_tok + j];
        for (std::size_t l = 0; l < dh; ++l) {
          acc += dci[l] * vj[l];
          dvj[l] += w * dci[l];
        }
        d_attn[i * n_tok + j] = acc;
      }
    }
    std::fill(d_scores.begin(), d_scores.end(), T(0));
    softmax_bwd_rows(aw, d_attn.data(), d_scores.data(), n_tok, n_tok);
    for (std::size_t i = 0; i < n_tok; ++i)
      for (std::size_t j = 0; j < n_tok; ++j) {
        T g = d_scores[i * n_tok + j] * scale;
        if (g == T(0)) continue;
        const T* qi = q(i, h);
        const T* kj = k(j, h);
        T* dqi = dq(i, h);
        T* dkj = dk(j, h);
        for (std::size_t l = 0; l < dh; ++l) {
          dqi[l] += g * kj[l];
          dkj[l] += g * qi[l];
        }
      }
  }
  linear_bwd(x, w_qkv, d_qkv.data(), dx, dw_qkv, db_qkv, n_tok, d, 3 * d);
}

// Softmax cross-entropy for the probe classifier. Returns loss; writes
// dlogits (softmax - onehot) if requested.
template <typename T>
T cross_entropy(const T* logits, std::size_t n_classes, std::size_t label, T* dlogits) {
  T mx = logits[0];
  for (std::size_t j = 1; j < n_classes; ++j) mx = std::max(mx, logits[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < n_classes; ++j) sum += std::exp(logits[j] - mx);
  T log_z = std::log(sum) + mx;
  if (dlogits) {
    for (std::size_t j = 0; j < n_classes; ++j)
      dlogits[j] = std::exp(logits[j] - log_z) - (j == label ? T(1) : T(0));
  }
  return log_z - logits[label];
}

}  // namespace flatmae::nn
