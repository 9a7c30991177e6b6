#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <vector>

#include "cadmil/tensor.hpp"

namespace cadmil::kernels {

struct Conv3Spec {
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> pad{0, 0, 0};
};

struct Conv1Spec {
  int64_t stride = 1;
  int64_t pad = 0;
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  check_arg(k <= in + 2 * pad, "kernel extent " + std::to_string(k) +
                                   " exceeds padded input extent " + std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
T* scratch_a(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

template <typename T>
T* scratch_b(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn_acc(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
  for (int64_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    const T* arow = A + m * K;
    for (int64_t k = 0; k < K; ++k) {
      const T a = arow[k];
      if (a == T(0)) continue;
      const T* brow = B + k * N;
      for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[M,N] = A^T * B with A[K,M], B[K,N]
template <typename T>
void gemm_tn(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
  std::memset(C, 0, sizeof(T) * static_cast<size_t>(M * N));
  for (int64_t k = 0; k < K; ++k) {
    const T* arow = A + k * M;
    const T* brow = B + k * N;
    for (int64_t m = 0; m < M; ++m) {
      const T a = arow[m];
      if (a == T(0)) continue;
      T* crow = C + m * N;
      for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[M,N] += A[M,K] * B^T with B[N,K]
template <typename T>
void gemm_nt_acc(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C) {
  for (int64_t m = 0; m < M; ++m) {
    const T* arow = A + m * K;
    T* crow = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const T* brow = B + n * K;
      T acc = T(0);
      for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// ---------------------------------------------------------------------------
// 3-D convolution, layout x[C,D,H,W], w[K,C,kd,kh,kw], y[K,OD,OH,OW]
// ---------------------------------------------------------------------------

template <typename T>
void im2col_3d(const T* x, int64_t C, int64_t D, int64_t H, int64_t W, int64_t KD, int64_t KH,
               int64_t KW, const Conv3Spec& sp, int64_t OD, int64_t OH, int64_t OW, T* col) {
  const int64_t out_n = OD * OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t zd = 0; zd < KD; ++zd) {
      for (int64_t zh = 0; zh < KH; ++zh) {
        for (int64_t zw = 0; zw < KW; ++zw) {
          T* row = col + (((c * KD + zd) * KH + zh) * KW + zw) * out_n;
          for (int64_t od = 0; od < OD; ++od) {
            const int64_t id = od * sp.stride[0] + zd - sp.pad[0];
            if (id < 0 || id >= D) {
              std::memset(row + od * OH * OW, 0, sizeof(T) * static_cast<size_t>(OH * OW));
              continue;
            }
            for (int64_t oh = 0; oh < OH; ++oh) {
              const int64_t ih = oh * sp.stride[1] + zh - sp.pad[1];
              T* dst = row + (od * OH + oh) * OW;
              if (ih < 0 || ih >= H) {
                std::memset(dst, 0, sizeof(T) * static_cast<size_t>(OW));
                continue;
              }
              const T* src = x + ((c * D + id) * H + ih) * W;
              for (int64_t ow = 0; ow < OW; ++ow) {
                const int64_t iw = ow * sp.stride[2] + zw - sp.pad[2];
                dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_3d_acc(const T* col, int64_t C, int64_t D, int64_t H, int64_t W, int64_t KD, int64_t KH,
                   int64_t KW, const Conv3Spec& sp, int64_t OD, int64_t OH, int64_t OW, T* x) {
  const int64_t out_n = OD * OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t zd = 0; zd < KD; ++zd) {
      for (int64_t zh = 0; zh < KH; ++zh) {
        for (int64_t zw = 0; zw < KW; ++zw) {
          const T* row = col + (((c * KD + zd) * KH + zh) * KW + zw) * out_n;
          for (int64_t od = 0; od < OD; ++od) {
            const int64_t id = od * sp.stride[0] + zd - sp.pad[0];
            if (id < 0 || id >= D) continue;
            for (int64_t oh = 0; oh < OH; ++oh) {
              const int64_t ih = oh * sp.stride[1] + zh - sp.pad[1];
              if (ih < 0 || ih >= H) continue;
              const T* src = row + (od * OH + oh) * OW;
              T* dst = x + ((c * D + id) * H + ih) * W;
              for (int64_t ow = 0; ow < OW; ++ow) {
                const int64_t iw = ow * sp.stride[2] + zw - sp.pad[2];
                if (iw >= 0 && iw < W) dst[iw] += src[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_fwd(const T* x, int64_t C, int64_t D, int64_t H, int64_t W, const T* w, int64_t K,
                int64_t KD, int64_t KH, int64_t KW, const T* bias, const Conv3Spec& sp, T* y,
                int64_t OD, int64_t OH, int64_t OW) {
  const int64_t patch = C * KD * KH * KW;
  const int64_t out_n = OD * OH * OW;
  T* col = scratch_a<T>(static_cast<size_t>(patch * out_n));
  im2col_3d(x, C, D, H, W, KD, KH, KW, sp, OD, OH, OW, col);
  for (int64_t k = 0; k < K; ++k) {
    const T b = bias ? bias[k] : T(0);
    T* row = y + k * out_n;
    for (int64_t i = 0; i < out_n; ++i) row[i] = b;
  }
  gemm_nn_acc(K, patch, out_n, w, col, y);
}

/// Exact adjoint of conv3d_fwd with respect to the input: maps u[K,OD,OH,OW]
/// back to x-space, accumulating into gx[C,D,H,W]. Doubles as the forward map
/// of the transposed convolution.
template <typename T>
void conv3d_adj(const T* u, int64_t C, int64_t D, int64_t H, int64_t W, const T* w, int64_t K,
                int64_t KD, int64_t KH, int64_t KW, const Conv3Spec& sp, int64_t OD, int64_t OH,
                int64_t OW, T* gx) {
  const int64_t patch = C * KD * KH * KW;
  const int64_t out_n = OD * OH * OW;
  T* gcol = scratch_b<T>(static_cast<size_t>(patch * out_n));
  gemm_tn(patch, K, out_n, w, u, gcol);
  col2im_3d_acc(gcol, C, D, H, W, KD, KH, KW, sp, OD, OH, OW, gx);
}

template <typename T>
void conv3d_wgrad(const T* x, int64_t C, int64_t D, int64_t H, int64_t W, const T* gy, int64_t K,
                  int64_t KD, int64_t KH, int64_t KW, const Conv3Spec& sp, int64_t OD, int64_t OH,
                  int64_t OW, T* gw) {
  const int64_t patch = C * KD * KH * KW;
  const int64_t out_n = OD * OH * OW;
  T* col = scratch_a<T>(static_cast<size_t>(patch * out_n));
  im2col_3d(x, C, D, H, W, KD, KH, KW, sp, OD, OH, OW, col);
  gemm_nt_acc(K, out_n, patch, gy, col, gw);
}

template <typename T>
void bias_grad_acc(const T* gy, int64_t K, int64_t out_n, T* gb) {
  for (int64_t k = 0; k < K; ++k) {
    const T* row = gy + k * out_n;
    T acc = T(0);
    for (int64_t i = 0; i < out_n; ++i) acc += row[i];
    gb[k] += acc;
  }
}

// ---------------------------------------------------------------------------
// 1-D convolution, layout x[C,L], w[K,C,kl], y[K,OL]
// ---------------------------------------------------------------------------

template <typename T>
void im2col_1d(const T* x, int64_t C, int64_t L, int64_t KL, const Conv1Spec& sp, int64_t OL,
               T* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t z = 0; z < KL; ++z) {
      T* row = col + (c * KL + z) * OL;
      const T* src = x + c * L;
      for (int64_t o = 0; o < OL; ++o) {
        const int64_t i = o * sp.stride + z - sp.pad;
        row[o] = (i >= 0 && i < L) ? src[i] : T(0);
      }
    }
  }
}

template <typename T>
void col2im_1d_acc(const T* col, int64_t C, int64_t L, int64_t KL, const Conv1Spec& sp, int64_t OL,
                   T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t z = 0; z < KL; ++z) {
      const T* row = col + (c * KL + z) * OL;
      T* dst = x + c * L;
      for (int64_t o = 0; o < OL; ++o) {
        const int64_t i = o * sp.stride + z - sp.pad;
        if (i >= 0 && i < L) dst[i] += row[o];
      }
    }
  }
}

template <typename T>
void conv1d_fwd(const T* x, int64_t C, int64_t L, const T* w, int64_t K, int64_t KL, const T* bias,
                const Conv1Spec& sp, T* y, int64_t OL) {
  const int64_t patch = C * KL;
  T* col = scratch_a<T>(static_cast<size_t>(patch * OL));
  im2col_1d(x, C, L, KL, sp, OL, col);
  for (int64_t k = 0; k < K; ++k) {
    const T b = bias ? bias[k] : T(0);
    T* row = y + k * OL;
    for (int64_t i = 0; i < OL; ++i) row[i] = b;
  }
  gemm_nn_acc(K, patch, OL, w, col, y);
}

template <typename T>
void conv1d_adj(const T* u, int64_t C, int64_t L, const T* w, int64_t K, int64_t KL,
                const Conv1Spec& sp, int64_t OL, T* gx) {
  const int64_t patch = C * KL;
  T* gcol = scratch_b<T>(static_cast<size_t>(patch * OL));
  gemm_tn(patch, K, OL, w, u, gcol);
  col2im_1d_acc(gcol, C, L, KL, sp, OL, gx);
}

template <typename T>
void conv1d_wgrad(const T* x, int64_t C, int64_t L, const T* gy, int64_t K, int64_t KL,
                  const Conv1Spec& sp, int64_t OL, T* gw) {
  const int64_t patch = C * KL;
  T* col = scratch_a<T>(static_cast<size_t>(patch * OL));
  im2col_1d(x, C, L, KL, sp, OL, col);
  gemm_nt_acc(K, OL, patch, gy, col, gw);
}

// ---------------------------------------------------------------------------
// Dense, layout x[n], W[m,n], b[m], y[m]
// ---------------------------------------------------------------------------

template <typename T>
void dense_fwd(const T* x, const T* w, const T* b, int64_t m, int64_t n, T* y) {
  for (int64_t i = 0; i < m; ++i) {
    const T* row = w + i * n;
    T acc = b ? b[i] : T(0);
    for (int64_t j = 0; j < n; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

template <typename T>
void dense_xgrad_acc(const T* gy, const T* w, int64_t m, int64_t n, T* gx) {
  for (int64_t i = 0; i < m; ++i) {
    const T g = gy[i];
    if (g == T(0)) continue;
    const T* row = w + i * n;
    for (int64_t j = 0; j < n; ++j) gx[j] += g * row[j];
  }
}

template <typename T>
void dense_wgrad_acc(const T* gy, const T* x, int64_t m, int64_t n, T* gw) {
  for (int64_t i = 0; i < m; ++i) {
    const T g = gy[i];
    if (g == T(0)) continue;
    T* row = gw + i * n;
    for (int64_t j = 0; j < n; ++j) row[j] += g * x[j];
  }
}

}  // namespace cadmil::kernels
