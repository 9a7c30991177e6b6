#pragma once

// Test-only reference implementations and gradient checking utilities.
// These stay independent of the kernels they verify: convolutions are
// re-derived with plain nested loops and gradients with central
// finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "cadmil/rng.hpp"
#include "cadmil/tensor.hpp"

namespace oracles {

using cadmil::Shape;
using cadmil::Tensor;

inline Tensor<double> random_tensor(Shape shape, cadmil::Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, sd);
  return t;
}

/// Naive cross-correlation, x[C,D,H,W] * w[K,C,kd,kh,kw] -> y[K,OD,OH,OW].
inline Tensor<double> conv3d_naive(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>* bias, std::array<int64_t, 3> stride,
                                   std::array<int64_t, 3> pad) {
  const int64_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int64_t K = w.shape[0], KD = w.shape[2], KH = w.shape[3], KW = w.shape[4];
  const int64_t OD = (D + 2 * pad[0] - KD) / stride[0] + 1;
  const int64_t OH = (H + 2 * pad[1] - KH) / stride[1] + 1;
  const int64_t OW = (W + 2 * pad[2] - KW) / stride[2] + 1;
  Tensor<double> y(Shape{K, OD, OH, OW});
  for (int64_t k = 0; k < K; ++k)
    for (int64_t od = 0; od < OD; ++od)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double acc = bias ? bias->data[k] : 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t zd = 0; zd < KD; ++zd)
              for (int64_t zh = 0; zh < KH; ++zh)
                for (int64_t zw = 0; zw < KW; ++zw) {
                  const int64_t id = od * stride[0] + zd - pad[0];
                  const int64_t ih = oh * stride[1] + zh - pad[1];
                  const int64_t iw = ow * stride[2] + zw - pad[2];
                  if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                  acc += x.data[((c * D + id) * H + ih) * W + iw] *
                         w.data[(((k * C + c) * KD + zd) * KH + zh) * KW + zw];
                }
          y.data[((k * OD + od) * OH + oh) * OW + ow] = acc;
        }
  return y;
}

inline Tensor<double> conv1d_naive(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>* bias, int64_t stride, int64_t pad) {
  const int64_t C = x.shape[0], L = x.shape[1];
  const int64_t K = w.shape[0], KL = w.shape[2];
  const int64_t OL = (L + 2 * pad - KL) / stride + 1;
  Tensor<double> y(Shape{K, OL});
  for (int64_t k = 0; k < K; ++k)
    for (int64_t o = 0; o < OL; ++o) {
      double acc = bias ? bias->data[k] : 0.0;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < KL; ++z) {
          const int64_t i = o * stride + z - pad;
          if (i < 0 || i >= L) continue;
          acc += x.data[c * L + i] * w.data[(k * C + c) * KL + z];
        }
      y.data[k * OL + o] = acc;
    }
  return y;
}

inline Tensor<double> dense_naive(const Tensor<double>& x, const Tensor<double>& w,
                                  const Tensor<double>& b) {
  const int64_t m = w.shape[0], n = w.shape[1];
  Tensor<double> y(Shape{m});
  for (int64_t i = 0; i < m; ++i) {
    double acc = b.data[i];
    for (int64_t j = 0; j < n; ++j) acc += w.data[i * n + j] * x.data[j];
    y.data[i] = acc;
  }
  return y;
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor = 1e-3) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Central finite-difference check. `loss` must rebuild the forward pass
/// from the current parameter values; `backward_loss` additionally runs
/// backward and leaves gradients in the parameters' grad buffers.
inline double fd_max_rel_error(std::vector<Tensor<double>*> params,
                               const std::function<double()>& loss,
                               const std::function<double()>& backward_loss, double h = 1e-5,
                               double denom_floor = 1e-3) {
  for (auto* p : params) {
    p->require_grad();
    p->zero_grad();
  }
  backward_loss();
  double worst = 0.0;
  for (auto* p : params) {
    for (size_t i = 0; i < p->data.size(); ++i) {
      const double saved = p->data[i];
      p->data[i] = saved + h;
      const double lp = loss();
      p->data[i] = saved - h;
      const double lm = loss();
      p->data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = p->grad[i];
      const double denom = std::max({std::fabs(numeric), std::fabs(analytic), denom_floor});
      worst = std::max(worst, std::fabs(analytic - numeric) / denom);
    }
  }
  return worst;
}

inline double inner(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace oracles
