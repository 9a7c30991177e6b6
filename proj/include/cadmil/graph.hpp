#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "cadmil/kernels.hpp"
#include "cadmil/tensor.hpp"

namespace cadmil {

using kernels::Conv1Spec;
using kernels::Conv3Spec;

/// Reverse-mode tape. Nodes are appended in execution order, so the node
/// list is topologically ordered by construction; backward() walks it once
/// in reverse. Values are computed eagerly as ops are added.
template <typename T>
class Graph {
 public:
  struct Node {
    const char* op = "";
    std::vector<int> in;
    Tensor<T> value;
    std::vector<T> grad;
    bool touched = false;
    Tensor<T>* bound = nullptr;
    std::function<void(Graph&, Node&)> vjp;
  };

  int leaf(Tensor<T> v) {
    Node n;
    n.op = "leaf";
    n.value = std::move(v);
    return push(std::move(n));
  }

  /// Leaf bound to an external parameter; after backward() the node gradient
  /// is accumulated into the parameter's grad buffer. Repeated calls with the
  /// same tensor return the same node so shared weights are counted once.
  int param(Tensor<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return it->second;
    Node n;
    n.op = "param";
    n.value = p;
    n.bound = &p;
    const int id = push(std::move(n));
    param_ids_[&p] = id;
    return id;
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const std::vector<T>& grad_of(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  size_t size() const { return nodes_.size(); }

  // ---- layer ops ----------------------------------------------------------

  int conv3d(int x, int w, int b, const Conv3Spec& sp) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    check_arg(xv.shape.size() == 4, "conv3d input must be rank 4 [C,D,H,W], got " + shape_str(xv.shape));
    check_arg(wv.shape.size() == 5, "conv3d kernels must be rank 5 [K,C,d,h,w], got " + shape_str(wv.shape));
    check_arg(wv.shape[1] == xv.shape[0],
              "conv3d channel mismatch: input " + shape_str(xv.shape) + " vs kernels " + shape_str(wv.shape));
    const int64_t C = xv.shape[0], D = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const int64_t K = wv.shape[0], KD = wv.shape[2], KH = wv.shape[3], KW = wv.shape[4];
    const int64_t OD = kernels::conv_out_extent(D, KD, sp.stride[0], sp.pad[0]);
    const int64_t OH = kernels::conv_out_extent(H, KH, sp.stride[1], sp.pad[1]);
    const int64_t OW = kernels::conv_out_extent(W, KW, sp.stride[2], sp.pad[2]);
    if (b >= 0)
      check_arg(val(b).shape == Shape{K}, "conv3d bias must be [K]=" + std::to_string(K) + ", got " + shape_str(val(b).shape));

    Node n;
    n.op = "conv3d";
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = Tensor<T>(Shape{K, OD, OH, OW});
    kernels::conv3d_fwd(xv.data.data(), C, D, H, W, wv.data.data(), K, KD, KH, KW,
                        b >= 0 ? val(b).data.data() : nullptr, sp, n.value.data.data(), OD, OH, OW);
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& wt = g.val(w);
      kernels::conv3d_adj(self.grad.data(), C, D, H, W, wt.data.data(), K, KD, KH, KW, sp, OD, OH,
                          OW, g.g(x).data());
      g.touch(x);
      kernels::conv3d_wgrad(xt.data.data(), C, D, H, W, self.grad.data(), K, KD, KH, KW, sp, OD,
                            OH, OW, g.g(w).data());
      g.touch(w);
      if (b >= 0) {
        kernels::bias_grad_acc(self.grad.data(), K, OD * OH * OW, g.g(b).data());
        g.touch(b);
      }
    };
    return push(std::move(n));
  }

  /// Transposed 3-D convolution: the exact adjoint of conv3d with the same
  /// kernels/stride/pad, mapping [K,OD,OH,OW] to [C,D,H,W]. The output
  /// spatial extents are given explicitly since the adjoint is one-to-many.
  int conv3d_transpose(int x, int w, int b, const Conv3Spec& sp,
                       const std::array<int64_t, 3>& out_spatial) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    check_arg(xv.shape.size() == 4, "conv3d_transpose input must be rank 4, got " + shape_str(xv.shape));
    check_arg(wv.shape.size() == 5, "conv3d_transpose kernels must be rank 5, got " + shape_str(wv.shape));
    const int64_t K = wv.shape[0], C = wv.shape[1], KD = wv.shape[2], KH = wv.shape[3], KW = wv.shape[4];
    check_arg(xv.shape[0] == K, "conv3d_transpose channel mismatch: input " + shape_str(xv.shape) +
                                    " vs kernels " + shape_str(wv.shape));
    const int64_t D = out_spatial[0], H = out_spatial[1], W = out_spatial[2];
    const int64_t OD = kernels::conv_out_extent(D, KD, sp.stride[0], sp.pad[0]);
    const int64_t OH = kernels::conv_out_extent(H, KH, sp.stride[1], sp.pad[1]);
    const int64_t OW = kernels::conv_out_extent(W, KW, sp.stride[2], sp.pad[2]);
    check_arg(OD == xv.shape[1] && OH == xv.shape[2] && OW == xv.shape[3],
              "conv3d_transpose: input " + shape_str(xv.shape) + " is not the conv image of requested output [" +
                  std::to_string(D) + "," + std::to_string(H) + "," + std::to_string(W) + "]");
    if (b >= 0)
      check_arg(val(b).shape == Shape{C}, "conv3d_transpose bias must be [C]=" + std::to_string(C));

    Node n;
    n.op = "conv3d_transpose";
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = Tensor<T>(Shape{C, D, H, W});
    kernels::conv3d_adj(xv.data.data(), C, D, H, W, wv.data.data(), K, KD, KH, KW, sp, OD, OH, OW,
                        n.value.data.data());
    if (b >= 0) {
      const T* bias = val(b).data.data();
      for (int64_t c = 0; c < C; ++c) {
        T* row = n.value.data.data() + c * D * H * W;
        for (int64_t i = 0; i < D * H * W; ++i) row[i] += bias[c];
      }
    }
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& wt = g.val(w);
      // d/dx: forward convolution of the output gradient.
      std::vector<T> tmp(static_cast<size_t>(K * OD * OH * OW));
      kernels::conv3d_fwd(self.grad.data(), C, D, H, W, wt.data.data(), K, KD, KH, KW,
                          static_cast<const T*>(nullptr), sp, tmp.data(), OD, OH, OW);
      auto& gx = g.g(x);
      for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
      g.touch(x);
      kernels::conv3d_wgrad(self.grad.data(), C, D, H, W, xt.data.data(), K, KD, KH, KW, sp, OD,
                            OH, OW, g.g(w).data());
      g.touch(w);
      if (b >= 0) {
        kernels::bias_grad_acc(self.grad.data(), C, D * H * W, g.g(b).data());
        g.touch(b);
      }
    };
    return push(std::move(n));
  }

  int conv1d(int x, int w, int b, const Conv1Spec& sp) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    check_arg(xv.shape.size() == 2, "conv1d input must be rank 2 [C,L], got " + shape_str(xv.shape));
    check_arg(wv.shape.size() == 3, "conv1d kernels must be rank 3 [K,C,k], got " + shape_str(wv.shape));
    check_arg(wv.shape[1] == xv.shape[0],
              "conv1d channel mismatch: input " + shape_str(xv.shape) + " vs kernels " + shape_str(wv.shape));
    const int64_t C = xv.shape[0], L = xv.shape[1];
    const int64_t K = wv.shape[0], KL = wv.shape[2];
    const int64_t OL = kernels::conv_out_extent(L, KL, sp.stride, sp.pad);
    if (b >= 0) check_arg(val(b).shape == Shape{K}, "conv1d bias must be [K]=" + std::to_string(K));

    Node n;
    n.op = "conv1d";
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = Tensor<T>(Shape{K, OL});
    kernels::conv1d_fwd(xv.data.data(), C, L, wv.data.data(), K, KL,
                        b >= 0 ? val(b).data.data() : nullptr, sp, n.value.data.data(), OL);
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& wt = g.val(w);
      kernels::conv1d_adj(self.grad.data(), C, L, wt.data.data(), K, KL, sp, OL, g.g(x).data());
      g.touch(x);
      kernels::conv1d_wgrad(xt.data.data(), C, L, self.grad.data(), K, KL, sp, OL, g.g(w).data());
      g.touch(w);
      if (b >= 0) {
        kernels::bias_grad_acc(self.grad.data(), K, OL, g.g(b).data());
        g.touch(b);
      }
    };
    return push(std::move(n));
  }

  int conv1d_transpose(int x, int w, int b, const Conv1Spec& sp, int64_t out_len) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    check_arg(xv.shape.size() == 2 && wv.shape.size() == 3,
              "conv1d_transpose expects input [K,OL] and kernels [K,C,k], got " +
                  shape_str(xv.shape) + " and " + shape_str(wv.shape));
    const int64_t K = wv.shape[0], C = wv.shape[1], KL = wv.shape[2];
    check_arg(xv.shape[0] == K, "conv1d_transpose channel mismatch");
    const int64_t OL = kernels::conv_out_extent(out_len, KL, sp.stride, sp.pad);
    check_arg(OL == xv.shape[1], "conv1d_transpose: input length " + std::to_string(xv.shape[1]) +
                                     " is not the conv image of output length " + std::to_string(out_len));
    if (b >= 0) check_arg(val(b).shape == Shape{C}, "conv1d_transpose bias must be [C]=" + std::to_string(C));

    Node n;
    n.op = "conv1d_transpose";
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = Tensor<T>(Shape{C, out_len});
    kernels::conv1d_adj(xv.data.data(), C, out_len, wv.data.data(), K, KL, sp, OL,
                        n.value.data.data());
    if (b >= 0) {
      const T* bias = val(b).data.data();
      for (int64_t c = 0; c < C; ++c) {
        T* row = n.value.data.data() + c * out_len;
        for (int64_t i = 0; i < out_len; ++i) row[i] += bias[c];
      }
    }
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& wt = g.val(w);
      std::vector<T> tmp(static_cast<size_t>(K * OL));
      kernels::conv1d_fwd(self.grad.data(), C, out_len, wt.data.data(), K, KL,
                          static_cast<const T*>(nullptr), sp, tmp.data(), OL);
      auto& gx = g.g(x);
      for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
      g.touch(x);
      kernels::conv1d_wgrad(self.grad.data(), C, out_len, xt.data.data(), K, KL, sp, OL,
                            g.g(w).data());
      g.touch(w);
      if (b >= 0) {
        kernels::bias_grad_acc(self.grad.data(), C, out_len, g.g(b).data());
        g.touch(b);
      }
    };
    return push(std::move(n));
  }

  int dense(int x, int w, int b) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    check_arg(xv.shape.size() == 1, "dense input must be rank 1, got " + shape_str(xv.shape));
    check_arg(wv.shape.size() == 2, "dense weights must be rank 2, got " + shape_str(wv.shape));
    check_arg(wv.shape[1] == xv.shape[0], "dense shape mismatch: weights " + shape_str(wv.shape) +
                                              " vs input " + shape_str(xv.shape));
    const int64_t m = wv.shape[0], nn = wv.shape[1];
    if (b >= 0) check_arg(val(b).shape == Shape{m}, "dense bias must be [m]=" + std::to_string(m));

    Node n;
    n.op = "dense";
    n.in = b >= 0 ? std::vector<int>{x, w, b} : std::vector<int>{x, w};
    n.value = Tensor<T>(Shape{m});
    kernels::dense_fwd(xv.data.data(), wv.data.data(), b >= 0 ? val(b).data.data() : nullptr, m,
                       nn, n.value.data.data());
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& wt = g.val(w);
      kernels::dense_xgrad_acc(self.grad.data(), wt.data.data(), m, nn, g.g(x).data());
      g.touch(x);
      kernels::dense_wgrad_acc(self.grad.data(), xt.data.data(), m, nn, g.g(w).data());
      g.touch(w);
      if (b >= 0) {
        auto& gb = g.g(b);
        for (int64_t i = 0; i < m; ++i) gb[i] += self.grad[i];
        g.touch(b);
      }
    };
    return push(std::move(n));
  }

  /// PReLU with one learnable slope per leading-axis channel.
  int prelu(int x, int a) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& av = val(a);
    check_arg(!xv.shape.empty(), "prelu input must have rank >= 1");
    check_arg(av.shape == Shape{xv.shape[0]},
              "prelu slopes must be [" + std::to_string(xv.shape[0]) + "], got " + shape_str(av.shape));
    const int64_t C = xv.shape[0];
    const int64_t inner = xv.size() / C;

    Node n;
    n.op = "prelu";
    n.in = {x, a};
    n.value = Tensor<T>(xv.shape);
    for (int64_t c = 0; c < C; ++c) {
      const T slope = av.data[c];
      const T* src = xv.data.data() + c * inner;
      T* dst = n.value.data.data() + c * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] >= T(0) ? src[i] : slope * src[i];
    }
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      const Tensor<T>& at = g.val(a);
      auto& gx = g.g(x);
      auto& ga = g.g(a);
      for (int64_t c = 0; c < C; ++c) {
        const T slope = at.data[c];
        T sacc = T(0);
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t idx = c * inner + i;
          const T xi = xt.data[idx];
          const T gy = self.grad[idx];
          if (xi >= T(0)) {
            gx[idx] += gy;
          } else {
            gx[idx] += gy * slope;
            sacc += gy * xi;
          }
        }
        ga[c] += sacc;
      }
      g.touch(x);
      g.touch(a);
    };
    return push(std::move(n));
  }

  // ---- elementwise --------------------------------------------------------

  int clamp(int x, T lo, T hi) {
    const Tensor<T>& xv = val(x);
    Node n;
    n.op = "clamp";
    n.in = {x};
    n.value = Tensor<T>(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) n.value.data[i] = std::min(hi, std::max(lo, xv.data[i]));
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      auto& gx = g.g(x);
      for (size_t i = 0; i < gx.size(); ++i)
        if (xt.data[i] > lo && xt.data[i] < hi) gx[i] += self.grad[i];
      g.touch(x);
    };
    return push(std::move(n));
  }

  int tanh(int x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); },
                 [](T, T y) { return T(1) - y * y; });
  }

  int sigmoid(int x) {
    return unary(x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
                 [](T, T y) { return y * (T(1) - y); });
  }

  int exp(int x) {
    return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
  }

  int scale(int x, T s) {
    return unary(x, "scale", [s](T v) { return s * v; }, [s](T, T) { return s; });
  }

  int add(int a, int b) {
    return binary(a, b, "add", [](T u, T v) { return u + v; },
                  [](T, T) { return std::pair<T, T>{T(1), T(1)}; });
  }

  int sub(int a, int b) {
    return binary(a, b, "sub", [](T u, T v) { return u - v; },
                  [](T, T) { return std::pair<T, T>{T(1), T(-1)}; });
  }

  int mul(int a, int b) {
    return binary(a, b, "mul", [](T u, T v) { return u * v; },
                  [](T u, T v) { return std::pair<T, T>{v, u}; });
  }

  /// a + alpha * b, used to combine loss terms.
  int add_scaled(int a, int b, T alpha) {
    return binary(a, b, "add_scaled", [alpha](T u, T v) { return u + alpha * v; },
                  [alpha](T, T) { return std::pair<T, T>{T(1), alpha}; });
  }

  // ---- shape ops ----------------------------------------------------------

  int reshape(int x, Shape s) {
    const Tensor<T>& xv = val(x);
    check_arg(numel(s) == xv.size(),
              "reshape " + shape_str(xv.shape) + " -> " + shape_str(s) + " changes element count");
    Node n;
    n.op = "reshape";
    n.in = {x};
    n.value = Tensor<T>(std::move(s), xv.data);
    n.vjp = [=](Graph& g, Node& self) {
      auto& gx = g.g(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      g.touch(x);
    };
    return push(std::move(n));
  }

  int concat(std::span<const int> xs) {
    check_arg(!xs.empty(), "concat of zero tensors");
    int64_t total = 0;
    for (int id : xs) {
      check_arg(val(id).shape.size() == 1, "concat expects rank-1 inputs");
      total += val(id).size();
    }
    Node n;
    n.op = "concat";
    n.in.assign(xs.begin(), xs.end());
    n.value = Tensor<T>(Shape{total});
    int64_t off = 0;
    for (int id : xs) {
      const auto& d = val(id).data;
      std::copy(d.begin(), d.end(), n.value.data.begin() + off);
      off += static_cast<int64_t>(d.size());
    }
    n.vjp = [](Graph& g, Node& self) {
      int64_t off = 0;
      for (int id : self.in) {
        auto& gx = g.g(id);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[static_cast<size_t>(off) + i];
        off += static_cast<int64_t>(gx.size());
        g.touch(id);
      }
    };
    return push(std::move(n));
  }

  int slice(int x, int64_t offset, int64_t len) {
    const Tensor<T>& xv = val(x);
    check_arg(xv.shape.size() == 1, "slice expects rank-1 input");
    check_arg(offset >= 0 && offset + len <= xv.size(), "slice [" + std::to_string(offset) + "," +
                                                            std::to_string(offset + len) +
                                                            ") out of range for " + shape_str(xv.shape));
    Node n;
    n.op = "slice";
    n.in = {x};
    n.value = Tensor<T>(Shape{len});
    std::copy(xv.data.begin() + offset, xv.data.begin() + offset + len, n.value.data.begin());
    n.vjp = [=](Graph& g, Node& self) {
      auto& gx = g.g(x);
      for (int64_t i = 0; i < len; ++i) gx[static_cast<size_t>(offset + i)] += self.grad[static_cast<size_t>(i)];
      g.touch(x);
    };
    return push(std::move(n));
  }

  // ---- pooling / normalization -------------------------------------------

  /// Numerically stable softmax over a rank-1 tensor.
  int softmax(int x) {
    const Tensor<T>& xv = val(x);
    check_arg(xv.shape.size() == 1 && xv.size() >= 1, "softmax expects a nonempty rank-1 tensor");
    Node n;
    n.op = "softmax";
    n.in = {x};
    n.value = Tensor<T>(xv.shape);
    T mx = xv.data[0];
    for (T v : xv.data) mx = std::max(mx, v);
    T denom = T(0);
    for (int64_t i = 0; i < xv.size(); ++i) {
      n.value.data[i] = std::exp(xv.data[i] - mx);
      denom += n.value.data[i];
    }
    for (int64_t i = 0; i < xv.size(); ++i) n.value.data[i] /= denom;
    n.vjp = [=](Graph& g, Node& self) {
      const auto& y = self.value.data;
      T inner = T(0);
      for (size_t i = 0; i < y.size(); ++i) inner += self.grad[i] * y[i];
      auto& gx = g.g(x);
      for (size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (self.grad[i] - inner);
      g.touch(x);
    };
    return push(std::move(n));
  }

  /// y = sum_i weights[i] * items[i]; weights is rank-1 of length items.size().
  int weighted_sum(int weights, std::span<const int> items) {
    const Tensor<T>& wv = val(weights);
    check_arg(wv.shape == Shape{static_cast<int64_t>(items.size())},
              "weighted_sum needs one weight per item, got " + shape_str(wv.shape) + " for " +
                  std::to_string(items.size()) + " items");
    check_arg(!items.empty(), "weighted_sum of zero items");
    const Shape item_shape = val(items[0]).shape;
    for (int id : items)
      check_arg(val(id).shape == item_shape, "weighted_sum items must share a shape");

    Node n;
    n.op = "weighted_sum";
    n.in.reserve(items.size() + 1);
    n.in.push_back(weights);
    n.in.insert(n.in.end(), items.begin(), items.end());
    n.value = Tensor<T>(item_shape);
    for (size_t i = 0; i < items.size(); ++i) {
      const T wi = wv.data[i];
      const auto& d = val(items[static_cast<int>(i)]).data;
      for (size_t j = 0; j < d.size(); ++j) n.value.data[j] += wi * d[j];
    }
    n.vjp = [](Graph& g, Node& self) {
      const int wid = self.in[0];
      const Tensor<T>& wt = g.val(wid);
      auto& gw = g.g(wid);
      for (size_t i = 1; i < self.in.size(); ++i) {
        const int item = self.in[i];
        const auto& d = g.val(item).data;
        auto& gi = g.g(item);
        const T wi = wt.data[i - 1];
        T acc = T(0);
        for (size_t j = 0; j < d.size(); ++j) {
          acc += self.grad[j] * d[j];
          gi[j] += wi * self.grad[j];
        }
        gw[i - 1] += acc;
        g.touch(item);
      }
      g.touch(wid);
    };
    return push(std::move(n));
  }

  // ---- losses -------------------------------------------------------------

  /// Mean squared error between two same-shape tensors; scalar output.
  int mse(int pred, int target) {
    const Tensor<T>& pv = val(pred);
    const Tensor<T>& tv = val(target);
    check_arg(pv.shape == tv.shape, "mse shape mismatch: " + shape_str(pv.shape) + " vs " + shape_str(tv.shape));
    Node n;
    n.op = "mse";
    n.in = {pred, target};
    n.value = Tensor<T>(Shape{1});
    const int64_t cnt = pv.size();
    T acc = T(0);
    for (int64_t i = 0; i < cnt; ++i) {
      const T d = pv.data[i] - tv.data[i];
      acc += d * d;
    }
    n.value.data[0] = acc / static_cast<T>(cnt);
    n.vjp = [=](Graph& g, Node& self) {
      const T s = self.grad[0] * T(2) / static_cast<T>(cnt);
      const Tensor<T>& p = g.val(pred);
      const Tensor<T>& t = g.val(target);
      auto& gp = g.g(pred);
      auto& gt = g.g(target);
      for (int64_t i = 0; i < cnt; ++i) {
        const T d = s * (p.data[i] - t.data[i]);
        gp[i] += d;
        gt[i] -= d;
      }
      g.touch(pred);
      g.touch(target);
    };
    return push(std::move(n));
  }

  /// Binary cross entropy of a scalar probability against a 0/1 label.
  /// The probability is clamped to [eps, 1-eps] with eps = 1e-7.
  int bce(int p, T label) {
    const Tensor<T>& pv = val(p);
    check_arg(pv.size() == 1, "bce expects a scalar probability, got " + shape_str(pv.shape));
    const T eps = static_cast<T>(1e-7);
    const T pc = std::min(T(1) - eps, std::max(eps, pv.data[0]));
    const bool interior = pv.data[0] > eps && pv.data[0] < T(1) - eps;
    Node n;
    n.op = "bce";
    n.in = {p};
    n.value = Tensor<T>(Shape{1});
    n.value.data[0] = -(label * std::log(pc) + (T(1) - label) * std::log(T(1) - pc));
    n.vjp = [=](Graph& g, Node& self) {
      if (!interior) return;
      g.g(p)[0] += self.grad[0] * (pc - label) / (pc * (T(1) - pc));
      g.touch(p);
    };
    return push(std::move(n));
  }

  /// KL divergence of N(mu, exp(logvar)) from N(0, I):
  /// -0.5 * sum(1 + logvar - mu^2 - exp(logvar)).
  int gaussian_kl(int mu, int logvar) {
    const Tensor<T>& mv = val(mu);
    const Tensor<T>& lv = val(logvar);
    check_arg(mv.shape == lv.shape,
              "gaussian_kl shape mismatch: " + shape_str(mv.shape) + " vs " + shape_str(lv.shape));
    Node n;
    n.op = "gaussian_kl";
    n.in = {mu, logvar};
    n.value = Tensor<T>(Shape{1});
    T acc = T(0);
    for (int64_t i = 0; i < mv.size(); ++i)
      acc += T(1) + lv.data[i] - mv.data[i] * mv.data[i] - std::exp(lv.data[i]);
    n.value.data[0] = -acc / T(2);
    n.vjp = [=](Graph& g, Node& self) {
      const T s = self.grad[0];
      const Tensor<T>& m = g.val(mu);
      const Tensor<T>& l = g.val(logvar);
      auto& gm = g.g(mu);
      auto& gl = g.g(logvar);
      for (int64_t i = 0; i < m.size(); ++i) {
        gm[i] += s * m.data[i];
        gl[i] += s * (std::exp(l.data[i]) - T(1)) / T(2);
      }
      g.touch(mu);
      g.touch(logvar);
    };
    return push(std::move(n));
  }

  // ---- backward -----------------------------------------------------------

  /// Reverse sweep from a scalar loss node. Gradients of parameter leaves are
  /// accumulated into their bound tensors' grad buffers.
  void backward(int loss) {
    check_arg(val(loss).size() == 1,
              "backward requires a scalar loss, got " + shape_str(val(loss).shape));
    g(loss)[0] = T(1);
    touch(loss);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.touched || !n.vjp) continue;
      n.vjp(*this, n);
    }
    for (Node& n : nodes_) {
      if (n.bound && n.touched) {
        n.bound->require_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
      }
    }
  }

 private:
  friend struct Node;

  const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  std::vector<T>& g(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), T(0));
    return n.grad;
  }

  void touch(int id) { nodes_[static_cast<size_t>(id)].touched = true; }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <typename F, typename DF>
  int unary(int x, const char* name, F f, DF df) {
    const Tensor<T>& xv = val(x);
    Node n;
    n.op = name;
    n.in = {x};
    n.value = Tensor<T>(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) n.value.data[i] = f(xv.data[i]);
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& xt = g.val(x);
      auto& gx = g.g(x);
      for (size_t i = 0; i < gx.size(); ++i)
        gx[i] += self.grad[i] * df(xt.data[i], self.value.data[i]);
      g.touch(x);
    };
    return push(std::move(n));
  }

  template <typename F, typename DF>
  int binary(int a, int b, const char* name, F f, DF df) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    check_arg(av.shape == bv.shape, std::string(name) + " shape mismatch: " + shape_str(av.shape) +
                                        " vs " + shape_str(bv.shape));
    Node n;
    n.op = name;
    n.in = {a, b};
    n.value = Tensor<T>(av.shape);
    for (int64_t i = 0; i < av.size(); ++i) n.value.data[i] = f(av.data[i], bv.data[i]);
    n.vjp = [=](Graph& g, Node& self) {
      const Tensor<T>& at = g.val(a);
      const Tensor<T>& bt = g.val(b);
      auto& ga = g.g(a);
      auto& gb = g.g(b);
      for (size_t i = 0; i < ga.size(); ++i) {
        const auto [da, db] = df(at.data[i], bt.data[i]);
        ga[i] += self.grad[i] * da;
        gb[i] += self.grad[i] * db;
      }
      g.touch(a);
      g.touch(b);
    };
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> param_ids_;
};

}  // namespace cadmil
