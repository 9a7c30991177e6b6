#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cadmil/checkpoint.hpp"
#include "cadmil/graph.hpp"
#include "cadmil/optim.hpp"
#include "cadmil/rng.hpp"

namespace cadmil {

/// He-normal initialization: sd = sqrt(2 / fan_in), biases zero.
template <typename T>
void init_weight(Tensor<T>& w, int64_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, sd));
}

template <typename T>
struct DenseLayer {
  Tensor<T> w, b;

  void init(int64_t out, int64_t in, Rng& rng) {
    w = Tensor<T>(Shape{out, in});
    b = Tensor<T>(Shape{out});
    init_weight(w, in, rng);
  }

  int apply(Graph<T>& g, int x) { return g.dense(x, g.param(w), g.param(b)); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
  }
};

template <typename T>
struct PRelu {
  Tensor<T> a;

  void init(int64_t channels) { a = Tensor<T>(Shape{channels}, T(0.25)); }

  int apply(Graph<T>& g, int x) { return g.prelu(x, g.param(a)); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".slope", &a, false});
  }
};

template <typename T>
struct Conv3Layer {
  Tensor<T> w, b;
  Conv3Spec spec;

  void init(int64_t out_ch, int64_t in_ch, std::array<int64_t, 3> kernel, Conv3Spec sp, Rng& rng) {
    spec = sp;
    w = Tensor<T>(Shape{out_ch, in_ch, kernel[0], kernel[1], kernel[2]});
    b = Tensor<T>(Shape{out_ch});
    init_weight(w, in_ch * kernel[0] * kernel[1] * kernel[2], rng);
  }

  int apply(Graph<T>& g, int x) { return g.conv3d(x, g.param(w), g.param(b), spec); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
  }
};

template <typename T>
struct Conv3TLayer {
  Tensor<T> w, b;
  Conv3Spec spec;
  std::array<int64_t, 3> out_spatial{};

  /// Kernels keep the [K,C,d,h,w] layout of the matching forward conv;
  /// K is the input channel count here.
  void init(int64_t in_ch, int64_t out_ch, std::array<int64_t, 3> kernel, Conv3Spec sp,
            std::array<int64_t, 3> out_sp, Rng& rng) {
    spec = sp;
    out_spatial = out_sp;
    w = Tensor<T>(Shape{in_ch, out_ch, kernel[0], kernel[1], kernel[2]});
    b = Tensor<T>(Shape{out_ch});
    init_weight(w, in_ch * kernel[0] * kernel[1] * kernel[2], rng);
  }

  int apply(Graph<T>& g, int x) {
    return g.conv3d_transpose(x, g.param(w), g.param(b), spec, out_spatial);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
  }
};

template <typename T>
struct Conv1Layer {
  Tensor<T> w, b;
  Conv1Spec spec;

  void init(int64_t out_ch, int64_t in_ch, int64_t kernel, Conv1Spec sp, Rng& rng) {
    spec = sp;
    w = Tensor<T>(Shape{out_ch, in_ch, kernel});
    b = Tensor<T>(Shape{out_ch});
    init_weight(w, in_ch * kernel, rng);
  }

  int apply(Graph<T>& g, int x) { return g.conv1d(x, g.param(w), g.param(b), spec); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
  }
};

template <typename T>
struct Conv1TLayer {
  Tensor<T> w, b;
  Conv1Spec spec;
  int64_t out_len = 0;

  void init(int64_t in_ch, int64_t out_ch, int64_t kernel, Conv1Spec sp, int64_t out_length,
            Rng& rng) {
    spec = sp;
    out_len = out_length;
    w = Tensor<T>(Shape{in_ch, out_ch, kernel});
    b = Tensor<T>(Shape{out_ch});
    init_weight(w, in_ch * kernel, rng);
  }

  int apply(Graph<T>& g, int x) {
    return g.conv1d_transpose(x, g.param(w), g.param(b), spec, out_len);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &w, true});
    out.push_back({prefix + ".b", &b, false});
  }
};

template <typename T>
void store_params(TensorStore& store, const std::vector<ParamRef<T>>& refs) {
  for (const auto& r : refs) store.put(r.name, *r.tensor);
}

template <typename T>
void load_params(const TensorStore& store, const std::vector<ParamRef<T>>& refs) {
  for (const auto& r : refs) {
    Tensor<T> t = store.get<T>(r.name);
    check_arg(t.shape == r.tensor->shape, "checkpoint tensor '" + r.name + "' has shape " +
                                              shape_str(t.shape) + ", model expects " +
                                              shape_str(r.tensor->shape));
    *r.tensor = std::move(t);
  }
}

/// Inverted dropout: at training the kept activations are scaled by
/// 1/(1-rate) so inference is the identity map.
template <typename T>
int dropout(Graph<T>& g, int x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  const auto& shape = g.value(x).shape;
  Tensor<T> mask(shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : mask.data) v = rng.uniform() < rate ? T(0) : keep_scale;
  return g.mul(x, g.leaf(std::move(mask)));
}

}  // namespace cadmil
