#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cadmil/tensor.hpp"

namespace cadmil {

enum class Precision { f32, f64 };

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw std::invalid_argument("precision must be f32 or f64, got '" + s + "'");
}

struct TrainConfig {
  double l2_coefficient = 0.001;
  double dropout_rate = 0.5;
  double learning_rate = 1e-4;
  int64_t iteration_count = 20000;
  int64_t checkpoint_interval = 1000;
  Precision precision = Precision::f32;
  uint64_t seed = 1;

  void validate() const {
    check_arg(l2_coefficient >= 0, "l2_coefficient must be >= 0");
    check_arg(dropout_rate >= 0 && dropout_rate < 1, "dropout_rate must be in [0,1)");
    check_arg(iteration_count > 0, "iteration_count must be > 0");
    check_arg(checkpoint_interval > 0, "checkpoint_interval must be > 0");
    check_arg(iteration_count % checkpoint_interval == 0,
              "checkpoint_interval must divide iteration_count evenly");
  }
};

/// Named handle to a trainable tensor. L2 decay applies to weights only,
/// never to biases or PReLU slopes.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool is_weight = false;
};

/// Adaptive-moment estimation with the L2 term added to the data gradient
/// of weight tensors. Deterministic given parameter order and state.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<ParamRef<T>> params, T lr, T l2, T beta1 = T(0.9),
                T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), l2_(l2), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      p.tensor->require_grad();
      m_.emplace_back(p.tensor->shape);
      v_.emplace_back(p.tensor->shape);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  /// Rescale accumulated gradients, e.g. to average over a mini-batch.
  void scale_grads(T s) {
    for (auto& p : params_)
      for (auto& g : p.tensor->grad) g *= s;
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor<T>& w = *params_[pi].tensor;
      const bool decay = params_[pi].is_weight && l2_ > T(0);
      auto& m = m_[pi].data;
      auto& v = v_[pi].data;
      for (size_t i = 0; i < w.data.size(); ++i) {
        T g = w.grad[i];
        if (decay) g += l2_ * w.data[i];
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        w.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t iteration() const { return t_; }
  void set_iteration(int64_t t) { t_ = t; }

  const std::vector<ParamRef<T>>& params() const { return params_; }
  Tensor<T>& moment1(size_t i) { return m_[i]; }
  Tensor<T>& moment2(size_t i) { return v_[i]; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  T lr_, l2_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace cadmil
