#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global gradient norm; <= 0 disables
};

/// Global L2 norm over every gradient in the store, accumulated in double.
template <class T>
double grad_global_norm(const ParameterStore<T>& params) {
  double ss = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (T g : params[i].grad.data) ss += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(ss);
}

/// Bias-corrected Adam. Moments are created lazily to match the store.
template <class T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  /// Clip, update, zero grads. Throws NumericalError (leaving parameters
  /// untouched) if any gradient is non-finite.
  void step(ParameterStore<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!params[i].grad.all_finite())
        throw NumericalError("non-finite gradient in parameter " + params[i].name);
    if (m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params[i].value.shape);
        v_.emplace_back(params[i].value.shape);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam state does not match parameter store");

    T gscale{1};
    if (cfg_.clip > 0.0) {
      const double norm = grad_global_norm(params);
      if (norm > cfg_.clip) gscale = static_cast<T>(cfg_.clip / norm);
    }
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const T g = p.grad.data[j] * gscale;
        m[j] = b1 * m[j] + (T{1} - b1) * g;
        v[j] = b2 * v[j] + (T{1} - b2) * g * g;
        const T mhat = m[j] / c1;
        const T vhat = v[j] / c2;
        p.value.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
    params.zero_grad();
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace vcap
