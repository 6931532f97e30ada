#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vcap/errors.hpp"

namespace vcap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major tensor. Rank 1 and 2 are all the models need, but the
/// shape is kept general so checkpoints can carry anything.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_size(shape), fill) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimension must be positive: " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_size(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    for (const T& x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameters with stable addresses, iterated in insertion order.
template <class T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) {
      auto& q = add(p->name, p->value.shape);
      q.value = p->value;
      q.grad = p->grad;
    }
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, const Shape& shape) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->at(name);
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), T{0});
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p->name, p->value.shape);
      q.value = p->value.template cast<U>();
      q.grad = p->grad.template cast<U>();
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
/// Draws in double so float and double models initialize identically.
template <class T>
void glorot_uniform(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (auto& x : t.data) x = static_cast<T>(dist(rng));
}

/// Glorot init for a weight matrix laid out [fan_out x fan_in].
template <class T>
void glorot_matrix(Parameter<T>& p, std::mt19937_64& rng) {
  const auto& s = p.value.shape;
  if (s.size() == 2)
    glorot_uniform(p.value, s[1], s[0], rng);
  else
    glorot_uniform(p.value, s[0], 1, rng);
}

}  // namespace vcap
