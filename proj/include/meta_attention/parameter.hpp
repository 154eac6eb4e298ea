// SPDX-License-Identifier: Apache-2.0
//
// Named trainable tensors and the two affine building blocks every module uses.

#pragma once

#include "meta_attention/rng.hpp"
#include "meta_attention/tensor.hpp"

#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

namespace meta_attention {

struct Parameter {
  std::string name;  // dotted path, e.g. "layer0.controller.hidden.weight"
  Tensor tensor;
};

/// Ordered parameter registry; names are unique.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor) {
    if (!names_.insert(name).second) throw contract_error("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(tensor)});
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_set<std::string> names_;
};

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// y = x W + b with W stored (in, out).
struct Linear {
  Tensor weight;
  Tensor bias;

  /// Weights U(-1/sqrt(in), 1/sqrt(in)), zero bias.
  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return {uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out}, true)};
  }
  static Linear zeros(std::size_t in, std::size_t out) { return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)}; }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".weight", weight);
    out.add(prefix + ".bias", bias);
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParameterSet& out) const {
    out.add(prefix + ".gain", gain);
    out.add(prefix + ".bias", bias);
  }
};

}  // namespace meta_attention
