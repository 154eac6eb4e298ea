// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "meta_attention/parameter.hpp"

#include <cmath>
#include <vector>

namespace meta_attention {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are indexed like the ParameterSet.
class Adam {
 public:
  Adam(const ParameterSet& params, AdamOptions opts) : opts_(opts) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step(ParameterSet& params) {
    ++steps_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& t = params[i].tensor;
      if (!t.has_grad()) continue;
      const auto g = t.grad();
      auto w = t.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
        w[k] -= opts_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.eps);
      }
    }
  }

  const AdamOptions& options() const { return opts_; }
  std::size_t steps() const { return steps_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::size_t n) { steps_ = n; }

 private:
  AdamOptions opts_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace meta_attention
