// SPDX-License-Identifier: Apache-2.0
//
// Bayesian routing controller.
//
// Prior:      Dir(beta),  beta_i = floor + scale * (1 - c_i)
// Posterior:  Dir(beta_hat_t),  beta_hat_t = beta + delta(x_t)
//             delta = max(softplus(W2 GELU(W1 [x_t; |x_t|/sqrt(D); pos] + b1) + b2), 1e-6)
// Routing:    alpha_t = beta_hat_t / sum(beta_hat_t)       (posterior mean)
// Uncertainty U_t = H[Dir(beta_hat_t)]
// Regulariser mean_t KL[Dir(beta_hat_t) || Dir(beta)]     (closed form)

#pragma once

#include "meta_attention/errors.hpp"
#include "meta_attention/experts.hpp"
#include "meta_attention/parameter.hpp"
#include "meta_attention/rng.hpp"
#include "meta_attention/special.hpp"
#include "meta_attention/tensor.hpp"

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace meta_attention {

inline constexpr double kDeltaFloor = 1e-6;

struct DirichletPrior {
  std::vector<double> costs;
  double floor = 0.01;
  double scale = 1.0;
  std::vector<double> beta;

  /// beta_i = floor + scale * (1 - c_i). Throws degenerate_prior_error when floor <= 0.
  static DirichletPrior build(std::span<const double> costs, double floor = 0.01, double scale = 1.0) {
    if (!(floor > 0.0)) throw degenerate_prior_error("prior floor epsilon must be > 0 (got " + std::to_string(floor) + "); Dir(beta) would be degenerate");
    if (!(scale > 0.0)) throw std::invalid_argument("prior scale beta0 must be > 0");
    if (costs.empty()) throw std::invalid_argument("prior needs at least one expert cost");
    DirichletPrior p;
    p.costs.assign(costs.begin(), costs.end());
    p.floor = floor;
    p.scale = scale;
    for (double c : costs) {
      if (!(c > 0.0 && c <= 1.0)) throw std::invalid_argument("expert costs must lie in (0, 1]");
      p.beta.push_back(floor + scale * (1.0 - c));
    }
    return p;
  }

  std::size_t size() const { return beta.size(); }
  double log_normaliser() const { return special::log_multivariate_beta(beta); }
};

// ---------------------------------------------------------------------------
// scalar Dirichlet functionals

inline double dirichlet_entropy(std::span<const double> beta_hat) {
  const double k = static_cast<double>(beta_hat.size());
  const double total = std::accumulate(beta_hat.begin(), beta_hat.end(), 0.0);
  double h = special::log_multivariate_beta(beta_hat) + (total - k) * special::digamma(total);
  for (double b : beta_hat) h -= (b - 1.0) * special::digamma(b);
  return h;
}

/// KL[Dir(beta_hat) || Dir(beta)].
inline double dirichlet_kl(std::span<const double> beta_hat, std::span<const double> beta) {
  if (beta_hat.size() != beta.size()) throw dimension_error("dirichlet_kl: concentration vectors differ in length");
  const double sum_hat = std::accumulate(beta_hat.begin(), beta_hat.end(), 0.0);
  const double sum_prior = std::accumulate(beta.begin(), beta.end(), 0.0);
  double kl = special::log_multivariate_beta(beta) - special::log_multivariate_beta(beta_hat);
  for (std::size_t i = 0; i < beta.size(); ++i) kl += (beta_hat[i] - beta[i]) * special::digamma(beta_hat[i]);
  return kl - (sum_hat - sum_prior) * special::digamma(sum_hat);
}

// ---------------------------------------------------------------------------
// differentiable versions over the last axis

inline Tensor dirichlet_entropy(const Tensor& beta_hat) {
  const double k = static_cast<double>(beta_hat.shape().back());
  const Tensor total = sum(beta_hat, -1);
  const Tensor log_b = sum(special::lgamma(beta_hat), -1) - special::lgamma(total);
  return log_b + (total - k) * special::digamma(total) - sum((beta_hat - 1.0) * special::digamma(beta_hat), -1);
}

inline Tensor dirichlet_kl(const Tensor& beta_hat, std::span<const double> beta) {
  if (beta_hat.shape().back() != beta.size()) throw dimension_error("dirichlet_kl: last axis of " + to_string(beta_hat.shape()) + " != prior size");
  const Tensor prior = Tensor::from({beta.size()}, {beta.begin(), beta.end()});
  const double sum_prior = std::accumulate(beta.begin(), beta.end(), 0.0);
  const Tensor total = sum(beta_hat, -1);
  const Tensor log_b_hat = sum(special::lgamma(beta_hat), -1) - special::lgamma(total);
  return (special::log_multivariate_beta(beta) - log_b_hat) + sum((beta_hat - prior) * special::digamma(beta_hat), -1) -
         (total - sum_prior) * special::digamma(total);
}

// ---------------------------------------------------------------------------
// sampling (opt-in routing mode)

/// One Dir(beta_hat) draw: independent Gamma(beta_hat_i, 1) variates, normalised.
inline std::vector<double> sample_dirichlet(std::span<const double> beta_hat, Rng& rng) {
  std::vector<double> z(beta_hat.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += z[i] = rng.gamma(beta_hat[i]);
  for (auto& x : z) x /= total;
  return z;
}

/// dz/da for z ~ Gamma(a, 1) by implicit differentiation of the CDF:
/// -(dP/da)(a, z) / p(z; a), with dP/da by central differences.
inline double gamma_sample_grad(double a, double z) {
  const double h = 1e-5 * a;
  const double dp_da = (special::gamma_p(a + h, z) - special::gamma_p(a - h, z)) / (2.0 * h);
  const double log_pdf = (a - 1.0) * std::log(z) - z - special::lgamma(a);
  return -dp_da / std::exp(log_pdf);
}

/// Elementwise Gamma(concentration, 1) draws with implicit reparameterisation gradients.
inline Tensor gamma_sample(const Tensor& concentration, Rng& rng) {
  const auto cv = concentration.data();
  std::vector<double> z(cv.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    // Keep draws off exact zero so the pdf in the gradient stays finite.
    z[i] = std::max(rng.gamma(cv[i]), 1e-300);
  }
  return detail::make_result(concentration.shape(), std::move(z), {&concentration}, [](TensorNode& self) {
    auto* ga = detail::sink(self, 0);
    if (!ga) return;
    const auto& a = self.inputs[0]->value;
    for (std::size_t i = 0; i < a.size(); ++i) (*ga)[i] += self.grad[i] * gamma_sample_grad(a[i], self.value[i]);
  });
}

inline Tensor sample_dirichlet(const Tensor& beta_hat, Rng& rng) {
  const Tensor z = gamma_sample(beta_hat, rng);
  return z / sum(z, -1, true);
}

// ---------------------------------------------------------------------------
// controller

struct ControllerFeatures {
  Tensor x_norm;    // (B, T, D)
  Tensor salience;  // (B, T, 1) = |x_norm_t| / sqrt(D)
  Tensor pos;       // (B, T, 1) = linspace(0, 1, T)
  Tensor features;  // (B, T, D + 2)

  static ControllerFeatures build(const Tensor& x_norm) {
    if (x_norm.dim() != 3) throw dimension_error("controller features: expected (B, T, D), got " + to_string(x_norm.shape()));
    const std::size_t b = x_norm.shape()[0], t = x_norm.shape()[1], d = x_norm.shape()[2];
    ControllerFeatures f;
    f.x_norm = x_norm;
    f.salience = sqrt(sum(square(x_norm), -1, true)) * (1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> pos(b * t);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < t; ++j) pos[i * t + j] = t > 1 ? static_cast<double>(j) / static_cast<double>(t - 1) : 0.0;
    f.pos = Tensor::from({b, t, 1}, std::move(pos));
    f.features = concat({x_norm, f.salience, f.pos}, -1);
    return f;
  }
};

struct RoutingPosterior {
  Tensor beta_hat;         // (B, T, K)
  Tensor alpha;            // (B, T, K) posterior mean
  Tensor routing_weights;  // alpha, or a Dirichlet draw in sample mode
  Tensor uncertainty;      // (B, T)
  Tensor kl_per_token;     // (B, T)
  Tensor kl;               // scalar, mean over B*T
};

class MetaController {
 public:
  MetaController() = default;

  static MetaController init(std::size_t d_model, std::size_t hidden, DirichletPrior prior, Rng& rng) {
    MetaController c;
    c.hidden_ = Linear::init(d_model + 2, hidden, rng);
    c.out_ = Linear::init(hidden, prior.size(), rng);
    c.prior_ = std::move(prior);
    return c;
  }

  const DirichletPrior& prior() const { return prior_; }
  const Linear& hidden_layer() const { return hidden_; }
  const Linear& output_layer() const { return out_; }

  /// Concentration increments delta > 0, shape (B, T, K).
  Tensor increments(const ControllerFeatures& f) const {
    return clamp_min(softplus(out_(gelu(hidden_(f.features)))), kDeltaFloor);
  }

  /// Posterior quantities; pass a sampler to route with Dirichlet draws instead of the mean.
  RoutingPosterior posterior(const ControllerFeatures& f, Rng* sampler = nullptr) const {
    RoutingPosterior r;
    const Tensor prior_beta = Tensor::from({prior_.size()}, prior_.beta);
    r.beta_hat = increments(f) + prior_beta;
    r.alpha = r.beta_hat / sum(r.beta_hat, -1, true);
    r.routing_weights = sampler ? sample_dirichlet(r.beta_hat, *sampler) : r.alpha;
    r.uncertainty = dirichlet_entropy(r.beta_hat);
    r.kl_per_token = dirichlet_kl(r.beta_hat, prior_.beta);
    r.kl = mean(r.kl_per_token);
    return r;
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    hidden_.collect(prefix + ".hidden", out);
    out_.collect(prefix + ".out", out);
  }

 private:
  Linear hidden_;
  Linear out_;
  DirichletPrior prior_;
};

}  // namespace meta_attention
