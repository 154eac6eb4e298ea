// SPDX-License-Identifier: Apache-2.0
//
// The three causal attention experts. Each maps (B, T, D) -> (B, T, D) with
// its own Q/K/V/output projections:
//
//   Full    softmax attention over the whole causal prefix      cost 1.00
//   Linear  ELU+1 kernel attention via running prefix sums       cost 0.15
//   Local   softmax attention over the last w+1 positions        cost 0.30
//
// The costs are fixed normalised constants; they do not depend on T or w.

#pragma once

#include "meta_attention/parameter.hpp"
#include "meta_attention/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace meta_attention {

enum class ExpertKind { Full = 0, Linear = 1, Local = 2 };

inline constexpr std::size_t kNumExperts = 3;
inline constexpr std::array<double, kNumExperts> kDefaultCosts{1.0, 0.15, 0.30};
inline constexpr double kLinearAttentionEps = 1e-6;

inline const char* to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::Full: return "full";
    case ExpertKind::Linear: return "linear";
    case ExpertKind::Local: return "local";
  }
  return "?";
}

struct ExpertSpec {
  ExpertKind kind = ExpertKind::Full;
  double cost = 1.0;
  std::size_t heads = 4;
  std::size_t window = 8;  // Local only

  void validate(std::size_t d_model) const {
    if (!(cost > 0.0 && cost <= 1.0)) throw std::invalid_argument("expert cost must lie in (0, 1]");
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) + " heads");
    if (kind == ExpertKind::Local && window < 1) throw std::invalid_argument("local attention window must be >= 1");
  }
};

/// Elementary multiply-add counter for the attention kernels (per thread).
class OpCounter {
 public:
  static std::uint64_t& value() {
    thread_local std::uint64_t count = 0;
    return count;
  }
  static void reset() { value() = 0; }
  static std::uint64_t get() { return value(); }
  static void add(std::uint64_t n) { value() += n; }
};

namespace detail {

inline void require_sequence(const Tensor& x, const char* who) {
  if (x.dim() != 3) throw dimension_error(std::string(who) + ": expected (B, T, D), got " + to_string(x.shape()));
  if (x.shape()[1] == 0 || x.shape()[0] == 0) throw std::invalid_argument(std::string(who) + ": empty input");
}

inline void require_heads(const Tensor& q, const Tensor& k, const Tensor& v, const char* who) {
  if (q.dim() != 4 || q.shape() != k.shape() || q.shape()[0] != v.shape()[0] || q.shape()[1] != v.shape()[1] || q.shape()[2] != v.shape()[2])
    throw dimension_error(std::string(who) + ": incompatible head tensors " + to_string(q.shape()) + ", " + to_string(k.shape()) + ", " + to_string(v.shape()));
  if (q.shape()[2] == 0) throw std::invalid_argument(std::string(who) + ": empty input");
}

}  // namespace detail

/// (B, T, D) -> (B, H, T, D/H)
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const auto& s = x.shape();
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

/// (B, H, T, dh) -> (B, T, H*dh)
inline Tensor merge_heads(const Tensor& x) {
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

// ---------------------------------------------------------------------------
// kernels over (B, H, T, dh)

/// Causal scaled dot-product attention built from generic ops.
inline Tensor causal_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::require_heads(q, k, v, "causal_softmax_attention");
  const std::size_t t = q.shape()[2], dh = q.shape()[3];
  OpCounter::add(static_cast<std::uint64_t>(q.shape()[0] * q.shape()[1]) * t * (t + 1) * (dh + v.shape()[3]) / 2);
  const Tensor scores = matmul(q, transpose(k)) * (1.0 / std::sqrt(static_cast<double>(dh)));
  return matmul(softmax(causal_mask(scores), -1), v);
}

/// out_t = sum_{s <= t} (q_t . k_s) v_s, evaluated with running states
/// S_t = sum_{s <= t} k_s v_s^T in O(T * dk * dv) time and O(dk * dv) memory.
inline Tensor causal_linear_prefix(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::require_heads(q, k, v, "causal_linear_prefix");
  const std::size_t bh = q.shape()[0] * q.shape()[1], t = q.shape()[2], dk = q.shape()[3], dv = v.shape()[3];
  OpCounter::add(static_cast<std::uint64_t>(bh) * t * dk * dv * 2);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Map<Eigen::VectorXd>;
  using CVec = Eigen::Map<const Eigen::VectorXd>;
  const auto ki = static_cast<Eigen::Index>(dk), vi = static_cast<Eigen::Index>(dv);
  std::vector<double> out(v.numel(), 0.0);
  Mat state(ki, vi);
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  for (std::size_t h = 0; h < bh; ++h) {
    state.setZero();
    for (std::size_t s = 0; s < t; ++s) {
      const std::size_t r = h * t + s;
      state.noalias() += CVec(kv.data() + r * dk, ki) * CVec(vv.data() + r * dv, vi).transpose();
      Vec(out.data() + r * dv, vi).noalias() = state.transpose() * CVec(qv.data() + r * dk, ki);
    }
  }
  return detail::make_result(v.shape(), std::move(out), {&q, &k, &v}, [bh, t, ki, vi](TensorNode& self) {
    const auto& qv = self.inputs[0]->value;
    const auto& kv = self.inputs[1]->value;
    const auto& vv = self.inputs[2]->value;
    const auto& g = self.grad;
    auto* gq = detail::sink(self, 0);
    auto* gk = detail::sink(self, 1);
    auto* gv = detail::sink(self, 2);
    const auto dk = static_cast<std::size_t>(ki), dv = static_cast<std::size_t>(vi);
    Mat state(ki, vi);
    for (std::size_t h = 0; h < bh; ++h) {
      // dq_t = S_t g_t (forward prefix).
      if (gq) {
        state.setZero();
        for (std::size_t s = 0; s < t; ++s) {
          const std::size_t r = h * t + s;
          state.noalias() += CVec(kv.data() + r * dk, ki) * CVec(vv.data() + r * dv, vi).transpose();
          Vec(gq->data() + r * dk, ki).noalias() += state * CVec(g.data() + r * dv, vi);
        }
      }
      // R_s = sum_{t >= s} q_t g_t^T (suffix); dk_s = R_s v_s, dv_s = R_s^T k_s.
      if (gk || gv) {
        state.setZero();
        for (std::size_t s = t; s-- > 0;) {
          const std::size_t r = h * t + s;
          state.noalias() += CVec(qv.data() + r * dk, ki) * CVec(g.data() + r * dv, vi).transpose();
          if (gk) Vec(gk->data() + r * dk, ki).noalias() += state * CVec(vv.data() + r * dv, vi);
          if (gv) Vec(gv->data() + r * dv, vi).noalias() += state.transpose() * CVec(kv.data() + r * dk, ki);
        }
      }
    }
  });
}

/// Softmax attention restricted to keys in [max(0, i - window), i].
inline Tensor banded_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t window) {
  detail::require_heads(q, k, v, "banded_causal_attention");
  if (window < 1) throw std::invalid_argument("banded_causal_attention: window must be >= 1");
  const std::size_t bh = q.shape()[0] * q.shape()[1], t = q.shape()[2], dh = q.shape()[3], dv = v.shape()[3];
  const std::size_t span = window + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(bh * t * span, 0.0);
  std::vector<double> out(v.numel(), 0.0);
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  std::uint64_t ops = 0;
  for (std::size_t h = 0; h < bh; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t lo = i >= window ? i - window : 0;
      const double* qi = qv.data() + (h * t + i) * dh;
      double* p = probs.data() + (h * t + i) * span;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = lo; j <= i; ++j) {
        const double* kj = kv.data() + (h * t + j) * dh;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        p[j - lo] = dot * scale;
        m = std::max(m, p[j - lo]);
      }
      double z = 0.0;
      for (std::size_t j = lo; j <= i; ++j) z += p[j - lo] = std::exp(p[j - lo] - m);
      double* oi = out.data() + (h * t + i) * dv;
      for (std::size_t j = lo; j <= i; ++j) {
        p[j - lo] /= z;
        const double* vj = vv.data() + (h * t + j) * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] += p[j - lo] * vj[c];
      }
      ops += (i - lo + 1) * (dh + dv);
    }
  OpCounter::add(ops);
  return detail::make_result(v.shape(), std::move(out), {&q, &k, &v},
                             [probs = std::move(probs), bh, t, dh, dv, window, span, scale](TensorNode& self) {
                               const auto& qv = self.inputs[0]->value;
                               const auto& kv = self.inputs[1]->value;
                               const auto& vv = self.inputs[2]->value;
                               auto* gq = detail::sink(self, 0);
                               auto* gk = detail::sink(self, 1);
                               auto* gv = detail::sink(self, 2);
                               std::vector<double> dscore(span);
                               for (std::size_t h = 0; h < bh; ++h)
                                 for (std::size_t i = 0; i < t; ++i) {
                                   const std::size_t lo = i >= window ? i - window : 0;
                                   const double* p = probs.data() + (h * t + i) * span;
                                   const double* gi = self.grad.data() + (h * t + i) * dv;
                                   double dot = 0.0;
                                   for (std::size_t j = lo; j <= i; ++j) {
                                     const double* vj = vv.data() + (h * t + j) * dv;
                                     double dp = 0.0;
                                     for (std::size_t c = 0; c < dv; ++c) dp += gi[c] * vj[c];
                                     dscore[j - lo] = dp;
                                     dot += p[j - lo] * dp;
                                     if (gv)
                                       for (std::size_t c = 0; c < dv; ++c) (*gv)[(h * t + j) * dv + c] += p[j - lo] * gi[c];
                                   }
                                   const double* qi = qv.data() + (h * t + i) * dh;
                                   for (std::size_t j = lo; j <= i; ++j) {
                                     const double ds = p[j - lo] * (dscore[j - lo] - dot) * scale;
                                     const double* kj = kv.data() + (h * t + j) * dh;
                                     if (gq)
                                       for (std::size_t c = 0; c < dh; ++c) (*gq)[(h * t + i) * dh + c] += ds * kj[c];
                                     if (gk)
                                       for (std::size_t c = 0; c < dh; ++c) (*gk)[(h * t + j) * dh + c] += ds * qi[c];
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// experts

struct AttentionProjections {
  Linear query, key, value, output;

  static AttentionProjections init(std::size_t d_model, Rng& rng) {
    auto q = Linear::init(d_model, d_model, rng);
    auto k = Linear::init(d_model, d_model, rng);
    auto v = Linear::init(d_model, d_model, rng);
    auto o = Linear::init(d_model, d_model, rng);
    return {q, k, v, o};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    output.collect(prefix + ".output", out);
  }
};

inline Tensor full_attention(const Tensor& x, const AttentionProjections& w, std::size_t heads) {
  detail::require_sequence(x, "full_attention");
  const Tensor q = split_heads(w.query(x), heads);
  const Tensor k = split_heads(w.key(x), heads);
  const Tensor v = split_heads(w.value(x), heads);
  return w.output(merge_heads(causal_softmax_attention(q, k, v)));
}

/// phi(q_t)^T S_t / (phi(q_t)^T z_t + eps) with z_t the running sum of phi(k_s).
inline Tensor linear_attention(const Tensor& x, const AttentionProjections& w, std::size_t heads, double eps = kLinearAttentionEps) {
  detail::require_sequence(x, "linear_attention");
  const Tensor fq = elu_plus_one(split_heads(w.query(x), heads));
  const Tensor fk = elu_plus_one(split_heads(w.key(x), heads));
  const Tensor v = split_heads(w.value(x), heads);
  const Tensor numer = causal_linear_prefix(fq, fk, v);
  const Tensor denom = sum(fq * cumsum(fk, 2), -1, true) + eps;
  return w.output(merge_heads(numer / denom));
}

inline Tensor local_attention(const Tensor& x, const AttentionProjections& w, std::size_t heads, std::size_t window) {
  detail::require_sequence(x, "local_attention");
  if (window < 1) throw std::invalid_argument("local_attention: window must be >= 1");
  const Tensor q = split_heads(w.query(x), heads);
  const Tensor k = split_heads(w.key(x), heads);
  const Tensor v = split_heads(w.value(x), heads);
  return w.output(merge_heads(banded_causal_attention(q, k, v, window)));
}

class AttentionExpert {
 public:
  AttentionExpert() = default;
  AttentionExpert(ExpertSpec spec, AttentionProjections proj) : spec_(spec), proj_(std::move(proj)) {}

  static AttentionExpert init(ExpertSpec spec, std::size_t d_model, Rng& rng) {
    spec.validate(d_model);
    return {spec, AttentionProjections::init(d_model, rng)};
  }

  const ExpertSpec& spec() const { return spec_; }
  const AttentionProjections& projections() const { return proj_; }

  Tensor forward(const Tensor& x) const {
    switch (spec_.kind) {
      case ExpertKind::Full: return full_attention(x, proj_, spec_.heads);
      case ExpertKind::Linear: return linear_attention(x, proj_, spec_.heads);
      case ExpertKind::Local: return local_attention(x, proj_, spec_.heads, spec_.window);
    }
    throw std::logic_error("unknown expert kind");
  }

  void collect(const std::string& prefix, ParameterSet& out) const { proj_.collect(prefix, out); }

 private:
  ExpertSpec spec_;
  AttentionProjections proj_;
};

}  // namespace meta_attention
