// SPDX-License-Identifier: Apache-2.0
//
// Meta-attention layer, transformer block and the byte-level language model.

#pragma once

#include "meta_attention/controller.hpp"
#include "meta_attention/errors.hpp"
#include "meta_attention/experts.hpp"
#include "meta_attention/parameter.hpp"
#include "meta_attention/rng.hpp"
#include "meta_attention/tensor.hpp"

#include "json.hpp"

#include <array>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace meta_attention {

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t seq_len = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t vocab = 256;
  std::size_t controller_hidden = 64;
  std::size_t ffn_mult = 4;
  double prior_scale = 1.0;  // beta0
  double prior_floor = 0.01;  // epsilon
  std::array<double, kNumExperts> costs = kDefaultCosts;

  void validate() const {
    if (d_model == 0 || seq_len == 0 || layers == 0 || vocab == 0 || controller_hidden == 0 || ffn_mult == 0)
      throw input_error("model config: sizes must be positive");
    if (heads == 0 || d_model % heads != 0) throw input_error("model config: d_model must be divisible by heads");
    if (window < 1) throw input_error("model config: window must be >= 1");
    if (vocab > 256) throw input_error("model config: byte vocabulary holds at most 256 symbols");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_model, seq_len, layers, heads, window, vocab, controller_hidden,
                                                ffn_mult, prior_scale, prior_floor, costs)

/// Uncertainty gate: a token whose U_t < threshold runs only its argmax expert.
struct HardRoutingGate {
  double threshold = 0.0;
  double anneal_start = 0.0;
  double anneal_end = 0.0;
  std::size_t anneal_steps = 0;

  static HardRoutingGate fixed(double eta) { return {eta, eta, eta, 0}; }
  static HardRoutingGate annealed(double start, double end, std::size_t steps) {
    if (end > start) throw std::invalid_argument("gate anneal must not increase the threshold");
    return {start, start, end, steps};
  }
  /// Linear schedule from anneal_start to anneal_end over anneal_steps.
  double at_step(std::size_t step) const {
    if (anneal_steps == 0 || step >= anneal_steps) return anneal_steps == 0 ? threshold : anneal_end;
    const double f = static_cast<double>(step) / static_cast<double>(anneal_steps);
    return anneal_start + f * (anneal_end - anneal_start);
  }
};

struct HardRoutingStats {
  std::size_t tokens = 0;
  std::size_t hard_tokens = 0;
  std::array<std::size_t, kNumExperts> selected{};  // argmax picks among hard tokens
  std::array<std::size_t, kNumExperts> executed{};  // expert evaluations (0/1 per layer call)

  double hard_fraction() const { return tokens ? static_cast<double>(hard_tokens) / static_cast<double>(tokens) : 0.0; }
  std::array<double, kNumExperts> histogram() const {
    std::array<double, kNumExperts> p{};
    if (hard_tokens == 0) return p;
    for (std::size_t i = 0; i < kNumExperts; ++i) p[i] = static_cast<double>(selected[i]) / static_cast<double>(hard_tokens);
    return p;
  }
  HardRoutingStats& operator+=(const HardRoutingStats& o) {
    tokens += o.tokens;
    hard_tokens += o.hard_tokens;
    for (std::size_t i = 0; i < kNumExperts; ++i) {
      selected[i] += o.selected[i];
      executed[i] += o.executed[i];
    }
    return *this;
  }
};

struct SoftOptions {
  const std::array<double, kNumExperts>* forced_alpha = nullptr;  // test hook
  Rng* sampler = nullptr;  // Dirichlet-sample routing mode
};

struct LayerOutput {
  Tensor output;  // (B, T, D); residual not included
  RoutingPosterior posterior;
};

/// sum_i w[..., i] * outs[i], accumulated left to right.
inline Tensor merge_experts(const Tensor& weights, const std::array<Tensor, kNumExperts>& outs) {
  Tensor merged = slice(weights, -1, 0, 1) * outs[0];
  for (std::size_t i = 1; i < kNumExperts; ++i) merged = merged + slice(weights, -1, i, i + 1) * outs[i];
  return merged;
}

/// Argmax with ties resolved toward the cheaper expert.
inline std::size_t routing_argmax(std::span<const double> alpha, std::span<const double> costs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < alpha.size(); ++i)
    if (alpha[i] > alpha[best] || (alpha[i] == alpha[best] && costs[i] < costs[best])) best = i;
  return best;
}

class MetaAttentionLayer {
 public:
  static MetaAttentionLayer init(const ModelConfig& cfg, Rng& rng) {
    MetaAttentionLayer l;
    l.norm_ = LayerNormParams::init(cfg.d_model);
    const std::array<ExpertKind, kNumExperts> kinds{ExpertKind::Full, ExpertKind::Linear, ExpertKind::Local};
    for (std::size_t i = 0; i < kNumExperts; ++i)
      l.experts_[i] = AttentionExpert::init({kinds[i], cfg.costs[i], cfg.heads, cfg.window}, cfg.d_model, rng);
    l.controller_ = MetaController::init(cfg.d_model, cfg.controller_hidden, DirichletPrior::build(cfg.costs, cfg.prior_floor, cfg.prior_scale), rng);
    return l;
  }

  const AttentionExpert& expert(std::size_t i) const { return experts_.at(i); }
  const MetaController& controller() const { return controller_; }
  const LayerNormParams& norm() const { return norm_; }

  /// All experts run; output = sum_i alpha_i * E_i(LayerNorm(x)).
  LayerOutput forward_soft(const Tensor& x, const SoftOptions& opts = {}) const {
    const Tensor x_norm = norm_(x);
    LayerOutput out;
    out.posterior = controller_.posterior(ControllerFeatures::build(x_norm), opts.sampler);
    std::array<Tensor, kNumExperts> expert_out;
    for (std::size_t i = 0; i < kNumExperts; ++i) expert_out[i] = experts_[i].forward(x_norm);
    Tensor weights = out.posterior.routing_weights;
    if (opts.forced_alpha) {
      const auto& s = x.shape();
      std::vector<double> w(s[0] * s[1] * kNumExperts);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = (*opts.forced_alpha)[i % kNumExperts];
      weights = Tensor::from({s[0], s[1], kNumExperts}, std::move(w));
    }
    out.output = merge_experts(weights, expert_out);
    return out;
  }

  /// Inference only. Tokens with U_t < threshold take their argmax expert's output
  /// alone; the rest keep the soft merge. Experts nobody needs are skipped.
  LayerOutput forward_hard(const Tensor& x, double threshold, HardRoutingStats& stats) const {
    if (grad_enabled()) throw contract_error("forward_hard: disable gradient tracking (NoGradGuard) first");
    const Tensor x_norm = norm_(x);
    LayerOutput out;
    out.posterior = controller_.posterior(ControllerFeatures::build(x_norm));
    const auto alpha = out.posterior.alpha.data();
    const auto u = out.posterior.uncertainty.data();
    const std::size_t tokens = u.size();
    const std::size_t d = x.shape()[2];
    const auto& costs = controller_.prior().costs;

    std::vector<int> choice(tokens, -1);
    std::array<bool, kNumExperts> needed{};
    bool any_soft = false;
    for (std::size_t t = 0; t < tokens; ++t) {
      if (u[t] < threshold) {
        const auto c = routing_argmax(alpha.subspan(t * kNumExperts, kNumExperts), costs);
        choice[t] = static_cast<int>(c);
        needed[c] = true;
        ++stats.selected[c];
        ++stats.hard_tokens;
      } else {
        any_soft = true;
      }
    }
    stats.tokens += tokens;
    if (any_soft) needed.fill(true);

    std::array<Tensor, kNumExperts> expert_out;
    for (std::size_t i = 0; i < kNumExperts; ++i)
      if (needed[i]) {
        expert_out[i] = experts_[i].forward(x_norm);
        ++stats.executed[i];
      }
    std::vector<double> result;
    if (any_soft) {
      const Tensor merged = merge_experts(out.posterior.alpha, expert_out);
      result.assign(merged.data().begin(), merged.data().end());
    } else {
      result.assign(tokens * d, 0.0);
    }
    for (std::size_t t = 0; t < tokens; ++t)
      if (choice[t] >= 0) {
        const auto src = expert_out[static_cast<std::size_t>(choice[t])].data().subspan(t * d, d);
        std::copy(src.begin(), src.end(), result.begin() + static_cast<long>(t * d));
      }
    out.output = Tensor::from(x.shape(), std::move(result));
    return out;
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    norm_.collect(prefix + ".norm", out);
    for (std::size_t i = 0; i < kNumExperts; ++i) experts_[i].collect(prefix + ".expert_" + to_string(experts_[i].spec().kind), out);
    controller_.collect(prefix + ".controller", out);
  }

 private:
  LayerNormParams norm_;
  std::array<AttentionExpert, kNumExperts> experts_;
  MetaController controller_;
};

struct BlockOutput {
  Tensor output;
  RoutingPosterior posterior;
};

/// Pre-norm block: x + MetaAttn(x), then h + FFN(LayerNorm(h)).
class TransformerBlock {
 public:
  static TransformerBlock init(const ModelConfig& cfg, Rng& rng) {
    TransformerBlock b;
    b.attention_ = MetaAttentionLayer::init(cfg, rng);
    b.ffn_norm_ = LayerNormParams::init(cfg.d_model);
    b.ffn_in_ = Linear::init(cfg.d_model, cfg.ffn_mult * cfg.d_model, rng);
    b.ffn_out_ = Linear::init(cfg.ffn_mult * cfg.d_model, cfg.d_model, rng);
    return b;
  }

  const MetaAttentionLayer& attention() const { return attention_; }

  BlockOutput forward(const Tensor& x, const SoftOptions& opts = {}) const {
    auto a = attention_.forward_soft(x, opts);
    return {feed_forward(x + a.output), std::move(a.posterior)};
  }

  BlockOutput forward_hard(const Tensor& x, double threshold, HardRoutingStats& stats) const {
    auto a = attention_.forward_hard(x, threshold, stats);
    return {feed_forward(x + a.output), std::move(a.posterior)};
  }

  void collect(const std::string& prefix, ParameterSet& out) const {
    attention_.collect(prefix + ".attention", out);
    ffn_norm_.collect(prefix + ".ffn_norm", out);
    ffn_in_.collect(prefix + ".ffn_in", out);
    ffn_out_.collect(prefix + ".ffn_out", out);
  }

 private:
  Tensor feed_forward(const Tensor& h) const { return h + ffn_out_(gelu(ffn_in_(ffn_norm_(h)))); }

  MetaAttentionLayer attention_;
  LayerNormParams ffn_norm_;
  Linear ffn_in_;
  Linear ffn_out_;
};

/// Row-major (batch, length) byte sequences. A training batch has length T + 1.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;

  void validate(std::size_t vocab) const {
    if (tokens.size() != batch * length) throw input_error("token batch: size does not match batch x length");
    for (int t : tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw input_error("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
  }
  /// Drops the last (inputs) or first (targets) position of each row.
  std::vector<int> shifted(bool targets) const {
    std::vector<int> out;
    out.reserve(batch * (length - 1));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = targets ? 1 : 0; t < (targets ? length : length - 1); ++t) out.push_back(tokens[b * length + t]);
    return out;
  }
};

struct LmOutput {
  Tensor logits;     // (B, T, V)
  Tensor task_loss;  // mean next-byte cross-entropy
  Tensor kl;         // mean over layers of the per-layer token-mean KL
  Tensor loss;       // task_loss + elbo_weight * kl
  std::vector<RoutingPosterior> layers;
};

class TinyLM {
 public:
  static TinyLM init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    TinyLM m;
    m.config_ = cfg;
    m.embedding_ = normal_tensor({cfg.vocab, cfg.d_model}, 1.0, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) m.blocks_.push_back(TransformerBlock::init(cfg, rng));
    m.final_norm_ = LayerNormParams::init(cfg.d_model);
    m.head_ = Linear::zeros(cfg.d_model, cfg.vocab);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const TransformerBlock& block(std::size_t i) const { return blocks_.at(i); }

  ParameterSet parameters() const {
    ParameterSet p;
    p.add("embedding", embedding_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("layer" + std::to_string(l), p);
    final_norm_.collect("final_norm", p);
    head_.collect("head", p);
    return p;
  }

  /// Logits for (batch, T) inputs with soft routing.
  LmOutput forward_inputs(std::span<const int> inputs, std::size_t batch, std::size_t t, const SoftOptions& opts = {}) const {
    LmOutput out;
    Tensor x = gather_rows(embedding_, inputs, {batch, t});
    for (const auto& b : blocks_) {
      auto r = b.forward(x, opts);
      x = r.output;
      out.layers.push_back(std::move(r.posterior));
    }
    out.logits = head_(final_norm_(x));
    return out;
  }

  /// Teacher-forced next-byte loss plus the weighted routing KL (skipped at weight 0).
  LmOutput forward(const TokenBatch& batch, double elbo_weight, const SoftOptions& opts = {}) const {
    batch.validate(config_.vocab);
    if (batch.length < 2) throw input_error("token batch: need at least two positions per row");
    const auto inputs = batch.shifted(false);
    const auto targets = batch.shifted(true);
    LmOutput out = forward_inputs(inputs, batch.batch, batch.length - 1, opts);
    finish(out, targets, elbo_weight);
    return out;
  }

  /// Same, with uncertainty-gated hard routing in every layer. Inference only.
  LmOutput forward_hard(const TokenBatch& batch, double threshold, HardRoutingStats& stats) const {
    if (grad_enabled()) throw contract_error("forward_hard: disable gradient tracking (NoGradGuard) first");
    batch.validate(config_.vocab);
    const auto inputs = batch.shifted(false);
    const auto targets = batch.shifted(true);
    LmOutput out;
    Tensor x = gather_rows(embedding_, inputs, {batch.batch, batch.length - 1});
    for (const auto& b : blocks_) {
      auto r = b.forward_hard(x, threshold, stats);
      x = r.output;
      out.layers.push_back(std::move(r.posterior));
    }
    out.logits = head_(final_norm_(x));
    finish(out, targets, 0.0);
    return out;
  }

 private:
  void finish(LmOutput& out, const std::vector<int>& targets, double elbo_weight) const {
    out.task_loss = cross_entropy(out.logits, targets);
    Tensor kl_total = out.layers.front().kl;
    for (std::size_t l = 1; l < out.layers.size(); ++l) kl_total = kl_total + out.layers[l].kl;
    out.kl = kl_total * (1.0 / static_cast<double>(out.layers.size()));
    out.loss = elbo_weight == 0.0 ? out.task_loss : out.task_loss + out.kl * elbo_weight;
  }

  ModelConfig config_;
  Tensor embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_norm_;
  Linear head_;
};

}  // namespace meta_attention
