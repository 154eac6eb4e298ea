// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver behind the command-line tool: run configuration, the
// training loop, validation, the forward-pass self-test, the two-arm
// ablation and the hard-routing threshold sweep.

#pragma once

#include "meta_attention/analysis.hpp"
#include "meta_attention/checkpoint.hpp"
#include "meta_attention/controller.hpp"
#include "meta_attention/data.hpp"
#include "meta_attention/errors.hpp"
#include "meta_attention/model.hpp"
#include "meta_attention/optim.hpp"
#include "meta_attention/special.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace meta_attention {

/// The tape allocates and frees multi-megabyte buffers every step; by default
/// glibc serves those with mmap and returns them at once, so each step pays
/// for fresh zeroed pages. Keeping them on the heap roughly halves step time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// run configuration

namespace detail {
// JSON has no infinities; thresholds travel as the strings "inf" / "-inf".
inline nlohmann::ordered_json threshold_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}
inline double threshold_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw input_error("threshold must be a number, \"inf\" or \"-inf\", got \"" + s + "\"");
  }
  return j.get<double>();
}
}  // namespace detail

struct RunConfig {
  ModelConfig model;
  std::size_t batch = 32;
  std::size_t steps = 2000;
  double beta_elbo = 1.0;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  std::string corpus = "data/sample_corpus.txt";
  std::string output_dir;
  std::string routing = "soft";  // "soft" or "hard" (hard routing applies at evaluation)
  std::string routing_weights = "mean";  // training merge: posterior "mean" or Dirichlet "sample"
  double eta = -std::numeric_limits<double>::infinity();
  std::size_t eta_anneal_steps = 0;  // > 0: eta moves linearly from eta_start to eta
  double eta_start = 0.0;
  std::size_t checkpoint_every = 500;
  std::size_t eval_windows = 0;  // 0: the whole validation region
  std::size_t log_every = 100;

  void validate() const {
    model.validate();
    if (batch == 0) throw input_error("batch must be positive");
    if (!(beta_elbo >= 0.0)) throw input_error("beta_elbo must be >= 0");
    if (!(lr >= 0.0)) throw input_error("learning rate must be >= 0");
    if (routing != "soft" && routing != "hard") throw input_error("routing must be \"soft\" or \"hard\", got \"" + routing + "\"");
    if (routing_weights != "mean" && routing_weights != "sample")
      throw input_error("routing_weights must be \"mean\" or \"sample\", got \"" + routing_weights + "\"");
    if (eta_anneal_steps > 0 && eta > eta_start) throw input_error("eta schedule must not increase");
    // Building the prior surfaces a degenerate floor before any work is done.
    DirichletPrior::build(model.costs, model.prior_floor, model.prior_scale);
  }

  HardRoutingGate gate() const {
    return eta_anneal_steps > 0 ? HardRoutingGate::annealed(eta_start, eta, eta_anneal_steps) : HardRoutingGate::fixed(eta);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["d_model"] = model.d_model;
    j["seq_len"] = model.seq_len;
    j["layers"] = model.layers;
    j["heads"] = model.heads;
    j["window"] = model.window;
    j["vocab"] = model.vocab;
    j["controller_hidden"] = model.controller_hidden;
    j["ffn_mult"] = model.ffn_mult;
    j["beta0"] = model.prior_scale;
    j["epsilon"] = model.prior_floor;
    j["costs"] = model.costs;
    j["batch"] = batch;
    j["steps"] = steps;
    j["beta_elbo"] = beta_elbo;
    j["lr"] = lr;
    j["seed"] = seed;
    j["corpus"] = corpus;
    j["output_dir"] = output_dir;
    j["routing"] = routing;
    j["routing_weights"] = routing_weights;
    j["eta"] = detail::threshold_to_json(eta);
    j["eta_start"] = detail::threshold_to_json(eta_start);
    j["eta_anneal_steps"] = eta_anneal_steps;
    j["checkpoint_every"] = checkpoint_every;
    j["eval_windows"] = eval_windows;
    j["log_every"] = log_every;
    return j;
  }

  /// Overlays the keys present in `j`; unknown keys are rejected.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) throw input_error("config must be a JSON object");
    try {
      for (const auto& [key, v] : j.items()) {
        if (key == "d_model") model.d_model = v.get<std::size_t>();
        else if (key == "seq_len") model.seq_len = v.get<std::size_t>();
        else if (key == "layers") model.layers = v.get<std::size_t>();
        else if (key == "heads") model.heads = v.get<std::size_t>();
        else if (key == "window") model.window = v.get<std::size_t>();
        else if (key == "vocab") model.vocab = v.get<std::size_t>();
        else if (key == "controller_hidden") model.controller_hidden = v.get<std::size_t>();
        else if (key == "ffn_mult") model.ffn_mult = v.get<std::size_t>();
        else if (key == "beta0") model.prior_scale = v.get<double>();
        else if (key == "epsilon") model.prior_floor = v.get<double>();
        else if (key == "costs") model.costs = v.get<std::array<double, kNumExperts>>();
        else if (key == "batch") batch = v.get<std::size_t>();
        else if (key == "steps") steps = v.get<std::size_t>();
        else if (key == "beta_elbo") beta_elbo = v.get<double>();
        else if (key == "lr") lr = v.get<double>();
        else if (key == "seed") seed = v.get<std::uint64_t>();
        else if (key == "corpus") corpus = v.get<std::string>();
        else if (key == "output_dir") output_dir = v.get<std::string>();
        else if (key == "routing") routing = v.get<std::string>();
        else if (key == "routing_weights") routing_weights = v.get<std::string>();
        else if (key == "eta") eta = detail::threshold_from_json(v);
        else if (key == "eta_start") eta_start = detail::threshold_from_json(v);
        else if (key == "eta_anneal_steps") eta_anneal_steps = v.get<std::size_t>();
        else if (key == "checkpoint_every") checkpoint_every = v.get<std::size_t>();
        else if (key == "eval_windows") eval_windows = v.get<std::size_t>();
        else if (key == "log_every") log_every = v.get<std::size_t>();
        else throw input_error("unknown config key \"" + key + "\"");
      }
    } catch (const nlohmann::json::exception& e) {
      throw input_error(std::string("config: ") + e.what());
    }
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.merge_json(j);
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open config file " + path);
    try {
      return from_json(nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true));
    } catch (const nlohmann::json::parse_error& e) {
      throw input_error("config file " + path + ": " + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// evaluation

struct Evaluation {
  double loss = 0.0;  // mean next-byte cross-entropy (nats)
  double ppl = 0.0;
  std::size_t tokens = 0;
  RoutingMetrics routing;
  std::optional<HardRoutingStats> hard;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["loss"] = loss;
    j["ppl"] = ppl;
    j["tokens"] = tokens;
    j["projected_cost_pct"] = routing.projected_flop_cost_pct;
    j["routing_entropy_pct"] = routing.routing_entropy_pct;
    j["mean_alpha"] = routing.mean_alpha;
    j["mean_uncertainty"] = routing.mean_uncertainty;
    if (hard) {
      j["hard_fraction"] = hard->hard_fraction();
      j["hard_histogram"] = hard->histogram();
    }
    return j;
  }
};

/// Teacher-forced validation; with a threshold, every layer uses the uncertainty gate.
inline Evaluation evaluate(const TinyLM& model, const std::vector<TokenBatch>& batches, std::optional<double> threshold = std::nullopt) {
  if (batches.empty()) throw input_error("evaluation needs at least one batch");
  NoGradGuard no_grad;
  Evaluation ev;
  RoutingAccumulator acc(model.config().costs);
  double nll = 0.0;
  if (threshold) ev.hard.emplace();
  for (const auto& b : batches) {
    const LmOutput out = threshold ? model.forward_hard(b, *threshold, *ev.hard) : model.forward(b, 0.0);
    const std::size_t n = b.batch * (b.length - 1);
    nll += out.task_loss.item() * static_cast<double>(n);
    ev.tokens += n;
    for (const auto& layer : out.layers) acc.add(layer.alpha, layer.uncertainty);
  }
  ev.loss = nll / static_cast<double>(ev.tokens);
  ev.ppl = std::exp(ev.loss);
  ev.routing = acc.result();
  return ev;
}

// ---------------------------------------------------------------------------
// training

/// Raised when the loss stops being finite; carries a diagnostics record.
class training_diverged : public std::runtime_error {
 public:
  training_diverged(const std::string& what, nlohmann::ordered_json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::ordered_json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::ordered_json diagnostics_;
};

struct TrainOptions {
  std::string resume_from;       // checkpoint to continue from
  std::ostream* log = nullptr;   // progress lines every RunConfig::log_every steps
  bool write_files = true;       // metrics, checkpoint and summary under output_dir
  bool final_evaluation = true;
};

struct TrainResult {
  TinyLM model;
  std::vector<MetricsRecord> records;
  std::optional<Evaluation> validation;
  std::optional<Evaluation> validation_hard;
};

namespace detail {
inline MetricsRecord step_record(std::size_t step, const LmOutput& out, std::span<const double> costs) {
  RoutingAccumulator acc(costs);
  for (const auto& layer : out.layers) acc.add(layer.alpha, layer.uncertainty);
  const auto m = acc.result();
  MetricsRecord r;
  r.step = step;
  r.loss = out.loss.item();
  r.ppl = std::exp(out.task_loss.item());
  r.kl = out.kl.item();
  r.routing_entropy_pct = m.routing_entropy_pct;
  r.projected_cost_pct = m.projected_flop_cost_pct;
  r.mean_alpha = m.mean_alpha;
  return r;
}

inline nlohmann::ordered_json divergence_report(std::size_t step, const LmOutput& out) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = detail::threshold_to_json(out.loss.item());
  j["task_loss"] = detail::threshold_to_json(out.task_loss.item());
  j["kl"] = detail::threshold_to_json(out.kl.item());
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : out.layers) {
    const auto a = layer.alpha.data();
    std::array<double, kNumExperts> lo, hi, mean{};
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    std::size_t non_finite = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::size_t k = i % kNumExperts;
      if (!std::isfinite(a[i])) {
        ++non_finite;
        continue;
      }
      lo[k] = std::min(lo[k], a[i]);
      hi[k] = std::max(hi[k], a[i]);
      mean[k] += a[i] / static_cast<double>(a.size() / kNumExperts);
    }
    j["layers"].push_back({{"alpha_min", lo}, {"alpha_max", hi}, {"alpha_mean", mean}, {"alpha_non_finite", non_finite},
                           {"kl", detail::threshold_to_json(layer.kl.item())}});
  }
  return j;
}

inline nlohmann::ordered_json artefact_header(const RunConfig& cfg, const std::string& kind) {
  nlohmann::ordered_json h;
  h["schema_version"] = kReportSchemaVersion;
  h["kind"] = kind;
  h["config"] = cfg.to_json();
  return h;
}

/// Reads back a metrics stream, keeping the header and records before `until`.
inline std::vector<MetricsRecord> truncate_metrics(const std::string& path, std::size_t until) {
  std::ifstream in(path);
  if (!in) throw input_error("resume: metrics stream " + path + " not found");
  std::string header, line;
  std::getline(in, header);
  std::vector<std::string> kept;
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      break;  // torn final line from an interrupted run
    }
    auto r = MetricsRecord::from_json(j);
    if (r.step >= until) break;
    kept.push_back(line);
    records.push_back(r);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << header << '\n';
  for (const auto& k : kept) out << k << '\n';
  return records;
}
}  // namespace detail

/// The next-byte training loop. Every stochastic choice draws from one generator
/// seeded with cfg.seed, so a fixed config reproduces its metrics and checkpoint
/// byte for byte.
inline TrainResult train(const RunConfig& cfg, const Corpus& corpus, const TrainOptions& opts = {}) {
  cfg.validate();
  if (corpus.window() != cfg.model.seq_len + 1) throw input_error("corpus window does not match seq_len + 1");
  const bool files = opts.write_files && !cfg.output_dir.empty();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  if (files) fs::create_directories(dir);

  Rng rng(cfg.seed);
  TrainResult result{TinyLM::init(cfg.model, rng), {}, {}, {}};
  auto params = result.model.parameters();
  Adam opt(params, {.lr = cfg.lr});

  std::size_t start = 0;
  if (!opts.resume_from.empty()) {
    const Checkpoint ck = load_checkpoint(opts.resume_from);
    auto stored = nlohmann::json::parse(ck.run.value("config", nlohmann::ordered_json::object()).dump());
    auto now = nlohmann::json::parse(cfg.to_json().dump());
    // The step budget may be extended on resume; everything else must match.
    for (auto* j : {&stored, &now}) j->erase("steps");
    if (stored != now) throw input_error("resume: checkpoint " + opts.resume_from + " was written under a different configuration");
    restore_checkpoint(ck, result.model, &opt);
    rng.restore(ck.rng_state);
    start = ck.optimizer_steps;
    if (start > cfg.steps) throw input_error("resume: checkpoint is past the configured step count");
  }

  const auto header = detail::artefact_header(cfg, "metrics");
  const std::string metrics_path = (dir / "metrics.jsonl").string();
  std::optional<MetricsWriter> writer;
  if (files) {
    if (start > 0) {
      result.records = detail::truncate_metrics(metrics_path, start);
      writer.emplace(metrics_path, header, /*append=*/true);
    } else {
      writer.emplace(metrics_path, header);
    }
  }

  auto save = [&](std::size_t steps_done) {
    if (!files) return;
    Checkpoint ck = make_checkpoint(result.model, &opt, &rng);
    ck.run = detail::artefact_header(cfg, "checkpoint");
    ck.run["steps_completed"] = steps_done;
    save_checkpoint((dir / "checkpoint.bin").string(), ck);
  };

  const auto& costs = cfg.model.costs;
  for (std::size_t step = start; step < cfg.steps; ++step) {
    const TokenBatch batch = corpus.sample_train(cfg.batch, rng);
    params.zero_grad();
    const LmOutput out = result.model.forward(batch, cfg.beta_elbo, {nullptr, cfg.routing_weights == "sample" ? &rng : nullptr});
    if (!std::isfinite(out.loss.item())) {
      auto diag = detail::divergence_report(step, out);
      if (files) std::ofstream(dir / "divergence.json") << diag.dump(2) << '\n';
      throw training_diverged("non-finite loss at step " + std::to_string(step), std::move(diag));
    }
    out.loss.backward();
    opt.step(params);

    auto rec = detail::step_record(step, out, costs);
    if (writer) writer->write(rec);
    result.records.push_back(rec);
    if (opts.log && cfg.log_every && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      *opts.log << "step " << std::setw(5) << step << "  loss " << std::fixed << std::setprecision(4) << rec.loss << "  ppl " << rec.ppl
                << "  kl " << rec.kl << "  cost% " << std::setprecision(2) << rec.projected_cost_pct << "  entropy% "
                << rec.routing_entropy_pct << std::defaultfloat << std::setprecision(6) << '\n';
    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) save(step + 1);
  }
  save(cfg.steps);

  if (opts.final_evaluation && corpus.has_validation()) {
    const auto val = corpus.validation_batches(cfg.batch, cfg.eval_windows);
    result.validation = evaluate(result.model, val);
    if (cfg.routing == "hard") result.validation_hard = evaluate(result.model, val, cfg.gate().at_step(cfg.steps));
  }
  if (files) {
    write_metrics_csv((dir / "metrics.csv").string(), result.records);
    auto summary = detail::artefact_header(cfg, "summary");
    summary["steps"] = cfg.steps;
    if (!result.records.empty()) summary["final_step"] = result.records.back().to_json();
    if (result.validation) summary["validation"] = result.validation->to_json();
    if (result.validation_hard) {
      summary["validation_hard"] = result.validation_hard->to_json();
      summary["validation_hard"]["eta"] = detail::threshold_to_json(cfg.gate().at_step(cfg.steps));
    }
    std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  }
  return result;
}

// ---------------------------------------------------------------------------
// forward-pass self-test

struct SelfTestRow {
  std::string metric;
  std::string value;
  std::string expected;
  bool pass = false;
};

struct SelfTestReport {
  std::vector<SelfTestRow> rows;
  std::size_t seeds = 0;
  std::vector<double> prior_kl;  // per seed

  bool all_pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const SelfTestRow& r) { return r.pass; });
  }
  std::string table() const {
    std::ostringstream os;
    std::size_t w0 = 6, w1 = 5;
    for (const auto& r : rows) {
      w0 = std::max(w0, r.metric.size());
      w1 = std::max(w1, r.value.size());
    }
    os << std::left << std::setw(static_cast<int>(w0)) << "metric" << "  " << std::setw(static_cast<int>(w1)) << "value" << "  result  expected\n";
    for (const auto& r : rows)
      os << std::setw(static_cast<int>(w0)) << r.metric << "  " << std::setw(static_cast<int>(w1)) << r.value << "  " << (r.pass ? "PASS  " : "FAIL  ")
         << "  " << r.expected << '\n';
    return os.str();
  }
};

struct SelfTestExpectations {
  double mean_alpha[kNumExperts] = {0.209, 0.406, 0.385};  // published initial weights
  double alpha_tolerance = 0.10;
  double prior_kl_lo = 1.9, prior_kl_hi = 4.9;  // band around the published 3.42
};

/// Forward pass of one meta-attention layer on N(0, 1) inputs at (2, T, D), repeated over
/// `seeds` consecutive seeds with fresh random weights. The structural rows use the first seed.
inline SelfTestReport selftest(const ModelConfig& cfg, std::uint64_t seed = 0, std::size_t seeds = 32, const SelfTestExpectations& want = {}) {
  cfg.validate();
  const DirichletPrior prior = DirichletPrior::build(cfg.costs, cfg.prior_floor, cfg.prior_scale);
  if (seeds == 0) throw input_error("selftest needs at least one seed");
  NoGradGuard no_grad;
  auto fmt = [](double v, int digits = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
  };

  SelfTestReport rep;
  rep.seeds = seeds;
  const std::size_t b = 2, t = cfg.seq_len, d = cfg.d_model;
  std::array<double, kNumExperts> alpha_sum{};
  std::size_t rows_seen = 0;
  double worst_row_sum = 0.0;
  bool finite = true;
  Shape first_shape;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(seed + s);
    const auto layer = MetaAttentionLayer::init(cfg, rng);
    const Tensor x = normal_tensor({b, t, d}, 1.0, rng);
    const auto out = layer.forward_soft(x);
    if (s == 0) first_shape = out.output.shape();
    finite = finite && all_finite(out.output) && all_finite(out.posterior.alpha) && all_finite(out.posterior.kl);
    const auto a = out.posterior.alpha.data();
    for (std::size_t r = 0; r < a.size() / kNumExperts; ++r) {
      double row = 0.0;
      for (std::size_t k = 0; k < kNumExperts; ++k) {
        row += a[r * kNumExperts + k];
        alpha_sum[k] += a[r * kNumExperts + k];
      }
      worst_row_sum = std::max(worst_row_sum, std::abs(row - 1.0));
      ++rows_seen;
    }
    rep.prior_kl.push_back(out.posterior.kl.item());
  }
  std::array<double, kNumExperts> mean_alpha{};
  for (std::size_t k = 0; k < kNumExperts; ++k) mean_alpha[k] = alpha_sum[k] / static_cast<double>(rows_seen);

  const Shape want_shape{b, t, d};
  rep.rows.push_back({"output shape", to_string(first_shape), "= input shape " + to_string(want_shape), first_shape == want_shape});
  rep.rows.push_back({"NaN / Inf", finite ? "none" : "present", "none", finite});
  const double log_b = prior.log_normaliser();
  std::string beta_text = "[";
  for (std::size_t k = 0; k < prior.size(); ++k) beta_text += (k ? ", " : "") + fmt(prior.beta[k], 2);
  beta_text += "]";
  rep.rows.push_back({"log B(beta) finite", fmt(log_b), "finite, beta = " + beta_text, std::isfinite(log_b)});
  rep.rows.push_back({"posterior mean sum", "1 +/- " + [&] {
                        std::ostringstream os;
                        os << std::scientific << std::setprecision(1) << worst_row_sum;
                        return os.str();
                      }(),
                      "= 1 within 1e-9", worst_row_sum <= 1e-9});
  const char* names[kNumExperts] = {"mean weight E1 (full)", "mean weight E2 (linear)", "mean weight E3 (local)"};
  for (std::size_t k = 0; k < kNumExperts; ++k) {
    const bool near = std::abs(mean_alpha[k] - want.mean_alpha[k]) <= want.alpha_tolerance;
    bool side = true;
    std::string expected = "~" + fmt(want.mean_alpha[k], 3) + " +/- " + fmt(want.alpha_tolerance, 2);
    if (k == 0) side = mean_alpha[k] < 1.0 / 3.0, expected += ", < 1/3";
    if (k == 1) side = mean_alpha[k] > 1.0 / 3.0, expected += ", > 1/3";
    rep.rows.push_back({names[k], fmt(mean_alpha[k]), expected, near && side});
  }
  double h = 0.0;
  for (double a : mean_alpha)
    if (a > 0) h -= a * std::log(a);
  rep.rows.push_back({"entropy of mean alpha (nats)", fmt(h), "> 0 (published ~1.06)", h > 0.0});
  double kl_mean = 0.0;
  bool kl_ok = true;
  for (double k : rep.prior_kl) {
    kl_mean += k / static_cast<double>(rep.prior_kl.size());
    kl_ok = kl_ok && std::isfinite(k) && k > 0.0;
  }
  rep.rows.push_back({"prior KL at init", fmt(kl_mean), "in [" + fmt(want.prior_kl_lo, 1) + ", " + fmt(want.prior_kl_hi, 1) + "] (published ~3.42)",
                      kl_ok && kl_mean >= want.prior_kl_lo && kl_mean <= want.prior_kl_hi});
  return rep;
}

// ---------------------------------------------------------------------------
// ablation

struct AblationCriteria {
  double min_cost_gap_pp = 15.0;
  double max_ppl_ratio = 1.25;
};

struct ArmResult {
  std::string name;
  double beta_elbo = 0.0;
  bool failed = false;
  std::string failure;
  Evaluation validation;
  double normalised_ppl = 0.0;
  std::vector<std::pair<std::size_t, double>> kl_trace;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["beta_elbo"] = beta_elbo;
    j["failed"] = failed;
    if (failed) {
      j["failure"] = failure;
      return j;
    }
    j["validation_ppl"] = validation.ppl;
    j["normalised_ppl"] = normalised_ppl;
    j["routing_entropy_pct"] = validation.routing.routing_entropy_pct;
    j["projected_cost_pct"] = validation.routing.projected_flop_cost_pct;
    j["mean_alpha"] = validation.routing.mean_alpha;
    j["kl_trace"] = nlohmann::ordered_json::array();
    for (const auto& [step, kl] : kl_trace) j["kl_trace"].push_back({step, kl});
    return j;
  }
};

struct SeedResult {
  std::uint64_t seed = 0;
  ArmResult bayesian;
  ArmResult prior_free;

  bool complete() const { return !bayesian.failed && !prior_free.failed; }
  double cost_gap_pp() const { return prior_free.validation.routing.projected_flop_cost_pct - bayesian.validation.routing.projected_flop_cost_pct; }
  double entropy_gap_pp() const { return prior_free.validation.routing.routing_entropy_pct - bayesian.validation.routing.routing_entropy_pct; }
  double ppl_ratio() const { return bayesian.validation.ppl / prior_free.validation.ppl; }

  bool pass_cost(const AblationCriteria& c) const { return complete() && cost_gap_pp() >= c.min_cost_gap_pp; }
  bool pass_entropy() const { return complete() && entropy_gap_pp() > 0.0; }
  bool pass_ppl(const AblationCriteria& c) const { return complete() && ppl_ratio() <= c.max_ppl_ratio; }
};

struct Spread {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t n = 0;

  static Spread of(const std::vector<double>& v) {
    Spread s;
    s.n = v.size();
    if (v.empty()) return s;
    s.min = *std::min_element(v.begin(), v.end());
    s.max = *std::max_element(v.begin(), v.end());
    for (double x : v) s.mean += x / static_cast<double>(v.size());
    return s;
  }
  nlohmann::ordered_json to_json() const { return {{"mean", mean}, {"min", min}, {"max", max}, {"n", n}}; }
};

struct AblationReport {
  RunConfig config;
  AblationCriteria criteria;
  std::vector<SeedResult> seeds;

  std::vector<double> collect(double (*f)(const SeedResult&)) const {
    std::vector<double> v;
    for (const auto& s : seeds)
      if (s.complete()) v.push_back(f(s));
    return v;
  }

  bool all_pass() const {
    if (seeds.empty()) return false;
    return std::all_of(seeds.begin(), seeds.end(), [&](const SeedResult& s) { return s.pass_cost(criteria) && s.pass_entropy() && s.pass_ppl(criteria); });
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = "ablation";
    j["config"] = config.to_json();
    j["criteria"] = {{"min_cost_gap_pp", criteria.min_cost_gap_pp}, {"max_ppl_ratio", criteria.max_ppl_ratio}};
    j["seeds_used"] = nlohmann::ordered_json::array();
    for (const auto& s : seeds) j["seeds_used"].push_back(s.seed);
    j["per_seed"] = nlohmann::ordered_json::array();
    for (const auto& s : seeds) {
      nlohmann::ordered_json e;
      e["seed"] = s.seed;
      e["bayesian"] = s.bayesian.to_json();
      e["prior_free"] = s.prior_free.to_json();
      if (s.complete()) {
        e["deltas"] = {{"cost_gap_pp", s.cost_gap_pp()}, {"entropy_gap_pp", s.entropy_gap_pp()}, {"ppl_ratio", s.ppl_ratio()}};
        e["pass"] = {{"cost", s.pass_cost(criteria)}, {"entropy", s.pass_entropy()}, {"ppl", s.pass_ppl(criteria)}};
      }
      j["per_seed"].push_back(e);
    }
    nlohmann::ordered_json summary;
    summary["bayesian_cost_pct"] = Spread::of(collect([](const SeedResult& s) { return s.bayesian.validation.routing.projected_flop_cost_pct; })).to_json();
    summary["prior_free_cost_pct"] = Spread::of(collect([](const SeedResult& s) { return s.prior_free.validation.routing.projected_flop_cost_pct; })).to_json();
    summary["bayesian_entropy_pct"] = Spread::of(collect([](const SeedResult& s) { return s.bayesian.validation.routing.routing_entropy_pct; })).to_json();
    summary["prior_free_entropy_pct"] = Spread::of(collect([](const SeedResult& s) { return s.prior_free.validation.routing.routing_entropy_pct; })).to_json();
    summary["bayesian_normalised_ppl"] = Spread::of(collect([](const SeedResult& s) { return s.ppl_ratio(); })).to_json();
    summary["cost_gap_pp"] = Spread::of(collect([](const SeedResult& s) { return s.cost_gap_pp(); })).to_json();
    summary["entropy_gap_pp"] = Spread::of(collect([](const SeedResult& s) { return s.entropy_gap_pp(); })).to_json();
    j["summary"] = summary;
    j["all_pass"] = all_pass();
    return j;
  }

  /// Table 3 layout: one column per arm, across-seed mean with [min, max].
  std::string table() const {
    std::ostringstream os;
    auto cell = [](const Spread& s, int digits) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(digits) << s.mean << " [" << s.min << ", " << s.max << "]";
      return c.str();
    };
    auto row = [&](const std::string& name, const std::string& a, const std::string& b, const std::string& delta) {
      os << std::left << std::setw(26) << name << std::setw(28) << a << std::setw(28) << b << delta << '\n';
    };
    const auto bc = Spread::of(collect([](const SeedResult& s) { return s.bayesian.validation.routing.projected_flop_cost_pct; }));
    const auto pc = Spread::of(collect([](const SeedResult& s) { return s.prior_free.validation.routing.projected_flop_cost_pct; }));
    const auto be = Spread::of(collect([](const SeedResult& s) { return s.bayesian.validation.routing.routing_entropy_pct; }));
    const auto pe = Spread::of(collect([](const SeedResult& s) { return s.prior_free.validation.routing.routing_entropy_pct; }));
    const auto bp = Spread::of(collect([](const SeedResult& s) { return s.ppl_ratio(); }));
    const auto ba = Spread::of(collect([](const SeedResult& s) { return s.bayesian.validation.ppl; }));
    const auto pa = Spread::of(collect([](const SeedResult& s) { return s.prior_free.validation.ppl; }));
    // Deltas read Bayesian minus prior-free, so a cheaper Bayesian arm shows negative.
    const auto cd = Spread::of(collect([](const SeedResult& s) { return -s.cost_gap_pp(); }));
    const auto ed = Spread::of(collect([](const SeedResult& s) { return -s.entropy_gap_pp(); }));
    os << "seeds:";
    for (const auto& s : seeds) os << ' ' << s.seed;
    os << "  (mean [min, max] over " << bc.n << " complete seed pairs)\n";
    row("metric", "Bayesian", "prior-free", "delta");
    row("normalised PPL", cell(bp, 3), "1.000", "");
    row("validation PPL", cell(ba, 3), cell(pa, 3), "");
    row("routing entropy (%)", cell(be, 1), cell(pe, 1), std::string(ed.mean >= 0.0 ? "+" : "") + cell(ed, 1) + " pp");
    row("projected FLOP cost (%)", cell(bc, 1), cell(pc, 1), std::string(cd.mean >= 0.0 ? "+" : "") + cell(cd, 1) + " pp");
    for (const auto& s : seeds) {
      os << "seed " << s.seed << ": ";
      if (!s.complete()) {
        os << "FAILED (" << (s.bayesian.failed ? "Bayesian: " + s.bayesian.failure : "prior-free: " + s.prior_free.failure) << ")\n";
        continue;
      }
      os << std::fixed << std::setprecision(2) << "cost gap " << s.cost_gap_pp() << " pp " << (s.pass_cost(criteria) ? "ok" : "FAIL") << ", entropy gap "
         << s.entropy_gap_pp() << " pp " << (s.pass_entropy() ? "ok" : "FAIL") << ", PPL ratio " << std::setprecision(3) << s.ppl_ratio() << ' '
         << (s.pass_ppl(criteria) ? "ok" : "FAIL") << '\n';
    }
    return os.str();
  }
};

struct AblationOptions {
  double bayesian_weight = 1.0;
  double prior_free_weight = 0.0;
  std::size_t kl_trace_every = 100;
  std::ostream* log = nullptr;
};

/// Both arms per seed with identical configuration apart from beta_elbo. A diverging
/// arm is recorded as failed and the remaining seeds still run.
inline AblationReport ablate(const RunConfig& base, const std::vector<std::uint64_t>& seeds, const Corpus& corpus, const AblationOptions& opts = {}) {
  if (seeds.empty()) throw input_error("ablation needs at least one seed");
  base.validate();
  if (!corpus.has_validation()) throw input_error("ablation needs a corpus with a validation region");
  AblationReport rep;
  rep.config = base;
  const auto val = corpus.validation_batches(base.batch, base.eval_windows);

  auto run_arm = [&](std::uint64_t seed, const std::string& name, double weight) {
    ArmResult arm;
    arm.name = name;
    arm.beta_elbo = weight;
    RunConfig cfg = base;
    cfg.seed = seed;
    cfg.beta_elbo = weight;
    if (!base.output_dir.empty()) cfg.output_dir = (std::filesystem::path(base.output_dir) / ("seed" + std::to_string(seed)) / name).string();
    if (opts.log) *opts.log << "== seed " << seed << ", arm " << name << " (beta_elbo " << weight << ")\n";
    try {
      TrainOptions topt;
      topt.log = opts.log;
      topt.final_evaluation = false;
      auto res = train(cfg, corpus, topt);
      arm.validation = evaluate(res.model, val);
      for (const auto& r : res.records)
        if (opts.kl_trace_every && (r.step % opts.kl_trace_every == 0 || r.step + 1 == cfg.steps)) arm.kl_trace.emplace_back(r.step, r.kl);
      if (!std::isfinite(arm.validation.loss)) throw training_diverged("non-finite validation loss", {});
    } catch (const training_diverged& e) {
      arm.failed = true;
      arm.failure = e.what();
    }
    return arm;
  };

  for (auto seed : seeds) {
    SeedResult s;
    s.seed = seed;
    s.bayesian = run_arm(seed, "bayesian", opts.bayesian_weight);
    s.prior_free = run_arm(seed, "prior_free", opts.prior_free_weight);
    if (s.complete()) {
      s.prior_free.normalised_ppl = 1.0;
      s.bayesian.normalised_ppl = s.ppl_ratio();
    }
    rep.seeds.push_back(std::move(s));
    if (!base.output_dir.empty()) {
      // Rewritten after every seed so an interrupted ablation still leaves a report.
      std::ofstream(std::filesystem::path(base.output_dir) / "ablation_report.json") << rep.to_json().dump(2) << '\n';
      std::ofstream(std::filesystem::path(base.output_dir) / "ablation_report.txt") << rep.table();
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// hard-routing threshold sweep

struct RouteEvalRow {
  double eta = 0.0;
  Evaluation evaluation;
  double c_hard = 0.0;  // sum_i p_i c_i over the realised selection histogram

  nlohmann::ordered_json to_json() const {
    auto j = evaluation.to_json();
    j["eta"] = detail::threshold_to_json(eta);
    j["c_hard"] = c_hard;
    return j;
  }
};

struct RouteEvalReport {
  Evaluation soft;
  std::vector<RouteEvalRow> rows;

  /// Hard-routed fraction never decreases as the threshold rises.
  bool monotone() const {
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].eta >= rows[i - 1].eta && rows[i].evaluation.hard->hard_fraction() < rows[i - 1].evaluation.hard->hard_fraction()) return false;
    return true;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = "route_eval";
    j["soft"] = soft.to_json();
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) j["rows"].push_back(r.to_json());
    j["monotone"] = monotone();
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << "soft routing: validation PPL " << std::fixed << std::setprecision(4) << soft.ppl << ", projected cost " << std::setprecision(2)
       << soft.routing.projected_flop_cost_pct << "%\n";
    os << std::left << std::setw(12) << "eta" << std::setw(12) << "PPL" << std::setw(10) << "hard %" << std::setw(26) << "p (full, linear, local)" << "C_hard\n";
    for (const auto& r : rows) {
      const auto p = r.evaluation.hard->histogram();
      std::ostringstream ps;
      ps << std::fixed << std::setprecision(3) << p[0] << ", " << p[1] << ", " << p[2];
      std::ostringstream eta;
      eta << std::setprecision(4) << r.eta;
      os << std::setw(12) << eta.str() << std::setw(12) << std::setprecision(4) << r.evaluation.ppl << std::setw(10) << std::setprecision(1)
         << 100.0 * r.evaluation.hard->hard_fraction() << std::setw(26) << ps.str() << std::setprecision(4) << r.c_hard << '\n';
    }
    os << "hard fraction monotone in eta: " << (monotone() ? "yes" : "NO") << '\n';
    return os.str();
  }
};

/// `count` thresholds spread evenly across the observed range of U, padded by 10% each side.
inline std::vector<double> default_eta_sweep(const TinyLM& model, const std::vector<TokenBatch>& batches, std::size_t count = 20) {
  NoGradGuard no_grad;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& b : batches) {
    const auto out = model.forward(b, 0.0);
    for (const auto& layer : out.layers)
      for (double u : layer.uncertainty.data()) {
        lo = std::min(lo, u);
        hi = std::max(hi, u);
      }
  }
  const double pad = 0.1 * std::max(hi - lo, 1e-3);
  lo -= pad;
  hi += pad;
  std::vector<double> etas;
  for (std::size_t i = 0; i < count; ++i) etas.push_back(count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1));
  return etas;
}

inline RouteEvalReport route_eval(const TinyLM& model, const std::vector<TokenBatch>& batches, std::vector<double> etas) {
  std::sort(etas.begin(), etas.end());
  RouteEvalReport rep;
  rep.soft = evaluate(model, batches);
  const auto& costs = model.config().costs;
  for (double eta : etas) {
    RouteEvalRow row;
    row.eta = eta;
    row.evaluation = evaluate(model, batches, eta);
    const auto p = row.evaluation.hard->histogram();
    for (std::size_t i = 0; i < kNumExperts; ++i) row.c_hard += p[i] * costs[i];
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace meta_attention
