// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance [--output-dir DIR] [--only N]...
//
// Criterion 6 trains the full desk-scale ablation (3 seeds x 2 arms x 2000
// steps at batch 32) and dominates the runtime; criterion 7 reuses its
// trained Bayesian checkpoint.

#include "meta_attention/harness.hpp"

#include "attention_oracle.hpp"
#include "dirichlet_oracle.hpp"
#include "grad_check.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace meta_attention;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

Tensor random_input(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return kInf;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome selftest_structure() {
  Clock clock;
  const auto rep = selftest(ModelConfig{}, 0, 32);
  const double t = clock.seconds();
  std::string failing;
  for (const auto& r : rep.rows)
    if (!r.pass) failing += " [" + r.metric + " = " + r.value + "]";
  std::string alphas;
  for (const auto& r : rep.rows)
    if (r.metric.rfind("mean ", 0) == 0) alphas += (alphas.empty() ? "" : ", ") + r.value;
  return {rep.all_pass() && t < 10.0,
          std::to_string(rep.rows.size()) + " rows over " + std::to_string(rep.seeds) + " seeds, mean alpha " + alphas + ", " + fmt(t, 2) + " s" +
              (failing.empty() ? "" : "; failing:" + failing)};
}

Outcome dirichlet_oracles() {
  Clock clock;
  Rng rng(2024);
  const std::vector<double> prior{0.01, 0.86, 0.71};
  std::vector<double> shifted = prior;
  for (double& b : shifted) b += std::numbers::ln2;
  const std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs{
      {shifted, prior}, {{0.70, 1.55, 1.40}, prior}, {{2, 3, 5}, {1, 1, 1}}, {{0.5, 0.5, 0.5}, prior}, {{10, 1, 0.3}, prior}, {{1, 1, 1}, {3, 0.2, 1.5}},
  };
  double kl_err = 0.0;
  for (const auto& [q, p] : pairs) kl_err = std::max(kl_err, std::abs(dirichlet_kl(q, p) - testing_support::mc_kl(q, p, 1'000'000, rng)));

  double h_err = 0.0;
  for (const auto& a : std::vector<std::vector<double>>{prior, shifted, {1, 1, 1}, {2, 3, 5}})
    h_err = std::max(h_err, std::abs(dirichlet_entropy(a) - testing_support::mc_entropy(a, 1'000'000, rng)));

  double min_kl = kInf;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> q(3), p(3);
    for (std::size_t j = 0; j < 3; ++j) {
      q[j] = std::exp(rng.uniform(-4.0, 3.0));
      p[j] = std::exp(rng.uniform(-4.0, 3.0));
    }
    min_kl = std::min(min_kl, dirichlet_kl(q, p));
  }
  const double self_kl = std::abs(dirichlet_kl(prior, prior));
  const double log_b = special::log_multivariate_beta(prior);
  const double t = clock.seconds();
  return {kl_err < 0.02 && h_err < 0.01 && min_kl >= 0.0 && self_kl < 1e-12 && std::isfinite(log_b) && t < 60.0,
          "KL vs MC max err " + fmt(kl_err, 3) + " over " + std::to_string(pairs.size()) + " pairs, entropy max err " + fmt(h_err, 3) + ", min KL over 1000 pairs " +
              fmt(min_kl, 3) + ", KL(b,b) " + fmt(self_kl, 3) + ", " + fmt(t, 3) + " s"};
}

Outcome expert_oracles() {
  using testing_support::Kernel;
  using testing_support::reference_attention;
  Rng rng(3);
  double linear_err = 0.0, local_err = 0.0;
  for (auto [b, t, d, h] : std::vector<std::array<std::size_t, 4>>{{2, 16, 8, 2}, {1, 1, 8, 2}, {3, 33, 12, 3}, {1, 64, 16, 4}}) {
    const auto w = AttentionProjections::init(d, rng);
    const auto x = random_input({b, t, d}, rng);
    linear_err = std::max(linear_err, max_abs_diff(linear_attention(x, w, h), reference_attention(x, w, h, Kernel::Linear, t)));
    for (std::size_t window : {std::max<std::size_t>(t - 1, 1), t, t + 5}) local_err = std::max(local_err, max_abs_diff(local_attention(x, w, h, window), full_attention(x, w, h)));
  }

  // Perturbing token s may change outputs at positions >= s only, bit for bit.
  bool causal = true;
  const ModelConfig cfg;
  const std::array<ExpertKind, kNumExperts> kinds{ExpertKind::Full, ExpertKind::Linear, ExpertKind::Local};
  for (std::size_t i = 0; i < kNumExperts; ++i) {
    const ExpertSpec spec{kinds[i], cfg.costs[i], cfg.heads, cfg.window};
    const auto expert = AttentionExpert::init(spec, 32, rng);
    const auto x = random_input({2, 24, 32}, rng);
    const auto base = expert.forward(x);
    for (std::size_t s = 0; s < 24; s += 5) {
      auto y = x.detach();
      for (std::size_t c = 0; c < 32; ++c) y.mutable_data()[y.offset({1, s, c})] += 3.0;
      const auto out = expert.forward(y);
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t c = 0; c < 32; ++c) causal = causal && out.at({1, t, c}) == base.at({1, t, c});
      causal = causal && out.at({1, s, 0}) != base.at({1, s, 0});
    }
  }
  return {linear_err < 1e-8 && local_err < 1e-10 && causal,
          "linear prefix vs quadratic " + fmt(linear_err, 3) + ", local (w >= T-1) vs full " + fmt(local_err, 3) + ", causality " + (causal ? "exact" : "VIOLATED")};
}

Outcome gradient_integrity() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.seq_len = 6;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.window = 2;
  cfg.vocab = 16;
  cfg.controller_hidden = 4;
  Rng rng(4);
  auto model = TinyLM::init(cfg, rng);
  // Move every parameter off its structured init so no path is trivially zero.
  for (auto& p : model.parameters())
    for (auto& v : p.tensor.mutable_data()) v += 0.3 * rng.normal();
  TokenBatch batch{2, 7, {}};
  for (int i = 0; i < 14; ++i) batch.tokens.push_back(static_cast<int>(rng.below(16)));
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  const auto rep = testing_support::check_gradients(
      [&] {
        const auto out = model.forward(batch, 1.0);
        return out.loss + mean(out.layers[0].uncertainty) * 0.5;
      },
      inputs, names, 1e-5, 1e-10);
  return {rep.max_rel_err < 1e-4 && rep.checked == model.parameters().scalar_count(),
          std::to_string(rep.checked) + " scalars checked, max abs err " + fmt(rep.max_abs_err, 3) + ", max rel err " + fmt(rep.max_rel_err, 3) +
              (rep.worst.empty() ? std::string() : " at " + rep.worst)};
}

Outcome flop_table() {
  const std::vector<double> costs{1.0, 0.15, 0.30};
  const auto rows = scenario_table(builtin_scenarios(), costs);
  const auto find = [&](const std::string& name) -> const ScenarioRow* {
    for (const auto& r : rows)
      if (r.scenario.name == name) return &r;
    return nullptr;
  };
  const auto* uniform = find("uniform");
  const auto* conservative = find("conservative");
  const auto* optimistic = find("optimistic");
  if (!uniform || !conservative || !optimistic) return {false, "built-in scenarios missing"};
  const bool values = fixed(uniform->flop_ratio, 4) == "0.4833" && fixed(conservative->flop_ratio, 4) == "0.6125";
  // The printed value travels with the formula value so a report can show both.
  const bool surfaced = optimistic->scenario.printed_ratio && fixed(optimistic->flop_ratio, 3) == "0.365" && *optimistic->scenario.printed_ratio == 0.362;
  return {values && surfaced, "uniform " + fixed(uniform->flop_ratio, 4) + ", conservative " + fixed(conservative->flop_ratio, 4) + ", optimistic " +
                                  fixed(optimistic->flop_ratio, 4) + " (published " + fmt(optimistic->scenario.printed_ratio.value_or(NAN), 3) + ")"};
}

Outcome ablation(const fs::path& dir) {
  RunConfig cfg;
  cfg.output_dir = (dir / "ablation").string();
  cfg.log_every = 250;
  const auto corpus = Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  AblationOptions opts;
  opts.log = &std::cerr;
  Clock clock;
  const auto rep = ablate(cfg, {0, 1, 2}, corpus, opts);
  const double minutes = clock.seconds() / 60.0;
  std::cerr << rep.table();
  bool pass = rep.seeds.size() == 3;
  std::ostringstream detail;
  for (const auto& s : rep.seeds) {
    pass = pass && s.pass_cost(rep.criteria) && s.pass_entropy() && s.pass_ppl(rep.criteria);
    detail << "seed " << s.seed << ": ";
    if (!s.complete()) {
      detail << "failed (" << s.bayesian.failure << s.prior_free.failure << "); ";
      continue;
    }
    detail << "cost gap " << fixed(s.cost_gap_pp(), 1) << " pp, entropy gap " << fixed(s.entropy_gap_pp(), 1) << " pp, PPL ratio " << fixed(s.ppl_ratio(), 3) << "; ";
  }
  detail << fixed(minutes / static_cast<double>(rep.seeds.size()), 1) << " min per seed pair";
  return {pass, detail.str()};
}

Outcome hard_gate(const fs::path& dir) {
  RunConfig cfg;
  const auto corpus = Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  const fs::path ck_path = dir / "ablation" / "seed0" / "bayesian" / "checkpoint.bin";
  TinyLM model = [&] {
    if (fs::exists(ck_path)) {
      const auto ck = load_checkpoint(ck_path.string());
      Rng rng(0);
      auto m = TinyLM::init(ck.config, rng);
      restore_checkpoint(ck, m);
      return m;
    }
    // Without the ablation, a short run stands in for the trained checkpoint.
    auto short_cfg = cfg;
    short_cfg.steps = 200;
    short_cfg.batch = 8;
    TrainOptions opts;
    opts.write_files = false;
    opts.final_evaluation = false;
    return train(short_cfg, corpus, opts).model;
  }();
  const auto val = corpus.validation_batches(cfg.batch, 64);

  // Closed gate: the hard path is the soft path, bit for bit.
  bool exact = true;
  {
    NoGradGuard no_grad;
    for (const auto& b : val) {
      HardRoutingStats stats;
      const auto hard = model.forward_hard(b, -kInf, stats);
      const auto soft = model.forward(b, 0.0);
      exact = exact && max_abs_diff(hard.logits, soft.logits) == 0.0 && stats.hard_fraction() == 0.0;
    }
  }
  auto etas = default_eta_sweep(model, val, 20);
  etas.push_back(-kInf);
  etas.push_back(kInf);
  const auto rep = route_eval(model, val, etas);
  const bool soft_ppl = rep.rows.front().evaluation.ppl == rep.soft.ppl;
  const double open = rep.rows.back().evaluation.hard->hard_fraction();
  return {exact && soft_ppl && open == 1.0 && rep.monotone() && rep.rows.size() == 22,
          std::string(fs::exists(ck_path) ? "ablation checkpoint" : "short-run checkpoint") + ": eta=-inf " + (exact && soft_ppl ? "exact" : "MISMATCH") +
              ", eta=+inf hard fraction " + fmt(open) + ", 20-point sweep " + (rep.monotone() ? "monotone" : "NOT monotone") + " (" +
              fmt(rep.rows[1].evaluation.hard->hard_fraction(), 3) + " .. " + fmt(rep.rows[20].evaluation.hard->hard_fraction(), 3) + ")"};
}

Outcome determinism(const fs::path& dir) {
  RunConfig cfg;
  cfg.batch = 8;
  cfg.steps = 20;
  cfg.checkpoint_every = 10;
  cfg.eval_windows = 16;
  cfg.output_dir = (dir / "determinism").string();
  const auto corpus = Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  train(cfg, corpus);
  const fs::path out(cfg.output_dir);
  const auto metrics = read_file(out / "metrics.jsonl");
  const auto checkpoint = read_file(out / "checkpoint.bin");
  train(cfg, corpus);
  const bool same_metrics = !metrics.empty() && read_file(out / "metrics.jsonl") == metrics;
  const bool same_checkpoint = !checkpoint.empty() && read_file(out / "checkpoint.bin") == checkpoint;
  return {same_metrics && same_checkpoint, std::string("metrics stream ") + (same_metrics ? "identical" : "DIFFERS") + " (" + std::to_string(metrics.size()) +
                                               " bytes), checkpoint " + (same_checkpoint ? "identical" : "DIFFERS") + " (" + std::to_string(checkpoint.size()) +
                                               " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  fs::path dir = "build/acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--output-dir" && i + 1 < argc) dir = argv[++i];
    else if (arg == "--only" && i + 1 < argc) only.insert(std::stoi(argv[++i]));
    else {
      std::cerr << "usage: acceptance [--output-dir DIR] [--only N]...\n";
      return 2;
    }
  }
  fs::create_directories(dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"self-test structure", selftest_structure},
      {"Dirichlet closed forms vs Monte Carlo", dirichlet_oracles},
      {"expert oracles and causality", expert_oracles},
      {"whole-model gradients vs finite differences", gradient_integrity},
      {"hard-routing FLOP scenario table", flop_table},
      {"desk-scale Bayesian vs prior-free ablation", [&] { return ablation(dir); }},
      {"uncertainty-gated hard routing", [&] { return hard_gate(dir); }},
      {"determinism", [&] { return determinism(dir); }},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << n << "  " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
