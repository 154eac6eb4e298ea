// SPDX-License-Identifier: Apache-2.0
//
// meta_attention: self-test, corpus ingestion, training, the Bayesian vs
// prior-free ablation, hard-routing FLOP scenarios and threshold sweeps.
//
// Exit codes: 0 success, 1 a check or acceptance criterion failed, 2 bad input.

#include "meta_attention.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace ma = meta_attention;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitInput = 2;

// Every RunConfig key doubles as a --flag (underscores become dashes). Values are
// collected as text and laid over the config file, so flags always win.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file (keys as in the RunConfig dump)");
    static const std::vector<std::pair<std::string, std::string>> keys{
        {"d_model", "model width D"},
        {"seq_len", "context length T"},
        {"layers", "transformer blocks"},
        {"heads", "attention heads"},
        {"window", "local-attention window w"},
        {"vocab", "vocabulary size (<= 256 bytes)"},
        {"controller_hidden", "controller MLP width"},
        {"ffn_mult", "FFN width multiplier"},
        {"beta0", "prior scale beta0"},
        {"epsilon", "prior floor epsilon"},
        {"costs", "expert costs, e.g. 1.0,0.15,0.30"},
        {"batch", "batch size"},
        {"steps", "optimisation steps"},
        {"beta_elbo", "KL weight"},
        {"lr", "Adam learning rate"},
        {"seed", "random seed"},
        {"corpus", "training text file"},
        {"output_dir", "directory for metrics, checkpoints and reports"},
        {"routing", "soft | hard (hard applies at evaluation)"},
        {"routing_weights", "training merge weights: mean | sample (Dirichlet draws)"},
        {"eta", "hard-routing threshold on U (number, inf, -inf)"},
        {"eta_start", "annealed threshold start"},
        {"eta_anneal_steps", "steps over which eta anneals from eta_start"},
        {"checkpoint_every", "steps between checkpoints"},
        {"eval_windows", "validation windows (0 = all)"},
        {"log_every", "steps between progress lines"},
    };
    for (const auto& [key, help] : keys) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option_function<std::string>(flag, [this, key = key](const std::string& v) { values[key] = v; }, help);
    }
  }

  ma::RunConfig resolve() const {
    ma::RunConfig cfg;
    if (!config_path.empty()) cfg = ma::RunConfig::load(config_path);
    nlohmann::json overlay = nlohmann::json::object();
    for (const auto& [key, text] : values) {
      if (key == "costs") {
        nlohmann::json arr = nlohmann::json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) arr.push_back(parse_number(key, item));
        overlay[key] = arr;
      } else if (key == "corpus" || key == "output_dir" || key == "routing" || key == "routing_weights") {
        overlay[key] = text;
      } else if (key == "eta" || key == "eta_start") {
        overlay[key] = (text == "inf" || text == "+inf" || text == "-inf") ? nlohmann::json(text) : nlohmann::json(parse_number(key, text));
      } else {
        overlay[key] = nlohmann::json::parse(text, nullptr, false);
        if (overlay[key].is_discarded() || !overlay[key].is_number()) throw ma::input_error("--" + key + ": expected a number, got \"" + text + "\"");
      }
    }
    cfg.merge_json(overlay);
    return cfg;
  }

  static double parse_number(const std::string& key, const std::string& text) {
    try {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    } catch (const std::exception&) {
      throw ma::input_error("--" + key + ": expected a number, got \"" + text + "\"");
    }
  }
};

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw ma::input_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ma::input_error("--seeds: bad seed \"" + item + "\"");
    }
  }
  if (seeds.empty()) throw ma::input_error("--seeds: need at least one seed");
  return seeds;
}

// ---------------------------------------------------------------------------

int run_selftest(const ConfigFlags& flags, std::size_t seeds, const std::string& json_path) {
  ma::RunConfig cfg = flags.resolve();
  cfg.validate();
  const auto rep = ma::selftest(cfg.model, cfg.seed, seeds);
  std::cout << "forward-pass self-test: B=2, T=" << cfg.model.seq_len << ", D=" << cfg.model.d_model << ", seeds " << cfg.seed << ".."
            << cfg.seed + seeds - 1 << "\n\n"
            << rep.table();
  nlohmann::ordered_json j;
  j["schema_version"] = ma::kReportSchemaVersion;
  j["kind"] = "selftest";
  j["config"] = cfg.to_json();
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) j["rows"].push_back({{"metric", r.metric}, {"value", r.value}, {"expected", r.expected}, {"pass", r.pass}});
  j["prior_kl_per_seed"] = rep.prior_kl;
  j["all_pass"] = rep.all_pass();
  write_json(json_path, j);
  if (!rep.all_pass()) {
    for (const auto& r : rep.rows)
      if (!r.pass) std::cout << "FAILED: " << r.metric << '\n';
    return kExitFailed;
  }
  std::cout << "\nall rows pass\n";
  return kExitOk;
}

int run_ingest(const ConfigFlags& flags) {
  ma::RunConfig cfg = flags.resolve();
  cfg.validate();
  const auto corpus = ma::Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  ma::Rng rng(cfg.seed);
  const auto first = corpus.sample_train(cfg.batch, rng);
  std::uint64_t digest = 1469598103934665603ull;  // FNV-1a over the first batch
  for (int t : first.tokens) digest = (digest ^ static_cast<std::uint64_t>(t)) * 1099511628211ull;
  std::cout << "corpus            " << corpus.source() << "\n"
            << "bytes             " << corpus.size() << "\n"
            << "train region      " << corpus.train_size() << " bytes\n"
            << "validation region " << corpus.validation_size() << " bytes (" << corpus.validation_size() / corpus.window() << " windows of "
            << corpus.window() << ")\n"
            << "first batch       " << first.batch << " x " << first.length << ", digest " << std::hex << std::setw(16) << std::setfill('0') << digest
            << std::dec << std::setfill(' ') << "\n";
  std::string preview;
  for (std::size_t i = 0; i < first.length; ++i) {
    const int c = first.tokens[i];
    preview += (c >= 32 && c < 127) ? static_cast<char>(c) : '.';
  }
  std::cout << "first window      \"" << preview << "\"\n";
  return kExitOk;
}

int run_train(const ConfigFlags& flags, const std::string& resume) {
  ma::RunConfig cfg = flags.resolve();
  if (cfg.output_dir.empty()) cfg.output_dir = "runs/train-seed" + std::to_string(cfg.seed);
  cfg.validate();
  const auto corpus = ma::Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  ma::TrainOptions opts;
  opts.resume_from = resume;
  opts.log = &std::cout;
  try {
    const auto res = ma::train(cfg, corpus, opts);
    if (res.validation)
      std::cout << "validation: PPL " << res.validation->ppl << ", projected cost " << res.validation->routing.projected_flop_cost_pct << "%, routing entropy "
                << res.validation->routing.routing_entropy_pct << "%\n";
    if (res.validation_hard)
      std::cout << "validation (hard routing): PPL " << res.validation_hard->ppl << ", hard fraction " << res.validation_hard->hard->hard_fraction() << '\n';
    std::cout << "wrote " << (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string() << '\n';
  } catch (const ma::training_diverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n' << e.diagnostics().dump(2) << '\n';
    return kExitFailed;
  }
  return kExitOk;
}

int run_ablate(const ConfigFlags& flags, const std::string& seeds_text) {
  ma::RunConfig cfg = flags.resolve();
  if (cfg.output_dir.empty()) cfg.output_dir = "runs/ablation";
  cfg.validate();
  const auto corpus = ma::Corpus::load(cfg.corpus, cfg.model.seq_len + 1);
  ma::AblationOptions opts;
  opts.log = &std::cout;
  const auto rep = ma::ablate(cfg, parse_seeds(seeds_text), corpus, opts);
  std::cout << '\n' << rep.table();
  std::cout << "report: " << (std::filesystem::path(cfg.output_dir) / "ablation_report.json").string() << '\n';
  return rep.all_pass() ? kExitOk : kExitFailed;
}

int run_flops(const ConfigFlags& flags, const std::string& scenario_path, bool builtin, const std::string& json_path) {
  const ma::RunConfig cfg = flags.resolve();
  std::vector<ma::HardRoutingScenario> scenarios;
  if (builtin || scenario_path.empty()) scenarios = ma::builtin_scenarios();
  if (!scenario_path.empty()) {
    std::ifstream in(scenario_path);
    if (!in) throw ma::input_error("cannot open scenario file " + scenario_path);
    auto extra = ma::parse_scenarios(in);
    scenarios.insert(scenarios.end(), extra.begin(), extra.end());
  }
  const auto rows = ma::scenario_table(scenarios, cfg.model.costs);
  std::cout << "costs c = [" << cfg.model.costs[0] << ", " << cfg.model.costs[1] << ", " << cfg.model.costs[2] << "]\n\n";
  std::cout << std::left << std::setw(24) << "scenario" << std::setw(22) << "p" << std::setw(10) << "sum p*c" << std::setw(12) << "reduction"
            << "published\n";
  nlohmann::ordered_json j;
  j["schema_version"] = ma::kReportSchemaVersion;
  j["kind"] = "flops";
  j["costs"] = cfg.model.costs;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    std::ostringstream p, published;
    p << std::fixed << std::setprecision(3);
    for (std::size_t i = 0; i < r.scenario.p.size(); ++i) p << (i ? ", " : "") << r.scenario.p[i];
    if (r.scenario.printed_ratio) {
      published << std::fixed << std::setprecision(3) << *r.scenario.printed_ratio;
      // Published ratios carry three decimals; anything beyond half a unit in the last place disagrees.
      if (std::abs(*r.scenario.printed_ratio - r.flop_ratio) > 5e-4 + 1e-12) published << "  (differs from the formula)";
    }
    std::ostringstream reduction;
    reduction << std::fixed << std::setprecision(2) << -100.0 * r.reduction << '%';
    std::cout << std::setw(24) << r.scenario.name << std::setw(22) << p.str() << std::fixed << std::setprecision(4) << std::setw(10) << r.flop_ratio
              << std::setw(12) << reduction.str() << published.str() << '\n';
    nlohmann::ordered_json e{{"name", r.scenario.name}, {"p", r.scenario.p}, {"flop_ratio", r.flop_ratio}, {"reduction", r.reduction}};
    if (r.scenario.printed_ratio) e["published_ratio"] = *r.scenario.printed_ratio;
    j["rows"].push_back(e);
  }
  write_json(json_path, j);
  return kExitOk;
}

int run_route_eval(const ConfigFlags& flags, const std::string& checkpoint, const std::string& etas_text, std::size_t count, const std::string& json_path) {
  const ma::RunConfig cfg = flags.resolve();
  const auto ck = ma::load_checkpoint(checkpoint);
  ma::Rng rng(0);
  auto model = ma::TinyLM::init(ck.config, rng);
  ma::restore_checkpoint(ck, model);
  const auto corpus = ma::Corpus::load(cfg.corpus, ck.config.seq_len + 1);
  if (!corpus.has_validation()) throw ma::input_error("corpus " + cfg.corpus + " has no validation region");
  const auto val = corpus.validation_batches(cfg.batch, cfg.eval_windows);

  std::vector<double> etas;
  if (!etas_text.empty()) {
    std::stringstream ss(etas_text);
    std::string item;
    while (std::getline(ss, item, ',')) etas.push_back(ConfigFlags::parse_number("etas", item));
  } else {
    etas = ma::default_eta_sweep(model, val, count);
  }
  const auto rep = ma::route_eval(model, val, etas);
  std::cout << rep.table();
  auto j = rep.to_json();
  j["checkpoint"] = checkpoint;
  j["config"] = cfg.to_json();
  write_json(json_path, j);
  return rep.monotone() ? kExitOk : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  meta_attention::tune_allocator();
  CLI::App app{"Bayesian meta-attention: per-token Dirichlet routing over full, linear and local attention experts"};
  app.require_subcommand(1);

  ConfigFlags selftest_flags, ingest_flags, train_flags, ablate_flags, flops_flags, route_flags;
  std::size_t selftest_seeds = 32, route_count = 20;
  std::string selftest_json, resume, seeds_text = "0,1,2", scenario_path, flops_json, checkpoint, etas_text, route_json;
  bool builtin = false;

  auto* selftest = app.add_subcommand("selftest", "forward-pass correctness table on random weights");
  selftest_flags.attach(selftest);
  selftest->add_option("--seeds", selftest_seeds, "number of consecutive seeds averaged for the routing rows")->check(CLI::PositiveNumber);
  selftest->add_option("--json", selftest_json, "also write the table as JSON");

  auto* ingest = app.add_subcommand("ingest", "load a corpus and report its split and first batch");
  ingest_flags.attach(ingest);

  auto* train = app.add_subcommand("train", "train one model; writes metrics.jsonl, metrics.csv, checkpoint.bin, summary.json");
  train_flags.attach(train);
  train->add_option("--resume", resume, "continue from a checkpoint written by an identical configuration");

  auto* ablate = app.add_subcommand("ablate", "Bayesian (beta_elbo=1) vs prior-free (beta_elbo=0) for each seed");
  ablate_flags.attach(ablate);
  ablate->add_option("--seeds", seeds_text, "comma-separated seeds");

  auto* flops = app.add_subcommand("flops", "projected FLOP ratio sum_i p_i c_i for hard-routing scenarios");
  flops_flags.attach(flops);
  flops->add_option("--scenarios", scenario_path, "file of 'name p_full p_linear p_local' lines");
  flops->add_flag("--builtin", builtin, "include the four built-in scenarios (default when no file is given)");
  flops->add_option("--json", flops_json, "also write the table as JSON");

  auto* route = app.add_subcommand("route-eval", "validation PPL and hard-routing statistics across a threshold sweep");
  route_flags.attach(route);
  route->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  route->add_option("--etas", etas_text, "comma-separated thresholds (default: even sweep over the observed U range)");
  route->add_option("--count", route_count, "sweep size when --etas is not given")->check(CLI::PositiveNumber);
  route->add_option("--json", route_json, "also write the report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*selftest) return run_selftest(selftest_flags, selftest_seeds, selftest_json);
    if (*ingest) return run_ingest(ingest_flags);
    if (*train) return run_train(train_flags, resume);
    if (*ablate) return run_ablate(ablate_flags, seeds_text);
    if (*flops) return run_flops(flops_flags, scenario_path, builtin, flops_json);
    if (*route) return run_route_eval(route_flags, checkpoint, etas_text, route_count, route_json);
  } catch (const ma::degenerate_prior_error& e) {
    std::cerr << "error: degenerate prior: " << e.what() << '\n';
    return kExitInput;
  } catch (const ma::input_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return kExitFailed;
  }
  return kExitOk;
}
