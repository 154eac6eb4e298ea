// SPDX-License-Identifier: Apache-2.0
//
// Routing metrics and hard-routing FLOP projections.
//
// projected cost (%)    100 * mean_t sum_i alpha_ti c_i
// routing entropy (%)   100 * mean_t H(alpha_t) / ln K, with 0 ln 0 = 0
// hard-routing ratio    C_hard = sum_i p_i c_i for a selection histogram p
//
// The entropy metric is the per-token Shannon entropy of the routing weights
// normalised to [0, 100]; it is not the Dirichlet differential entropy U.

#pragma once

#include "meta_attention/errors.hpp"
#include "meta_attention/experts.hpp"
#include "meta_attention/tensor.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

namespace meta_attention {

namespace detail {
inline void check_rows(std::span<const double> alpha, std::size_t k, double tol, const char* who) {
  if (k == 0 || alpha.size() % k != 0) throw dimension_error(std::string(who) + ": alpha length is not a multiple of K");
  for (std::size_t r = 0; r < alpha.size() / k; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += alpha[r * k + i];
    if (std::abs(s - 1.0) > tol) throw contract_error(std::string(who) + ": routing row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}
}  // namespace detail

/// 100 * mean over rows of sum_i alpha_i c_i. Rows must sum to 1 within 1e-6.
inline double projected_cost(std::span<const double> alpha, std::span<const double> costs) {
  const std::size_t k = costs.size();
  detail::check_rows(alpha, k, 1e-6, "projected_cost");
  const std::size_t rows = alpha.size() / k;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < k; ++i) total += alpha[r * k + i] * costs[i];
  return 100.0 * total / static_cast<double>(rows);
}
inline double projected_cost(const Tensor& alpha, std::span<const double> costs) { return projected_cost(alpha.data(), costs); }

inline double routing_entropy(std::span<const double> alpha, std::size_t k) {
  if (k < 2 || alpha.size() % k != 0) throw dimension_error("routing_entropy: alpha length is not a multiple of K >= 2");
  const std::size_t rows = alpha.size() / k;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < k; ++i) {
      const double a = alpha[r * k + i];
      if (a > 0.0) total -= a * std::log(a);
    }
  return 100.0 * total / (static_cast<double>(rows) * std::log(static_cast<double>(k)));
}
inline double routing_entropy(const Tensor& alpha) { return routing_entropy(alpha.data(), alpha.shape().back()); }

struct RoutingMetrics {
  double projected_flop_cost_pct = 0.0;
  double routing_entropy_pct = 0.0;
  std::array<double, kNumExperts> mean_alpha{};
  double mean_uncertainty = 0.0;
};

/// Accumulates routing statistics over layers and batches with uniform token weight.
class RoutingAccumulator {
 public:
  explicit RoutingAccumulator(std::span<const double> costs) : costs_(costs.begin(), costs.end()) {}

  void add(const Tensor& alpha, const Tensor& uncertainty) {
    const auto a = alpha.data();
    const std::size_t rows = a.size() / kNumExperts;
    cost_sum_ += projected_cost(a, costs_) * static_cast<double>(rows);
    entropy_sum_ += routing_entropy(a, kNumExperts) * static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < kNumExperts; ++i) alpha_sum_[i] += a[r * kNumExperts + i];
    for (double u : uncertainty.data()) u_sum_ += u;
    rows_ += rows;
  }

  RoutingMetrics result() const {
    RoutingMetrics m;
    if (rows_ == 0) return m;
    const double n = static_cast<double>(rows_);
    m.projected_flop_cost_pct = cost_sum_ / n;
    m.routing_entropy_pct = entropy_sum_ / n;
    for (std::size_t i = 0; i < kNumExperts; ++i) m.mean_alpha[i] = alpha_sum_[i] / n;
    m.mean_uncertainty = u_sum_ / n;
    return m;
  }

 private:
  std::vector<double> costs_;
  double cost_sum_ = 0.0, entropy_sum_ = 0.0, u_sum_ = 0.0;
  std::array<double, kNumExperts> alpha_sum_{};
  std::size_t rows_ = 0;
};

// ---------------------------------------------------------------------------
// hard-routing scenarios

struct HardRoutingScenario {
  std::string name;
  std::vector<double> p;
  std::optional<double> printed_ratio;  // value printed in the reference table, if any

  double flop_ratio(std::span<const double> costs) const {
    if (p.size() != costs.size()) throw contract_error("scenario '" + name + "': expected " + std::to_string(costs.size()) + " probabilities");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!(p[i] >= 0.0)) throw contract_error("scenario '" + name + "': negative probability");
      s += p[i];
    }
    if (std::abs(s - 1.0) > 1e-9) throw contract_error("scenario '" + name + "': probabilities sum to " + std::to_string(s));
    // Same arithmetic as the soft metric, so a constant routing of p agrees exactly.
    return projected_cost(p, costs) / 100.0;
  }
};

struct ScenarioRow {
  HardRoutingScenario scenario;
  double flop_ratio = 0.0;
  double reduction = 0.0;  // 1 - ratio
};

inline std::vector<ScenarioRow> scenario_table(const std::vector<HardRoutingScenario>& scenarios, std::span<const double> costs) {
  std::vector<ScenarioRow> rows;
  for (const auto& s : scenarios) {
    const double r = s.flop_ratio(costs);
    rows.push_back({s, r, 1.0 - r});
  }
  return rows;
}

/// The four published scenarios with the ratios printed alongside them.
inline std::vector<HardRoutingScenario> builtin_scenarios() {
  return {
      {"uniform", {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.483},
      {"conservative", {0.50, 0.25, 0.25}, 0.613},
      {"phase1-empirical-est", {0.25, 0.50, 0.25}, 0.36},
      {"optimistic", {0.20, 0.50, 0.30}, 0.362},
  };
}

/// Parses "name p1 p2 p3" lines; '#' starts a comment. Errors carry the line number.
inline std::vector<HardRoutingScenario> parse_scenarios(std::istream& in, std::size_t k = kNumExperts) {
  std::vector<HardRoutingScenario> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name)) continue;
    HardRoutingScenario s{name, {}, std::nullopt};
    double v;
    while (ls >> v) s.p.push_back(v);
    if (!ls.eof()) throw input_error("scenario file line " + std::to_string(lineno) + ": malformed number");
    if (s.p.size() != k) throw input_error("scenario file line " + std::to_string(lineno) + ": expected " + std::to_string(k) + " probabilities, got " + std::to_string(s.p.size()));
    double total = 0.0;
    for (double x : s.p) {
      if (x < 0.0) throw input_error("scenario file line " + std::to_string(lineno) + ": negative probability");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-9) throw input_error("scenario file line " + std::to_string(lineno) + ": probabilities sum to " + std::to_string(total));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// metric records

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double ppl = 0.0;
  double kl = 0.0;
  double routing_entropy_pct = 0.0;
  double projected_cost_pct = 0.0;
  std::array<double, kNumExperts> mean_alpha{};
  std::optional<double> hard_fraction;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = loss;
    j["ppl"] = ppl;
    j["kl"] = kl;
    j["routing_entropy_pct"] = routing_entropy_pct;
    j["projected_cost_pct"] = projected_cost_pct;
    j["mean_alpha"] = mean_alpha;
    if (hard_fraction) j["hard_fraction"] = *hard_fraction;
    return j;
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.loss = j.at("loss").get<double>();
    r.ppl = j.at("ppl").get<double>();
    r.kl = j.at("kl").get<double>();
    r.routing_entropy_pct = j.at("routing_entropy_pct").get<double>();
    r.projected_cost_pct = j.at("projected_cost_pct").get<double>();
    r.mean_alpha = j.at("mean_alpha").get<std::array<double, kNumExperts>>();
    if (j.contains("hard_fraction")) r.hard_fraction = j.at("hard_fraction").get<double>();
    return r;
  }
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{"step", "loss", "ppl", "kl", "routing_entropy_pct", "projected_cost_pct",
                                             "mean_alpha_0", "mean_alpha_1", "mean_alpha_2", "hard_fraction"};
  return cols;
}

/// Round-trip decimal rendering shared by the JSON and CSV outputs.
inline std::string format_number(double v) { return nlohmann::json(v).dump(); }

inline std::string to_csv_row(const MetricsRecord& r) {
  std::string s = std::to_string(r.step) + "," + format_number(r.loss) + "," + format_number(r.ppl) + "," + format_number(r.kl) + "," +
                  format_number(r.routing_entropy_pct) + "," + format_number(r.projected_cost_pct);
  for (double a : r.mean_alpha) s += "," + format_number(a);
  s += ",";
  if (r.hard_fraction) s += format_number(*r.hard_fraction);
  return s;
}

/// Append-only JSON-lines stream, flushed per record. The first line is a
/// header record carrying the schema version and run configuration.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const nlohmann::ordered_json& header, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw input_error("cannot open metrics file " + path);
    if (!append) {
      out_ << header.dump() << '\n';
      out_.flush();
    }
  }

  void write(const MetricsRecord& r) {
    out_ << r.to_json().dump() << '\n';
    out_.flush();
    records_.push_back(r);
  }

  const std::vector<MetricsRecord>& records() const { return records_; }

 private:
  std::ofstream out_;
  std::vector<MetricsRecord> records_;
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw input_error("cannot open " + path);
  const auto& cols = metrics_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : records) out << to_csv_row(r) << '\n';
}

}  // namespace meta_attention
