#pragma once

// Per-client metrics, the three aggregation modes, improvement ratios over a
// baseline run and the Overall score.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/types.hpp"

namespace hetfl {

// Accuracy thresholds predicted probabilities at 0.5 (exactly 0.5 counts as
// class 1). Pearson is undefined, and reported as an error, when either side
// has zero variance.
inline double compute_metric(std::span<const double> predictions, std::span<const double> targets, MetricKind kind) {
  if (predictions.size() != targets.size()) throw Error("compute_metric: length mismatch");
  const std::size_t n = predictions.size();
  if (n == 0) throw Error("compute_metric: no predictions");
  switch (kind) {
    case MetricKind::Accuracy: {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double label = predictions[i] >= 0.5 ? 1.0 : 0.0;
        hits += label == targets[i] ? 1 : 0;
      }
      return static_cast<double>(hits) / static_cast<double>(n);
    }
    case MetricKind::Mse: {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += (predictions[i] - targets[i]) * (predictions[i] - targets[i]);
      return s / static_cast<double>(n);
    }
    case MetricKind::PearsonCorrelation: {
      if (n < 2) throw Error("compute_metric: Pearson needs at least 2 pairs");
      double mp = 0, mt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mp += predictions[i];
        mt += targets[i];
      }
      mp /= static_cast<double>(n);
      mt /= static_cast<double>(n);
      double sxy = 0, sxx = 0, syy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dp = predictions[i] - mp, dt = targets[i] - mt;
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
      }
      if (sxx == 0.0 || syy == 0.0) throw Error("compute_metric: Pearson undefined for zero variance");
      return sxy / std::sqrt(sxx * syy);
    }
  }
  throw Error("compute_metric: unknown metric");
}

struct EqualWeight {};
struct DataSizeWeighted {
  std::vector<double> sizes;
};
struct CustomWeights {
  std::vector<double> weights;  // nonnegative, normalized internally
};
using AggregationMode = std::variant<EqualWeight, DataSizeWeighted, CustomWeights>;

inline double aggregate(std::span<const double> values, const AggregationMode& mode) {
  if (values.empty()) throw Error("aggregate: no values");
  std::vector<double> w;
  if (std::holds_alternative<EqualWeight>(mode)) {
    w.assign(values.size(), 1.0);
  } else if (const auto* ds = std::get_if<DataSizeWeighted>(&mode)) {
    w = ds->sizes;
    for (double s : w) {
      if (!(s > 0)) throw Error("aggregate: data sizes must be positive");
    }
  } else {
    w = std::get<CustomWeights>(mode).weights;
    for (double s : w) {
      if (!(s >= 0)) throw Error("aggregate: custom weights must be nonnegative");
    }
  }
  if (w.size() != values.size()) throw Error("aggregate: weight count does not match value count");
  double total = 0;
  for (double x : w) total += x;
  if (!(total > 0)) throw Error("aggregate: weights sum to zero");
  double acc = 0;
  for (std::size_t i = 0; i < values.size(); ++i) acc += (w[i] / total) * values[i];
  return acc;
}

// I * (m - b) / b * 100, with I the metric direction (+1 higher-better,
// -1 lower-better), so a positive ratio always means an improvement.
inline double improvement_ratio(double m, double b, int indicator) {
  if (b == 0.0) throw Error("improvement_ratio: zero baseline");
  if (indicator != 1 && indicator != -1) throw Error("improvement_ratio: indicator must be +1 or -1");
  return static_cast<double>(indicator) * (m - b) / b * 100.0;
}

// Equal-weight mean of per-client ratios, each already carrying its own
// client's indicator.
inline double overall_improvement(std::span<const double> ratios) {
  if (ratios.empty()) throw Error("overall_improvement: no clients");
  double s = 0;
  for (double r : ratios) s += r;
  return s / static_cast<double>(ratios.size());
}

struct ClientResult {
  int client = 0;
  MetricKind metric = MetricKind::Accuracy;
  double value = 0.0;
  std::optional<double> baseline;
  std::size_t sample_count = 0;
};

struct EvalReport {
  std::vector<ClientResult> clients;               // ascending id
  std::vector<std::optional<double>> improvement;  // percent, per client
  double equal = 0.0;
  double data_weighted = 0.0;
  std::optional<double> custom;
  std::optional<double> overall_improvement;
  std::string baseline_id;
};

// Aggregates are over the raw per-client metric values; Overall is over the
// improvement ratios and exists only when every client has a baseline.
inline EvalReport build_report(std::vector<ClientResult> run, const std::vector<ClientResult>* baseline,
                               const std::optional<std::vector<double>>& custom_weights = std::nullopt,
                               std::string baseline_id = {}) {
  if (run.empty()) throw Error("build_report: empty run");
  std::sort(run.begin(), run.end(), [](const auto& a, const auto& b) { return a.client < b.client; });
  for (std::size_t i = 1; i < run.size(); ++i) {
    if (run[i].client == run[i - 1].client) throw Error("build_report: duplicate client " + std::to_string(run[i].client));
  }
  if (baseline) {
    std::map<int, const ClientResult*> by_id;
    for (const auto& b : *baseline) by_id[b.client] = &b;
    if (by_id.size() != run.size()) throw Error("build_report: baseline covers a different client set");
    for (auto& r : run) {
      auto it = by_id.find(r.client);
      if (it == by_id.end()) throw Error("build_report: client " + std::to_string(r.client) + " missing from baseline");
      if (it->second->metric != r.metric) throw Error("build_report: metric kinds differ for client " + std::to_string(r.client));
      r.baseline = it->second->value;
    }
  }
  EvalReport rep;
  rep.baseline_id = std::move(baseline_id);
  std::vector<double> values, sizes, ratios;
  bool all_baselined = true;
  for (const auto& r : run) {
    values.push_back(r.value);
    sizes.push_back(static_cast<double>(r.sample_count));
    if (r.baseline) {
      const double ratio = improvement_ratio(r.value, *r.baseline, direction(r.metric));
      rep.improvement.emplace_back(ratio);
      ratios.push_back(ratio);
    } else {
      rep.improvement.emplace_back(std::nullopt);
      all_baselined = false;
    }
  }
  rep.equal = aggregate(values, EqualWeight{});
  rep.data_weighted = aggregate(values, DataSizeWeighted{sizes});
  if (custom_weights) rep.custom = aggregate(values, CustomWeights{*custom_weights});
  if (all_baselined) rep.overall_improvement = overall_improvement(ratios);
  rep.clients = std::move(run);
  return rep;
}

// ---- text forms -------------------------------------------------------------

// Shortest round-trip decimal form.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline constexpr const char* kResultsHeader = "client,metric,value,baseline,improvement_pct,samples";

inline void write_results_csv(std::ostream& os, const EvalReport& rep) {
  os << kResultsHeader << '\n';
  for (std::size_t i = 0; i < rep.clients.size(); ++i) {
    const auto& c = rep.clients[i];
    os << c.client << ',' << to_string(c.metric) << ',' << format_real(c.value) << ','
       << (c.baseline ? format_real(*c.baseline) : "") << ','
       << (rep.improvement[i] ? format_real(*rep.improvement[i]) : "") << ',' << c.sample_count << '\n';
  }
}

inline std::vector<ClientResult> read_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kResultsHeader) throw ParseError("unexpected results header", 1);
  std::vector<ClientResult> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw ParseError("expected 6 fields", lineno);
    try {
      ClientResult r;
      r.client = std::stoi(f[0]);
      r.metric = parse_metric_kind(f[1]);
      r.value = std::stod(f[2]);
      if (!f[3].empty()) r.baseline = std::stod(f[3]);
      r.sample_count = static_cast<std::size_t>(std::stoull(f[5]));
      out.push_back(r);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

inline void write_aggregate_json(std::ostream& os, const EvalReport& rep) {
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("null"); };
  os << "{\"equal\": " << format_real(rep.equal) << ", \"data_weighted\": " << format_real(rep.data_weighted)
     << ", \"custom\": " << opt(rep.custom) << ", \"overall_improvement\": " << opt(rep.overall_improvement)
     << "}\n";
}

}  // namespace hetfl
