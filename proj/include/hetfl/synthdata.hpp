#pragma once

// Synthetic federated hetero-task scenarios, a CSV loader, the logarithmic
// label transforms and the training-split statistics clients may share.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/model.hpp"
#include "hetfl/paramset.hpp"
#include "hetfl/rng.hpp"
#include "hetfl/tensor.hpp"
#include "hetfl/types.hpp"

namespace hetfl {

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

struct ClientDataset {
  int id = 0;         // 1-based
  Tensor features;    // {N, d}
  Tensor targets;     // {N, k}; k = 1 with values in {0, 1} for binary tasks
  TaskKind task = TaskKind::BinaryClassification;
  MetricKind metric = MetricKind::Accuracy;
  Splits splits;
  std::string label_transform = "identity";

  [[nodiscard]] std::size_t size() const { return features.rows(); }
  [[nodiscard]] std::size_t feature_dim() const { return features.cols(); }
  [[nodiscard]] std::size_t target_width() const { return targets.cols(); }
};

inline Batch rows_of(const ClientDataset& ds, std::span<const std::size_t> idx) {
  return Batch{ds.features.gather_rows(idx), ds.targets.gather_rows(idx)};
}

enum class ScenarioKind : std::uint8_t { DistinctClasses, DistinctTasks };

inline ScenarioKind parse_scenario_kind(std::string_view s) {
  if (s == "DistinctClasses") return ScenarioKind::DistinctClasses;
  if (s == "DistinctTasks") return ScenarioKind::DistinctTasks;
  throw ConfigError("unknown scenario kind '" + std::string(s) + "'");
}

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::DistinctClasses;
  std::size_t clients = 2;
  std::vector<std::size_t> sizes;   // one per client, non-decreasing
  std::size_t feature_dim = 8;
  double regression_fraction = 0.0;  // DistinctTasks only
  std::size_t regression_width = 1;
  double heterogeneity = 0.0;        // max rotation of a client's task direction, radians
  double noise = 0.1;                // regression noise sigma
  double feature_shift = 0.5;        // sigma of each client's feature mean
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (clients < 2) throw ConfigError("scenario needs at least 2 clients");
    if (sizes.size() != clients) throw ConfigError("scenario needs one size per client");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 10) throw ConfigError("every client needs at least 10 rows");
      if (i > 0 && sizes[i] < sizes[i - 1]) throw ConfigError("client sizes must be ascending");
    }
    if (feature_dim == 0) throw ConfigError("feature dimension must be positive");
    if (!(heterogeneity >= 0.0 && heterogeneity <= std::numbers::pi)) {
      throw ConfigError("heterogeneity must lie in [0, pi]");
    }
    if (heterogeneity > 0.0 && feature_dim < 2) throw ConfigError("rotating task directions needs feature_dim >= 2");
    if (!(regression_fraction >= 0.0 && regression_fraction <= 1.0)) {
      throw ConfigError("regression fraction must lie in [0, 1]");
    }
    if (kind == ScenarioKind::DistinctClasses && regression_fraction != 0.0) {
      throw ConfigError("DistinctClasses scenarios are classification only");
    }
    if (regression_width == 0) throw ConfigError("regression width must be positive");
    if (!(noise >= 0.0) || !(feature_shift >= 0.0)) throw ConfigError("noise scales must be nonnegative");
    if (!(train_fraction > 0.0) || !(valid_fraction >= 0.0) || train_fraction + valid_fraction >= 1.0) {
      throw ConfigError("split fractions must leave a nonempty test split");
    }
  }

  [[nodiscard]] std::size_t regression_clients() const {
    if (kind != ScenarioKind::DistinctTasks) return 0;
    return static_cast<std::size_t>(std::lround(regression_fraction * static_cast<double>(clients)));
  }
};

// Client sizes of the 13-client molecular classification benchmark, ascending.
inline const std::vector<std::size_t>& graph_dc_sizes() {
  static const std::vector<std::size_t> sizes{188, 336, 344, 351, 405, 467, 756, 1000, 1000, 2000, 4110, 4127, 4337};
  return sizes;
}

inline std::vector<std::size_t> scaled_sizes(const std::vector<std::size_t>& sizes, std::size_t divisor) {
  std::vector<std::size_t> out;
  for (std::size_t s : sizes) out.push_back(s / divisor);
  return out;
}

inline Splits make_splits(std::size_t n, double train_fraction, double valid_fraction, Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  shuffle(perm, rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  const auto n_valid = static_cast<std::size_t>(std::floor(valid_fraction * static_cast<double>(n)));
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.valid.begin(), s.valid.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0;
  do {
    norm = 0;
    for (double& x : v) {
      x = standard_normal(rng);
      norm += x * x;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

// Unit vector orthogonal to `u`, or all zeros when d == 1.
inline std::vector<double> orthogonal_unit(Rng& rng, const std::vector<double>& u) {
  if (u.size() < 2) return std::vector<double>(u.size(), 0.0);
  for (;;) {
    auto v = random_unit(rng, u.size());
    double dot = 0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
    double norm = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      v[i] -= dot * u[i];
      norm += v[i] * v[i];
    }
    if (norm < 1e-12) continue;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
  }
}

}  // namespace detail

// Each client draws features from N(mu_k, I) with mu_k ~ N(0, feature_shift^2 I)
// and labels them with directions rotated by a client-specific angle in
// [-heterogeneity, heterogeneity] inside fixed planes shared by all clients.
// Binary labels are 1[w . (x - mu_k) > 0]; regression targets are
// w_j . x + N(0, noise^2). In DistinctTasks scenarios the clients with the
// largest ids are the regression clients.
inline std::vector<ClientDataset> generate_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  Rng base = stream(cfg.seed, StreamPurpose::Scenario, 0, 0);
  const std::size_t d = cfg.feature_dim;
  const std::size_t width = cfg.regression_width;
  std::vector<std::vector<double>> u(width), v(width);
  for (std::size_t j = 0; j < width; ++j) {
    u[j] = detail::random_unit(base, d);
    v[j] = detail::orthogonal_unit(base, u[j]);
  }
  const std::size_t n_reg = cfg.regression_clients();
  std::vector<ClientDataset> out;
  out.reserve(cfg.clients);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    const int id = static_cast<int>(k + 1);
    Rng rng = stream(cfg.seed, StreamPurpose::Scenario, static_cast<std::uint64_t>(id), 1);
    const double angle = uniform(rng, -cfg.heterogeneity, cfg.heterogeneity);
    const double c = std::cos(angle), s = std::sin(angle);
    std::vector<double> mu(d);
    for (double& m : mu) m = cfg.feature_shift * standard_normal(rng);

    ClientDataset ds;
    ds.id = id;
    const bool regression = k >= cfg.clients - n_reg;
    ds.task = regression ? TaskKind::Regression : TaskKind::BinaryClassification;
    ds.metric = regression ? MetricKind::Mse : MetricKind::Accuracy;
    const std::size_t n = cfg.sizes[k];
    const std::size_t outputs = regression ? width : 1;
    ds.features = Tensor({n, d});
    ds.targets = Tensor({n, outputs});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < d; ++i) ds.features.at(r, i) = mu[i] + standard_normal(rng);
      for (std::size_t j = 0; j < outputs; ++j) {
        double score = 0;
        for (std::size_t i = 0; i < d; ++i) {
          const double w = c * u[j][i] + s * v[j][i];
          score += w * (regression ? ds.features.at(r, i) : ds.features.at(r, i) - mu[i]);
        }
        ds.targets.at(r, j) = regression ? score + cfg.noise * standard_normal(rng) : (score > 0 ? 1.0 : 0.0);
      }
    }
    Rng split_rng = stream(cfg.seed, StreamPurpose::Split, static_cast<std::uint64_t>(id), 0);
    ds.splits = make_splits(n, cfg.train_fraction, cfg.valid_fraction, split_rng);
    out.push_back(std::move(ds));
  }
  return out;
}

// ---- label transforms -------------------------------------------------------

enum class LabelTransform : std::uint8_t { Identity, LogNegPlus5, LogNeg, Log };

inline std::string_view to_string(LabelTransform t) {
  switch (t) {
    case LabelTransform::Identity: return "identity";
    case LabelTransform::LogNegPlus5: return "log(-y+5)";
    case LabelTransform::LogNeg: return "log(-y)";
    case LabelTransform::Log: return "log(y)";
  }
  return "?";
}

inline LabelTransform parse_label_transform(std::string_view s) {
  for (auto t : {LabelTransform::Identity, LabelTransform::LogNegPlus5, LabelTransform::LogNeg, LabelTransform::Log}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown label transform '" + std::string(s) + "'");
}

// Applies the transform to the listed target columns (all columns when
// `columns` is empty). Rejects the whole dataset at the first target outside
// the transform's domain.
inline ClientDataset apply_label_transform(const ClientDataset& ds, LabelTransform t,
                                           std::vector<std::size_t> columns = {}) {
  if (ds.task != TaskKind::Regression) throw ConfigError("label transforms apply to regression clients only");
  if (columns.empty()) {
    for (std::size_t j = 0; j < ds.target_width(); ++j) columns.push_back(j);
  }
  ClientDataset out = ds;
  for (std::size_t j : columns) {
    if (j >= ds.target_width()) throw ConfigError("label transform column out of range");
    for (std::size_t r = 0; r < ds.size(); ++r) {
      const double y = ds.targets.at(r, j);
      double arg = 0;
      switch (t) {
        case LabelTransform::Identity: continue;
        case LabelTransform::LogNegPlus5: arg = -y + 5.0; break;
        case LabelTransform::LogNeg: arg = -y; break;
        case LabelTransform::Log: arg = y; break;
      }
      if (!(arg > 0.0)) {
        throw DomainError("target outside the domain of " + std::string(to_string(t)), r, j);
      }
      out.targets.at(r, j) = std::log(arg);
    }
  }
  if (t != LabelTransform::Identity) {
    std::string desc(to_string(t));
    if (columns.size() != ds.target_width()) {
      desc += " on columns";
      for (std::size_t j : columns) desc += " " + std::to_string(j);
    }
    out.label_transform = ds.label_transform == "identity" ? desc : ds.label_transform + "; " + desc;
  }
  return out;
}

// ---- tabular input ------------------------------------------------------------

struct TabularSchema {
  int client_id = 1;
  std::vector<std::string> feature_columns;
  std::vector<std::string> target_columns;
  TaskKind task = TaskKind::Regression;
  MetricKind metric = MetricKind::Mse;
  std::uint64_t split_seed = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_real(const std::string& cell, std::size_t line) {
  double v = 0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || cell.empty()) throw ParseError("'" + cell + "' is not a number", line);
  return v;
}

}  // namespace detail

// Comma-separated file with a header row; rows keep file order.
inline ClientDataset load_tabular(const std::string& path, const TabularSchema& schema) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  if (schema.feature_columns.empty() || schema.target_columns.empty()) {
    throw ConfigError("tabular schema needs feature and target columns");
  }
  std::string line;
  if (!std::getline(is, line)) throw ParseError("missing header row", 1);
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("column '" + name + "' missing from " + path);
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> fcols, tcols;
  for (const auto& c : schema.feature_columns) fcols.push_back(column(c));
  for (const auto& c : schema.target_columns) tcols.push_back(column(c));

  std::vector<double> feats, targs;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()),
                       lineno);
    }
    for (std::size_t c : fcols) feats.push_back(detail::parse_real(cells[c], lineno));
    for (std::size_t c : tcols) {
      const double y = detail::parse_real(cells[c], lineno);
      if (schema.task == TaskKind::BinaryClassification && y != 0.0 && y != 1.0) {
        throw ParseError("binary label must be 0 or 1", lineno);
      }
      targs.push_back(y);
    }
    ++rows;
  }
  if (rows < 10) throw ConfigError(path + ": a client needs at least 10 rows");
  if (schema.task == TaskKind::BinaryClassification && tcols.size() != 1) {
    throw ConfigError("binary classification takes exactly one target column");
  }
  ClientDataset ds;
  ds.id = schema.client_id;
  ds.features = Tensor({rows, fcols.size()}, std::move(feats));
  ds.targets = Tensor({rows, tcols.size()}, std::move(targs));
  ds.task = schema.task;
  ds.metric = schema.metric;
  Rng rng = stream(schema.split_seed, StreamPurpose::Split, static_cast<std::uint64_t>(schema.client_id), 0);
  ds.splits = make_splits(rows, 0.8, 0.1, rng);
  return ds;
}

// ---- shareable statistics -------------------------------------------------------

struct DataStatistics {
  std::size_t count = 0;
  std::vector<double> mean;
  std::vector<double> median;
};

// Count, per-feature mean and per-feature median over the training split.
inline DataStatistics data_statistics(const ClientDataset& ds) {
  if (ds.splits.train.empty()) throw Error("data_statistics: empty training split");
  const std::size_t d = ds.feature_dim();
  const std::size_t n = ds.splits.train.size();
  DataStatistics st;
  st.count = n;
  st.mean.assign(d, 0.0);
  st.median.assign(d, 0.0);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = ds.features.at(ds.splits.train[i], j);
      sum += col[i];
    }
    st.mean[j] = sum / static_cast<double>(n);
    const std::size_t mid = n / 2;
    std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(mid), col.end());
    const double upper = col[mid];
    if (n % 2 == 1) {
      st.median[j] = upper;
    } else {
      const double lower = *std::max_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(mid));
      st.median[j] = 0.5 * (lower + upper);
    }
  }
  return st;
}

// Wire form: entries "count" {1}, "mean" {d}, "median" {d}.
inline ParamSet statistics_payload(const DataStatistics& st) {
  ParamSet p;
  p.add("count", Tensor::scalar(static_cast<double>(st.count)), ParamRole::SharedBody);
  p.add("mean", Tensor::vector(st.mean), ParamRole::SharedBody);
  p.add("median", Tensor::vector(st.median), ParamRole::SharedBody);
  return p;
}

inline DataStatistics statistics_from_payload(const ParamSet& p) {
  DataStatistics st;
  st.count = static_cast<std::size_t>(p.value("count").item());
  st.mean = p.value("mean").values();
  st.median = p.value("median").values();
  return st;
}

}  // namespace hetfl
