#pragma once

// Experiment files: JSON documents validated in full before anything runs.
// Every object rejects keys it does not know.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetfl/errors.hpp"
#include "hetfl/model.hpp"
#include "hetfl/runtime.hpp"
#include "hetfl/strategies.hpp"
#include "hetfl/synthdata.hpp"

namespace hetfl {

struct TabularSource {
  std::string path;
  TabularSchema schema;
  std::optional<LabelTransform> transform;
};

struct ExperimentFile {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::size_t rounds = 0;
  std::size_t repeats = 1;
  std::size_t threads = 1;
  std::string output_dir = "out";
  double sample_rate = 1.0;
  WeightSource weights = WeightSource::ServerFromStatistics;
  std::optional<std::vector<double>> custom_weights;

  std::optional<ScenarioConfig> scenario;
  std::map<int, LabelTransform> label_transforms;  // scenario clients only
  std::optional<double> taint_sentinel;
  std::vector<TabularSource> tabular;

  std::vector<BodyLayer> body;
  StrategyConfig strategy;
};

namespace detail {

using nlohmann::json;

inline void only_keys(const json& j, const std::string& where, const std::vector<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? get<T>(j, key, where) : fallback;
}

inline std::size_t get_count(const json& j, const char* key, std::size_t fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(where + "." + key + ": expected a nonnegative integer");
  }
  return v.get<std::size_t>();
}

inline double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError(where + ": expected a number");
  return v.get<double>();
}

inline ScenarioConfig parse_scenario(const json& j, ExperimentFile& f) {
  const std::string w = "scenario";
  only_keys(j, w,
            {"kind", "clients", "sizes", "size", "feature_dim", "regression_fraction", "regression_width",
             "heterogeneity", "noise", "feature_shift", "train_fraction", "valid_fraction", "label_transforms",
             "taint_sentinel"});
  ScenarioConfig s;
  s.kind = parse_scenario_kind(get<std::string>(j, "kind", w));
  s.clients = get_count(j, "clients", 0, w);
  if (j.contains("sizes") && j.contains("size")) throw ConfigError(w + ": give either 'sizes' or 'size'");
  if (j.contains("sizes")) {
    s.sizes = get<std::vector<std::size_t>>(j, "sizes", w);
    if (s.clients == 0) s.clients = s.sizes.size();
  } else {
    s.sizes.assign(s.clients, get_count(j, "size", 0, w));
  }
  s.feature_dim = get_count(j, "feature_dim", 0, w);
  s.regression_fraction = get_or<double>(j, "regression_fraction", s.regression_fraction, w);
  s.regression_width = get_count(j, "regression_width", s.regression_width, w);
  s.heterogeneity = get_or<double>(j, "heterogeneity", s.heterogeneity, w);
  s.noise = get_or<double>(j, "noise", s.noise, w);
  s.feature_shift = get_or<double>(j, "feature_shift", s.feature_shift, w);
  s.train_fraction = get_or<double>(j, "train_fraction", s.train_fraction, w);
  s.valid_fraction = get_or<double>(j, "valid_fraction", s.valid_fraction, w);
  if (j.contains("label_transforms")) {
    const auto& lt = j.at("label_transforms");
    if (!lt.is_object()) throw ConfigError(w + ".label_transforms: expected an object keyed by client id");
    for (const auto& [key, v] : lt.items()) {
      if (!v.is_string()) throw ConfigError(w + ".label_transforms." + key + ": expected a string");
      int id = 0;
      try {
        id = std::stoi(key);
      } catch (const std::exception&) {
        throw ConfigError(w + ".label_transforms: '" + key + "' is not a client id");
      }
      f.label_transforms[id] = parse_label_transform(v.get<std::string>());
    }
  }
  if (j.contains("taint_sentinel")) f.taint_sentinel = number(j.at("taint_sentinel"), w + ".taint_sentinel");
  s.validate();
  return s;
}

inline TabularSource parse_tabular(const json& j, std::size_t index) {
  const std::string w = "tabular[" + std::to_string(index) + "]";
  only_keys(j, w, {"path", "client", "features", "targets", "task", "metric", "label_transform"});
  TabularSource t;
  t.path = get<std::string>(j, "path", w);
  t.schema.client_id = get_or<int>(j, "client", static_cast<int>(index) + 1, w);
  t.schema.feature_columns = get<std::vector<std::string>>(j, "features", w);
  t.schema.target_columns = get<std::vector<std::string>>(j, "targets", w);
  t.schema.task = parse_task_kind(get<std::string>(j, "task", w));
  t.schema.metric = parse_metric_kind(
      get_or<std::string>(j, "metric", t.schema.task == TaskKind::Regression ? "mse" : "accuracy", w));
  if (j.contains("label_transform")) t.transform = parse_label_transform(get<std::string>(j, "label_transform", w));
  return t;
}

inline std::vector<BodyLayer> parse_model(const json& j) {
  only_keys(j, "model", {"body"});
  std::vector<BodyLayer> body;
  const auto& layers = j.contains("body") ? j.at("body") : json::array();
  if (!layers.is_array()) throw ConfigError("model.body: expected an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string w = "model.body[" + std::to_string(i) + "]";
    only_keys(layers[i], w, {"width", "activation", "batch_norm"});
    BodyLayer l;
    l.width = get_count(layers[i], "width", 0, w);
    if (l.width == 0) throw ConfigError(w + ".width must be positive");
    l.activation = parse_activation(get_or<std::string>(layers[i], "activation", "relu", w));
    l.batch_norm = get_or<bool>(layers[i], "batch_norm", false, w);
    body.push_back(l);
  }
  return body;
}

inline const std::vector<std::string> kHyperKeys = {
    "learning_rate",  "batch_size",     "local_steps",           "mu",
    "lambda",         "inner_learning_rate", "outer_learning_rate", "finetune_steps",
    "finetune_learning_rate", "eval_adaptation_steps"};

inline StrategyConfig parse_strategy(const json& j) {
  const std::string w = "strategy";
  std::vector<std::string> allowed = kHyperKeys;
  allowed.insert(allowed.end(), {"kind", "share_heads", "overrides"});
  only_keys(j, w, allowed);
  StrategyConfig s;
  s.kind = parse_strategy_kind(get<std::string>(j, "kind", w));
  for (const auto& key : kHyperKeys) {
    if (j.contains(key)) s.hp.set(key, number(j.at(key), w + "." + key));
  }
  s.share_heads = get_or<bool>(j, "share_heads", false, w);
  if (j.contains("overrides")) {
    const auto& o = j.at("overrides");
    if (!o.is_object()) throw ConfigError(w + ".overrides: expected an object keyed by client id");
    for (const auto& [key, fields] : o.items()) {
      int id = 0;
      try {
        id = std::stoi(key);
      } catch (const std::exception&) {
        throw ConfigError(w + ".overrides: '" + key + "' is not a client id");
      }
      const std::string ow = w + ".overrides." + key;
      only_keys(fields, ow, kHyperKeys);
      for (const auto& [field, v] : fields.items()) s.overrides[id][field] = number(v, ow + "." + field);
    }
  }
  s.validate();
  return s;
}

}  // namespace detail

inline ExperimentFile parse_experiment(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed experiment file: ") + e.what());
  }
  detail::only_keys(j, "experiment",
                    {"name", "seed", "rounds", "repeats", "threads", "output_dir", "sample_rate", "aggregation_weights",
                     "custom_weights", "scenario", "tabular", "model", "strategy"});
  ExperimentFile f;
  const std::string w = "experiment";
  f.name = detail::get_or<std::string>(j, "name", f.name, w);
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("experiment.seed: expected a nonnegative integer");
    f.seed = j.at("seed").get<std::uint64_t>();
  }
  f.rounds = detail::get_count(j, "rounds", 0, w);
  f.repeats = detail::get_count(j, "repeats", 1, w);
  if (f.repeats == 0) throw ConfigError("experiment.repeats must be at least 1");
  f.threads = detail::get_count(j, "threads", 1, w);
  if (f.threads == 0) throw ConfigError("experiment.threads must be at least 1");
  f.output_dir = detail::get_or<std::string>(j, "output_dir", f.output_dir, w);
  f.sample_rate = detail::get_or<double>(j, "sample_rate", 1.0, w);
  if (!(f.sample_rate > 0.0 && f.sample_rate <= 1.0)) throw ConfigError("experiment.sample_rate must lie in (0, 1]");
  const auto weights = detail::get_or<std::string>(j, "aggregation_weights", "server", w);
  if (weights == "server") {
    f.weights = WeightSource::ServerFromStatistics;
  } else if (weights == "client") {
    f.weights = WeightSource::ClientReported;
  } else {
    throw ConfigError("experiment.aggregation_weights must be 'server' or 'client'");
  }
  if (j.contains("custom_weights")) f.custom_weights = detail::get<std::vector<double>>(j, "custom_weights", w);

  if (j.contains("scenario") == j.contains("tabular")) {
    throw ConfigError("experiment needs exactly one of 'scenario' or 'tabular'");
  }
  if (j.contains("scenario")) {
    f.scenario = detail::parse_scenario(j.at("scenario"), f);
    for (const auto& [id, t] : f.label_transforms) {
      if (id < 1 || static_cast<std::size_t>(id) > f.scenario->clients) {
        throw ConfigError("label transform for unknown client " + std::to_string(id));
      }
    }
  } else {
    const auto& tab = j.at("tabular");
    if (!tab.is_array() || tab.empty()) throw ConfigError("tabular: expected a nonempty array");
    for (std::size_t i = 0; i < tab.size(); ++i) f.tabular.push_back(detail::parse_tabular(tab[i], i));
  }
  if (!j.contains("model")) throw ConfigError("experiment: missing key 'model'");
  f.body = detail::parse_model(j.at("model"));
  if (!j.contains("strategy")) throw ConfigError("experiment: missing key 'strategy'");
  f.strategy = detail::parse_strategy(j.at("strategy"));
  if (f.custom_weights) {
    const std::size_t n = f.scenario ? f.scenario->clients : f.tabular.size();
    if (f.custom_weights->size() != n) throw ConfigError("custom_weights needs one weight per client");
  }
  return f;
}

inline ExperimentFile load_experiment(const std::string& path, std::string* raw = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  if (raw) *raw = ss.str();
  return parse_experiment(ss.str());
}

// Client datasets for one repeat. Label transforms and the taint sentinel are
// applied here, before any training.
inline std::vector<ClientDataset> materialize_clients(const ExperimentFile& f, std::uint64_t seed) {
  std::vector<ClientDataset> clients;
  if (f.scenario) {
    ScenarioConfig s = *f.scenario;
    s.seed = seed;
    clients = generate_scenario(s);
    for (auto& c : clients) {
      if (auto it = f.label_transforms.find(c.id); it != f.label_transforms.end()) {
        c = apply_label_transform(c, it->second);
      }
    }
  } else {
    for (const auto& t : f.tabular) {
      TabularSchema schema = t.schema;
      schema.split_seed = seed;
      ClientDataset c = load_tabular(t.path, schema);
      if (t.transform) c = apply_label_transform(c, *t.transform);
      clients.push_back(std::move(c));
    }
    std::sort(clients.begin(), clients.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < clients.size(); ++i) {
      if (clients[i].feature_dim() != clients[0].feature_dim()) {
        throw ConfigError("tabular clients must share one feature width");
      }
    }
  }
  if (f.taint_sentinel) {
    // The first training row of every client becomes all-sentinel.
    for (auto& c : clients) {
      const std::size_t row = c.splits.train.front();
      for (std::size_t j = 0; j < c.feature_dim(); ++j) c.features.data()[row * c.feature_dim() + j] = *f.taint_sentinel;
    }
  }
  return clients;
}

inline ExperimentConfig make_experiment_config(const ExperimentFile& f, const std::vector<ClientDataset>& clients,
                                               std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.clients = clients;
  cfg.body = f.body;
  cfg.strategy = f.strategy;
  cfg.rounds = f.rounds;
  cfg.seed = seed;
  cfg.threads = f.threads;
  cfg.sample_rate = f.sample_rate;
  cfg.weights = f.weights;
  return cfg;
}

}  // namespace hetfl
