#pragma once

// The federated method families as plain functions over models, datasets and
// seeded streams: which parameters are shared, the local objective and update
// rule, server aggregation, and the post-training phases.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetfl/autodiff.hpp"
#include "hetfl/errors.hpp"
#include "hetfl/model.hpp"
#include "hetfl/paramset.hpp"
#include "hetfl/rng.hpp"
#include "hetfl/synthdata.hpp"

namespace hetfl {

enum class StrategyKind : std::uint8_t {
  Isolated,
  FedAvg,
  FedAvgFT,
  FedProx,
  FedBN,
  FedBNFT,
  Ditto,
  FedMAML,
  // Test fixtures that break the protocol on purpose.
  RogueNonWhitelisted,
  RogueOversized,
};

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::Isolated: return "Isolated";
    case StrategyKind::FedAvg: return "FedAvg";
    case StrategyKind::FedAvgFT: return "FedAvgFT";
    case StrategyKind::FedProx: return "FedProx";
    case StrategyKind::FedBN: return "FedBN";
    case StrategyKind::FedBNFT: return "FedBNFT";
    case StrategyKind::Ditto: return "Ditto";
    case StrategyKind::FedMAML: return "FedMAML";
    case StrategyKind::RogueNonWhitelisted: return "RogueNonWhitelisted";
    case StrategyKind::RogueOversized: return "RogueOversized";
  }
  return "?";
}

inline StrategyKind parse_strategy_kind(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(StrategyKind::RogueOversized); ++i) {
    const auto k = static_cast<StrategyKind>(i);
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

inline bool fine_tunes(StrategyKind k) { return k == StrategyKind::FedAvgFT || k == StrategyKind::FedBNFT; }

struct HyperParams {
  double learning_rate = 0.1;
  std::size_t batch_size = 64;
  std::size_t local_steps = 1;
  double mu = 0.0;                  // FedProx proximal weight
  double lambda = 0.0;              // Ditto personalization regularization weight
  double inner_learning_rate = 0.01;
  double outer_learning_rate = 0.01;
  std::size_t finetune_steps = 0;
  std::optional<double> finetune_learning_rate;  // defaults to learning_rate
  std::size_t eval_adaptation_steps = 1;         // FedMAML inner steps before testing

  [[nodiscard]] double ft_rate() const { return finetune_learning_rate.value_or(learning_rate); }

  void validate() const {
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(learning_rate, "learning_rate");
    positive(inner_learning_rate, "inner_learning_rate");
    positive(outer_learning_rate, "outer_learning_rate");
    if (finetune_learning_rate) positive(*finetune_learning_rate, "finetune_learning_rate");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (local_steps == 0) throw ConfigError("local_steps must be at least 1");
    if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be nonnegative");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be nonnegative");
  }

  // Sets one scalar field by name.
  void set(std::string_view key, double v) {
    auto count = [&](const char* what) {
      if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError(std::string(what) + " must be a nonnegative integer");
      return static_cast<std::size_t>(v);
    };
    if (key == "learning_rate") learning_rate = v;
    else if (key == "batch_size") batch_size = count("batch_size");
    else if (key == "local_steps") local_steps = count("local_steps");
    else if (key == "mu") mu = v;
    else if (key == "lambda") lambda = v;
    else if (key == "inner_learning_rate") inner_learning_rate = v;
    else if (key == "outer_learning_rate") outer_learning_rate = v;
    else if (key == "finetune_steps") finetune_steps = count("finetune_steps");
    else if (key == "finetune_learning_rate") finetune_learning_rate = v;
    else if (key == "eval_adaptation_steps") eval_adaptation_steps = count("eval_adaptation_steps");
    else throw ConfigError("unknown hyper-parameter '" + std::string(key) + "'");
  }
};

struct StrategyConfig {
  StrategyKind kind = StrategyKind::FedAvg;
  HyperParams hp;
  std::map<int, std::map<std::string, double>> overrides;  // client id -> field -> value
  bool share_heads = false;  // FedAvg ablation: heads are federated too

  [[nodiscard]] HyperParams for_client(int id) const {
    HyperParams h = hp;
    if (auto it = overrides.find(id); it != overrides.end()) {
      for (const auto& [k, v] : it->second) h.set(k, v);
    }
    return h;
  }

  void validate() const {
    hp.validate();
    for (const auto& [id, fields] : overrides) {
      if (id < 1) throw ConfigError("override for invalid client id " + std::to_string(id));
      for_client(id).validate();
    }
    if (share_heads && kind != StrategyKind::FedAvg) throw ConfigError("share_heads is a FedAvg-only ablation");
  }
};

// ---- shared subsets ---------------------------------------------------------------

// Body weights only; batch-norm entries stay local and heads are personal.
inline ParamSet fedbn_shared_subset(const ParamSet& params) {
  return partition(params, [](ParamRole r) { return r == ParamRole::SharedBody; }).first;
}

inline ParamSet shared_subset(const StrategyConfig& cfg, const ParamSet& params) {
  switch (cfg.kind) {
    case StrategyKind::Isolated: return {};
    case StrategyKind::FedBN:
    case StrategyKind::FedBNFT: return fedbn_shared_subset(params);
    case StrategyKind::FedMAML: {
      // Outer gradients exist only for trainable entries; running statistics stay local.
      ParamSet out;
      for (const auto& [name, e] : params) {
        if (e.role != ParamRole::PersonalHead && !is_buffer(name)) out.add(name, e.value, e.role);
      }
      return out;
    }
    case StrategyKind::FedAvg:
      if (cfg.share_heads) return params;
      [[fallthrough]];
    default: return partition(params, [](ParamRole r) { return r != ParamRole::PersonalHead; }).first;
  }
}

// ---- local training ---------------------------------------------------------------

struct ClientUpdate {
  ParamSet shared;           // post-update values, or outer gradients for FedMAML
  std::size_t sample_count = 0;
  double train_loss = 0.0;   // mean objective over the local steps
};

// Cycles through a client's training rows in seeded random order. Each epoch
// reshuffles; the final short batch of an epoch is kept.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> rows, std::size_t batch_size, Rng& rng)
      : rows_(std::move(rows)), batch_(batch_size), rng_(rng) {
    if (rows_.empty()) throw Error("BatchSampler: no rows");
    if (batch_ == 0) throw Error("BatchSampler: batch size must be positive");
    pos_ = rows_.size();
  }

  std::vector<std::size_t> next() {
    if (pos_ >= rows_.size()) {
      shuffle(rows_, rng_);
      pos_ = 0;
    }
    const std::size_t end = std::min(rows_.size(), pos_ + batch_);
    std::vector<std::size_t> out(rows_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 rows_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return out;
  }

 private:
  std::vector<std::size_t> rows_;
  std::size_t batch_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

// (weight / 2) * ||w - anchor||^2 over the entries of `anchor`.
struct Regularizer {
  const ParamSet* anchor = nullptr;
  double weight = 0.0;
};

// task_loss + (mu / 2) * sum over anchor entries of ||w - w_global||^2.
inline ad::Expr fedprox_loss(const ad::Expr& task_loss, const ParamExprs& params, const ParamSet& global_params,
                             double mu) {
  ad::Expr penalty;
  for (const auto& [name, e] : global_params) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("proximal term: parameter '" + name + "' missing from model");
    if (it->second.shape() != e.value.shape()) throw ShapeError("proximal term: shape mismatch for '" + name + "'");
    const auto term = ad::sum_all(ad::square(it->second - ad::constant(e.value)));
    penalty = penalty ? penalty + term : term;
  }
  if (!penalty) return task_loss;
  return task_loss + ad::scale(penalty, 0.5 * mu);
}

inline ParamSet trainable_subset(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, e] : params) {
    if (!is_buffer(name)) out.add(name, e.value, e.role);
  }
  return out;
}

// One gradient step on the batch: running statistics move with the batch
// (under the pre-step parameters) and every trainable entry takes
// w <- w - lr * grad. Returns the objective value before the step.
inline double sgd_step(Model& m, const Batch& batch, double lr, const Regularizer* reg = nullptr) {
  const auto p = param_inputs(m.params);
  const auto fg = forward(m.spec, p, batch.features, Mode::Train);
  ad::Expr objective = task_loss(m.spec, fg.output, batch);
  if (reg && reg->anchor) objective = fedprox_loss(objective, p, *reg->anchor, reg->weight);
  const auto names = trainable_names(m.params);
  const auto grads = ad::gradient(objective, names);
  std::vector<ad::Expr> roots{objective};
  for (const auto& n : names) roots.push_back(grads.at(n));
  for (const auto& b : fg.bn_inputs) roots.push_back(b);
  const auto values = ad::Program(roots).run(bindings(m.params));
  if (!fg.bn_inputs.empty()) {
    apply_running_stats(m, std::vector<Tensor>(values.begin() + static_cast<std::ptrdiff_t>(1 + names.size()), values.end()));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor& w = m.params.value(names[i]);
    const Tensor& g = values[1 + i];
    for (std::size_t j = 0; j < w.numel(); ++j) w[j] -= lr * g[j];
    if (!w.all_finite()) throw NumericError("parameter '" + names[i] + "' became non-finite");
  }
  return values[0].item();
}

// `steps` minibatch steps over the training split. Returns the mean objective.
inline double sgd_steps(Model& m, const ClientDataset& ds, std::size_t steps, double lr, std::size_t batch_size,
                        Rng& rng, const Regularizer* reg = nullptr) {
  if (steps == 0) return 0.0;
  BatchSampler sampler(ds.splits.train, batch_size, rng);
  double total = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto idx = sampler.next();
    total += sgd_step(m, rows_of(ds, idx), lr, reg);
  }
  return total / static_cast<double>(steps);
}

using SharedSelector = std::function<ParamSet(const ParamSet&)>;

// Plain local training; the returned update carries the selected shared
// entries after training and the training-split size.
inline ClientUpdate local_sgd(Model& m, const ClientDataset& ds, const HyperParams& hp, Rng& rng,
                              const SharedSelector& select, const Regularizer* reg = nullptr) {
  ClientUpdate u;
  u.train_loss = sgd_steps(m, ds, hp.local_steps, hp.learning_rate, hp.batch_size, rng, reg);
  u.shared = select(m.params);
  u.sample_count = ds.splits.train.size();
  return u;
}

// Ditto's personal track: `local_steps` steps on f(v) + (lambda / 2) ||v - w_global||^2
// over the shared trainable entries.
inline double ditto_step(Model& personal, const ParamSet& global_shared, const ClientDataset& ds, double lambda,
                         const HyperParams& hp, Rng& rng) {
  const ParamSet anchor = trainable_subset(global_shared);
  const Regularizer reg{&anchor, lambda};
  return sgd_steps(personal, ds, hp.local_steps, hp.learning_rate, hp.batch_size, rng, &reg);
}

inline void fine_tune(Model& m, const ClientDataset& ds, const HyperParams& hp, Rng& rng) {
  sgd_steps(m, ds, hp.finetune_steps, hp.ft_rate(), hp.batch_size, rng);
}

// ---- aggregation -----------------------------------------------------------------

// Per-entry weighted mean, weights normalized to sum to one.
inline ParamSet weighted_average(std::span<const ParamSet> sets, std::span<const double> weights) {
  if (sets.empty()) throw Error("aggregate: no updates");
  if (sets.size() != weights.size()) throw Error("aggregate: one weight per update required");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error("aggregate: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw Error("aggregate: weights sum to zero");
  const ParamSet& first = sets.front();
  for (const auto& s : sets) {
    if (s.size() != first.size()) throw Error("aggregate: updates cover different parameter sets");
    auto a = s.begin();
    for (auto b = first.begin(); b != first.end(); ++a, ++b) {
      if (a->first != b->first || a->second.value.shape() != b->second.value.shape()) {
        throw Error("aggregate: name/shape mismatch at '" + b->first + "'");
      }
    }
  }
  ParamSet out;
  for (const auto& [name, e] : first) {
    Tensor acc(e.value.shape(), 0.0);
    for (std::size_t k = 0; k < sets.size(); ++k) {
      const double w = weights[k] / total;
      const Tensor& v = sets[k].value(name);
      for (std::size_t j = 0; j < acc.numel(); ++j) acc[j] += w * v[j];
    }
    out.add(name, std::move(acc), e.role);
  }
  return out;
}

// Sample-weighted mean with weights n_i / sum n.
inline ParamSet fedavg_aggregate(std::span<const ClientUpdate> updates) {
  std::vector<ParamSet> sets;
  std::vector<double> weights;
  for (const auto& u : updates) {
    if (u.sample_count == 0) throw Error("aggregate: update with zero samples");
    sets.push_back(u.shared);
    weights.push_back(static_cast<double>(u.sample_count));
  }
  return weighted_average(sets, weights);
}

// theta <- theta - rate * g for every entry of `grad`.
inline ParamSet apply_gradient(ParamSet params, const ParamSet& grad, double rate) {
  for (const auto& [name, g] : grad) {
    Tensor& w = params.value(name);
    if (w.shape() != g.value.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
    for (std::size_t j = 0; j < w.numel(); ++j) w[j] -= rate * g.value[j];
  }
  return params;
}

// ---- second-order meta-learning ------------------------------------------------------

// theta' = theta - alpha * grad L_support(theta); returns grad_theta L_query(theta'),
// differentiated through the inner step. Covers every trainable entry.
inline ParamSet fedmaml_update(const ModelSpec& spec, const ParamSet& theta, const Batch& support, const Batch& query,
                               double alpha) {
  const auto p = param_inputs(theta);
  const auto names = trainable_names(theta);
  const auto inner = ad::gradient(loss(spec, p, support, Mode::Train), names);
  ParamExprs adapted = p;
  for (const auto& n : names) adapted[n] = p.at(n) - ad::scale(inner.at(n), alpha);
  const auto outer = ad::gradient(loss(spec, adapted, query, Mode::Train), names);
  std::vector<ad::Expr> roots;
  for (const auto& n : names) roots.push_back(outer.at(n));
  const auto values = ad::Program(roots).run(bindings(theta));
  ParamSet out;
  for (std::size_t i = 0; i < names.size(); ++i) out.add(names[i], values[i], theta.role(names[i]));
  return out;
}

// Two disjoint minibatches from the training split: support first, query second.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> support_query_split(const ClientDataset& ds,
                                                                                         std::size_t batch_size,
                                                                                         Rng& rng) {
  std::vector<std::size_t> rows = ds.splits.train;
  if (rows.size() < 2) throw Error("FedMAML needs at least 2 training rows");
  shuffle(rows, rng);
  const std::size_t b = std::min(batch_size, rows.size() / 2);
  std::vector<std::size_t> support(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(b));
  std::vector<std::size_t> query(rows.begin() + static_cast<std::ptrdiff_t>(b),
                                 rows.begin() + static_cast<std::ptrdiff_t>(2 * b));
  return {support, query};
}

// One FedMAML round on a client: `local_steps` episodes at the broadcast
// theta, outer gradients averaged. The personal head takes its own outer step
// locally; the shared part of the gradient goes back to the server.
inline ClientUpdate fedmaml_client_round(Model& m, const ClientDataset& ds, const HyperParams& hp, Rng& rng,
                                         const SharedSelector& select) {
  ParamSet mean_grad;
  double total_loss = 0;
  for (std::size_t s = 0; s < hp.local_steps; ++s) {
    const auto [support_idx, query_idx] = support_query_split(ds, hp.batch_size, rng);
    const Batch support = rows_of(ds, support_idx);
    const Batch query = rows_of(ds, query_idx);
    total_loss += loss_value(m, query, Mode::Train);
    const ParamSet g = fedmaml_update(m.spec, m.params, support, query, hp.inner_learning_rate);
    if (s == 0) {
      mean_grad = g;
    } else {
      for (const auto& [name, e] : g) {
        Tensor& acc = mean_grad.value(name);
        for (std::size_t j = 0; j < acc.numel(); ++j) acc[j] += e.value[j];
      }
    }
    update_running_stats(m, support.features);
  }
  const double inv = 1.0 / static_cast<double>(hp.local_steps);
  ParamSet grad;
  for (const auto& [name, e] : mean_grad) {
    Tensor t = e.value;
    for (double& v : t.data()) v *= inv;
    if (!t.all_finite()) throw NumericError("outer gradient for '" + name + "' is non-finite");
    grad.add(name, std::move(t), e.role);
  }
  const ParamSet shared_grad = select(grad);
  ParamSet local_grad;
  for (const auto& [name, e] : grad) {
    if (!shared_grad.contains(name)) local_grad.add(name, e.value, e.role);
  }
  m.params = apply_gradient(std::move(m.params), local_grad, hp.outer_learning_rate);
  ClientUpdate u;
  u.shared = shared_grad;
  u.sample_count = ds.splits.train.size();
  u.train_loss = total_loss * inv;
  return u;
}

// Test-time adaptation: `eval_adaptation_steps` inner-rate steps on training rows.
inline void maml_adapt(Model& m, const ClientDataset& ds, const HyperParams& hp, Rng& rng) {
  sgd_steps(m, ds, hp.eval_adaptation_steps, hp.inner_learning_rate, hp.batch_size, rng);
}

}  // namespace hetfl
