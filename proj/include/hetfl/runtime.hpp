#pragma once

// The server/client round loop. Every transfer between participants is a
// serialized Message that passes the ProtocolMonitor before the receiver
// deserializes it; nothing else crosses the client boundary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hetfl/errors.hpp"
#include "hetfl/evaluation.hpp"
#include "hetfl/model.hpp"
#include "hetfl/paramset.hpp"
#include "hetfl/protocol.hpp"
#include "hetfl/rng.hpp"
#include "hetfl/strategies.hpp"
#include "hetfl/synthdata.hpp"

namespace hetfl {

enum class WeightSource : std::uint8_t {
  ServerFromStatistics,  // server derives n_i from each client's Statistics message
  ClientReported,        // clients send an AggregationWeight message every round
};

struct ExperimentConfig {
  std::vector<ClientDataset> clients;  // ids ascending
  std::vector<BodyLayer> body;
  StrategyConfig strategy;
  std::size_t rounds = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double sample_rate = 1.0;
  WeightSource weights = WeightSource::ServerFromStatistics;
  bool record_payloads = false;
  // Observer called with the global shared set broadcast in each round.
  std::function<void(int, const ParamSet&)> on_broadcast;
};

struct ClientRoundRecord {
  int client = 0;
  double train_loss = 0.0;
  double valid_metric = 0.0;
};

struct RoundRecord {
  int round = 0;
  std::vector<ClientRoundRecord> clients;  // ascending id
};

struct RecordedPayload {
  int round = 0;
  int sender = 0;
  MessageKind kind{};
  std::vector<std::uint8_t> bytes;
};

struct History {
  std::vector<RoundRecord> rounds;
  std::vector<LogEntry> comm_log;
  std::vector<RecordedPayload> payloads;  // accepted payloads, when recording
};

struct ClientOutcome {
  ClientResult result;                  // test-split metric of the evaluated model
  std::optional<double> unadapted;      // FedMAML: metric before test-time adaptation
};

struct ExperimentResult {
  History history;
  ParamSet global_shared;
  std::vector<Model> final_models;      // the model each client is evaluated with
  std::vector<ClientOutcome> outcomes;  // ascending id
};

enum class FailureKind : std::uint8_t { Protocol, Numeric };

// Raised when a round aborts; carries everything recorded up to that point.
struct ExperimentFailure : Error {
  ExperimentFailure(FailureKind kind, const std::string& what, History history)
      : Error(what), kind(kind), history(std::move(history)) {}
  FailureKind kind;
  History history;
};

struct ClientState {
  const ClientDataset* data = nullptr;
  Model model;                    // evaluated model; Ditto's global track
  std::optional<Model> personal;  // Ditto's personal model
};

struct RoundState {
  int round = 0;
  ParamSet global_shared;
  std::map<int, std::size_t> sample_counts;
  std::map<int, ClientUpdate> updates;
};

inline ModelSpec spec_for(const ClientDataset& ds, const std::vector<BodyLayer>& body) {
  return ModelSpec{ds.feature_dim(), body, ds.task, ds.target_width()};
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
// rethrown for the lowest failing index, so failures do not depend on
// scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t t, std::size_t stride) {
    for (std::size_t i = t; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline double metric_on(const Model& m, const ClientDataset& ds, const std::vector<std::size_t>& rows) {
  if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
  const Batch b = rows_of(ds, rows);
  const Tensor pred = predict(m, b.features);
  try {
    return compute_metric(pred.data(), b.targets.data(), ds.metric);
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace detail

class Server {
 public:
  Server(const ExperimentConfig& cfg, ProtocolMonitor& monitor, History& history)
      : cfg_(cfg), monitor_(monitor), history_(history) {}

  // Validates and, when accepted, returns the decoded payload.
  ParamSet transfer(const Message& msg) {
    const Verdict v = monitor_.validate(msg);
    history_.comm_log = monitor_.log();
    if (v != Verdict::Ok) throw ProtocolViolation(monitor_.log().back());
    if (cfg_.record_payloads) history_.payloads.push_back({msg.round, msg.sender, msg.kind, msg.payload});
    return deserialize(msg.payload);
  }

 private:
  const ExperimentConfig& cfg_;
  ProtocolMonitor& monitor_;
  History& history_;
};

// Messages a client emits after its local update, before validation. The
// rogue fixtures tamper here.
inline std::vector<Message> upload_messages(const ExperimentConfig& cfg, const ClientState& c, const ClientUpdate& u,
                                            int round, bool first_client) {
  const int id = c.data->id;
  const auto kind = cfg.strategy.kind;
  std::vector<Message> out;
  if (cfg.weights == WeightSource::ClientReported) {
    ParamSet w;
    w.add("weight", Tensor::scalar(static_cast<double>(u.sample_count)), ParamRole::SharedBody);
    out.push_back(make_message(MessageKind::AggregationWeight, id, round, w));
  }
  const MessageKind up = kind == StrategyKind::FedMAML ? MessageKind::Gradients : MessageKind::Parameters;
  if (kind == StrategyKind::RogueOversized && first_client) {
    // Raw training rows smuggled inside a parameter payload.
    ParamSet leak = u.shared;
    leak.add("rows", c.data->features.gather_rows(c.data->splits.train), ParamRole::SharedBody);
    out.push_back(make_message(up, id, round, leak));
    return out;
  }
  out.push_back(make_message(up, id, round, u.shared));
  if (kind == StrategyKind::RogueNonWhitelisted && first_client) {
    Message m = make_message(up, id, round, u.shared);
    m.kind = static_cast<MessageKind>(9);
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<std::size_t> sampled_clients(const ExperimentConfig& cfg, int round) {
  const std::size_t n = cfg.clients.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (cfg.sample_rate >= 1.0) return idx;
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.sample_rate * static_cast<double>(n))));
  Rng rng = stream(cfg.seed, StreamPurpose::Split, 0, static_cast<std::uint64_t>(round));
  shuffle(idx, rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// One broadcast -> local update -> upload -> aggregate cycle.
inline RoundState run_round(const RoundState& state, std::vector<ClientState>& clients, const ExperimentConfig& cfg,
                            Server& server, History& history) {
  const auto& strategy = cfg.strategy;
  RoundState next;
  next.round = state.round + 1;
  next.global_shared = state.global_shared;
  next.sample_counts = state.sample_counts;
  const int r = next.round;
  const bool communicates = strategy.kind != StrategyKind::Isolated;
  const auto sampled = sampled_clients(cfg, r);

  if (communicates) {
    const Message down = make_message(MessageKind::Parameters, kServerId, r, state.global_shared);
    for (std::size_t i : sampled) {
      clients[i].model.params = overlay(std::move(clients[i].model.params), server.transfer(down));
    }
    if (cfg.on_broadcast) cfg.on_broadcast(r, state.global_shared);
  }

  const SharedSelector select = [&](const ParamSet& p) { return shared_subset(strategy, p); };
  std::vector<ClientUpdate> updates(sampled.size());
  detail::parallel_for(sampled.size(), cfg.threads, [&](std::size_t k) {
    ClientState& c = clients[sampled[k]];
    const int id = c.data->id;
    const HyperParams hp = strategy.for_client(id);
    const auto uid = static_cast<std::uint64_t>(id);
    const auto ur = static_cast<std::uint64_t>(r);
    switch (strategy.kind) {
      case StrategyKind::FedMAML: {
        Rng rng = stream(cfg.seed, StreamPurpose::Meta, uid, ur);
        updates[k] = fedmaml_client_round(c.model, *c.data, hp, rng, select);
        break;
      }
      case StrategyKind::FedProx: {
        const ParamSet anchor = trainable_subset(state.global_shared);
        const Regularizer reg{&anchor, hp.mu};
        Rng rng = stream(cfg.seed, StreamPurpose::Train, uid, ur);
        updates[k] = local_sgd(c.model, *c.data, hp, rng, select, &reg);
        break;
      }
      case StrategyKind::Ditto: {
        Rng global_rng = stream(cfg.seed, StreamPurpose::GlobalTrack, uid, ur);
        updates[k] = local_sgd(c.model, *c.data, hp, global_rng, select);
        Rng personal_rng = stream(cfg.seed, StreamPurpose::Train, uid, ur);
        updates[k].train_loss = ditto_step(*c.personal, state.global_shared, *c.data, hp.lambda, hp, personal_rng);
        break;
      }
      default: {
        Rng rng = stream(cfg.seed, StreamPurpose::Train, uid, ur);
        updates[k] = local_sgd(c.model, *c.data, hp, rng, select);
        break;
      }
    }
  });

  RoundRecord record{r, {}};
  for (std::size_t k = 0; k < sampled.size(); ++k) {
    const ClientState& c = clients[sampled[k]];
    const Model& evaluated = c.personal ? *c.personal : c.model;
    record.clients.push_back({c.data->id, updates[k].train_loss, detail::metric_on(evaluated, *c.data, c.data->splits.valid)});
  }
  history.rounds.push_back(record);

  if (!communicates) return next;

  std::vector<ParamSet> received;
  std::vector<double> weights;
  for (std::size_t k = 0; k < sampled.size(); ++k) {
    const ClientState& c = clients[sampled[k]];
    const int id = c.data->id;
    std::optional<double> reported;
    ParamSet body;
    for (const Message& m : upload_messages(cfg, c, updates[k], r, k == 0)) {
      ParamSet decoded = server.transfer(m);
      if (m.kind == MessageKind::AggregationWeight) {
        reported = decoded.value("weight").item();
      } else {
        body = std::move(decoded);
      }
    }
    received.push_back(body);
    ClientUpdate u = updates[k];
    u.shared = std::move(body);
    next.updates.emplace(id, std::move(u));
    if (cfg.weights == WeightSource::ClientReported) {
      weights.push_back(*reported);
    } else {
      auto it = next.sample_counts.find(id);
      if (it == next.sample_counts.end()) throw Error("no Statistics received from client " + std::to_string(id));
      weights.push_back(static_cast<double>(it->second));
    }
  }
  const ParamSet avg = weighted_average(received, weights);
  if (strategy.kind == StrategyKind::FedMAML) {
    const double outer = strategy.hp.outer_learning_rate;
    next.global_shared = apply_gradient(state.global_shared, avg, outer);
  } else {
    next.global_shared = avg;
  }
  return next;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.strategy.validate();
  if (cfg.clients.size() < 1) throw ConfigError("experiment needs clients");
  for (std::size_t i = 1; i < cfg.clients.size(); ++i) {
    if (cfg.clients[i].id <= cfg.clients[i - 1].id) throw ConfigError("client ids must be ascending");
  }
  if (!(cfg.sample_rate > 0.0 && cfg.sample_rate <= 1.0)) throw ConfigError("sample_rate must lie in (0, 1]");

  std::vector<ClientState> clients;
  for (const auto& ds : cfg.clients) {
    ClientState c;
    c.data = &ds;
    c.model = build_model(spec_for(ds, cfg.body), cfg.seed);
    if (cfg.strategy.kind == StrategyKind::Ditto) c.personal = c.model;
    clients.push_back(std::move(c));
  }

  ExperimentResult result;
  History& history = result.history;
  RoundState state;
  state.global_shared = shared_subset(cfg.strategy, clients.front().model.params);
  const std::size_t d = cfg.clients.front().feature_dim();
  ProtocolMonitor monitor(Budgets::for_signature(state.global_shared.element_count(), d));
  Server server(cfg, monitor, history);
  const bool communicates = cfg.strategy.kind != StrategyKind::Isolated;

  try {
    if (communicates) {
      for (const auto& c : clients) {
        const auto stats = server.transfer(make_message(MessageKind::Statistics, c.data->id, 0,
                                                        statistics_payload(data_statistics(*c.data))));
        state.sample_counts[c.data->id] = statistics_from_payload(stats).count;
      }
    }
    for (std::size_t r = 0; r < cfg.rounds; ++r) state = run_round(state, clients, cfg, server, history);

    const int final_round = static_cast<int>(cfg.rounds) + 1;
    if (communicates) {
      const Message down = make_message(MessageKind::Parameters, kServerId, final_round, state.global_shared);
      for (auto& c : clients) c.model.params = overlay(std::move(c.model.params), server.transfer(down));
    }
    history.comm_log = monitor.log();

    detail::parallel_for(clients.size(), cfg.threads, [&](std::size_t i) {
      ClientState& c = clients[i];
      const HyperParams hp = cfg.strategy.for_client(c.data->id);
      if (fine_tunes(cfg.strategy.kind)) {
        Rng rng = stream(cfg.seed, StreamPurpose::FineTune, static_cast<std::uint64_t>(c.data->id), 0);
        fine_tune(c.model, *c.data, hp, rng);
      }
    });
  } catch (const ProtocolViolation& v) {
    history.comm_log = monitor.log();
    throw ExperimentFailure(FailureKind::Protocol, v.what(), history);
  } catch (const NumericError& e) {
    history.comm_log = monitor.log();
    throw ExperimentFailure(FailureKind::Numeric, e.what(), history);
  }

  for (auto& c : clients) {
    Model evaluated = c.personal ? *c.personal : c.model;
    ClientOutcome o;
    o.result.client = c.data->id;
    o.result.metric = c.data->metric;
    o.result.sample_count = c.data->size();
    if (cfg.strategy.kind == StrategyKind::FedMAML) {
      o.unadapted = detail::metric_on(evaluated, *c.data, c.data->splits.test);
      const HyperParams hp = cfg.strategy.for_client(c.data->id);
      Rng rng = stream(cfg.seed, StreamPurpose::EvalAdapt, static_cast<std::uint64_t>(c.data->id), 0);
      try {
        maml_adapt(evaluated, *c.data, hp, rng);
      } catch (const NumericError& e) {
        throw ExperimentFailure(FailureKind::Numeric, e.what(), history);
      }
    }
    o.result.value = detail::metric_on(evaluated, *c.data, c.data->splits.test);
    result.outcomes.push_back(o);
    result.final_models.push_back(std::move(evaluated));
  }
  result.global_shared = state.global_shared;
  return result;
}

}  // namespace hetfl
