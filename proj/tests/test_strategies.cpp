#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "hetfl/strategies.hpp"

using namespace hetfl;

namespace {

using Vec = std::vector<double>;

// Linear regression data with every row in the training split.
ClientDataset linear_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = derive_rng(seed, {});
  ClientDataset ds;
  ds.id = 1;
  ds.task = TaskKind::Regression;
  ds.metric = MetricKind::Mse;
  ds.features = Tensor({n, d});
  ds.targets = Tensor({n, 1});
  for (double& v : ds.features.data()) v = standard_normal(rng);
  for (std::size_t r = 0; r < n; ++r) {
    double y = 0.3;
    for (std::size_t j = 0; j < d; ++j) y += (j + 1.0) * 0.5 * ds.features.at(r, j);
    ds.targets[r] = y + 0.2 * standard_normal(rng);
  }
  ds.splits.train.resize(n);
  std::iota(ds.splits.train.begin(), ds.splits.train.end(), std::size_t{0});
  return ds;
}

ClientDataset binary_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  ClientDataset ds = linear_data(n, d, seed);
  ds.task = TaskKind::BinaryClassification;
  ds.metric = MetricKind::Accuracy;
  for (double& y : ds.targets.data()) y = y > 0.3 ? 1.0 : 0.0;
  return ds;
}

ModelSpec linear_spec(std::size_t d) { return ModelSpec{d, {}, TaskKind::Regression, 1}; }

ModelSpec deep_spec(std::size_t d) {
  return ModelSpec{d, {{5, Activation::Tanh, true}, {4, Activation::Relu, false}}, TaskKind::BinaryClassification, 1};
}

// theta = [w; b] for a head-only linear model.
Vec theta_of(const Model& m) {
  Vec t(m.params.value("head.weight").data().begin(), m.params.value("head.weight").data().end());
  t.push_back(m.params.value("head.bias")[0]);
  return t;
}

// Augmented design matrix rows [x, 1].
std::vector<Vec> design(const Batch& b) {
  std::vector<Vec> a(b.features.rows());
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t j = 0; j < b.features.cols(); ++j) a[r].push_back(b.features.at(r, j));
    a[r].push_back(1.0);
  }
  return a;
}

// Gradient of mean squared error at theta: (2/n) A^T (A theta - y).
Vec mse_grad(const Batch& b, const Vec& theta) {
  const auto a = design(b);
  Vec g(theta.size(), 0.0);
  const double n = static_cast<double>(a.size());
  for (std::size_t r = 0; r < a.size(); ++r) {
    double res = -b.targets[r];
    for (std::size_t j = 0; j < theta.size(); ++j) res += a[r][j] * theta[j];
    for (std::size_t j = 0; j < theta.size(); ++j) g[j] += 2.0 / n * a[r][j] * res;
  }
  return g;
}

// Hessian of the same: (2/n) A^T A.
std::vector<Vec> mse_hessian(const Batch& b) {
  const auto a = design(b);
  const std::size_t p = a.front().size();
  std::vector<Vec> h(p, Vec(p, 0.0));
  for (const auto& row : a) {
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) h[i][j] += 2.0 / static_cast<double>(a.size()) * row[i] * row[j];
    }
  }
  return h;
}

// Gaussian elimination with partial pivoting.
Vec solve(std::vector<Vec> m, Vec rhs) {
  const std::size_t n = rhs.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    }
    std::swap(m[c], m[piv]);
    std::swap(rhs[c], rhs[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
      rhs[r] -= f * rhs[c];
    }
  }
  Vec x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = rhs[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= m[i][k] * x[k];
    x[i] = s / m[i][i];
  }
  return x;
}

ParamSet single(const std::string& name, Vec values, ParamRole role = ParamRole::SharedBody) {
  ParamSet p;
  const std::size_t n = values.size();
  p.add(name, Tensor({n}, std::move(values)), role);
  return p;
}

Batch all_rows(const ClientDataset& ds) { return rows_of(ds, ds.splits.train); }

}  // namespace

// ---- local training ----

TEST(LocalSgd, ZeroRateLeavesTrainableEntriesUnchanged) {
  const auto ds = binary_data(20, 3, 1);
  Model m = build_model(deep_spec(3), 2);
  const ParamSet before = m.params;
  Rng rng = derive_rng(3, {});
  (void)sgd_steps(m, ds, 3, 0.0, 8, rng);
  for (const auto& n : trainable_names(before)) EXPECT_TRUE(bitwise_equal(m.params.value(n), before.value(n))) << n;
}

TEST(LocalSgd, FullBatchStepMatchesClosedForm) {
  const auto ds = linear_data(12, 3, 4);
  Model m = build_model(linear_spec(3), 5);
  const Vec t0 = theta_of(m);
  const Vec g = mse_grad(all_rows(ds), t0);
  HyperParams hp;
  hp.learning_rate = 0.07;
  hp.batch_size = 64;
  hp.local_steps = 1;
  Rng rng = derive_rng(6, {});
  const auto u = local_sgd(m, ds, hp, rng, [](const ParamSet& p) { return p; });
  const Vec t1 = theta_of(m);
  for (std::size_t j = 0; j < t0.size(); ++j) EXPECT_NEAR(t1[j], t0[j] - 0.07 * g[j], 1e-13);
  EXPECT_EQ(u.sample_count, 12u);
  EXPECT_TRUE(bitwise_equal(u.shared, m.params));
}

TEST(LocalSgd, DeterministicForFixedStream) {
  const auto ds = binary_data(40, 3, 7);
  HyperParams hp;
  hp.local_steps = 5;
  hp.batch_size = 8;
  auto run = [&] {
    Model m = build_model(deep_spec(3), 8);
    Rng rng = stream(11, StreamPurpose::Train, 1, 1);
    return local_sgd(m, ds, hp, rng, fedbn_shared_subset);
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(bitwise_equal(a.shared, b.shared));
  EXPECT_EQ(a.train_loss, b.train_loss);
}

TEST(LocalSgd, RunningStatsMoveDuringTraining) {
  const auto ds = binary_data(16, 3, 9);
  Model m = build_model(deep_spec(3), 1);
  Rng rng = derive_rng(1, {});
  (void)sgd_steps(m, ds, 1, 0.01, 16, rng);
  EXPECT_NE(m.params.value("body.0.bn.running_mean"), Tensor({5}, 0.0));
}

TEST(BatchSampler, EachEpochVisitsEveryRowOnce) {
  Rng rng = derive_rng(2, {});
  BatchSampler s({0, 1, 2, 3, 4, 5, 6}, 3, rng);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::size_t expect : {3u, 3u, 1u}) {
      const auto b = s.next();
      EXPECT_EQ(b.size(), expect);
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(seen, (std::multiset<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  }
}

// ---- aggregation ----

TEST(FedAvg, WeightedExample) {
  const std::vector<ClientUpdate> u{{single("w", {1, 3}), 1, 0}, {single("w", {3, 7}), 3, 0}};
  const auto g = fedavg_aggregate(u);
  EXPECT_EQ(g.value("w")[0], 2.5);
  EXPECT_EQ(g.value("w")[1], 6.0);
}

TEST(FedAvg, MatchesBruteForceMean) {
  Rng rng = derive_rng(12, {});
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + uniform_index(rng, 6), len = 1 + uniform_index(rng, 5);
    std::vector<ClientUpdate> u(k);
    for (auto& x : u) {
      Vec v(len);
      for (double& e : v) e = standard_normal(rng);
      x.shared = single("w", v);
      x.shared.add("z", Tensor({1}, standard_normal(rng)), ParamRole::BatchNorm);
      x.sample_count = 1 + uniform_index(rng, 1000);
    }
    const auto g = fedavg_aggregate(u);
    double total = 0;
    for (const auto& x : u) total += static_cast<double>(x.sample_count);
    for (const std::string name : {"w", "z"}) {
      for (std::size_t j = 0; j < u[0].shared.value(name).numel(); ++j) {
        double want = 0;
        for (const auto& x : u) want += static_cast<double>(x.sample_count) * x.shared.value(name)[j];
        EXPECT_NEAR(g.value(name)[j], want / total, 1e-12);
      }
    }
    EXPECT_EQ(g.role("z"), ParamRole::BatchNorm);

    std::vector<ClientUpdate> rev(u.rbegin(), u.rend());
    const auto h = fedavg_aggregate(rev);
    for (std::size_t j = 0; j < len; ++j) EXPECT_NEAR(h.value("w")[j], g.value("w")[j], 1e-12);
  }
}

TEST(FedAvg, IdenticalUpdatesAreFixedPoint) {
  const auto p = single("w", {0.1, -2.5, 1e3});
  const std::vector<ClientUpdate> u{{p, 5, 0}, {p, 17, 0}, {p, 1, 0}};
  const auto g = fedavg_aggregate(u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.value("w")[j], p.value("w")[j], 1e-15 * std::abs(p.value("w")[j]));
}

TEST(FedAvg, LargestBenchmarkClientWeight) {
  const auto& sizes = graph_dc_sizes();
  std::vector<ClientUpdate> u;
  for (std::size_t n : sizes) u.push_back({single("w", {n == 4337 ? 1.0 : 0.0}), n, 0});
  EXPECT_NEAR(fedavg_aggregate(u).value("w")[0], 4337.0 / 19421.0, 1e-15);
  EXPECT_NEAR(fedavg_aggregate(u).value("w")[0], 0.22332, 1e-5);
}

TEST(FedAvg, Errors) {
  EXPECT_THROW(fedavg_aggregate({}), Error);
  std::vector<ClientUpdate> u{{single("w", {1}), 1, 0}, {single("v", {1}), 1, 0}};
  EXPECT_THROW(fedavg_aggregate(u), Error);
  u[1].shared = single("w", {1, 2});
  EXPECT_THROW(fedavg_aggregate(u), Error);
  u[1].shared = single("w", {1});
  u[1].sample_count = 0;
  EXPECT_THROW(fedavg_aggregate(u), Error);
}

// ---- proximal term ----

TEST(FedProx, ProximalGradientExample) {
  const ParamSet w = single("w", {1, -2});
  const ParamSet g = single("w", {0, 0});
  const auto p = param_inputs(w);
  const auto obj = fedprox_loss(ad::constant(Tensor::scalar(0.0)), p, g, 0.5);
  const auto grad = ad::evaluate(ad::gradient(obj, {"w"}).at("w"), bindings(w));
  EXPECT_EQ(grad[0], 0.5);
  EXPECT_EQ(grad[1], -1.0);
  EXPECT_EQ(ad::evaluate(obj, bindings(w)).item(), 0.25 * 5.0);
}

TEST(FedProx, ZeroMuEqualsPlainTraining) {
  const auto ds = binary_data(30, 3, 13);
  HyperParams hp;
  hp.local_steps = 4;
  hp.batch_size = 8;
  Model a = build_model(deep_spec(3), 1), b = a;
  ParamSet anchor = trainable_subset(a.params);
  for (const auto& n : anchor.names()) {
    for (double& v : anchor.value(n).data()) v += 1.0;
  }
  const Regularizer reg{&anchor, 0.0};
  Rng ra = derive_rng(4, {}), rb = derive_rng(4, {});
  (void)local_sgd(a, ds, hp, ra, fedbn_shared_subset);
  (void)local_sgd(b, ds, hp, rb, fedbn_shared_subset, &reg);
  for (const auto& n : a.params.names()) EXPECT_NEAR(a.params.value(n)[0], b.params.value(n)[0], 1e-14) << n;
}

// ---- shared subsets ----

TEST(SharedSubset, HeadsNeverLeaveTheClient) {
  const ParamSet p = build_model(deep_spec(3), 0).params;
  for (auto k : {StrategyKind::FedAvg, StrategyKind::FedAvgFT, StrategyKind::FedProx, StrategyKind::FedBN,
                 StrategyKind::FedBNFT, StrategyKind::Ditto, StrategyKind::FedMAML, StrategyKind::Isolated}) {
    StrategyConfig cfg;
    cfg.kind = k;
    for (const auto& [name, e] : shared_subset(cfg, p)) EXPECT_NE(e.role, ParamRole::PersonalHead) << to_string(k);
  }
  StrategyConfig iso;
  iso.kind = StrategyKind::Isolated;
  EXPECT_EQ(shared_subset(iso, p).size(), 0u);
}

TEST(SharedSubset, FedBnKeepsBatchNormLocal) {
  const ParamSet p = build_model(deep_spec(3), 0).params;
  const auto s = fedbn_shared_subset(p);
  const auto names = s.names();
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()),
            (std::set<std::string>{"body.0.bias", "body.0.weight", "body.1.bias", "body.1.weight"}));
  StrategyConfig avg;
  EXPECT_TRUE(shared_subset(avg, p).contains("body.0.bn.running_mean"));
  avg.share_heads = true;
  EXPECT_TRUE(shared_subset(avg, p).contains("head.weight"));
  StrategyConfig maml;
  maml.kind = StrategyKind::FedMAML;
  EXPECT_TRUE(shared_subset(maml, p).contains("body.0.bn.gamma"));
  EXPECT_FALSE(shared_subset(maml, p).contains("body.0.bn.running_var"));
}

TEST(StrategyConfig, OverridesAndValidation) {
  StrategyConfig cfg;
  cfg.overrides[2]["learning_rate"] = 0.5;
  cfg.overrides[2]["local_steps"] = 3;
  EXPECT_EQ(cfg.for_client(2).learning_rate, 0.5);
  EXPECT_EQ(cfg.for_client(2).local_steps, 3u);
  EXPECT_EQ(cfg.for_client(1).learning_rate, cfg.hp.learning_rate);
  EXPECT_NO_THROW(cfg.validate());
  cfg.overrides[2]["learning_rate"] = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.overrides.clear();
  cfg.overrides[1]["local_steps"] = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.overrides.clear();
  cfg.share_heads = true;
  cfg.kind = StrategyKind::FedBN;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_strategy_kind("FedSomething"), ConfigError);
  EXPECT_EQ(parse_strategy_kind("FedBNFT"), StrategyKind::FedBNFT);
}

// ---- Ditto ----

TEST(Ditto, ZeroLambdaIsPlainLocalTraining) {
  const auto ds = binary_data(30, 3, 14);
  HyperParams hp;
  hp.local_steps = 6;
  hp.batch_size = 7;
  Model personal = build_model(deep_spec(3), 2), iso = personal;
  ParamSet global = fedbn_shared_subset(build_model(deep_spec(3), 9).params);
  Rng ra = derive_rng(5, {}), rb = derive_rng(5, {});
  (void)ditto_step(personal, global, ds, 0.0, hp, ra);
  (void)sgd_steps(iso, ds, hp.local_steps, hp.learning_rate, hp.batch_size, rb);
  for (const auto& n : iso.params.names()) {
    for (std::size_t j = 0; j < iso.params.value(n).numel(); ++j) {
      EXPECT_NEAR(personal.params.value(n)[j], iso.params.value(n)[j], 1e-14) << n;
    }
  }
}

TEST(Ditto, HugeLambdaPinsToGlobal) {
  const auto ds = binary_data(30, 3, 15);
  HyperParams hp;
  hp.local_steps = 1;
  hp.batch_size = 30;
  hp.learning_rate = 1e-6;
  Model personal = build_model(deep_spec(3), 2);
  const ParamSet global = fedbn_shared_subset(build_model(deep_spec(3), 9).params);
  Rng rng = derive_rng(6, {});
  (void)ditto_step(personal, global, ds, 1e6, hp, rng);
  for (const auto& [name, e] : global) {
    for (std::size_t j = 0; j < e.value.numel(); ++j) EXPECT_NEAR(personal.params.value(name)[j], e.value[j], 1e-5);
  }
}

TEST(Ditto, QuadraticFixedPoint) {
  const auto ds = linear_data(25, 3, 16);
  const double lambda = 0.8;
  Model personal = build_model(linear_spec(3), 1);
  ParamSet anchor;
  anchor.add("head.weight", Tensor({3, 1}, std::vector<double>{1.0, -1.0, 0.5}), ParamRole::PersonalHead);
  anchor.add("head.bias", Tensor({1}, 2.0), ParamRole::PersonalHead);
  HyperParams hp;
  hp.learning_rate = 0.05;
  hp.batch_size = 25;
  hp.local_steps = 2000;
  Rng rng = derive_rng(7, {});
  (void)ditto_step(personal, anchor, ds, lambda, hp, rng);

  // (H + lambda I) v = (2/n) A^T y + lambda w
  const Batch b = all_rows(ds);
  auto m = mse_hessian(b);
  const Vec zero(4, 0.0);
  Vec rhs = mse_grad(b, zero);
  const Vec w{1.0, -1.0, 0.5, 2.0};
  for (std::size_t i = 0; i < 4; ++i) {
    m[i][i] += lambda;
    rhs[i] = -rhs[i] + lambda * w[i];
  }
  const Vec want = solve(m, rhs);
  const Vec got = theta_of(personal);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
}

// ---- FedMAML ----

TEST(FedMaml, ZeroInnerRateIsPlainQueryGradient) {
  const auto ds = linear_data(20, 3, 17);
  const Model m = build_model(linear_spec(3), 3);
  const std::vector<std::size_t> s{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, q{10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  const auto g = fedmaml_update(m.spec, m.params, rows_of(ds, s), rows_of(ds, q), 0.0);
  const Vec want = mse_grad(rows_of(ds, q), theta_of(m));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.value("head.weight")[j], want[j], 1e-13);
  EXPECT_NEAR(g.value("head.bias")[0], want[3], 1e-13);
}

TEST(FedMaml, QuadraticClosedForm) {
  // grad = (I - alpha H_s) grad L_q(theta - alpha grad L_s(theta))
  const auto ds = linear_data(20, 2, 18);
  const Model m = build_model(linear_spec(2), 4);
  const std::vector<std::size_t> s{0, 2, 4, 6, 8, 10, 12}, q{1, 3, 5, 7, 9, 11, 13, 15};
  const Batch sb = rows_of(ds, s), qb = rows_of(ds, q);
  for (double alpha : {0.01, 0.1, 0.3}) {
    const Vec t = theta_of(m);
    const Vec gs = mse_grad(sb, t);
    Vec adapted(t.size());
    for (std::size_t j = 0; j < t.size(); ++j) adapted[j] = t[j] - alpha * gs[j];
    const Vec gq = mse_grad(qb, adapted);
    const auto h = mse_hessian(sb);
    Vec want(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t j = 0; j < t.size(); ++j) want[i] += ((i == j ? 1.0 : 0.0) - alpha * h[i][j]) * gq[j];
    }
    const auto g = fedmaml_update(m.spec, m.params, sb, qb, alpha);
    EXPECT_NEAR(g.value("head.weight")[0], want[0], 1e-12);
    EXPECT_NEAR(g.value("head.weight")[1], want[1], 1e-12);
    EXPECT_NEAR(g.value("head.bias")[0], want[2], 1e-12);
  }
}

TEST(FedMaml, MatchesFiniteDifferenceOfComposedMap) {
  const auto ds = binary_data(24, 3, 19);
  const Model m = build_model(deep_spec(3), 6);
  const std::vector<std::size_t> s{0, 1, 2, 3, 4, 5, 6, 7}, q{8, 9, 10, 11, 12, 13, 14, 15};
  const Batch sb = rows_of(ds, s), qb = rows_of(ds, q);
  const double alpha = 0.2;
  const auto names = trainable_names(m.params);

  // F(theta) = L_q(theta - alpha * grad L_s(theta)), inner gradient from the first-order engine.
  auto composed = [&](const ParamSet& theta) {
    const auto grads = ad::gradient(loss(m.spec, param_inputs(theta), sb, Mode::Train), names);
    Model adapted{m.spec, theta};
    for (const auto& n : names) {
      const Tensor g = ad::evaluate(grads.at(n), bindings(theta));
      Tensor& w = adapted.params.value(n);
      for (std::size_t j = 0; j < w.numel(); ++j) w[j] -= alpha * g[j];
    }
    return loss_value(adapted, qb, Mode::Train);
  };

  const auto g = fedmaml_update(m.spec, m.params, sb, qb, alpha);
  const double h = 1e-5;
  for (const auto& n : names) {
    for (std::size_t j = 0; j < m.params.value(n).numel(); ++j) {
      ParamSet plus = m.params, minus = m.params;
      plus.value(n)[j] += h;
      minus.value(n)[j] -= h;
      const double fd = (composed(plus) - composed(minus)) / (2 * h);
      EXPECT_NEAR(g.value(n)[j], fd, 1e-6 * std::max(1.0, std::abs(fd))) << n << "[" << j << "]";
    }
  }
}

TEST(FedMaml, SupportAndQueryAreDisjoint) {
  const auto ds = binary_data(9, 2, 20);
  Rng rng = derive_rng(8, {});
  const auto [s, q] = support_query_split(ds, 16, rng);
  EXPECT_EQ(s.size(), 4u);
  EXPECT_EQ(q.size(), 4u);
  for (auto i : s) EXPECT_EQ(std::count(q.begin(), q.end(), i), 0);
}

TEST(FedMaml, ClientRoundSplitsSharedAndLocalGradients) {
  const auto ds = binary_data(40, 3, 21);
  Model m = build_model(deep_spec(3), 7);
  const ParamSet before = m.params;
  HyperParams hp;
  hp.batch_size = 8;
  hp.local_steps = 2;
  StrategyConfig cfg;
  cfg.kind = StrategyKind::FedMAML;
  Rng rng = derive_rng(9, {});
  const auto u = fedmaml_client_round(m, ds, hp, rng, [&](const ParamSet& p) { return shared_subset(cfg, p); });
  EXPECT_FALSE(u.shared.contains("head.weight"));
  EXPECT_TRUE(u.shared.contains("body.0.weight"));
  // shared entries wait for the server; the head moves locally
  EXPECT_TRUE(bitwise_equal(m.params.value("body.0.weight"), before.value("body.0.weight")));
  EXPECT_FALSE(bitwise_equal(m.params.value("head.weight"), before.value("head.weight")));
}

TEST(ApplyGradient, Descends) {
  const auto p = apply_gradient(single("w", {1, 2}), single("w", {0.5, -1}), 0.1);
  EXPECT_EQ(p.value("w")[0], 1 - 0.05);
  EXPECT_EQ(p.value("w")[1], 2 + 0.1);
  EXPECT_THROW(apply_gradient(single("w", {1, 2}), single("w", {1}), 0.1), ShapeError);
}

// ---- fine-tuning ----

TEST(FineTune, ZeroStepsIsIdentity) {
  const auto ds = binary_data(20, 3, 22);
  Model m = build_model(deep_spec(3), 1);
  const ParamSet before = m.params;
  HyperParams hp;
  hp.finetune_steps = 0;
  Rng rng = derive_rng(1, {});
  fine_tune(m, ds, hp, rng);
  EXPECT_TRUE(bitwise_equal(m.params, before));
}

TEST(FineTune, ConvergesToStationaryPointOnQuadratic) {
  const auto ds = linear_data(30, 3, 23);
  Model m = build_model(linear_spec(3), 1);
  HyperParams hp;
  hp.finetune_steps = 3000;
  hp.finetune_learning_rate = 0.05;
  hp.learning_rate = 1e3;  // unused by fine-tuning
  hp.batch_size = 30;
  Rng rng = derive_rng(1, {});
  fine_tune(m, ds, hp, rng);
  for (double g : mse_grad(all_rows(ds), theta_of(m))) EXPECT_LT(std::abs(g), 1e-9);
}

TEST(FedMaml, ScalarQuadratic) {
  // One row with a zero feature and two regression outputs: the loss is
  // 0.5 * sum_k (b_k - c_k)^2, so each bias coordinate is the scalar quadratic.
  ClientDataset ds;
  ds.task = TaskKind::Regression;
  ds.features = Tensor({1, 1}, 0.0);
  ds.targets = Tensor({1, 2}, std::vector<double>{1.5, -0.25});
  Model m = build_model(ModelSpec{1, {}, TaskKind::Regression, 2}, 0);
  m.params.value("head.bias")[0] = 3.0;
  m.params.value("head.bias")[1] = 0.5;
  const Batch b{ds.features, ds.targets};
  for (double alpha : {0.0, 0.1, 0.5, 0.9, 1.7}) {
    const auto g = fedmaml_update(m.spec, m.params, b, b, alpha);
    EXPECT_NEAR(g.value("head.bias")[0], (1 - alpha) * (1 - alpha) * (3.0 - 1.5), 1e-12);
    EXPECT_NEAR(g.value("head.bias")[1], (1 - alpha) * (1 - alpha) * (0.5 + 0.25), 1e-12);
    EXPECT_EQ(g.value("head.weight")[0], 0.0);
  }
}
