#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "hetfl/evaluation.hpp"
#include "hetfl/rng.hpp"

using namespace hetfl;

TEST(Metric, AccuracyThresholdsAtHalf) {
  const std::vector<double> p{0.9, 0.1, 0.5, 0.49999}, y{1, 0, 1, 0};
  EXPECT_EQ(compute_metric(p, y, MetricKind::Accuracy), 1.0);
  const std::vector<double> y2{1, 0, 0, 1};
  EXPECT_EQ(compute_metric(p, y2, MetricKind::Accuracy), 0.5);
}

TEST(Metric, MseOfPerfectPredictionsIsZero) {
  const std::vector<double> v{1.5, -2, 3};
  EXPECT_EQ(compute_metric(v, v, MetricKind::Mse), 0.0);
  const std::vector<double> p{1, 2}, y{2, 4};
  EXPECT_EQ(compute_metric(p, y, MetricKind::Mse), 2.5);
}

TEST(Metric, PearsonMatchesTwoPassOracle) {
  Rng rng = derive_rng(1, {});
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(30), b(30);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = standard_normal(rng);
      b[i] = 0.5 * a[i] + standard_normal(rng);
    }
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
    ma /= 30, mb /= 30;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      cov += (a[i] - ma) * (b[i] - mb) / 29;
      va += (a[i] - ma) * (a[i] - ma) / 29;
      vb += (b[i] - mb) * (b[i] - mb) / 29;
    }
    EXPECT_NEAR(compute_metric(a, b, MetricKind::PearsonCorrelation), cov / std::sqrt(va * vb), 1e-12);
  }
}

TEST(Metric, Errors) {
  const std::vector<double> a{1, 1, 1}, b{1, 2, 3}, one{1};
  EXPECT_THROW(compute_metric(a, b, MetricKind::PearsonCorrelation), Error);
  EXPECT_THROW(compute_metric(one, one, MetricKind::PearsonCorrelation), Error);
  EXPECT_THROW(compute_metric(a, one, MetricKind::Mse), Error);
  EXPECT_THROW(compute_metric({}, {}, MetricKind::Accuracy), Error);
}

TEST(Metric, Direction) {
  EXPECT_EQ(direction(MetricKind::Accuracy), 1);
  EXPECT_EQ(direction(MetricKind::PearsonCorrelation), 1);
  EXPECT_EQ(direction(MetricKind::Mse), -1);
}

TEST(Aggregate, Examples) {
  const std::vector<double> v{2, 4};
  EXPECT_EQ(aggregate(v, EqualWeight{}), 3.0);
  const std::vector<double> w{0.5, 1.0};
  EXPECT_EQ(aggregate(w, DataSizeWeighted{{1, 3}}), 0.875);
  EXPECT_EQ(aggregate(w, CustomWeights{{1, 0}}), 0.5);
}

TEST(Aggregate, Errors) {
  const std::vector<double> v{2, 4};
  EXPECT_THROW(aggregate({}, EqualWeight{}), Error);
  EXPECT_THROW(aggregate(v, CustomWeights{{0, 0}}), Error);
  EXPECT_THROW(aggregate(v, CustomWeights{{1, -1}}), Error);
  EXPECT_THROW(aggregate(v, DataSizeWeighted{{1}}), Error);
  EXPECT_THROW(aggregate(v, DataSizeWeighted{{1, 0}}), Error);
}

TEST(Aggregate, EqualSizesMatchEqualWeight) {
  Rng rng = derive_rng(2, {});
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(1 + uniform_index(rng, 12));
    for (double& x : v) x = standard_normal(rng);
    const double n = 1 + static_cast<double>(uniform_index(rng, 500));
    EXPECT_NEAR(aggregate(v, EqualWeight{}), aggregate(v, DataSizeWeighted{std::vector<double>(v.size(), n)}), 1e-12);
  }
}

TEST(Improvement, Examples) {
  EXPECT_EQ(improvement_ratio(0.7, 0.7, 1), 0.0);
  EXPECT_NEAR(improvement_ratio(0.724, 0.675, 1), 7.259259259, 1e-8);
  EXPECT_NEAR(improvement_ratio(0.8, 1.0, -1), 20.0, 1e-12);
  EXPECT_THROW(improvement_ratio(1, 0, 1), Error);
  EXPECT_THROW(improvement_ratio(1, 2, 0), Error);
}

TEST(Improvement, SignMatchesDirection) {
  Rng rng = derive_rng(3, {});
  for (int t = 0; t < 200; ++t) {
    const double b = uniform(rng, 0.1, 2.0), m = uniform(rng, 0.1, 2.0);
    EXPECT_EQ(improvement_ratio(m, b, 1) > 0, m > b);
    EXPECT_EQ(improvement_ratio(m, b, -1) > 0, m < b);
  }
}

TEST(Overall, Examples) {
  EXPECT_NEAR(overall_improvement(std::vector<double>{1.07, 2.40, 7.24}), 3.57, 0.005);
  EXPECT_NEAR(overall_improvement(std::vector<double>{0.73, 3.21, 6.66}), 3.53, 0.005);
  EXPECT_EQ(overall_improvement(std::vector<double>{4.2}), 4.2);
  EXPECT_THROW(overall_improvement(std::vector<double>{}), Error);
}

TEST(Overall, PermutationInvariant) {
  Rng rng = derive_rng(4, {});
  for (int t = 0; t < 50; ++t) {
    std::vector<double> r(2 + uniform_index(rng, 10));
    for (double& x : r) x = 10 * standard_normal(rng);
    const double a = overall_improvement(r);
    std::vector<std::size_t> idx(r.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle(idx, rng);
    std::vector<double> p;
    for (auto i : idx) p.push_back(r[i]);
    EXPECT_NEAR(overall_improvement(p), a, 1e-12);
  }
}

TEST(Overall, PublishedRowsReconstruct) {
  struct Row {
    const char* method;
    double overall, c1, c2, c3;
  };
  const Row rows[] = {{"FedAvg", 2.22, 1.03, 3.31, 2.32},  {"FedAvg+FT", 2.47, 1.05, 3.29, 3.08},
                      {"FedProx", 2.32, 0.95, 3.38, 2.62}, {"FedBN", 2.41, 0.99, 3.32, 2.92},
                      {"FedBN+FT", 2.51, 1.00, 3.31, 3.21}, {"Ditto", 3.53, 0.73, 3.21, 6.66},
                      {"FedMAML", 3.57, 1.07, 2.40, 7.24}};
  for (const auto& r : rows) {
    EXPECT_LE(std::abs(overall_improvement(std::vector<double>{r.c1, r.c2, r.c3}) - r.overall), 0.01 + 1e-12)
        << r.method;
  }
}

namespace {

std::vector<ClientResult> sample_run() {
  return {{2, MetricKind::Mse, 0.8, std::nullopt, 30}, {1, MetricKind::Accuracy, 0.9, std::nullopt, 10}};
}

}  // namespace

TEST(Report, AggregatesAndImprovements) {
  const std::vector<ClientResult> base{{1, MetricKind::Accuracy, 0.75, std::nullopt, 10},
                                       {2, MetricKind::Mse, 1.0, std::nullopt, 30}};
  const auto rep = build_report(sample_run(), &base, std::vector<double>{1, 0}, "iso");
  ASSERT_EQ(rep.clients.size(), 2u);
  EXPECT_EQ(rep.clients[0].client, 1);
  EXPECT_NEAR(*rep.improvement[0], 20.0, 1e-12);
  EXPECT_NEAR(*rep.improvement[1], 20.0, 1e-12);
  EXPECT_NEAR(*rep.overall_improvement, 20.0, 1e-12);
  EXPECT_NEAR(rep.equal, 0.85, 1e-15);
  EXPECT_NEAR(rep.data_weighted, 0.25 * 0.9 + 0.75 * 0.8, 1e-15);
  EXPECT_NEAR(*rep.custom, 0.9, 1e-15);
  EXPECT_EQ(rep.baseline_id, "iso");
}

TEST(Report, NoBaselineMeansNoOverall) {
  const auto rep = build_report(sample_run(), nullptr);
  EXPECT_FALSE(rep.overall_improvement);
  EXPECT_FALSE(rep.improvement[0]);
  EXPECT_FALSE(rep.custom);
}

TEST(Report, SelfComparisonIsZero) {
  const auto run = sample_run();
  const auto rep = build_report(run, &run);
  for (const auto& r : rep.improvement) EXPECT_EQ(*r, 0.0);
  EXPECT_EQ(*rep.overall_improvement, 0.0);
}

TEST(Report, Mismatches) {
  auto base = sample_run();
  base.pop_back();
  EXPECT_THROW(build_report(sample_run(), &base), Error);
  base = sample_run();
  base[0].client = 9;
  EXPECT_THROW(build_report(sample_run(), &base), Error);
  base = sample_run();
  base[0].metric = MetricKind::Accuracy;
  EXPECT_THROW(build_report(sample_run(), &base), Error);
  auto dup = sample_run();
  dup[1].client = 2;
  EXPECT_THROW(build_report(dup, nullptr), Error);
}

TEST(Report, CsvRoundTrip) {
  const auto run = sample_run();
  const auto rep = build_report(run, &run);
  std::ostringstream os;
  write_results_csv(os, rep);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kResultsHeader);
  std::istringstream is(os.str());
  const auto back = read_results_csv(is);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].client, 1);
  EXPECT_EQ(back[0].value, 0.9);
  EXPECT_EQ(*back[1].baseline, 0.8);
  EXPECT_EQ(back[1].sample_count, 30u);
  EXPECT_EQ(back[1].metric, MetricKind::Mse);

  std::istringstream bad("client,metric\n");
  EXPECT_THROW(read_results_csv(bad), ParseError);
  std::istringstream bad_row(std::string(kResultsHeader) + "\n1,accuracy,x,,,3\n");
  EXPECT_THROW(read_results_csv(bad_row), ParseError);
}

TEST(Report, AggregateJson) {
  const std::vector<ClientResult> run{{1, MetricKind::Accuracy, 0.5, std::nullopt, 10},
                                      {2, MetricKind::Mse, 1.0, std::nullopt, 30}};
  const auto rep = build_report(run, &run, std::vector<double>{0, 1});
  std::ostringstream os;
  write_aggregate_json(os, rep);
  EXPECT_EQ(os.str(), "{\"equal\": 0.75, \"data_weighted\": 0.875, \"custom\": 1, \"overall_improvement\": 0}\n");
}

TEST(FormatReal, ShortestRoundTrip) {
  EXPECT_EQ(format_real(0.1), "0.1");
  EXPECT_EQ(format_real(2.0), "2");
  EXPECT_EQ(std::stod(format_real(1.0 / 3.0)), 1.0 / 3.0);
}
