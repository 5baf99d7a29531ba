#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "medalign/errors.hpp"
#include "medalign/metacog.hpp"
#include "oracles.hpp"

using namespace medalign;

namespace {

const double kLn2 = std::log(2.0);

InfluenceSamples fixed_gain(int from, int to, std::vector<double> gains) {
  InfluenceSamples s{from, to, {}};
  for (double g : gains) s.restarts.emplace_back(0.5 + g, 0.5);
  return s;
}

std::vector<std::pair<int, int>> edge_list(const DependencyGraph& g) {
  std::vector<std::pair<int, int>> out;
  for (const auto& e : g.edges) out.emplace_back(e.from, e.to);
  return out;
}

}  // namespace

TEST(Influence, Score) {
  EXPECT_EQ(influence_score(0.7, 0.7), 0.0);
  EXPECT_NEAR(influence_score(0.8, 0.7), 0.1, 1e-15);
  EXPECT_EQ(influence_score(0.3, 0.9), -influence_score(0.9, 0.3));
  EXPECT_THROW(influence_score(1.2, 0.5), DomainError);
}

TEST(Influence, TTestMatchesIntegratedDensity) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.02, 0.05);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> gains(2 + trial % 6);
    for (auto& v : gains) v = g(rng);
    double mean = 0.0;
    for (double v : gains) mean += v;
    mean /= gains.size();
    double ss = 0.0;
    for (double v : gains) ss += (v - mean) * (v - mean);
    const double t = mean / (std::sqrt(ss / (gains.size() - 1)) / std::sqrt(double(gains.size())));
    EXPECT_NEAR(t_test_p_value(gains), oracle::t_upper_tail(t, gains.size() - 1.0), 1e-6) << trial;
  }
  EXPECT_THROW(t_test_p_value(std::vector<double>{0.1}), ConfigError);
}

TEST(Graph, ZeroGainsGiveNoEdges) {
  std::vector<InfluenceSamples> s;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) s.push_back(fixed_gain(i, j, {0, 0, 0, 0, 0}));
  EXPECT_TRUE(build_dependency_graph(3, s, GraphConfig{}).edges.empty());
}

TEST(Graph, TwoEdgeCycleDropsLowerGain) {
  std::vector<InfluenceSamples> s{fixed_gain(0, 1, {0.19, 0.2, 0.21, 0.2, 0.2}),
                                  fixed_gain(1, 0, {0.09, 0.1, 0.11, 0.1, 0.1})};
  const auto g = build_dependency_graph(2, s, GraphConfig{});
  ASSERT_EQ(g.edges.size(), 1u);
  EXPECT_EQ(g.edges[0].from, 0);
  EXPECT_EQ(g.edges[0].to, 1);
  EXPECT_NEAR(g.edges[0].mean_gain, 0.2, 1e-12);
  EXPECT_TRUE(g.edges[0].significant);
}

TEST(Graph, ThreeCycleDropsItsWeakestEdge) {
  std::vector<InfluenceSamples> s{fixed_gain(0, 1, {0.3, 0.31, 0.29}), fixed_gain(1, 2, {0.2, 0.21, 0.19}),
                                  fixed_gain(2, 0, {0.1, 0.11, 0.09})};
  const auto g = build_dependency_graph(3, s, GraphConfig{});
  EXPECT_EQ(edge_list(g), (std::vector<std::pair<int, int>>{{0, 1}, {1, 2}}));
}

TEST(Graph, RandomTablesAreAcyclicAndEdgesPassTests) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> nodes(2, 8);
  std::uniform_real_distribution<double> base(0.3, 0.6), mean_gain(-0.05, 0.25);
  std::normal_distribution<double> noise(0.0, 0.03);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = nodes(rng);
    GraphConfig cfg;
    cfg.edge_threshold = 0.02;
    std::vector<InfluenceSamples> samples;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        InfluenceSamples s{i, j, {}};
        const double m = mean_gain(rng);
        for (int r = 0; r < 5; ++r) {
          const double b = base(rng);
          s.restarts.emplace_back(std::clamp(b + m + noise(rng), 0.0, 1.0), b);
        }
        samples.push_back(s);
      }
    const auto g = build_dependency_graph(n, samples, cfg);
    EXPECT_FALSE(oracle::has_cycle(n, edge_list(g)));
    for (const auto& e : g.edges) {
      EXPECT_NE(e.from, e.to);
      EXPECT_GT(e.mean_gain, cfg.edge_threshold);
      EXPECT_TRUE(e.significant);
      EXPECT_LT(t_test_p_value(e.gains), cfg.significance_level);
    }
  }
}

TEST(Graph, JsonRoundTripAndParentSelection) {
  DependencyGraph g;
  g.num_nodes = 4;
  g.edges = {{0, 3, 0.3, {0.3}, true}, {1, 3, 0.1, {0.1}, true}, {1, 2, 0.2, {0.2}, true}, {0, 2, 0.2, {0.2}, true}};
  EXPECT_EQ(most_influential_parent(g, 3), 0);
  EXPECT_EQ(most_influential_parent(g, 2), 0);  // tie 0.2 vs 0.2 -> lower id
  EXPECT_EQ(most_influential_parent(g, 1), std::nullopt);
  const auto back = graph_from_json(graph_to_json(g));
  EXPECT_EQ(back.num_nodes, 4);
  EXPECT_EQ(back.edges.size(), 4u);
  const auto j = graph_to_json(g);
  for (const char* k : {"from", "to", "mean_gain", "gains", "significant"}) EXPECT_TRUE(j["edges"][0].contains(k));
  DependencyGraph cyc;
  cyc.num_nodes = 2;
  cyc.edges = {{0, 1, 0.1, {0.1}, true}, {1, 0, 0.1, {0.1}, true}};
  EXPECT_THROW(graph_from_json(graph_to_json(cyc)), DomainError);
}

TEST(Estimator, ZeroWeightsGiveOneHalf) {
  const auto est = ConfidenceEstimator::zeros(4);
  EXPECT_EQ(base_confidence(est, std::vector<double>{1, 2, 3, 4}), 0.5);
}

TEST(Estimator, RandomOutputsStayInsideUnitInterval) {
  std::mt19937_64 rng(3);
  const auto est = ConfidenceEstimator::random(6, 16, 5, 2.0);
  for (int i = 0; i < 200; ++i) {
    const double c = base_confidence(est, gaussian_vector(rng, 6, 3.0));
    EXPECT_GT(c, 0.0);
    EXPECT_LT(c, 1.0);
  }
}

TEST(Estimator, TwoTwoOneForwardPass) {
  auto est = ConfidenceEstimator::zeros(2, 2);
  est.w1 = {1.0, -1.0, 0.5, 2.0};
  est.b1 = {0.0, 0.1};
  est.w2 = {1.0, -2.0};
  est.b2 = 0.3;
  const std::vector<double> h{0.2, 0.4};
  const double a1 = std::tanh(1.0 * 0.2 - 1.0 * 0.4 + 0.0);
  const double a2 = std::tanh(0.5 * 0.2 + 2.0 * 0.4 + 0.1);
  const double z = 1.0 * a1 - 2.0 * a2 + 0.3;
  EXPECT_NEAR(base_logit(est, h), z, 1e-15);
  EXPECT_NEAR(base_confidence(est, h), 1.0 / (1.0 + std::exp(-z)), 1e-15);
}

TEST(Estimator, ParamsRoundTripAndShapes) {
  auto est = ConfidenceEstimator::random(3, 4, 9);
  auto p = est.params();
  EXPECT_EQ(p.size(), est.num_params());
  p[0] += 1.0;
  est.set_params(p);
  EXPECT_EQ(est.params(), p);
  EXPECT_THROW(est.set_params(std::vector<double>(3)), ShapeError);
  EXPECT_THROW(base_confidence(est, std::vector<double>{1, 2}), ShapeError);
  const auto back = estimator_from_json(estimator_to_json(est));
  EXPECT_EQ(back.params(), est.params());
  EXPECT_EQ(back.u_high, est.u_high);
}

TEST(Perturb, Interpolates) {
  const HiddenState h{FeatureVector({1, 0}), 2, 1, 0};
  const FeatureVector mu({0, 1});
  EXPECT_EQ(perturb(h, mu, 0.0).values, h.values);
  EXPECT_EQ(perturb(h, mu, 1.0).values, mu);
  const auto p = perturb(h, mu, 0.1);
  EXPECT_NEAR(p.values[0], 0.9, 1e-15);
  EXPECT_NEAR(p.values[1], 0.1, 1e-15);
  EXPECT_EQ(p.step, 2);
  EXPECT_THROW(perturb(h, FeatureVector({1}), 0.1), ShapeError);
}

TEST(Js, Fixtures) {
  const std::vector<double> a{0.5, 0.5}, b{0.9, 0.1};
  EXPECT_EQ(js_divergence(a, a), 0.0);
  EXPECT_NEAR(js_divergence(std::vector<double>{1, 0}, std::vector<double>{0, 1}), kLn2, 1e-15);
  EXPECT_NEAR(js_divergence(a, b), oracle::js(a, b), 1e-15);
  EXPECT_THROW(js_divergence(std::vector<double>{0.5, 0.6}, a), DomainError);
  EXPECT_THROW(js_divergence(std::vector<double>{1.0}, a), DomainError);
}

TEST(Js, RandomPairsAgreeWithKlOracle) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto p = oracle::random_distribution(rng, 2 + i % 9, i % 3 == 0);
    const auto q = oracle::random_distribution(rng, p.size(), i % 5 == 0);
    EXPECT_NEAR(js_divergence(p, q), oracle::js(p, q), 1e-12);
  }
}

TEST(Stability, Fixtures) {
  const ExpertPredictor ident = [](std::span<const double> x) { return std::vector<double>(x.begin(), x.end()); };
  const std::vector<double> p{0.2, 0.8};
  EXPECT_EQ(stability_adjustment(ident, p, p, kLn2), 0.0);
  EXPECT_NEAR(stability_adjustment(ident, std::vector<double>{1, 0}, std::vector<double>{0, 1}, kLn2), -1.0, 1e-15);
  const std::vector<double> q{0.6, 0.4};
  EXPECT_NEAR(stability_adjustment(ident, p, q, kLn2), -oracle::js(p, q) / kLn2, 1e-15);
}

TEST(Confidence, Fixtures) {
  EXPECT_EQ(confidence(0.3, 0.0, 1.0), sigmoid(0.3));
  EXPECT_NEAR(confidence(0.0, -1.0, 1.0), 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  double prev = 1.0;
  for (double d = 0.0; d >= -1.0; d -= 0.05) {
    const double c = confidence(0.4, d, 1.5);
    EXPECT_LE(c, prev);
    prev = c;
  }
}

TEST(UncertaintyReg, Fixtures) {
  auto est = ConfidenceEstimator::zeros(2);
  est.b2 = std::log(0.9 / 0.1);  // g_base = 0.9 = 1 - u_low
  const std::vector<double> h{0.3, -0.2};
  const std::vector<double> right{0.8, 0.2}, wrong{0.2, 0.8};
  EXPECT_NEAR(uncertainty_reg_loss(est, h, right, 0, 0.1, 0.9), 0.0, 1e-15);
  const auto half = ConfidenceEstimator::zeros(2);
  EXPECT_NEAR(uncertainty_reg_loss(half, h, wrong, 0, 0.1, 0.9), 0.16, 1e-15);
  EXPECT_EQ(target_uncertainty(right, 0, 0.1, 0.9), 0.1);
  EXPECT_EQ(target_uncertainty(wrong, 0, 0.1, 0.9), 0.9);
  EXPECT_THROW(target_uncertainty(right, 2, 0.1, 0.9), DomainError);
}

TEST(UncertaintyReg, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 2 + trial % 7, hid = 1 + trial % 5;
    const auto est = ConfidenceEstimator::random(in, hid, rng(), 0.8);
    const auto h = gaussian_vector(rng, in);
    const auto pred = oracle::random_distribution(rng, 3, false);
    const int label = trial % 3;
    const auto analytic = uncertainty_reg_grad(est, h, pred, label);
    const auto numeric = oracle::numeric_grad(
        [&](const std::vector<double>& p) {
          auto e = est;
          e.set_params(p);
          return uncertainty_reg_loss(e, h, pred, label);
        },
        est.params());
    EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-5) << trial;
  }
}

TEST(TrainEstimator, SeparableCorpusHalvesLoss) {
  std::mt19937_64 rng(6);
  std::vector<LabeledHiddenState> corpus;
  for (int i = 0; i < 100; ++i) {
    const bool right = i % 2 == 0;
    auto h = gaussian_vector(rng, 4, 0.2);
    h[right ? 0 : 1] += 1.0;
    corpus.push_back({FeatureVector(h), right ? std::vector<double>{0.9, 0.1} : std::vector<double>{0.1, 0.9}, 0, 0});
  }
  const auto r = train_estimator(corpus, ConfidenceEstimator::random(4, 16, 7), 0.5, 200);
  ASSERT_EQ(r.loss_trace.size(), 200u);
  EXPECT_LE(r.loss_trace.back(), 0.5 * r.loss_trace.front());
  EXPECT_FALSE(r.single_class_warning);

  const auto still = train_estimator(corpus, ConfidenceEstimator::random(4, 16, 7), 0.0, 10);
  for (double l : still.loss_trace) EXPECT_EQ(l, still.loss_trace.front());

  std::vector<LabeledHiddenState> one_class(corpus.begin(), corpus.begin() + 1);
  EXPECT_TRUE(train_estimator(one_class, ConfidenceEstimator::random(4, 4, 1), 0.1, 1).single_class_warning);
}

TEST(ParentMeans, JsonRoundTrip) {
  ParentMeans m{{0, FeatureVector({1, 2})}, {3, FeatureVector({-1, 0.5})}};
  const auto back = parent_means_from_json(parent_means_to_json(m));
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at(3), m.at(3));
}
