#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "medalign/errors.hpp"
#include "medalign/knowledge.hpp"
#include "medalign/routing.hpp"
#include "oracles.hpp"

using namespace medalign;

namespace {

DomainKB random_kb(std::mt19937_64& rng, int domain, std::size_t n, std::size_t dim) {
  DomainKB kb(domain, dim);
  for (std::size_t i = 0; i < n; ++i)
    kb.add({"doc" + std::to_string(domain) + "_" + std::to_string(i), FeatureVector(gaussian_vector(rng, dim)), ""});
  return kb;
}

MultimodalQuery unit_query(std::vector<double> v) {
  const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (auto& x : v) x /= n;
  return {FeatureVector({0.0}), FeatureVector({0.0}), FeatureVector(v)};
}

// Exhaustive scan: unit-normalize every stored vector, score, sort by
// (similarity desc, id asc).
std::vector<Hit> brute_force(const std::vector<std::pair<std::string, std::vector<double>>>& docs,
                             std::vector<double> q, std::size_t k) {
  double qn = 0.0;
  for (double x : q) qn += x * x;
  qn = std::sqrt(qn);
  for (double& x : q) x /= qn;
  std::vector<Hit> all;
  for (const auto& [id, v] : docs) {
    double nn = 0.0;
    for (double x : v) nn += x * x;
    nn = std::sqrt(nn);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += (v[i] / nn) * q[i];
    all.push_back({id, std::clamp(s, -1.0, 1.0)});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.similarity != b.similarity ? a.similarity > b.similarity : a.doc_id < b.doc_id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace

TEST(Encoder, MatchesFrozenFixture) {
  std::ifstream is(std::filesystem::path(MEDALIGN_TEST_DIR) / "fixtures" / "encoder_fixture.json");
  ASSERT_TRUE(is);
  const auto fx = nlohmann::json::parse(is);
  const auto image = fx["image"].get<std::vector<double>>();
  const auto question = fx["question"].get<std::vector<double>>();
  ToyQueryEncoder enc(image.size(), question.size(), fx["output_dim"].get<std::size_t>(), fx["seed"].get<std::uint64_t>());
  const auto q = embed_query(enc, FeatureVector(image), FeatureVector(question));
  const auto expect = fx["embedding"].get<std::vector<double>>();
  ASSERT_EQ(q.embedding.dim(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(q.embedding[i], expect[i], 1e-12);
}

TEST(Encoder, DeterministicUnitOutput) {
  ToyQueryEncoder enc(5, 4, 12);
  std::mt19937_64 rng(3);
  const FeatureVector a(gaussian_vector(rng, 5)), b(gaussian_vector(rng, 4));
  const auto q1 = embed_query(enc, a, b);
  const auto q2 = embed_query(ToyQueryEncoder(5, 4, 12), a, b);
  EXPECT_EQ(q1.embedding, q2.embedding);
  EXPECT_NEAR(norm(q1.embedding.values()), 1.0, 1e-9);
  EXPECT_THROW(embed_query(enc, b, a), ShapeError);
}

TEST(DomainKB, AddValidates) {
  DomainKB kb(0, 3);
  kb.add({"a", FeatureVector({1, 0, 0}), "x"});
  EXPECT_THROW(kb.add({"a", FeatureVector({0, 1, 0}), "y"}), DomainError);
  EXPECT_THROW(kb.add({"b", FeatureVector({1, 0}), "y"}), ShapeError);
  EXPECT_THROW(kb.add({"c", FeatureVector({0, 0, 0}), "y"}), DomainError);
  kb.add({"c", FeatureVector({0, 2, 0}), "y"});
  EXPECT_EQ(kb.size(), 2u);
  EXPECT_DOUBLE_EQ(kb.unit_rows()[4], 1.0);
}

TEST(Knn, SingletonAndSelfMatch) {
  DomainKB kb(1, 3);
  kb.add({"only", FeatureVector({1, 1, 0}), ""});
  const auto q = unit_query({1, 0, 0});
  const auto r = knn(kb, q, 5);
  ASSERT_EQ(r.hits.size(), 1u);
  EXPECT_NEAR(r.hits[0].similarity, 1.0 / std::sqrt(2.0), 1e-15);

  std::mt19937_64 rng(4);
  auto big = random_kb(rng, 2, 50, 8);
  const auto row = big.unit_rows().subspan(17 * 8, 8);
  const auto self = knn(big, unit_query({row.begin(), row.end()}), 3);
  EXPECT_EQ(self.hits[0].doc_id, big.ids()[17]);
  EXPECT_NEAR(self.hits[0].similarity, 1.0, 1e-9);
}

TEST(Knn, Errors) {
  DomainKB kb(0, 2);
  EXPECT_THROW(knn(kb, unit_query({1, 0}), 5), EmptyResultError);
  kb.add({"a", FeatureVector({1, 0}), ""});
  EXPECT_THROW(knn(kb, unit_query({1, 0}), 0), DomainError);
  EXPECT_EQ(kDefaultTopK, 5u);
}

TEST(Knn, TiesOrderedById) {
  DomainKB kb(0, 2);
  kb.add({"zeta", FeatureVector({1, 0}), ""});
  kb.add({"alpha", FeatureVector({2, 0}), ""});
  kb.add({"mid", FeatureVector({0, 1}), ""});
  const auto r = knn(kb, unit_query({1, 0}), 2);
  EXPECT_EQ(r.hits[0].doc_id, "alpha");
  EXPECT_EQ(r.hits[1].doc_id, "zeta");
}

TEST(Knn, MatchesBruteForceOnRandomKbs) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> ndocs(1, 512), dims(1, 64), ks(1, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = ndocs(rng), dim = dims(rng), k = ks(rng);
    DomainKB kb(0, dim);
    std::vector<std::pair<std::string, std::vector<double>>> docs;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = gaussian_vector(rng, dim);
      if (i > 0 && i % 7 == 0) v = docs[i - 1].second;  // exact duplicates force ties
      docs.emplace_back("d" + std::to_string(rng() % 100000) + "_" + std::to_string(i), v);
      kb.add({docs.back().first, FeatureVector(v), ""});
    }
    const auto q = unit_query(gaussian_vector(rng, dim));
    const auto r = knn(kb, q, k, trial % 2 ? Execution::kParallel : Execution::kSerial);
    EXPECT_EQ(r.hits, brute_force(docs, q.embedding.vec(), k)) << "trial " << trial;
  }
}

TEST(RetrieveAll, SerialAndParallelAgree) {
  std::mt19937_64 rng(6);
  std::vector<DomainKB> kbs;
  for (int d = 0; d < 5; ++d) kbs.push_back(random_kb(rng, d, 100, 16));
  const auto q = unit_query(gaussian_vector(rng, 16));
  const auto a = retrieve_all(kbs, q, 5, Execution::kSerial);
  const auto b = retrieve_all(kbs, q, 5, Execution::kParallel);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t d = 0; d < 5; ++d) EXPECT_EQ(retrieval_to_json(a[d]).dump(), retrieval_to_json(b[d]).dump());
  EXPECT_EQ(a[2], knn(kbs[2], q, 5));
  std::vector<DomainKB> dup{kbs[0], kbs[0]};
  const auto c = retrieve_all(dup, q, 5);
  EXPECT_EQ(c[0].hits, c[1].hits);
}

TEST(KbFiles, SaveLoadRoundTrip) {
  std::mt19937_64 rng(7);
  std::vector<DomainKB> kbs{random_kb(rng, 0, 4, 3), random_kb(rng, 1, 6, 3)};
  const auto dir = std::filesystem::temp_directory_path() / "medalign_kb_roundtrip";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_kbs(dir, kbs);
  const auto back = load_kbs(dir / "manifest.json");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].ids().size(), 6u);
  const auto q = unit_query({1, 2, 3});
  EXPECT_EQ(knn(back[1], q, 3), knn(kbs[1], q, 3));
  EXPECT_THROW(load_kbs(dir / "absent.json"), MissingArtifactError);
}

TEST(Routing, AggregateScores) {
  RetrievalResult r{0, {{"a", 0.9}, {"b", 0.8}, {"c", 0.7}}, 3};
  EXPECT_NEAR(aggregate_scores(r), 0.8, 1e-15);
  RetrievalResult h{0, {{"a", 0.5}, {"b", 0.5}}, 2};
  EXPECT_EQ(aggregate_scores(h), 0.5);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 50; ++t) {
    RetrievalResult x{0, {}, 0};
    double sum = 0.0;
    for (int i = 0; i <= t % 9; ++i) {
      x.hits.push_back({std::to_string(i), u(rng)});
      sum += x.hits.back().similarity;
    }
    EXPECT_NEAR(aggregate_scores(x), sum / x.hits.size(), 1e-15);
  }
}

TEST(Routing, CalibrateStatsMatchesTwoPassOracle) {
  std::mt19937_64 rng(9);
  std::vector<DomainKB> kbs;
  for (int d = 0; d < 3; ++d) kbs.push_back(random_kb(rng, d, 40, 6));
  std::vector<MultimodalQuery> held;
  for (int i = 0; i < 60; ++i) held.push_back(unit_query(gaussian_vector(rng, 6)));
  const auto stats = calibrate_stats(held, kbs, 5, 1e-8, "unit-test");
  for (std::size_t d = 0; d < 3; ++d) {
    std::vector<double> s;
    for (const auto& q : held) {
      const auto r = knn(kbs[d], q, 5, Execution::kSerial);
      double sum = 0.0;
      for (const auto& h : r.hits) sum += h.similarity;
      s.push_back(sum / r.hits.size());
    }
    double mean = 0.0;
    for (double x : s) mean += x;
    mean /= s.size();
    double var = 0.0;
    for (double x : s) var += (x - mean) * (x - mean);
    var /= s.size();
    EXPECT_NEAR(stats[d].mu, mean, 1e-12);
    EXPECT_NEAR(stats[d].sigma, std::sqrt(var), 1e-12);
    EXPECT_EQ(stats[d].sample_size, 60u);
    EXPECT_EQ(stats[d].provenance, "unit-test");
  }
  EXPECT_THROW(calibrate_stats(std::vector<MultimodalQuery>{}, kbs, 5), DomainError);
}

TEST(Routing, TwoScoreStatsAndIdenticalScores) {
  DomainKB kb(0, 2);
  kb.add({"x", FeatureVector({1, 0}), ""});
  // single-doc KB with k=1: aggregated score is the cosine itself
  const double a = 0.2, b = 0.4;
  std::vector<MultimodalQuery> held{unit_query({a, std::sqrt(1 - a * a)}), unit_query({b, std::sqrt(1 - b * b)})};
  std::vector<DomainKB> kbs{kb};
  const auto s = calibrate_stats(held, kbs, 1);
  EXPECT_NEAR(s[0].mu, 0.3, 1e-12);
  EXPECT_NEAR(s[0].sigma, 0.1, 1e-12);
  std::vector<MultimodalQuery> same{held[0], held[0], held[0]};
  const auto z = calibrate_stats(same, kbs, 1);
  EXPECT_EQ(z[0].sigma, 0.0);
  EXPECT_TRUE(std::isfinite(normalize_score(0.5, z[0])));
}

TEST(Routing, NormalizeScore) {
  DomainStats st{0, 0.5, 0.1, 1e-8, 10, "h"};
  EXPECT_EQ(normalize_score(0.5, st), 0.0);
  EXPECT_DOUBLE_EQ(normalize_score(0.8, st), (0.8 - 0.5) / (0.1 + 1e-8));
  DomainStats flat{0, 0.5, 0.0, 1e-8, 10, "h"};
  EXPECT_DOUBLE_EQ(normalize_score(0.6, flat), (0.6 - 0.5) / 1e-8);
}

TEST(Routing, GateFixtures) {
  const auto u = gate(std::vector<double>{0.3, 0.3, 0.3, 0.3}, 1.0);
  for (double p : u.probs) EXPECT_NEAR(p, 0.25, 1e-15);
  const auto two = gate(std::vector<double>{1.0, 0.0}, 1.0);
  EXPECT_NEAR(two.probs[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(two.probs[1], std::exp(-1.0) / (1.0 + std::exp(-1.0)), 1e-15);
  const auto hot = gate(std::vector<double>{1.0, 0.0}, 0.5);
  const auto scaled = gate(std::vector<double>{2.0, 0.0}, 1.0);
  EXPECT_NEAR(hot.probs[0], scaled.probs[0], 1e-15);
  const auto extreme = gate(std::vector<double>{1e6, -1e6, 0.0}, 1e-3);
  for (double p : extreme.probs) EXPECT_GT(p, 0.0);
  EXPECT_THROW(gate(std::vector<double>{1.0}, 0.0), DomainError);
}

TEST(Routing, SelectExpertsFixtures) {
  RoutingDistribution peaked;
  peaked.probs = {0.9, 0.05, 0.05};
  const auto s = select_experts(peaked, 0.8, 2);
  const double h = -(0.9 * std::log(0.9) + 2 * 0.05 * std::log(0.05));
  EXPECT_NEAR(s.entropy, h, 1e-15);
  EXPECT_NEAR(s.normalized_entropy, h / std::log(3.0), 1e-15);
  EXPECT_NEAR(s.normalized_entropy, 0.359, 1e-3);
  EXPECT_FALSE(s.multi_activated);
  EXPECT_EQ(s.active_experts, std::vector<int>{0});

  RoutingDistribution flat;
  flat.probs = {0.25, 0.25, 0.25, 0.25};
  const auto m = select_experts(flat, 0.8, 2);
  EXPECT_NEAR(m.normalized_entropy, 1.0, 1e-12);
  EXPECT_TRUE(m.multi_activated);
  EXPECT_EQ(m.active_experts, (std::vector<int>{0, 1}));

  RoutingDistribution one;
  one.probs = {1.0};
  const auto o = select_experts(one, 0.0, 3);
  EXPECT_EQ(o.active_experts, std::vector<int>{0});
  EXPECT_FALSE(o.multi_activated);
}

TEST(Routing, ArgmaxInvariantUnderTranslationAndTemperature) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> shift(-50, 50), temp(0.01, 20);
  for (int t = 0; t < 500; ++t) {
    const auto z = gaussian_vector(rng, 2 + t % 7);
    const auto base = gate(z, 1.0);
    const auto arg = std::max_element(base.probs.begin(), base.probs.end()) - base.probs.begin();
    auto moved = z;
    const double c = shift(rng);
    for (auto& v : moved) v += c;
    const auto g = gate(moved, temp(rng));
    EXPECT_EQ(std::max_element(g.probs.begin(), g.probs.end()) - g.probs.begin(), arg);
    double sum = 0.0;
    for (double p : g.probs) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Routing, StatsJsonRoundTrip) {
  std::vector<DomainStats> s{{0, 0.1, 0.2, 1e-8, 5, "h"}, {1, 0.3, 0.0, 1e-6, 5, "h"}};
  const auto back = stats_from_json(stats_to_json(s));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].epsilon, 1e-6);
  EXPECT_EQ(back[0].provenance, "h");
}

TEST(Routing, RouteEndToEnd) {
  std::mt19937_64 rng(11);
  std::vector<DomainKB> kbs;
  for (int d = 0; d < 3; ++d) kbs.push_back(random_kb(rng, d, 30, 5));
  std::vector<MultimodalQuery> held;
  for (int i = 0; i < 20; ++i) held.push_back(unit_query(gaussian_vector(rng, 5)));
  const auto stats = calibrate_stats(held, kbs, 5);
  const auto dec = route(unit_query(gaussian_vector(rng, 5)), kbs, stats, RoutingConfig{});
  EXPECT_EQ(dec.retrieval.size(), 3u);
  EXPECT_EQ(dec.distribution.raw_scores.size(), 3u);
  const auto entry = routing_log_entry("q1", dec);
  for (const char* key : {"query_id", "raw_scores", "normalized_scores", "probs", "active_experts", "entropy"})
    EXPECT_TRUE(entry.contains(key)) << key;
  std::vector<DomainStats> short_stats(stats.begin(), stats.begin() + 2);
  EXPECT_THROW(route(held[0], kbs, short_stats, RoutingConfig{}), ConfigError);
}
