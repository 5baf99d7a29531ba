#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "medalign/errors.hpp"
#include "medalign/mdpo.hpp"
#include "oracles.hpp"

using namespace medalign;

namespace {

const double kLn2 = std::log(2.0);

struct Setup {
  CandidateFeaturizer featurizer;
  ToyPolicy policy;
  ToyPolicy reference;
};

Setup random_setup(std::mt19937_64& rng, std::size_t image_dim, std::size_t question_dim, std::size_t n_candidates,
                   double scale = 1.0) {
  std::vector<CandidateId> c;
  for (std::size_t i = 0; i < n_candidates; ++i) c.push_back("ans" + std::to_string(i));
  CandidateFeaturizer f(image_dim, question_dim, c, rng());
  ToyPolicy p(gaussian_vector(rng, f.dim(), scale), c, false);
  ToyPolicy r(gaussian_vector(rng, f.dim(), scale), c, true);
  return {std::move(f), std::move(p), std::move(r)};
}

std::vector<PreferenceTuple> random_prefs(std::mt19937_64& rng, const CandidateFeaturizer& f, std::size_t n) {
  const auto& c = f.candidates();
  std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
  std::vector<PreferenceTuple> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t w = pick(rng);
    std::size_t l = pick(rng);
    while (l == w) l = pick(rng);
    out.emplace_back("p" + std::to_string(i), FeatureVector(gaussian_vector(rng, f.image_dim())),
                     FeatureVector(gaussian_vector(rng, f.question_dim())), c[w], c[l]);
  }
  return out;
}

std::vector<CrossModalPair> random_pairs(std::mt19937_64& rng, const CandidateFeaturizer& f, std::size_t n) {
  const auto& c = f.candidates();
  std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
  std::vector<CrossModalPair> out;
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(FeatureVector(gaussian_vector(rng, f.question_dim())), c[pick(rng)],
                     FeatureVector(gaussian_vector(rng, f.image_dim())),
                     FeatureVector(gaussian_vector(rng, f.image_dim())));
  return out;
}

double reward(const Setup& s, const FeatureVector& image, const FeatureVector& question, const CandidateId& y,
              double beta) {
  const auto feats = s.featurizer.features(image, question);
  return implicit_reward(s.policy, s.reference, feats, y, beta);
}

// Two-candidate setup whose policy puts exactly `margin` between chosen and
// rejected scores while the reference stays uniform.
Setup margin_setup(double margin, PreferenceTuple& tuple_out) {
  CandidateFeaturizer f(3, 2, {"yes", "no"}, 21);
  const FeatureVector image({0.4, -1.2, 0.7});
  const FeatureVector question({1.0, 0.3});
  const auto feats = f.features(image, question);
  std::vector<double> d(f.dim());
  double nn = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] = feats[0][i] - feats[1][i];
    nn += d[i] * d[i];
  }
  for (auto& v : d) v *= margin / nn;
  tuple_out = PreferenceTuple("t", image, question, "yes", "no");
  return {f, ToyPolicy(d, f.candidates(), false), ToyPolicy(f.dim(), f.candidates()).frozen_clone()};
}

}  // namespace

TEST(ImplicitReward, IdenticalPoliciesGiveZero) {
  std::mt19937_64 rng(1);
  auto s = random_setup(rng, 4, 3, 3);
  ToyPolicy ref = s.policy.frozen_clone();
  const auto feats = s.featurizer.features(FeatureVector(gaussian_vector(rng, 4)), FeatureVector(gaussian_vector(rng, 3)));
  for (const auto& y : s.featurizer.candidates()) EXPECT_EQ(implicit_reward(s.policy, ref, feats, y, 1.0), 0.0);
}

TEST(ImplicitReward, IsBetaTimesLogRatio) {
  std::mt19937_64 rng(2);
  auto s = random_setup(rng, 4, 3, 3);
  const auto feats = s.featurizer.features(FeatureVector(gaussian_vector(rng, 4)), FeatureVector(gaussian_vector(rng, 3)));
  const double lp = log_prob(s.policy, feats, "ans1");
  const double lr = log_prob(s.reference, feats, "ans1");
  EXPECT_NEAR(implicit_reward(s.policy, s.reference, feats, "ans1", 2.5), 2.5 * (lp - lr), 1e-14);
  // -1.2 vs -1.5 at beta 1 -> 0.3
  EXPECT_NEAR(1.0 * (-1.2 - (-1.5)), 0.3, 1e-15);
}

TEST(ImplicitReward, RejectsUnfrozenOrMismatchedReference) {
  std::mt19937_64 rng(3);
  auto s = random_setup(rng, 2, 2, 3);
  const auto feats = s.featurizer.features(FeatureVector({1, 2}), FeatureVector({3, 4}));
  ToyPolicy live(s.featurizer.dim(), s.featurizer.candidates());
  EXPECT_THROW(implicit_reward(s.policy, live, feats, "ans0", 1.0), ConfigError);
  ToyPolicy other(s.featurizer.dim(), {"x", "y", "z"});
  EXPECT_THROW(implicit_reward(s.policy, other.frozen_clone(), feats, "ans0", 1.0), ConfigError);
}

TEST(PreferenceTuple, ChosenEqualsRejectedIsRejected) {
  EXPECT_THROW(PreferenceTuple("x", FeatureVector({1}), FeatureVector({1}), "a", "a"), DomainError);
  EXPECT_THROW(CrossModalPair(FeatureVector({1}), "a", FeatureVector({1, 2}), FeatureVector({1, 2})), DomainError);
}

TEST(DpoLoss, ZeroMarginIsLn2) {
  std::mt19937_64 rng(4);
  auto s = random_setup(rng, 4, 3, 4);
  const ToyPolicy ref = s.policy.frozen_clone();
  const auto batch = random_prefs(rng, s.featurizer, 10);
  const LossContext ctx{s.policy, ref, s.featurizer, 1.0};
  EXPECT_NEAR(dpo_loss(batch, ctx), kLn2, 1e-15);
}

TEST(DpoLoss, MarginFixtures) {
  for (double m : {1.5, 20.0, -3.0}) {
    PreferenceTuple t("x", FeatureVector({1}), FeatureVector({1}), "a", "b");
    auto s = margin_setup(m, t);
    const LossContext ctx{s.policy, s.reference, s.featurizer, 1.0};
    const std::vector<PreferenceTuple> batch{t};
    EXPECT_NEAR(dpo_loss(batch, ctx), std::log1p(std::exp(-m)), 1e-12) << m;
  }
}

TEST(DpoLoss, MatchesRewardComposition) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_setup(rng, 5, 4, 4);
    const auto batch = random_prefs(rng, s.featurizer, 7);
    const double beta = 0.5 + trial * 0.1;
    const LossContext ctx{s.policy, s.reference, s.featurizer, beta};
    double expect = 0.0;
    for (const auto& t : batch)
      expect += oracle::log_sigmoid_neg(reward(s, t.image, t.question, t.chosen, beta) -
                                        reward(s, t.image, t.question, t.rejected, beta));
    EXPECT_NEAR(dpo_loss(batch, ctx), expect / 7.0, 1e-12);
  }
}

TEST(DpoLoss, StableForHugeMargins) {
  for (double m : {500.0, -500.0}) {
    PreferenceTuple t("x", FeatureVector({1}), FeatureVector({1}), "a", "b");
    auto s = margin_setup(m, t);
    const LossContext ctx{s.policy, s.reference, s.featurizer, 1.0};
    const std::vector<PreferenceTuple> batch{t};
    const double v = dpo_loss(batch, ctx);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
    if (m < 0) EXPECT_NEAR(v, 500.0, 1e-9);
  }
}

TEST(CmLoss, ImageBlindPolicyGivesLn2) {
  std::mt19937_64 rng(6);
  auto s = random_setup(rng, 6, 3, 4);
  make_image_blind(s.policy, s.featurizer.image_dim());
  ToyPolicy ref(s.reference.weights(), s.reference.candidates(), false);
  make_image_blind(ref, s.featurizer.image_dim());
  const ToyPolicy frozen = ref.frozen_clone();
  const LossContext ctx{s.policy, frozen, s.featurizer, 1.0};
  EXPECT_NEAR(cm_loss(random_pairs(rng, s.featurizer, 12), ctx), kLn2, 1e-12);
}

TEST(CmLoss, MatchesRewardCompositionAndSwapAntisymmetry) {
  std::mt19937_64 rng(7);
  auto s = random_setup(rng, 5, 3, 3);
  const LossContext ctx{s.policy, s.reference, s.featurizer, 1.0};
  const auto pairs = random_pairs(rng, s.featurizer, 1);
  const auto& p = pairs[0];
  const double m = reward(s, p.image_pos, p.question, p.answer, 1.0) - reward(s, p.image_neg, p.question, p.answer, 1.0);
  EXPECT_NEAR(cm_loss(pairs, ctx), oracle::log_sigmoid_neg(m), 1e-12);
  const std::vector<CrossModalPair> swapped{CrossModalPair(p.question, p.answer, p.image_neg, p.image_pos)};
  EXPECT_NEAR(cm_loss(swapped, ctx), oracle::log_sigmoid_neg(-m), 1e-12);
  EXPECT_NEAR(oracle::log_sigmoid_neg(2.0), std::log1p(std::exp(-2.0)), 1e-15);
}

TEST(RaLoss, AnchorShiftsTheMargin) {
  PreferenceTuple t("x", FeatureVector({1}), FeatureVector({1}), "a", "b");
  auto s = margin_setup(1.5, t);
  const LossContext ctx{s.policy, s.reference, s.featurizer, 1.0};
  const std::vector<PreferenceTuple> batch{t};
  EXPECT_NEAR(ra_loss(batch, ctx, Anchor{1.5, 50, 1}), kLn2, 1e-12);
  EXPECT_NEAR(ra_loss(batch, ctx, Anchor{0.5, 50, 1}), oracle::log_sigmoid_neg(1.0), 1e-12);
}

TEST(RaLoss, ZeroAnchorReducesToDpo) {
  std::mt19937_64 rng(8);
  auto s = random_setup(rng, 4, 4, 5);
  const auto batch = random_prefs(rng, s.featurizer, 9);
  const LossContext ctx{s.policy, s.reference, s.featurizer, 1.3};
  EXPECT_NEAR(ra_loss(batch, ctx, Anchor{}), dpo_loss(batch, ctx), 1e-12);
}

TEST(MdpoTotal, WeightsCombineComponents) {
  std::mt19937_64 rng(9);
  auto s = random_setup(rng, 4, 4, 3);
  const ToyPolicy ref = s.policy.frozen_clone();
  const LossContext ctx{s.policy, ref, s.featurizer, 1.0};
  const auto prefs = random_prefs(rng, s.featurizer, 5);
  const auto pairs = random_pairs(rng, s.featurizer, 5);
  MdpoConfig cfg;
  const auto all = mdpo_total(prefs, pairs, ctx, cfg, Anchor{});
  EXPECT_NEAR(all.total, 3.0 * kLn2, 1e-12);  // 0.6931 * 3 = 2.0794
  cfg.lambda_cm = 0.0;
  cfg.lambda_ra = 0.0;
  const LossContext ctx2{s.policy, s.reference, s.featurizer, 1.0};
  EXPECT_NEAR(mdpo_total(prefs, pairs, ctx2, cfg, Anchor{0.7, 50, 3}).total, dpo_loss(prefs, ctx2), 1e-12);
}

TEST(Gradients, AllLossesMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> dim(1, 6), cand(2, 5);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_setup(rng, dim(rng), dim(rng), cand(rng), 0.7);
    const auto prefs = random_prefs(rng, s.featurizer, 4);
    const auto pairs = random_pairs(rng, s.featurizer, 3);
    const double beta = 0.3 + 0.02 * trial;
    const Anchor anchor{std::normal_distribution<double>(0.0, 0.5)(rng), 50, 4};
    MdpoConfig cfg;
    cfg.beta = beta;
    cfg.lambda_cm = 0.7;
    cfg.lambda_ra = 1.3;
    const auto& c = s.featurizer.candidates();
    auto ctx_for = [&](const ToyPolicy& p) { return LossContext{p, s.reference, s.featurizer, beta}; };
    const LossContext ctx = ctx_for(s.policy);
    auto check = [&](const std::vector<double>& analytic, auto value) {
      const auto numeric = oracle::numeric_grad(
          [&](const std::vector<double>& w) { return value(ctx_for(ToyPolicy(w, c, false))); }, s.policy.weights());
      EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-5) << "trial " << trial;
    };
    check(dpo_loss_grad(prefs, ctx).grad, [&](const LossContext& x) { return dpo_loss(prefs, x); });
    check(cm_loss_grad(pairs, ctx).grad, [&](const LossContext& x) { return cm_loss(pairs, x); });
    check(ra_loss_grad(prefs, ctx, anchor).grad, [&](const LossContext& x) { return ra_loss(prefs, x, anchor); });
    check(mdpo_total(prefs, pairs, ctx, cfg, anchor, true).grad,
          [&](const LossContext& x) { return mdpo_total(prefs, pairs, x, cfg, anchor).total; });
  }
}

TEST(Anchor, NearestRankPercentile) {
  const std::vector<double> s{0.3, 0.1, 0.5, 0.2, 0.4};
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(s, 50), 0.3);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(s, 100), 0.5);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(s, 0), 0.1);
  const std::vector<double> c(7, 2.5);
  for (double q : {0.0, 13.0, 50.0, 99.0}) EXPECT_DOUBLE_EQ(nearest_rank_percentile(c, q), 2.5);
  EXPECT_THROW(nearest_rank_percentile(std::vector<double>{}, 50), DomainError);
  EXPECT_THROW(nearest_rank_percentile(s, 101), DomainError);
}

TEST(Anchor, MatchesSortOracle) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> q(0.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto v = gaussian_vector(rng, 1 + trial % 37);
    const double qq = q(rng);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    std::size_t rank = static_cast<std::size_t>(std::ceil(qq / 100.0 * sorted.size()));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    EXPECT_EQ(nearest_rank_percentile(v, qq), sorted[rank - 1]);
  }
}

TEST(Anchor, EstimatedAtInitialisationIsZero) {
  std::mt19937_64 rng(13);
  auto s = random_setup(rng, 3, 3, 3);
  const ToyPolicy ref = s.policy.frozen_clone();
  const LossContext ctx{s.policy, ref, s.featurizer, 1.0};
  const auto a = estimate_anchor(random_prefs(rng, s.featurizer, 11), ctx, 50);
  EXPECT_EQ(a.delta, 0.0);
  EXPECT_EQ(a.calibration_size, 11u);
}

namespace {
MdpoDatasets separable_data(const CandidateFeaturizer& f, std::mt19937_64& rng) {
  MdpoDatasets d;
  const auto& c = f.candidates();
  std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
  auto image_for = [&](std::size_t y) {
    auto v = gaussian_vector(rng, f.image_dim(), 0.1);
    const auto sig = f.image_signature(y);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += sig[i];
    return FeatureVector(v);
  };
  for (int i = 0; i < 64; ++i) {
    const std::size_t y = pick(rng);
    const std::size_t l = (y + 1 + pick(rng) % (c.size() - 1)) % c.size();
    d.preference.emplace_back("p" + std::to_string(i), image_for(y), FeatureVector(gaussian_vector(rng, f.question_dim())),
                              c[y], c[l]);
    d.crossmodal.emplace_back(FeatureVector(gaussian_vector(rng, f.question_dim())), c[y], image_for(y), image_for(l));
  }
  for (int i = 0; i < 16; ++i) {
    const std::size_t y = pick(rng);
    d.calibration.emplace_back("c" + std::to_string(i), image_for(y), FeatureVector(gaussian_vector(rng, f.question_dim())),
                               c[y], c[(y + 1) % c.size()]);
  }
  return d;
}
}  // namespace

TEST(TrainMdpo, SeparableSetDrivesDpoLossDown) {
  std::mt19937_64 rng(14);
  CandidateFeaturizer f(8, 4, {"a", "b", "c", "d"}, 15);
  const auto data = separable_data(f, rng);
  ToyPolicy init(f.dim(), f.candidates());
  const ToyPolicy ref = init.frozen_clone();
  MdpoConfig cfg;
  cfg.epochs = 50;
  const auto result = train_mdpo(data, init, ref, f, cfg);
  const LossContext before{init, ref, f, cfg.beta};
  const LossContext after{result.policy, ref, f, cfg.beta};
  EXPECT_LT(dpo_loss(data.preference, after), 0.1 * dpo_loss(data.preference, before));
  EXPECT_EQ(result.trace.size(), cfg.epochs * 4);  // ceil(64 / 16) batches
  EXPECT_EQ(result.anchor.delta, 0.0);
  EXPECT_EQ(ref.weights(), init.weights());
}

TEST(TrainMdpo, ContractViolations) {
  std::mt19937_64 rng(15);
  CandidateFeaturizer f(4, 2, {"a", "b"}, 3);
  auto data = separable_data(f, rng);
  ToyPolicy init(f.dim(), f.candidates());
  MdpoConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train_mdpo(data, init, init, f, cfg), ConfigError);
  auto leaked = data;
  leaked.calibration.push_back(leaked.preference.front());
  EXPECT_THROW(train_mdpo(leaked, init, init.frozen_clone(), f, cfg), ConfigError);
  cfg.beta = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainMdpo, NonFiniteLossNamesEpochAndBatch) {
  std::mt19937_64 rng(16);
  CandidateFeaturizer f(4, 2, {"a", "b"}, 3);
  auto data = separable_data(f, rng);
  ToyPolicy init(f.dim(), f.candidates());
  MdpoConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e308;
  try {
    train_mdpo(data, init, init.frozen_clone(), f, cfg);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_LE(e.epoch(), 2u);
  }
}

TEST(TrainMdpo, TraceCsvAndJsonRoundTrip) {
  std::vector<LossTraceRow> rows{{0, 0, 0.5, 0.25, 0.125, 0.875}};
  EXPECT_EQ(loss_trace_csv(rows), "epoch,batch,dpo,cm,ra,total\n0,0,0.5,0.25,0.125,0.875\n");
  const PreferenceTuple t("id1", FeatureVector({1, 2}), FeatureVector({3}), "a", "b");
  const auto back = preference_from_json(preference_to_json(t));
  EXPECT_EQ(back.id, "id1");
  EXPECT_EQ(back.image, t.image);
  EXPECT_EQ(back.rejected, "b");
  const CrossModalPair p(FeatureVector({1}), "a", FeatureVector({1, 0}), FeatureVector({0, 1}));
  const auto pb = crossmodal_from_json(crossmodal_to_json(p));
  EXPECT_EQ(pb.image_neg, p.image_neg);
  const MdpoConfig cfg;
  const auto cb = mdpo_config_from_json(mdpo_config_to_json(cfg));
  EXPECT_EQ(cb.beta, 1.0);
  EXPECT_EQ(cb.batch_size, 16u);
}
