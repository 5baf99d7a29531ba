#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/policy.hpp"

namespace medalign {

// (x, y_w, y_l) with x = (image, question).
struct PreferenceTuple {
  PreferenceTuple(std::string id, FeatureVector image, FeatureVector question, CandidateId chosen,
                  CandidateId rejected);

  std::string id;
  FeatureVector image;
  FeatureVector question;
  CandidateId chosen;
  CandidateId rejected;
};

// (I_w, I_l, Q, A): the same question/answer under a supporting and a contradicting image.
struct CrossModalPair {
  CrossModalPair(FeatureVector question, CandidateId answer, FeatureVector image_pos,
                 FeatureVector image_neg);

  FeatureVector question;
  CandidateId answer;
  FeatureVector image_pos;
  FeatureVector image_neg;
};

struct Anchor {
  double delta = 0.0;
  double percentile_q = 50.0;
  std::size_t calibration_size = 0;
};

struct MdpoConfig {
  double beta = 1.0;
  double lambda_cm = 1.0;
  double lambda_ra = 1.0;
  double learning_rate = 0.05;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double percentile_q = 50.0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json mdpo_config_to_json(const MdpoConfig& c);
MdpoConfig mdpo_config_from_json(const nlohmann::json& j);

// Everything the losses need to score a batch.
struct LossContext {
  const ToyPolicy& policy;
  const ToyPolicy& reference;
  const CandidateFeaturizer& featurizer;
  double beta = 1.0;
};

// beta * (log pi(y|x) - log pi_ref(y|x)).
double implicit_reward(const ToyPolicy& policy, const ToyPolicy& reference,
                       std::span<const FeatureVector> features, const CandidateId& answer, double beta);

struct LossWithGrad {
  double value = 0.0;
  std::vector<double> grad;  // d value / d policy weights; empty when not requested
};

double dpo_loss(std::span<const PreferenceTuple> batch, const LossContext& ctx);
double cm_loss(std::span<const CrossModalPair> batch, const LossContext& ctx);
double ra_loss(std::span<const PreferenceTuple> batch, const LossContext& ctx, const Anchor& anchor);

LossWithGrad dpo_loss_grad(std::span<const PreferenceTuple> batch, const LossContext& ctx);
LossWithGrad cm_loss_grad(std::span<const CrossModalPair> batch, const LossContext& ctx);
LossWithGrad ra_loss_grad(std::span<const PreferenceTuple> batch, const LossContext& ctx,
                          const Anchor& anchor);

struct MdpoLoss {
  double total = 0.0;
  double dpo = 0.0;
  double cm = 0.0;
  double ra = 0.0;
  std::vector<double> grad;
};

MdpoLoss mdpo_total(std::span<const PreferenceTuple> batch_pref, std::span<const CrossModalPair> batch_cm,
                    const LossContext& ctx, const MdpoConfig& config, const Anchor& anchor,
                    bool with_grad = false);

// Nearest-rank percentile: the ceil(q/100 * n)-th order statistic (the minimum for q = 0).
double nearest_rank_percentile(std::span<const double> sample, double q);

// Anchor from the implicit rewards of the chosen answers, evaluated with `policy`
// against `reference` at call time.
Anchor estimate_anchor(std::span<const PreferenceTuple> calibration, const LossContext& ctx, double q);
Anchor anchor_from_rewards(std::span<const double> rewards, double q);

struct MdpoDatasets {
  std::vector<PreferenceTuple> preference;
  std::vector<CrossModalPair> crossmodal;
  std::vector<PreferenceTuple> calibration;
  // When set, the anchor is taken from this reward sample instead of the calibration set.
  std::optional<std::vector<double>> reward_sample;
};

struct LossTraceRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double dpo = 0.0;
  double cm = 0.0;
  double ra = 0.0;
  double total = 0.0;
};

struct MdpoTrainResult {
  ToyPolicy policy;
  Anchor anchor;
  std::vector<LossTraceRow> trace;
};

MdpoTrainResult train_mdpo(const MdpoDatasets& data, ToyPolicy policy, const ToyPolicy& reference,
                           const CandidateFeaturizer& featurizer, const MdpoConfig& config);

std::string loss_trace_csv(std::span<const LossTraceRow> trace);

nlohmann::json preference_to_json(const PreferenceTuple& t);
PreferenceTuple preference_from_json(const nlohmann::json& j);
nlohmann::json crossmodal_to_json(const CrossModalPair& p);
CrossModalPair crossmodal_from_json(const nlohmann::json& j);

}  // namespace medalign
