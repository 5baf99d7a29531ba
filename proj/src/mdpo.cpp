#include "medalign/mdpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "medalign/errors.hpp"

namespace medalign {

PreferenceTuple::PreferenceTuple(std::string id_, FeatureVector image_, FeatureVector question_,
                                 CandidateId chosen_, CandidateId rejected_)
    : id(std::move(id_)),
      image(std::move(image_)),
      question(std::move(question_)),
      chosen(std::move(chosen_)),
      rejected(std::move(rejected_)) {
  if (chosen == rejected) throw DomainError("preference tuple " + id + ": chosen equals rejected");
}

CrossModalPair::CrossModalPair(FeatureVector question_, CandidateId answer_, FeatureVector image_pos_,
                               FeatureVector image_neg_)
    : question(std::move(question_)),
      answer(std::move(answer_)),
      image_pos(std::move(image_pos_)),
      image_neg(std::move(image_neg_)) {
  if (image_pos.dim() != image_neg.dim()) throw ShapeError("cross-modal pair: image dims differ");
  if (image_pos == image_neg) throw DomainError("cross-modal pair: supporting and contradicting images are identical");
}

void MdpoConfig::validate() const {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(lambda_cm >= 0.0) || !(lambda_ra >= 0.0)) throw ConfigError("loss weights must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(percentile_q >= 0.0 && percentile_q <= 100.0)) throw ConfigError("percentile_q must be in [0,100]");
}

nlohmann::json mdpo_config_to_json(const MdpoConfig& c) {
  return {{"beta", c.beta},           {"lambda_cm", c.lambda_cm}, {"lambda_ra", c.lambda_ra},
          {"learning_rate", c.learning_rate}, {"epochs", c.epochs},       {"batch_size", c.batch_size},
          {"percentile_q", c.percentile_q},   {"seed", c.seed}};
}

MdpoConfig mdpo_config_from_json(const nlohmann::json& j) {
  MdpoConfig c;
  c.beta = j.value("beta", c.beta);
  c.lambda_cm = j.value("lambda_cm", c.lambda_cm);
  c.lambda_ra = j.value("lambda_ra", c.lambda_ra);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.percentile_q = j.value("percentile_q", c.percentile_q);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

namespace {

void check_pair(const ToyPolicy& policy, const ToyPolicy& reference) {
  if (policy.candidates() != reference.candidates())
    throw ConfigError("policy and reference candidate sets differ");
  if (!reference.frozen()) throw ConfigError("reference policy must be frozen");
}

void check_context(const LossContext& ctx) {
  check_pair(ctx.policy, ctx.reference);
  if (ctx.featurizer.candidates() != ctx.policy.candidates())
    throw ConfigError("featurizer and policy candidate sets differ");
  if (!(ctx.beta > 0.0)) throw DomainError("beta must be > 0");
}

// d/dw log p(y|x) without the policy frozen check; callers have validated.
void accumulate_grad_log_prob(std::span<const FeatureVector> features, std::span<const double> log_probs,
                              std::size_t y, double scale, std::vector<double>& out) {
  const auto phi_y = features[y].values();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += scale * phi_y[j];
  for (std::size_t c = 0; c < features.size(); ++c) {
    const double p = std::exp(log_probs[c]);
    const auto phi = features[c].values();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] -= scale * p * phi[j];
  }
}

// Mean of softplus(-(r_w - r_l - delta)) over preference tuples.
LossWithGrad preference_objective(std::span<const PreferenceTuple> batch, const LossContext& ctx,
                                  double delta, bool with_grad) {
  check_context(ctx);
  if (batch.empty()) throw DomainError("empty preference batch");
  if (with_grad && ctx.policy.frozen()) throw ImmutabilityError("gradient requested for a frozen policy");
  LossWithGrad out;
  if (with_grad) out.grad.assign(ctx.policy.dim(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    const auto feats = ctx.featurizer.features(t.image, t.question);
    const std::size_t w = ctx.policy.index_of(t.chosen);
    const std::size_t l = ctx.policy.index_of(t.rejected);
    const auto lp = ctx.policy.log_probs(feats);
    const auto lr = ctx.reference.log_probs(feats);
    const double margin = ctx.beta * ((lp[w] - lr[w]) - (lp[l] - lr[l])) - delta;
    out.value += softplus(-margin) * inv_n;
    if (with_grad) {
      // dL/dmargin = -sigmoid(-margin); the softmax means cancel in grad(w) - grad(l).
      const double coef = -sigmoid(-margin) * ctx.beta * inv_n;
      const auto phi_w = feats[w].values();
      const auto phi_l = feats[l].values();
      for (std::size_t j = 0; j < out.grad.size(); ++j) out.grad[j] += coef * (phi_w[j] - phi_l[j]);
    }
  }
  return out;
}

}  // namespace

double implicit_reward(const ToyPolicy& policy, const ToyPolicy& reference,
                       std::span<const FeatureVector> features, const CandidateId& answer, double beta) {
  check_pair(policy, reference);
  return beta * (log_prob(policy, features, answer) - log_prob(reference, features, answer));
}

LossWithGrad dpo_loss_grad(std::span<const PreferenceTuple> batch, const LossContext& ctx) {
  return preference_objective(batch, ctx, 0.0, true);
}

LossWithGrad ra_loss_grad(std::span<const PreferenceTuple> batch, const LossContext& ctx,
                          const Anchor& anchor) {
  return preference_objective(batch, ctx, anchor.delta, true);
}

double dpo_loss(std::span<const PreferenceTuple> batch, const LossContext& ctx) {
  return preference_objective(batch, ctx, 0.0, false).value;
}

double ra_loss(std::span<const PreferenceTuple> batch, const LossContext& ctx, const Anchor& anchor) {
  return preference_objective(batch, ctx, anchor.delta, false).value;
}

namespace {
LossWithGrad crossmodal_objective(std::span<const CrossModalPair> batch, const LossContext& ctx,
                                  bool with_grad) {
  check_context(ctx);
  if (batch.empty()) throw DomainError("empty cross-modal batch");
  if (with_grad && ctx.policy.frozen()) throw ImmutabilityError("gradient requested for a frozen policy");
  LossWithGrad out;
  if (with_grad) out.grad.assign(ctx.policy.dim(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& p : batch) {
    const std::size_t a = ctx.policy.index_of(p.answer);
    const auto f_pos = ctx.featurizer.features(p.image_pos, p.question);
    const auto f_neg = ctx.featurizer.features(p.image_neg, p.question);
    const auto lp_pos = ctx.policy.log_probs(f_pos);
    const auto lp_neg = ctx.policy.log_probs(f_neg);
    const auto lr_pos = ctx.reference.log_probs(f_pos);
    const auto lr_neg = ctx.reference.log_probs(f_neg);
    const double margin = ctx.beta * ((lp_pos[a] - lr_pos[a]) - (lp_neg[a] - lr_neg[a]));
    out.value += softplus(-margin) * inv_n;
    if (with_grad) {
      const double coef = -sigmoid(-margin) * ctx.beta * inv_n;
      accumulate_grad_log_prob(f_pos, lp_pos, a, coef, out.grad);
      accumulate_grad_log_prob(f_neg, lp_neg, a, -coef, out.grad);
    }
  }
  return out;
}
}  // namespace

double cm_loss(std::span<const CrossModalPair> batch, const LossContext& ctx) {
  return crossmodal_objective(batch, ctx, false).value;
}

LossWithGrad cm_loss_grad(std::span<const CrossModalPair> batch, const LossContext& ctx) {
  return crossmodal_objective(batch, ctx, true);
}

MdpoLoss mdpo_total(std::span<const PreferenceTuple> batch_pref, std::span<const CrossModalPair> batch_cm,
                    const LossContext& ctx, const MdpoConfig& config, const Anchor& anchor, bool with_grad) {
  MdpoLoss out;
  const auto dpo = preference_objective(batch_pref, ctx, 0.0, with_grad);
  const auto ra = preference_objective(batch_pref, ctx, anchor.delta, with_grad);
  const auto cm = crossmodal_objective(batch_cm, ctx, with_grad);
  out.dpo = dpo.value;
  out.ra = ra.value;
  out.cm = cm.value;
  out.total = out.dpo + config.lambda_cm * out.cm + config.lambda_ra * out.ra;
  if (with_grad) {
    out.grad = dpo.grad;
    for (std::size_t j = 0; j < out.grad.size(); ++j)
      out.grad[j] += config.lambda_cm * cm.grad[j] + config.lambda_ra * ra.grad[j];
  }
  return out;
}

double nearest_rank_percentile(std::span<const double> sample, double q) {
  if (sample.empty()) throw DomainError("percentile of an empty sample");
  if (!(q >= 0.0 && q <= 100.0)) throw DomainError("percentile q must lie in [0,100]");
  std::vector<double> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

Anchor anchor_from_rewards(std::span<const double> rewards, double q) {
  Anchor a;
  a.delta = nearest_rank_percentile(rewards, q);
  a.percentile_q = q;
  a.calibration_size = rewards.size();
  return a;
}

Anchor estimate_anchor(std::span<const PreferenceTuple> calibration, const LossContext& ctx, double q) {
  check_context(ctx);
  if (calibration.empty()) throw DomainError("empty calibration set");
  std::vector<double> rewards;
  rewards.reserve(calibration.size());
  for (const auto& t : calibration) {
    const auto feats = ctx.featurizer.features(t.image, t.question);
    rewards.push_back(implicit_reward(ctx.policy, ctx.reference, feats, t.chosen, ctx.beta));
  }
  return anchor_from_rewards(rewards, q);
}

MdpoTrainResult train_mdpo(const MdpoDatasets& data, ToyPolicy policy, const ToyPolicy& reference,
                           const CandidateFeaturizer& featurizer, const MdpoConfig& config) {
  config.validate();
  if (data.preference.empty() || data.crossmodal.empty())
    throw DomainError("training needs non-empty preference and cross-modal sets");
  if (policy.frozen()) throw ImmutabilityError("cannot train a frozen policy");

  std::set<std::string> train_ids;
  for (const auto& t : data.preference) train_ids.insert(t.id);
  for (const auto& t : data.calibration)
    if (train_ids.count(t.id)) throw ConfigError("calibration tuple " + t.id + " also appears in training data");

  MdpoTrainResult result{policy, {}, {}};
  {
    const LossContext ctx{result.policy, reference, featurizer, config.beta};
    if (data.reward_sample) {
      result.anchor = anchor_from_rewards(*data.reward_sample, config.percentile_q);
    } else {
      if (data.calibration.empty()) throw DomainError("empty calibration set");
      result.anchor = estimate_anchor(data.calibration, ctx, config.percentile_q);
    }
  }

  const std::size_t n_pref = data.preference.size();
  const std::size_t n_batches = (n_pref + config.batch_size - 1) / config.batch_size;
  const std::size_t cm_batch = (data.crossmodal.size() + n_batches - 1) / n_batches;
  std::vector<std::size_t> pref_order(n_pref);
  std::vector<std::size_t> cm_order(data.crossmodal.size());
  result.trace.reserve(config.epochs * n_batches);

  std::vector<PreferenceTuple> bp;
  std::vector<CrossModalPair> bc;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(pref_order.begin(), pref_order.end(), std::size_t{0});
    std::iota(cm_order.begin(), cm_order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(config.seed, 0xd90u, epoch));
    std::shuffle(pref_order.begin(), pref_order.end(), rng);
    std::shuffle(cm_order.begin(), cm_order.end(), rng);

    for (std::size_t b = 0; b < n_batches; ++b) {
      bp.clear();
      bc.clear();
      for (std::size_t i = b * config.batch_size; i < std::min(n_pref, (b + 1) * config.batch_size); ++i)
        bp.push_back(data.preference[pref_order[i]]);
      const std::size_t c0 = std::min(b * cm_batch, cm_order.size() - 1);
      const std::size_t c1 = std::max(c0 + 1, std::min(cm_order.size(), (b + 1) * cm_batch));
      for (std::size_t i = c0; i < c1; ++i) bc.push_back(data.crossmodal[cm_order[i]]);

      const LossContext ctx{result.policy, reference, featurizer, config.beta};
      const auto loss = mdpo_total(bp, bc, ctx, config, result.anchor, true);
      bool finite = std::isfinite(loss.total);
      for (double g : loss.grad) finite = finite && std::isfinite(g);
      if (!finite) throw NonFiniteLossError(epoch, b);
      result.trace.push_back({epoch, b, loss.dpo, loss.cm, loss.ra, loss.total});
      result.policy.apply_update(loss.grad, config.learning_rate);
    }
  }
  return result;
}

std::string loss_trace_csv(std::span<const LossTraceRow> trace) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,batch,dpo,cm,ra,total\n";
  for (const auto& r : trace)
    os << r.epoch << ',' << r.batch << ',' << r.dpo << ',' << r.cm << ',' << r.ra << ',' << r.total << '\n';
  return os.str();
}

nlohmann::json preference_to_json(const PreferenceTuple& t) {
  return {{"id", t.id},
          {"image_vec", t.image.vec()},
          {"question_vec", t.question.vec()},
          {"chosen", t.chosen},
          {"rejected", t.rejected}};
}

PreferenceTuple preference_from_json(const nlohmann::json& j) {
  return PreferenceTuple(j.at("id").get<std::string>(),
                         FeatureVector(j.at("image_vec").get<std::vector<double>>()),
                         FeatureVector(j.at("question_vec").get<std::vector<double>>()),
                         j.at("chosen").get<std::string>(), j.at("rejected").get<std::string>());
}

nlohmann::json crossmodal_to_json(const CrossModalPair& p) {
  return {{"question_vec", p.question.vec()},
          {"answer", p.answer},
          {"image_pos_vec", p.image_pos.vec()},
          {"image_neg_vec", p.image_neg.vec()}};
}

CrossModalPair crossmodal_from_json(const nlohmann::json& j) {
  return CrossModalPair(FeatureVector(j.at("question_vec").get<std::vector<double>>()),
                        j.at("answer").get<std::string>(),
                        FeatureVector(j.at("image_pos_vec").get<std::vector<double>>()),
                        FeatureVector(j.at("image_neg_vec").get<std::vector<double>>()));
}

}  // namespace medalign
