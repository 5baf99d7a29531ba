#include "medalign/policy.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "medalign/errors.hpp"

namespace medalign {

CandidateFeaturizer::CandidateFeaturizer(std::size_t image_dim, std::size_t question_dim,
                                         std::vector<CandidateId> candidates, std::uint64_t seed)
    : image_dim_(image_dim), question_dim_(question_dim), candidates_(std::move(candidates)), seed_(seed) {
  if (candidates_.empty()) throw DomainError("featurizer needs at least one candidate");
  if (image_dim_ + question_dim_ == 0) throw ShapeError("featurizer needs a positive feature dim");
  signatures_.resize(candidates_.size() * dim());
  for (std::size_t c = 0; c < candidates_.size(); ++c) {
    std::mt19937_64 rng(mix_seed(seed_, 0xfea7u, c));
    std::bernoulli_distribution coin(0.5);
    for (std::size_t j = 0; j < dim(); ++j) signatures_[c * dim() + j] = coin(rng) ? 1.0 : -1.0;
  }
}

std::vector<FeatureVector> CandidateFeaturizer::features(const FeatureVector& image,
                                                         const FeatureVector& question) const {
  if (image.dim() != image_dim_ || question.dim() != question_dim_)
    throw ShapeError("featurizer: image/question dims do not match");
  std::vector<FeatureVector> out;
  out.reserve(candidates_.size());
  for (std::size_t c = 0; c < candidates_.size(); ++c) {
    const double* sig = signatures_.data() + c * dim();
    std::vector<double> phi(dim());
    for (std::size_t j = 0; j < image_dim_; ++j) phi[j] = image[j] * sig[j];
    for (std::size_t j = 0; j < question_dim_; ++j)
      phi[image_dim_ + j] = question[j] * sig[image_dim_ + j];
    out.emplace_back(std::move(phi));
  }
  return out;
}

std::span<const double> CandidateFeaturizer::image_signature(std::size_t candidate) const {
  return std::span<const double>(signatures_).subspan(candidate * dim(), image_dim_);
}

ToyPolicy::ToyPolicy(std::size_t dim, std::vector<CandidateId> candidates)
    : ToyPolicy(std::vector<double>(dim, 0.0), std::move(candidates), false) {}

ToyPolicy::ToyPolicy(std::vector<double> weights, std::vector<CandidateId> candidates, bool frozen)
    : weights_(std::move(weights)), candidates_(std::move(candidates)), frozen_(frozen) {
  if (candidates_.empty()) throw DomainError("policy candidate set is empty");
  if (weights_.empty()) throw ShapeError("policy needs a positive dim");
  std::set<CandidateId> seen(candidates_.begin(), candidates_.end());
  if (seen.size() != candidates_.size()) throw DomainError("policy candidate ids must be unique");
  for (double w : weights_)
    if (!std::isfinite(w)) throw DomainError("policy weight is not finite");
}

std::size_t ToyPolicy::index_of(const CandidateId& answer) const {
  auto it = std::find(candidates_.begin(), candidates_.end(), answer);
  if (it == candidates_.end()) throw DomainError("unknown answer id: " + answer);
  return static_cast<std::size_t>(it - candidates_.begin());
}

ToyPolicy ToyPolicy::frozen_clone() const { return ToyPolicy(weights_, candidates_, true); }

void ToyPolicy::apply_update(std::span<const double> direction, double step) {
  if (frozen_) throw ImmutabilityError("cannot update a frozen policy");
  if (direction.size() != weights_.size()) throw ShapeError("update direction has wrong length");
  for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] -= step * direction[i];
}

void ToyPolicy::set_weights(std::vector<double> weights) {
  if (frozen_) throw ImmutabilityError("cannot update a frozen policy");
  if (weights.size() != weights_.size()) throw ShapeError("weights have wrong length");
  weights_ = std::move(weights);
}

void ToyPolicy::check_features(std::span<const FeatureVector> features) const {
  if (features.size() != candidates_.size())
    throw ShapeError("expected one feature vector per candidate");
  for (const auto& f : features)
    if (f.dim() != weights_.size()) throw ShapeError("feature dim does not match policy dim");
}

std::vector<double> ToyPolicy::log_probs(std::span<const FeatureVector> features) const {
  check_features(features);
  std::vector<double> scores(features.size());
  for (std::size_t c = 0; c < features.size(); ++c) scores[c] = dot(weights_, features[c].values());
  return log_softmax(scores);
}

double log_prob(const ToyPolicy& policy, std::span<const FeatureVector> features,
                const CandidateId& answer) {
  const std::size_t a = policy.index_of(answer);
  return policy.log_probs(features)[a];
}

std::vector<double> grad_log_prob(const ToyPolicy& policy, std::span<const FeatureVector> features,
                                  const CandidateId& answer) {
  if (policy.frozen()) throw ImmutabilityError("gradient requested for a frozen policy");
  const std::size_t a = policy.index_of(answer);
  const auto lp = policy.log_probs(features);
  std::vector<double> grad(features[a].values().begin(), features[a].values().end());
  for (std::size_t c = 0; c < features.size(); ++c) {
    const double p = std::exp(lp[c]);
    const auto phi = features[c].values();
    for (std::size_t j = 0; j < grad.size(); ++j) grad[j] -= p * phi[j];
  }
  return grad;
}

void make_image_blind(ToyPolicy& policy, std::size_t image_dim) {
  if (image_dim > policy.dim()) throw ShapeError("image block larger than policy dim");
  auto w = policy.weights();
  std::fill(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(image_dim), 0.0);
  policy.set_weights(std::move(w));
}

nlohmann::json policy_to_json(const ToyPolicy& policy) {
  return {{"dim", policy.dim()},
          {"candidate_set", policy.candidates()},
          {"weights", policy.weights()},
          {"frozen", policy.frozen()}};
}

ToyPolicy policy_from_json(const nlohmann::json& j) {
  auto weights = j.at("weights").get<std::vector<double>>();
  if (weights.size() != j.at("dim").get<std::size_t>())
    throw ShapeError("policy checkpoint: weights length differs from dim");
  return ToyPolicy(std::move(weights), j.at("candidate_set").get<std::vector<CandidateId>>(),
                   j.at("frozen").get<bool>());
}

}  // namespace medalign
