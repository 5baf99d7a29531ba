#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/feature_vector.hpp"

namespace medalign {

using CandidateId = std::string;

// Builds the per-candidate joint features phi(x, A) from an (image, question)
// input. phi is the concatenation [image * m_A ; question * q_A] where m_A and
// q_A are fixed +/-1 candidate signatures. The first image_dim() coordinates
// of phi depend on the image only, so zeroing those policy weights yields a
// policy that cannot see the image.
class CandidateFeaturizer {
 public:
  CandidateFeaturizer(std::size_t image_dim, std::size_t question_dim,
                      std::vector<CandidateId> candidates, std::uint64_t seed);

  std::size_t image_dim() const noexcept { return image_dim_; }
  std::size_t question_dim() const noexcept { return question_dim_; }
  std::size_t dim() const noexcept { return image_dim_ + question_dim_; }
  const std::vector<CandidateId>& candidates() const noexcept { return candidates_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // One feature vector per candidate, in candidate order.
  std::vector<FeatureVector> features(const FeatureVector& image, const FeatureVector& question) const;
  // Signature of a candidate over the image block (used by data generators).
  std::span<const double> image_signature(std::size_t candidate) const;

 private:
  std::size_t image_dim_;
  std::size_t question_dim_;
  std::vector<CandidateId> candidates_;
  std::uint64_t seed_;
  std::vector<double> signatures_;  // [candidate][dim]
};

// Log-linear scorer over a finite candidate set: p(A|x) = softmax_A(w . phi(x, A)).
class ToyPolicy {
 public:
  ToyPolicy(std::size_t dim, std::vector<CandidateId> candidates);
  ToyPolicy(std::vector<double> weights, std::vector<CandidateId> candidates, bool frozen);

  std::size_t dim() const noexcept { return weights_.size(); }
  const std::vector<CandidateId>& candidates() const noexcept { return candidates_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  bool frozen() const noexcept { return frozen_; }

  // Throws DomainError when the id is not a candidate.
  std::size_t index_of(const CandidateId& answer) const;

  // Copy with the frozen flag set; the copy never changes afterwards.
  ToyPolicy frozen_clone() const;

  // w <- w - step * direction. Single-writer; throws ImmutabilityError when frozen.
  void apply_update(std::span<const double> direction, double step);
  void set_weights(std::vector<double> weights);

  std::vector<double> log_probs(std::span<const FeatureVector> features) const;

 private:
  void check_features(std::span<const FeatureVector> features) const;

  std::vector<double> weights_;
  std::vector<CandidateId> candidates_;
  bool frozen_ = false;
};

double log_prob(const ToyPolicy& policy, std::span<const FeatureVector> features,
                const CandidateId& answer);

// d log p(answer|x) / dw = phi(answer) - sum_c p(c|x) phi(c).
std::vector<double> grad_log_prob(const ToyPolicy& policy, std::span<const FeatureVector> features,
                                  const CandidateId& answer);

// Zeroes the weights covering the image block of the features.
void make_image_blind(ToyPolicy& policy, std::size_t image_dim);

nlohmann::json policy_to_json(const ToyPolicy& policy);
ToyPolicy policy_from_json(const nlohmann::json& j);

}  // namespace medalign
