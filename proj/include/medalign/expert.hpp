#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/feature_vector.hpp"

namespace medalign {

// Generative knobs of the toy reasoning experts. Hidden space layout:
// axis 0 = "confident" prototype, axis 1 = "diffuse" prototype,
// axes 2..2+num_answers = answer directions, remaining axes carry a fixed
// per-expert offset.
struct ExpertDynamics {
  std::size_t hidden_dim = 16;
  std::size_t num_answers = 8;
  double head_gain = 4.0;
  double confident_scale = 1.0;
  double diffuse_scale = 1.0;
  double label_strength = 1.0;
  double distractor_strength = 0.5;
  double domain_offset = 0.3;
  double noise = 0.15;
  double hazard_match = 0.3;     // per-step chance the right expert locks onto the answer
  double hazard_mismatch = 0.0;  // same for an expert of another domain
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json dynamics_to_json(const ExpertDynamics& d);
ExpertDynamics dynamics_from_json(const nlohmann::json& j);

// What a site is reasoning about. The truth fields drive the simulator only;
// sites never read them to make halting decisions.
struct ReasoningTask {
  std::string query_id;
  int true_answer = 0;
  int true_domain = 0;
  bool hard = false;  // no expert ever resolves a hard task
  std::vector<std::string> initial_context;
};

// Latent per-site reasoning track.
struct Track {
  bool resolved = false;
  int distractor = 0;
};

class ToyExpert {
 public:
  ToyExpert(int domain_id, ExpertDynamics dynamics);

  int domain_id() const noexcept { return domain_id_; }
  std::size_t hidden_dim() const noexcept { return dyn_.hidden_dim; }
  std::size_t num_answers() const noexcept { return dyn_.num_answers; }
  const ExpertDynamics& dynamics() const noexcept { return dyn_; }

  // Advances the track by one reasoning step and returns h_t. Always consumes
  // the same number of draws from rng, whatever the track state.
  FeatureVector step(Track& track, const ReasoningTask& task, std::mt19937_64& rng) const;

  // P(Y | h): softmax of head_gain times the answer coordinates.
  std::vector<double> predict(std::span<const double> h) const;
  int answer(std::span<const double> h) const;

 private:
  int domain_id_;
  ExpertDynamics dyn_;
  std::vector<double> offset_;
};

std::vector<ToyExpert> make_experts(int num_domains, const ExpertDynamics& dynamics);

}  // namespace medalign
