#include "medalign/expert.hpp"

#include <algorithm>
#include <cmath>

#include "medalign/errors.hpp"

namespace medalign {

void ExpertDynamics::validate() const {
  if (num_answers < 2) throw ConfigError("experts need at least two answers");
  if (hidden_dim < num_answers + 2) throw ConfigError("hidden_dim must be >= num_answers + 2");
  if (!(hazard_match >= 0.0 && hazard_match <= 1.0) || !(hazard_mismatch >= 0.0 && hazard_mismatch <= 1.0))
    throw ConfigError("hazards must lie in [0,1]");
  if (noise < 0.0) throw ConfigError("noise must be >= 0");
}

nlohmann::json dynamics_to_json(const ExpertDynamics& d) {
  return {{"hidden_dim", d.hidden_dim},
          {"num_answers", d.num_answers},
          {"head_gain", d.head_gain},
          {"confident_scale", d.confident_scale},
          {"diffuse_scale", d.diffuse_scale},
          {"label_strength", d.label_strength},
          {"distractor_strength", d.distractor_strength},
          {"domain_offset", d.domain_offset},
          {"noise", d.noise},
          {"hazard_match", d.hazard_match},
          {"hazard_mismatch", d.hazard_mismatch},
          {"seed", d.seed}};
}

ExpertDynamics dynamics_from_json(const nlohmann::json& j) {
  ExpertDynamics d;
  d.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  d.num_answers = j.value("num_answers", d.num_answers);
  d.head_gain = j.value("head_gain", d.head_gain);
  d.confident_scale = j.value("confident_scale", d.confident_scale);
  d.diffuse_scale = j.value("diffuse_scale", d.diffuse_scale);
  d.label_strength = j.value("label_strength", d.label_strength);
  d.distractor_strength = j.value("distractor_strength", d.distractor_strength);
  d.domain_offset = j.value("domain_offset", d.domain_offset);
  d.noise = j.value("noise", d.noise);
  d.hazard_match = j.value("hazard_match", d.hazard_match);
  d.hazard_mismatch = j.value("hazard_mismatch", d.hazard_mismatch);
  d.seed = j.value("seed", d.seed);
  d.validate();
  return d;
}

ToyExpert::ToyExpert(int domain_id, ExpertDynamics dynamics) : domain_id_(domain_id), dyn_(std::move(dynamics)) {
  dyn_.validate();
  offset_.assign(dyn_.hidden_dim, 0.0);
  const std::size_t first = dyn_.num_answers + 2;
  if (first < dyn_.hidden_dim) {
    std::mt19937_64 rng(mix_seed(dyn_.seed, 0x0ff5e7u, static_cast<std::uint64_t>(domain_id)));
    auto raw = gaussian_vector(rng, dyn_.hidden_dim - first);
    const double n = norm(raw);
    for (std::size_t i = first; i < dyn_.hidden_dim; ++i)
      offset_[i] = n > 0.0 ? dyn_.domain_offset * raw[i - first] / n : 0.0;
  }
}

FeatureVector ToyExpert::step(Track& track, const ReasoningTask& task, std::mt19937_64& rng) const {
  if (task.true_answer < 0 || static_cast<std::size_t>(task.true_answer) >= dyn_.num_answers)
    throw DomainError("task answer outside the expert's answer space");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, static_cast<int>(dyn_.num_answers) - 2);

  const double hazard = task.true_domain == domain_id_ ? dyn_.hazard_match : dyn_.hazard_mismatch;
  const double u = unit(rng);
  if (!track.resolved && !task.hard && u < hazard) track.resolved = true;
  int w = other(rng);
  if (w >= task.true_answer) ++w;
  track.distractor = w;
  auto h = gaussian_vector(rng, dyn_.hidden_dim, dyn_.noise);

  for (std::size_t i = 0; i < h.size(); ++i) h[i] += offset_[i];
  if (track.resolved) {
    h[0] += dyn_.confident_scale;
    h[2 + static_cast<std::size_t>(task.true_answer)] += dyn_.label_strength;
  } else {
    h[1] += dyn_.diffuse_scale;
    h[2 + static_cast<std::size_t>(w)] += dyn_.distractor_strength;
  }
  return FeatureVector(std::move(h));
}

std::vector<double> ToyExpert::predict(std::span<const double> h) const {
  if (h.size() != dyn_.hidden_dim) throw ShapeError("hidden state dim differs from expert hidden_dim");
  std::vector<double> logits(dyn_.num_answers);
  for (std::size_t y = 0; y < logits.size(); ++y) logits[y] = dyn_.head_gain * h[2 + y];
  return softmax(logits);
}

int ToyExpert::answer(std::span<const double> h) const {
  const auto p = predict(h);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<ToyExpert> make_experts(int num_domains, const ExpertDynamics& dynamics) {
  std::vector<ToyExpert> out;
  out.reserve(static_cast<std::size_t>(num_domains));
  for (int d = 0; d < num_domains; ++d) out.emplace_back(d, dynamics);
  return out;
}

}  // namespace medalign
