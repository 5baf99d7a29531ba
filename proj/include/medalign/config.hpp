#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/expert.hpp"
#include "medalign/federation.hpp"
#include "medalign/mdpo.hpp"
#include "medalign/routing.hpp"

namespace medalign {

struct WorldSpec {
  int domains = 4;
  std::size_t image_dim = 16;
  std::size_t question_dim = 16;
  std::size_t embed_dim = 32;
  std::size_t docs_per_domain = 64;
  std::size_t queries = 500;
  std::size_t heldout = 200;
  std::size_t calibration_per_domain = 30;
  std::size_t num_answers = 8;
  double separation_margin = 0.3;
  double query_noise = 0.6;
  double doc_noise = 0.6;
  double cross_domain_fraction = 0.05;
  double hard_fraction = 0.05;
  std::size_t preference_count = 256;
  std::size_t crossmodal_count = 256;
  std::size_t anchor_calibration_count = 64;
  double label_signal = 1.0;
  double mdpo_noise = 0.5;
};

struct EstimatorSettings {
  std::size_t hidden_dim = 16;
  double alpha = 1.0;
  double epsilon_interp = 0.1;
  double s_norm = 0.69314718055994530942;
  double u_low = 0.1;
  double u_high = 0.9;
  double learning_rate = 0.5;
  std::size_t steps = 400;
};

struct GraphSettings {
  double edge_threshold = 0.02;
  double significance_level = 0.05;
  std::size_t restarts = 5;
  std::size_t eval_queries = 200;
  double base_accuracy = 0.7;
};

struct AggregationSettings {
  double supermajority_fraction = 2.0 / 3.0;
  double radius = 0.2;
  std::size_t min_points = 2;
  std::size_t encoder_dim = 256;
};

// Every tunable of a run. Sections mirror the JSON layout of config.json.
struct AppConfig {
  std::uint64_t seed = 1;
  WorldSpec world;
  RoutingConfig routing;
  std::size_t retrieved_texts = 5;  // m; recorded, a single top-k is used for both modalities
  FederationConfig federation;
  ExpertDynamics experts;
  EstimatorSettings estimator;
  GraphSettings graph;
  AggregationSettings aggregation;
  MdpoConfig mdpo;
  std::vector<double> sweep_gammas{0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
  nlohmann::json metadata = nlohmann::json::object();

  void validate() const;
};

nlohmann::json world_spec_to_json(const WorldSpec& w);
WorldSpec world_spec_from_json(const nlohmann::json& j);

nlohmann::json config_to_json(const AppConfig& c);
// Missing keys keep their defaults.
AppConfig config_from_json(const nlohmann::json& j);
AppConfig load_config(const std::filesystem::path& path);

// Applies "a.b.c=value" overrides; value is parsed as JSON, falling back to a string.
nlohmann::json apply_overrides(nlohmann::json base, const std::vector<std::string>& assignments);

}  // namespace medalign
