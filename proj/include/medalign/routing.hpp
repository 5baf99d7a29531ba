#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/knowledge.hpp"

namespace medalign {

// Per-domain score statistics, estimated once on held-out queries.
struct DomainStats {
  int domain_id = 0;
  double mu = 0.0;
  double sigma = 0.0;  // population standard deviation
  double epsilon = 1e-8;
  std::size_t sample_size = 0;
  std::string provenance;  // identifies the held-out set the stats came from
};

struct RoutingDistribution {
  std::vector<double> probs;
  double temperature = 1.0;
  std::vector<double> raw_scores;
  std::vector<double> normalized_scores;
};

struct ExpertSelection {
  std::vector<int> active_experts;  // descending probability, ties by ascending id
  double entropy = 0.0;             // natural-log entropy of the routing distribution
  double normalized_entropy = 0.0;  // entropy / ln D (0 when D == 1)
  bool multi_activated = false;
};

struct RoutingConfig {
  std::size_t k = kDefaultTopK;
  double temperature = 1.0;
  double epsilon = 1e-8;
  double entropy_threshold = 0.8;
  std::size_t max_active = 2;
};

// Mean of the top-k similarities.
double aggregate_scores(const RetrievalResult& result);

// Population mean/std of the aggregated score per domain over the held-out queries.
std::vector<DomainStats> calibrate_stats(std::span<const MultimodalQuery> heldout, std::span<const DomainKB> kbs,
                                         std::size_t k, double epsilon = 1e-8, std::string provenance = "heldout",
                                         Execution exec = Execution::kParallel);

// (s - mu) / (sigma + epsilon)
double normalize_score(double s, const DomainStats& stats);

// Temperature softmax, max-shifted. Entries are floored at the smallest normal
// double so every probability stays strictly positive.
RoutingDistribution gate(std::span<const double> normalized_scores, double temperature);

ExpertSelection select_experts(const RoutingDistribution& dist, double entropy_threshold, std::size_t max_active);

struct RoutingDecision {
  std::vector<RetrievalResult> retrieval;
  RoutingDistribution distribution;
  ExpertSelection selection;
};

RoutingDecision route(const MultimodalQuery& query, std::span<const DomainKB> kbs,
                      std::span<const DomainStats> stats, const RoutingConfig& config,
                      Execution exec = Execution::kParallel);

nlohmann::json routing_log_entry(const std::string& query_id, const RoutingDecision& decision);

nlohmann::json stats_to_json(std::span<const DomainStats> stats);
std::vector<DomainStats> stats_from_json(const nlohmann::json& j);

}  // namespace medalign
