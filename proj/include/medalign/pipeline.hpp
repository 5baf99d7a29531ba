#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/aggregation.hpp"
#include "medalign/config.hpp"
#include "medalign/expert.hpp"
#include "medalign/federation.hpp"
#include "medalign/metacog.hpp"
#include "medalign/routing.hpp"
#include "medalign/world.hpp"

namespace medalign {

// Trained or calibrated state the live pipeline reads from.
struct Artifacts {
  std::vector<DomainKB> kbs;
  std::vector<DomainStats> stats;
  ConfidenceEstimator estimator;
  DependencyGraph graph;
  ParentMeans parent_means;
  std::string prompt_template = default_synthesis_template();
};

std::string heldout_provenance(const SyntheticWorld& world);

std::vector<DomainStats> calibrate_world_stats(const SyntheticWorld& world, std::span<const DomainKB> kbs,
                                               const AppConfig& config);

// Hidden states of each expert on calibration queries of its own domain,
// labelled by whether the expert's argmax answer is right.
std::vector<LabeledHiddenState> collect_estimator_corpus(const SyntheticWorld& world,
                                                         std::span<const ToyExpert> experts,
                                                         const AppConfig& config);
ParentMeans compute_parent_means(std::span<const LabeledHiddenState> corpus);
EstimatorTrainResult fit_estimator(std::span<const LabeledHiddenState> corpus, const AppConfig& config);

DependencyGraph build_world_graph(const SyntheticWorld& world, const AppConfig& config);

// Builds every artifact in memory.
Artifacts prepare_artifacts(const SyntheticWorld& world, const AppConfig& config);

// Staged artifact files inside a run directory.
void save_artifacts(const std::filesystem::path& dir, const Artifacts& artifacts);
// Throws MissingArtifactError naming the first absent file.
Artifacts load_artifacts(const std::filesystem::path& dir);

struct QueryResult {
  std::string query_id;
  int true_domain = 0;
  int true_answer = 0;
  FederationResult federation;
  ConsensusOutcome outcome;
  std::string answer;  // adopted or synthesized
  bool from_stub = false;
  double latency_ms = 0.0;
};

struct ModeMetrics {
  double task_accuracy = 0.0;
  double f1 = 0.0;
  double avg_chain_length = 0.0;
};

struct RunReport {
  std::uint64_t seed = 0;
  double gamma = 0.0;
  std::size_t num_queries = 0;
  double routing_accuracy = 0.0;
  double task_accuracy = 0.0;
  double f1 = 0.0;
  double task_accuracy_fixed = 0.0;
  double f1_fixed = 0.0;
  double avg_chain_length_adaptive = 0.0;
  double avg_chain_length_fixed = 0.0;
  double reduction_percent = 0.0;
  std::vector<double> latencies_ms;  // per query, adaptive mode
  nlohmann::json config;
};

struct PipelineRun {
  RunReport report;
  std::vector<RoutingDecision> routing;
  std::vector<QueryResult> adaptive;
  std::vector<QueryResult> fixed;
};

std::vector<RoutingDecision> route_queries(const SyntheticWorld& world, const Artifacts& artifacts,
                                           const AppConfig& config);

double routing_accuracy(const SyntheticWorld& world, std::span<const RoutingDecision> routing);

// Phase 2 and 3 for every live query under one federation setting.
std::vector<QueryResult> answer_queries(const SyntheticWorld& world, const Artifacts& artifacts,
                                        const AppConfig& config, std::span<const RoutingDecision> routing,
                                        const FederationConfig& federation, const Reviewer& reviewer = nullptr);

// Macro-F1 over the labels present in either truth or predictions.
double macro_f1(std::span<const std::string> truth, std::span<const std::string> predicted);
ModeMetrics mode_metrics(const SyntheticWorld& world, std::span<const QueryResult> results);

PipelineRun run_pipeline(const SyntheticWorld& world, const Artifacts& artifacts, const AppConfig& config,
                         const Reviewer& reviewer = nullptr);

struct SweepRow {
  double gamma = 0.0;
  ModeMetrics adaptive;
  double reduction_percent = 0.0;
};

struct SweepResult {
  ModeMetrics fixed;
  std::vector<SweepRow> rows;
};

// Adaptive runs over the gamma grid against one fixed-depth baseline, all on
// the same queries and seeds.
SweepResult compare_adaptive_vs_fixed(const SyntheticWorld& world, const Artifacts& artifacts,
                                      const AppConfig& config, std::span<const double> gammas);

}  // namespace medalign
