#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/expert.hpp"
#include "medalign/metacog.hpp"
#include "medalign/routing.hpp"

namespace medalign {

enum class UnitMode { kSegment, kToken };

struct FederationConfig {
  std::size_t n_sites = 5;  // N
  std::size_t quorum = 3;   // M
  double gamma = 0.8;       // halting threshold
  std::size_t t_max = 12;
  // When false no site halts on confidence; every site runs to t_max (fixed depth).
  bool halting_enabled = true;
  UnitMode unit_mode = UnitMode::kSegment;

  void validate() const;
};

struct SiteState {
  int site_id = 0;
  int expert_id = 0;
  std::vector<std::string> context;
  std::size_t step = 0;  // steps executed
  bool halted = false;
  std::optional<std::size_t> halt_step;
  std::vector<double> confidence_trace;

  // Simulator-private: latent track and the site's own random stream.
  Track track;
  std::mt19937_64 rng;
};

SiteState init_site(int site_id, int expert_id, const std::vector<std::string>& ctx0, std::uint64_t seed);

struct HaltEvent {
  int site_id = 0;
  std::vector<std::string> chain;
  std::string answer;
  double confidence = 0.0;
  std::size_t step = 0;
  bool forced = false;
  int expert_id = 0;
};

struct StepLog {
  int site_id = 0;
  std::size_t step = 0;
  double u_base = 0.0;
  double delta_stability = 0.0;
  double confidence = 0.0;
  bool halted = false;
};

// Read-only models shared by all sites.
struct FederationComponents {
  std::span<const ToyExpert> experts;
  const ConfidenceEstimator& estimator;
  const DependencyGraph& graph;
  const ParentMeans& parent_means;
  std::span<const std::string> answer_vocab;
};

struct SiteStepResult {
  std::optional<HaltEvent> event;
  StepLog log;
};

// One iteration of a site loop: hidden state, base confidence, parent-perturbed
// stability, final confidence; halts when confidence >= gamma (or is forced at t_max),
// otherwise appends one reasoning unit.
SiteStepResult site_step(SiteState& site, const ReasoningTask& task, const FederationComponents& components,
                         const FederationConfig& config);

enum class Schedule { kSerial, kParallel, kReversed, kShuffled };

struct ScheduleOptions {
  Schedule kind = Schedule::kParallel;
  std::uint64_t shuffle_seed = 0;
};

struct FederationResult {
  std::size_t t_star = 0;
  std::vector<HaltEvent> events;  // the confident set, ordered by (step, site_id)
  std::vector<int> cancelled_sites;
  std::vector<std::size_t> executed_steps;  // per site
  std::vector<StepLog> log;                 // ordered by (site_id, step)
};

// Lock-step simulation of N site loops with M-of-N quorum termination.
// Sites share no mutable state, so the result does not depend on the schedule.
FederationResult run_federated(const ReasoningTask& task, const ExpertSelection& selection,
                               const FederationConfig& config, const FederationComponents& components,
                               std::uint64_t seed, ScheduleOptions schedule = {});

// Mean executed steps per site across runs.
double average_chain_length(std::span<const FederationResult> runs);
// Same metric recounted from raw step logs (max step per site).
double average_chain_length(std::span<const StepLog> log);

nlohmann::json halt_event_to_json(const HaltEvent& e);
nlohmann::json federation_summary_json(const FederationResult& r);
nlohmann::json step_log_json(const std::string& query_id, const StepLog& s);

}  // namespace medalign
