#include "medalign/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "medalign/errors.hpp"

namespace medalign {

double aggregate_scores(const RetrievalResult& result) {
  if (result.hits.empty()) throw DomainError("cannot aggregate an empty retrieval result");
  double s = 0.0;
  for (const auto& h : result.hits) s += h.similarity;
  return s / static_cast<double>(result.hits.size());
}

std::vector<DomainStats> calibrate_stats(std::span<const MultimodalQuery> heldout, std::span<const DomainKB> kbs,
                                         std::size_t k, double epsilon, std::string provenance, Execution exec) {
  if (heldout.empty()) throw DomainError("held-out set is empty");
  if (!(epsilon > 0.0)) throw DomainError("epsilon must be > 0");
  const std::size_t n = heldout.size();
  const std::size_t D = kbs.size();
  std::vector<double> scores(n * D);
  const auto nq = static_cast<std::ptrdiff_t>(n);
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic) if (exec == Execution::kParallel)
  for (std::ptrdiff_t q = 0; q < nq; ++q) {
    try {
      const auto res = retrieve_all(kbs, heldout[q], k, Execution::kSerial);
      for (std::size_t d = 0; d < D; ++d) scores[q * D + d] = aggregate_scores(res[d]);
    } catch (...) {
      errors[q] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Welford accumulation in query order.
  std::vector<DomainStats> out(D);
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0;
    double m2 = 0.0;
    for (std::size_t q = 0; q < n; ++q) {
      const double x = scores[q * D + d];
      const double delta = x - mean;
      mean += delta / static_cast<double>(q + 1);
      m2 += delta * (x - mean);
    }
    out[d] = {kbs[d].domain_id(), mean, std::sqrt(std::max(0.0, m2 / static_cast<double>(n))), epsilon, n,
              provenance};
  }
  return out;
}

double normalize_score(double s, const DomainStats& stats) {
  return (s - stats.mu) / (stats.sigma + stats.epsilon);
}

RoutingDistribution gate(std::span<const double> normalized_scores, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  if (normalized_scores.empty()) throw DomainError("gate needs at least one domain");
  std::vector<double> logits(normalized_scores.size());
  for (std::size_t d = 0; d < logits.size(); ++d) logits[d] = normalized_scores[d] / temperature;
  RoutingDistribution out;
  out.probs = softmax(logits);
  for (double& p : out.probs) p = std::max(p, std::numeric_limits<double>::min());
  out.temperature = temperature;
  out.normalized_scores.assign(normalized_scores.begin(), normalized_scores.end());
  return out;
}

ExpertSelection select_experts(const RoutingDistribution& dist, double entropy_threshold, std::size_t max_active) {
  if (max_active == 0) throw DomainError("max_active must be >= 1");
  const std::size_t D = dist.probs.size();
  if (D == 0) throw DomainError("empty routing distribution");
  std::vector<int> order(D);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dist.probs[a] > dist.probs[b]; });

  ExpertSelection sel;
  for (double p : dist.probs)
    if (p > 0.0) sel.entropy -= p * std::log(p);
  sel.entropy = std::max(0.0, sel.entropy);
  sel.normalized_entropy = D > 1 ? sel.entropy / std::log(static_cast<double>(D)) : 0.0;
  sel.multi_activated = D > 1 && max_active > 1 && sel.normalized_entropy > entropy_threshold;
  const std::size_t take = sel.multi_activated ? std::min(max_active, D) : 1;
  sel.active_experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
  return sel;
}

RoutingDecision route(const MultimodalQuery& query, std::span<const DomainKB> kbs,
                      std::span<const DomainStats> stats, const RoutingConfig& config, Execution exec) {
  if (stats.size() != kbs.size()) throw ConfigError("need one DomainStats per knowledge base");
  RoutingDecision out;
  out.retrieval = retrieve_all(kbs, query, config.k, exec);
  std::vector<double> raw(kbs.size());
  std::vector<double> normed(kbs.size());
  for (std::size_t d = 0; d < kbs.size(); ++d) {
    if (stats[d].domain_id != kbs[d].domain_id()) throw ConfigError("stats and KBs are in different domain order");
    raw[d] = aggregate_scores(out.retrieval[d]);
    normed[d] = normalize_score(raw[d], stats[d]);
  }
  out.distribution = gate(normed, config.temperature);
  out.distribution.raw_scores = std::move(raw);
  out.selection = select_experts(out.distribution, config.entropy_threshold, config.max_active);
  return out;
}

nlohmann::json routing_log_entry(const std::string& query_id, const RoutingDecision& decision) {
  return {{"query_id", query_id},
          {"raw_scores", decision.distribution.raw_scores},
          {"normalized_scores", decision.distribution.normalized_scores},
          {"probs", decision.distribution.probs},
          {"active_experts", decision.selection.active_experts},
          {"entropy", decision.selection.entropy}};
}

nlohmann::json stats_to_json(std::span<const DomainStats> stats) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : stats)
    out.push_back({{"domain_id", s.domain_id},
                   {"mu", s.mu},
                   {"sigma", s.sigma},
                   {"epsilon", s.epsilon},
                   {"sample_size", s.sample_size},
                   {"provenance", s.provenance}});
  return out;
}

std::vector<DomainStats> stats_from_json(const nlohmann::json& j) {
  std::vector<DomainStats> out;
  for (const auto& s : j) {
    DomainStats d{s.at("domain_id").get<int>(), s.at("mu").get<double>(), s.at("sigma").get<double>(),
                  s.at("epsilon").get<double>(), s.at("sample_size").get<std::size_t>(),
                  s.value("provenance", std::string("heldout"))};
    if (d.sigma < 0.0 || !(d.epsilon > 0.0)) throw DomainError("invalid domain stats");
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace medalign
