#include "medalign/federation.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "medalign/errors.hpp"

namespace medalign {

void FederationConfig::validate() const {
  if (n_sites < 1) throw ConfigError("need at least one site");
  if (quorum < 1 || quorum > n_sites) throw ConfigError("quorum must satisfy 1 <= M <= N");
  if (t_max < 1) throw ConfigError("t_max must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
}

SiteState init_site(int site_id, int expert_id, const std::vector<std::string>& ctx0, std::uint64_t seed) {
  SiteState s;
  s.site_id = site_id;
  s.expert_id = expert_id;
  s.context = ctx0;
  s.rng.seed(seed);
  return s;
}

namespace {
std::string reasoning_unit(UnitMode mode, std::size_t t, bool resolved, const std::string& leaning) {
  if (mode == UnitMode::kToken) return leaning;
  return "step " + std::to_string(t) + ": " + (resolved ? "findings support " : "weighing ") + leaning;
}
}  // namespace

SiteStepResult site_step(SiteState& site, const ReasoningTask& task, const FederationComponents& components,
                         const FederationConfig& config) {
  if (site.halted) throw DomainError("site " + std::to_string(site.site_id) + " has already halted");
  if (site.step >= config.t_max) throw DomainError("site has exhausted t_max");
  if (site.expert_id < 0 || static_cast<std::size_t>(site.expert_id) >= components.experts.size())
    throw DomainError("site bound to an unknown expert");
  const ToyExpert& expert = components.experts[static_cast<std::size_t>(site.expert_id)];
  const ConfidenceEstimator& est = components.estimator;

  const std::size_t t = site.step + 1;
  const HiddenState h{expert.step(site.track, task, site.rng), static_cast<int>(t), site.site_id, site.expert_id};
  const double logit = base_logit(est, h.values.values());
  const double u_base = sigmoid(logit);

  double delta = 0.0;
  if (const auto parent = most_influential_parent(components.graph, site.expert_id)) {
    if (auto it = components.parent_means.find(*parent); it != components.parent_means.end()) {
      const HiddenState h_prime = perturb(h, it->second, est.epsilon_interp);
      const ExpertPredictor predict = [&](std::span<const double> x) { return expert.predict(x); };
      delta = stability_adjustment(predict, h.values.values(), h_prime.values.values(), est.s_norm);
    }
  }
  const double c = confidence(logit, delta, est.alpha);
  site.confidence_trace.push_back(c);
  site.step = t;

  const int answer_idx = expert.answer(h.values.values());
  if (static_cast<std::size_t>(answer_idx) >= components.answer_vocab.size())
    throw ConfigError("answer vocabulary is smaller than the expert answer space");
  const std::string& answer = components.answer_vocab[static_cast<std::size_t>(answer_idx)];

  SiteStepResult out;
  out.log = {site.site_id, t, u_base, delta, c, false};
  const bool confident = config.halting_enabled && c >= config.gamma;
  if (confident || t == config.t_max) {
    site.halted = true;
    site.halt_step = t;
    out.log.halted = true;
    out.event = HaltEvent{site.site_id, site.context, answer, c, t, !confident, site.expert_id};
    return out;
  }
  site.context.push_back(reasoning_unit(config.unit_mode, t, site.track.resolved, answer));
  return out;
}

FederationResult run_federated(const ReasoningTask& task, const ExpertSelection& selection,
                               const FederationConfig& config, const FederationComponents& components,
                               std::uint64_t seed, ScheduleOptions schedule) {
  config.validate();
  if (selection.active_experts.empty()) throw DomainError("expert selection is empty");
  const std::size_t n = config.n_sites;

  std::vector<SiteState> sites;
  sites.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int expert = selection.active_experts[i % selection.active_experts.size()];
    sites.push_back(init_site(static_cast<int>(i), expert, task.initial_context, mix_seed(seed, 0x517eu, i)));
  }

  std::vector<std::optional<HaltEvent>> slot_event(n);
  std::vector<std::vector<StepLog>> slot_log(n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (schedule.kind == Schedule::kReversed) std::reverse(order.begin(), order.end());

  FederationResult result;
  std::size_t halted = 0;
  for (std::size_t t = 1; t <= config.t_max; ++t) {
    if (schedule.kind == Schedule::kShuffled) {
      std::mt19937_64 rng(mix_seed(schedule.shuffle_seed, t));
      std::shuffle(order.begin(), order.end(), rng);
    }
    const auto count = static_cast<std::ptrdiff_t>(n);
    auto body = [&](std::ptrdiff_t k) {
      const std::size_t i = order[static_cast<std::size_t>(k)];
      if (sites[i].halted) return;
      try {
        auto r = site_step(sites[i], task, components, config);
        slot_log[i].push_back(r.log);
        if (r.event) slot_event[i] = std::move(r.event);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    if (schedule.kind == Schedule::kParallel) {
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t k = 0; k < count; ++k) body(k);
    } else {
      for (std::ptrdiff_t k = 0; k < count; ++k) body(k);
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    halted = 0;
    for (const auto& s : sites) halted += s.halted ? 1 : 0;
    if (halted >= config.quorum) {
      result.t_star = t;
      break;
    }
  }
  // Every site halts by t_max, so the quorum is always reached.
  if (result.t_star == 0) throw std::logic_error("federation ended without reaching quorum");

  for (std::size_t i = 0; i < n; ++i) {
    if (slot_event[i])
      result.events.push_back(std::move(*slot_event[i]));
    else
      result.cancelled_sites.push_back(static_cast<int>(i));
    result.executed_steps.push_back(sites[i].step);
    result.log.insert(result.log.end(), slot_log[i].begin(), slot_log[i].end());
  }
  std::sort(result.events.begin(), result.events.end(), [](const HaltEvent& a, const HaltEvent& b) {
    return std::tie(a.step, a.site_id) < std::tie(b.step, b.site_id);
  });
  return result;
}

double average_chain_length(std::span<const FederationResult> runs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& r : runs) {
    for (std::size_t s : r.executed_steps) total += static_cast<double>(s);
    count += r.executed_steps.size();
  }
  if (count == 0) throw DomainError("average chain length of an empty log");
  return total / static_cast<double>(count);
}

double average_chain_length(std::span<const StepLog> log) {
  if (log.empty()) throw DomainError("average chain length of an empty log");
  std::map<int, std::size_t> last;
  for (const auto& s : log) last[s.site_id] = std::max(last[s.site_id], s.step);
  double total = 0.0;
  for (const auto& [site, steps] : last) total += static_cast<double>(steps);
  return total / static_cast<double>(last.size());
}

nlohmann::json halt_event_to_json(const HaltEvent& e) {
  return {{"site_id", e.site_id}, {"chain", e.chain}, {"answer", e.answer},        {"confidence", e.confidence},
          {"step", e.step},       {"forced", e.forced}, {"expert_id", e.expert_id}};
}

nlohmann::json federation_summary_json(const FederationResult& r) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) events.push_back(halt_event_to_json(e));
  return {{"t_star", r.t_star}, {"events", events}, {"cancelled_sites", r.cancelled_sites}};
}

nlohmann::json step_log_json(const std::string& query_id, const StepLog& s) {
  return {{"query_id", query_id},
          {"site_id", s.site_id},
          {"step", s.step},
          {"u_base", s.u_base},
          {"delta_stability", s.delta_stability},
          {"confidence", s.confidence},
          {"halted", s.halted}};
}

}  // namespace medalign
