#include "medalign/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "medalign/errors.hpp"

namespace medalign {

namespace {

std::vector<MultimodalQuery> embed_all(const QueryEncoder& enc, std::span<const QueryRecord> queries) {
  std::vector<MultimodalQuery> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(embed_query(enc, q.image, q.question));
  return out;
}

nlohmann::json read_json(const std::filesystem::path& path, const char* stage) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(stage, path.string());
  return nlohmann::json::parse(is);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// Propagates the first exception raised inside a parallel loop.
void rethrow_first(const std::vector<std::exception_ptr>& errors) {
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

std::string heldout_provenance(const SyntheticWorld& world) {
  return "world:" + std::to_string(world.seed) + "/heldout:" + std::to_string(world.heldout.size());
}

std::vector<DomainStats> calibrate_world_stats(const SyntheticWorld& world, std::span<const DomainKB> kbs,
                                               const AppConfig& config) {
  const auto enc = world_encoder(world.spec);
  const auto heldout = embed_all(enc, world.heldout);
  return calibrate_stats(heldout, kbs, config.routing.k, config.routing.epsilon, heldout_provenance(world));
}

std::vector<LabeledHiddenState> collect_estimator_corpus(const SyntheticWorld& world,
                                                         std::span<const ToyExpert> experts,
                                                         const AppConfig& config) {
  std::vector<LabeledHiddenState> corpus;
  for (std::size_t i = 0; i < world.calibration.size(); ++i) {
    const auto& q = world.calibration[i];
    const ToyExpert& expert = experts[static_cast<std::size_t>(q.domain)];
    ReasoningTask task{q.id, q.answer, q.domain, q.hard, {}};
    Track track;
    std::mt19937_64 rng(mix_seed(config.seed, 0xe57, i));
    for (std::size_t t = 0; t < config.federation.t_max; ++t) {
      FeatureVector h = expert.step(track, task, rng);
      auto predicted = expert.predict(h.values());
      corpus.push_back({std::move(h), std::move(predicted), q.answer, q.domain});
    }
  }
  return corpus;
}

ParentMeans compute_parent_means(std::span<const LabeledHiddenState> corpus) {
  std::map<int, std::vector<double>> sums;
  std::map<int, std::size_t> counts;
  for (const auto& s : corpus) {
    auto& acc = sums[s.expert_id];
    acc.resize(s.h.dim(), 0.0);
    for (std::size_t i = 0; i < s.h.dim(); ++i) acc[i] += s.h[i];
    ++counts[s.expert_id];
  }
  ParentMeans out;
  for (auto& [id, acc] : sums) {
    for (double& v : acc) v /= static_cast<double>(counts[id]);
    out.emplace(id, FeatureVector(std::move(acc)));
  }
  return out;
}

EstimatorTrainResult fit_estimator(std::span<const LabeledHiddenState> corpus, const AppConfig& config) {
  if (corpus.empty()) throw DomainError("empty estimator corpus");
  const auto& s = config.estimator;
  auto est = ConfidenceEstimator::random(corpus.front().h.dim(), s.hidden_dim, mix_seed(config.seed, 0xe5));
  est.alpha = s.alpha;
  est.epsilon_interp = s.epsilon_interp;
  est.s_norm = s.s_norm;
  est.u_low = s.u_low;
  est.u_high = s.u_high;
  return train_estimator(corpus, std::move(est), s.learning_rate, s.steps);
}

DependencyGraph build_world_graph(const SyntheticWorld& world, const AppConfig& config) {
  const auto samples = simulate_influence(world, config.graph, mix_seed(config.seed, 0x6a));
  GraphConfig gc;
  gc.edge_threshold = config.graph.edge_threshold;
  gc.significance_level = config.graph.significance_level;
  return build_dependency_graph(world.spec.domains, samples, gc);
}

Artifacts prepare_artifacts(const SyntheticWorld& world, const AppConfig& config) {
  Artifacts a;
  a.kbs = build_kbs(world, world_encoder(world.spec));
  a.stats = calibrate_world_stats(world, a.kbs, config);
  const auto experts = make_experts(world.spec.domains, config.experts);
  const auto corpus = collect_estimator_corpus(world, experts, config);
  a.parent_means = compute_parent_means(corpus);
  a.estimator = fit_estimator(corpus, config).estimator;
  a.graph = build_world_graph(world, config);
  return a;
}

void save_artifacts(const std::filesystem::path& dir, const Artifacts& a) {
  std::filesystem::create_directories(dir / "kb");
  save_kbs(dir / "kb", a.kbs);
  write_json(dir / "stats.json", stats_to_json(a.stats));
  write_json(dir / "estimator.json", estimator_to_json(a.estimator));
  write_json(dir / "parent_means.json", parent_means_to_json(a.parent_means));
  write_json(dir / "graph.json", graph_to_json(a.graph));
}

Artifacts load_artifacts(const std::filesystem::path& dir) {
  Artifacts a;
  const auto manifest = dir / "kb" / "manifest.json";
  if (!std::filesystem::exists(manifest)) throw MissingArtifactError("build-kb", manifest.string());
  a.kbs = load_kbs(manifest);
  a.stats = stats_from_json(read_json(dir / "stats.json", "calibrate"));
  a.estimator = estimator_from_json(read_json(dir / "estimator.json", "train-estimator"));
  a.parent_means = parent_means_from_json(read_json(dir / "parent_means.json", "train-estimator"));
  a.graph = graph_from_json(read_json(dir / "graph.json", "build-graph"));
  return a;
}

std::vector<RoutingDecision> route_queries(const SyntheticWorld& world, const Artifacts& artifacts,
                                           const AppConfig& config) {
  const std::string expected = heldout_provenance(world);
  for (const auto& s : artifacts.stats)
    if (s.provenance != expected)
      throw DomainError("routing stats for domain " + std::to_string(s.domain_id) + " come from '" + s.provenance +
                        "', expected '" + expected + "'");
  std::unordered_set<std::string> heldout_ids;
  for (const auto& q : world.heldout) heldout_ids.insert(q.id);
  for (const auto& q : world.live)
    if (heldout_ids.count(q.id)) throw DomainError("live query " + q.id + " is part of the held-out set");

  const auto enc = world_encoder(world.spec);
  const auto n = static_cast<std::ptrdiff_t>(world.live.size());
  std::vector<RoutingDecision> out(world.live.size());
  std::vector<std::exception_ptr> errors(world.live.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const auto& q = world.live[idx];
      out[idx] = route(embed_query(enc, q.image, q.question), artifacts.kbs, artifacts.stats, config.routing,
                       Execution::kSerial);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  rethrow_first(errors);
  return out;
}

double routing_accuracy(const SyntheticWorld& world, std::span<const RoutingDecision> routing) {
  if (routing.size() != world.live.size()) throw ShapeError("one routing decision per live query expected");
  if (routing.empty()) throw DomainError("no queries routed");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < routing.size(); ++i)
    if (routing[i].selection.active_experts.front() == world.live[i].domain) ++hits;
  return static_cast<double>(hits) / static_cast<double>(routing.size());
}

std::vector<QueryResult> answer_queries(const SyntheticWorld& world, const Artifacts& artifacts,
                                        const AppConfig& config, std::span<const RoutingDecision> routing,
                                        const FederationConfig& federation, const Reviewer& reviewer) {
  if (routing.size() != world.live.size()) throw ShapeError("one routing decision per live query expected");
  const auto experts = make_experts(world.spec.domains, config.experts);
  const FederationComponents components{experts, artifacts.estimator, artifacts.graph, artifacts.parent_means,
                                        world.answer_vocab};
  const HashedBagOfTokens encoder(config.aggregation.encoder_dim);
  std::vector<std::unordered_map<std::string, const Document*>> doc_index(artifacts.kbs.size());
  for (std::size_t d = 0; d < artifacts.kbs.size(); ++d)
    for (const auto& doc : artifacts.kbs[d].docs()) doc_index[d][doc.doc_id] = &doc;

  const auto n = static_cast<std::ptrdiff_t>(world.live.size());
  std::vector<QueryResult> out(world.live.size());
  std::vector<std::exception_ptr> errors(world.live.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      const auto start = std::chrono::steady_clock::now();
      const auto& q = world.live[idx];
      const auto& decision = routing[idx];
      const int lead = decision.selection.active_experts.front();
      ReasoningTask task{q.id, q.answer, q.domain, q.hard, {}};
      for (const auto& hit : decision.retrieval[static_cast<std::size_t>(lead)].hits)
        task.initial_context.push_back("context: " + doc_index[static_cast<std::size_t>(lead)].at(hit.doc_id)->text);

      QueryResult r;
      r.query_id = q.id;
      r.true_domain = q.domain;
      r.true_answer = q.answer;
      r.federation = run_federated(task, decision.selection, federation, components, mix_seed(config.seed, 0xfed, idx),
                                   {Schedule::kSerial, 0});
      std::vector<AnswerEmbedding> embeddings;
      for (const auto& e : r.federation.events)
        embeddings.push_back(embed_answer(encoder, e.answer, e.site_id, e.confidence));
      const auto clusters = cluster_answers(embeddings, config.aggregation.radius, config.aggregation.min_points);
      r.outcome = resolve(clusters, r.federation.events, config.aggregation.supermajority_fraction, q.text,
                          artifacts.prompt_template);
      if (r.outcome.mode == ConsensusMode::kSupermajority) {
        r.answer = r.outcome.final_answer;
      } else {
        const auto s = synthesize(reviewer, *r.outcome.prompt, r.federation.events);
        r.answer = s.answer;
        r.from_stub = s.from_stub;
      }
      r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      out[idx] = std::move(r);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  rethrow_first(errors);
  return out;
}

double macro_f1(std::span<const std::string> truth, std::span<const std::string> predicted) {
  if (truth.size() != predicted.size()) throw ShapeError("truth and prediction counts differ");
  if (truth.empty()) throw DomainError("macro-F1 of an empty set");
  std::set<std::string> labels(truth.begin(), truth.end());
  labels.insert(predicted.begin(), predicted.end());
  std::map<std::string, std::size_t> tp, fp, fn;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == predicted[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  double total = 0.0;
  for (const auto& l : labels) {
    const double denom = 2.0 * static_cast<double>(tp[l]) + static_cast<double>(fp[l] + fn[l]);
    total += denom > 0.0 ? 2.0 * static_cast<double>(tp[l]) / denom : 0.0;
  }
  return total / static_cast<double>(labels.size());
}

ModeMetrics mode_metrics(const SyntheticWorld& world, std::span<const QueryResult> results) {
  if (results.empty()) throw DomainError("no query results");
  std::vector<std::string> truth, predicted;
  std::vector<FederationResult> runs;
  std::size_t correct = 0;
  for (const auto& r : results) {
    truth.push_back(world.answer_vocab.at(static_cast<std::size_t>(r.true_answer)));
    predicted.push_back(r.answer);
    if (truth.back() == predicted.back()) ++correct;
    runs.push_back(r.federation);
  }
  ModeMetrics m;
  m.task_accuracy = static_cast<double>(correct) / static_cast<double>(results.size());
  m.f1 = macro_f1(truth, predicted);
  m.avg_chain_length = average_chain_length(runs);
  return m;
}

PipelineRun run_pipeline(const SyntheticWorld& world, const Artifacts& artifacts, const AppConfig& config,
                         const Reviewer& reviewer) {
  config.validate();
  PipelineRun run;
  run.routing = route_queries(world, artifacts, config);
  FederationConfig adaptive = config.federation;
  adaptive.halting_enabled = true;
  FederationConfig fixed = config.federation;
  fixed.halting_enabled = false;
  run.adaptive = answer_queries(world, artifacts, config, run.routing, adaptive, reviewer);
  run.fixed = answer_queries(world, artifacts, config, run.routing, fixed, reviewer);

  const auto a = mode_metrics(world, run.adaptive);
  const auto f = mode_metrics(world, run.fixed);
  auto& rep = run.report;
  rep.seed = config.seed;
  rep.gamma = config.federation.gamma;
  rep.num_queries = world.live.size();
  rep.routing_accuracy = routing_accuracy(world, run.routing);
  rep.task_accuracy = a.task_accuracy;
  rep.f1 = a.f1;
  rep.task_accuracy_fixed = f.task_accuracy;
  rep.f1_fixed = f.f1;
  rep.avg_chain_length_adaptive = a.avg_chain_length;
  rep.avg_chain_length_fixed = f.avg_chain_length;
  rep.reduction_percent = 100.0 * (1.0 - a.avg_chain_length / f.avg_chain_length);
  for (const auto& r : run.adaptive) rep.latencies_ms.push_back(r.latency_ms);
  rep.config = config_to_json(config);
  return run;
}

SweepResult compare_adaptive_vs_fixed(const SyntheticWorld& world, const Artifacts& artifacts,
                                      const AppConfig& config, std::span<const double> gammas) {
  if (gammas.empty()) throw DomainError("empty gamma grid");
  const auto routing = route_queries(world, artifacts, config);
  FederationConfig fed = config.federation;
  fed.halting_enabled = false;
  SweepResult out;
  out.fixed = mode_metrics(world, answer_queries(world, artifacts, config, routing, fed));
  fed.halting_enabled = true;
  for (double g : gammas) {
    fed.gamma = g;
    fed.validate();
    SweepRow row;
    row.gamma = g;
    row.adaptive = mode_metrics(world, answer_queries(world, artifacts, config, routing, fed));
    row.reduction_percent = 100.0 * (1.0 - row.adaptive.avg_chain_length / out.fixed.avg_chain_length);
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace medalign
