#include <random>

#include <benchmark/benchmark.h>

#include "medalign/config.hpp"
#include "medalign/feature_vector.hpp"
#include "medalign/federation.hpp"
#include "medalign/kernels.hpp"
#include "medalign/knowledge.hpp"
#include "medalign/pipeline.hpp"
#include "medalign/world.hpp"

using namespace medalign;

namespace {

std::vector<double> unit_rows(std::size_t rows, std::size_t dim) {
  std::mt19937_64 rng(1);
  std::vector<double> m;
  m.reserve(rows * dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto v = normalized(gaussian_vector(rng, dim));
    m.insert(m.end(), v.begin(), v.end());
  }
  return m;
}

void row_dots_bench(benchmark::State& state, kernels::Execution exec) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 64;
  const auto m = unit_rows(rows, dim);
  const auto q = unit_rows(1, dim);
  std::vector<double> out(rows);
  for (auto _ : state) {
    kernels::row_dots(exec, m, dim, q, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}

void BM_RowDotsSerial(benchmark::State& state) { row_dots_bench(state, kernels::Execution::kSerial); }
void BM_RowDotsParallel(benchmark::State& state) { row_dots_bench(state, kernels::Execution::kParallel); }
BENCHMARK(BM_RowDotsSerial)->Arg(512)->Arg(8192)->Arg(65536);
BENCHMARK(BM_RowDotsParallel)->Arg(512)->Arg(8192)->Arg(65536);

void retrieve_bench(benchmark::State& state, Execution exec) {
  std::mt19937_64 rng(2);
  std::vector<DomainKB> kbs;
  for (int d = 0; d < 8; ++d) {
    DomainKB kb(d, 32);
    for (int i = 0; i < state.range(0); ++i)
      kb.add({"d" + std::to_string(d) + "_" + std::to_string(i), FeatureVector(gaussian_vector(rng, 32)), ""});
    kbs.push_back(std::move(kb));
  }
  const MultimodalQuery q{FeatureVector({0.0}), FeatureVector({0.0}), FeatureVector(normalized(gaussian_vector(rng, 32)))};
  for (auto _ : state) benchmark::DoNotOptimize(retrieve_all(kbs, q, 5, exec));
}

void BM_RetrieveAllSerial(benchmark::State& state) { retrieve_bench(state, Execution::kSerial); }
void BM_RetrieveAllParallel(benchmark::State& state) { retrieve_bench(state, Execution::kParallel); }
BENCHMARK(BM_RetrieveAllSerial)->Arg(256)->Arg(4096);
BENCHMARK(BM_RetrieveAllParallel)->Arg(256)->Arg(4096);

void federation_bench(benchmark::State& state, Schedule schedule) {
  const auto experts = make_experts(4, ExpertDynamics{});
  const auto est = ConfidenceEstimator::random(16, 16, 3);
  DependencyGraph graph;
  graph.num_nodes = 4;
  const ParentMeans means;
  const std::vector<std::string> vocab{"a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7"};
  const FederationComponents comp{experts, est, graph, means, vocab};
  FederationConfig cfg;
  cfg.n_sites = static_cast<std::size_t>(state.range(0));
  cfg.quorum = cfg.n_sites;
  cfg.gamma = 1.0;
  ReasoningTask task{"q", 1, 0, false, {"context"}};
  ExpertSelection sel;
  sel.active_experts = {0};
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(run_federated(task, sel, cfg, comp, ++seed, {schedule}));
}

void BM_FederationSerial(benchmark::State& state) { federation_bench(state, Schedule::kSerial); }
void BM_FederationParallel(benchmark::State& state) { federation_bench(state, Schedule::kParallel); }
BENCHMARK(BM_FederationSerial)->Arg(5)->Arg(16);
BENCHMARK(BM_FederationParallel)->Arg(5)->Arg(16);

void BM_Pipeline(benchmark::State& state) {
  AppConfig c;
  c.world.queries = static_cast<std::size_t>(state.range(0));
  const auto world = generate_world(c.world, c.seed);
  const auto art = prepare_artifacts(world, c);
  for (auto _ : state) benchmark::DoNotOptimize(run_pipeline(world, art, c));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Pipeline)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
