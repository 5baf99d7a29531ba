#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "medalign/config.hpp"
#include "medalign/errors.hpp"
#include "medalign/mdpo.hpp"
#include "medalign/pipeline.hpp"
#include "medalign/report.hpp"
#include "medalign/world.hpp"

namespace fs = std::filesystem;
using namespace medalign;
using nlohmann::json;

namespace {

struct Options {
  fs::path run_dir = "run";
  std::optional<fs::path> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta, gamma, tau;
  std::optional<std::size_t> k, n_sites, quorum, t_max, domains, queries;
  std::optional<double> margin;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--run-dir", o.run_dir, "Directory holding artifacts and outputs");
  cmd->add_option("--config", o.config_path, "Config JSON (defaults to <run-dir>/config.json when present)");
  cmd->add_option("--set", o.overrides, "Override any config key, e.g. --set federation.gamma=0.9");
  cmd->add_option("--seed", o.seed);
  cmd->add_option("--beta", o.beta);
  cmd->add_option("--k", o.k);
  cmd->add_option("--N", o.n_sites);
  cmd->add_option("--M", o.quorum);
  cmd->add_option("--gamma", o.gamma);
  cmd->add_option("--tau", o.tau);
  cmd->add_option("--t-max", o.t_max);
  cmd->add_option("--domains", o.domains);
  cmd->add_option("--queries", o.queries);
  cmd->add_option("--margin", o.margin);
}

json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw MissingArtifactError("config", p.string());
  return json::parse(is);
}

// Defaults, then the config file, then flags.
AppConfig resolve_config(const Options& o) {
  json j = config_to_json(AppConfig{});
  if (o.config_path)
    j.merge_patch(read_json_file(*o.config_path));
  else if (fs::exists(o.run_dir / "config.json"))
    j.merge_patch(read_json_file(o.run_dir / "config.json"));
  if (o.seed) j["seed"] = *o.seed;
  if (o.beta) j["mdpo"]["beta"] = *o.beta;
  if (o.k) j["retrieval"]["k"] = *o.k;
  if (o.n_sites) j["federation"]["N"] = *o.n_sites;
  if (o.quorum) j["federation"]["M"] = *o.quorum;
  if (o.gamma) j["federation"]["gamma"] = *o.gamma;
  if (o.tau) j["routing"]["tau"] = *o.tau;
  if (o.t_max) j["federation"]["t_max"] = *o.t_max;
  if (o.domains) j["world"]["domains"] = *o.domains;
  if (o.queries) j["world"]["queries"] = *o.queries;
  if (o.margin) j["world"]["separation_margin"] = *o.margin;
  return config_from_json(apply_overrides(std::move(j), o.overrides));
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

template <typename T, typename F>
void write_jsonl(const fs::path& p, const std::vector<T>& rows, F to_json) {
  std::ostringstream os;
  for (const auto& r : rows) os << to_json(r).dump() << '\n';
  write_text(p, os.str());
}

template <typename T, typename F>
std::vector<T> read_jsonl(const fs::path& p, const char* stage, F from_json) {
  std::ifstream is(p);
  if (!is) throw MissingArtifactError(stage, p.string());
  std::vector<T> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(from_json(json::parse(line)));
  return out;
}

SyntheticWorld world_of(const Options& o) { return load_world(o.run_dir / "world.json"); }

void cmd_gen_world(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  fs::create_directories(o.run_dir);
  const auto world = generate_world(cfg.world, cfg.seed);
  save_world(o.run_dir / "world.json", world);
  write_json(o.run_dir / "config.json", config_to_json(cfg));
  const auto data = generate_mdpo_data(world, world_featurizer(world));
  write_jsonl(o.run_dir / "preference.jsonl", data.preference, preference_to_json);
  write_jsonl(o.run_dir / "crossmodal.jsonl", data.crossmodal, crossmodal_to_json);
  write_jsonl(o.run_dir / "calibration.jsonl", data.calibration, preference_to_json);
  std::cout << "world: " << world.live.size() << " live, " << world.heldout.size() << " held-out, "
            << world.calibration.size() << " calibration queries; min margin " << min_query_margin(world) << '\n';
}

void cmd_build_kb(const Options& o) {
  const auto world = world_of(o);
  const auto kbs = build_kbs(world, world_encoder(world.spec));
  fs::create_directories(o.run_dir / "kb");
  save_kbs(o.run_dir / "kb", kbs);
  std::cout << "kb: " << kbs.size() << " domains written to " << (o.run_dir / "kb").string() << '\n';
}

std::vector<DomainKB> kbs_of(const Options& o) {
  const auto manifest = o.run_dir / "kb" / "manifest.json";
  if (!fs::exists(manifest)) throw MissingArtifactError("build-kb", manifest.string());
  return load_kbs(manifest);
}

void cmd_calibrate(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  const auto stats = calibrate_world_stats(world, kbs_of(o), cfg);
  write_json(o.run_dir / "stats.json", stats_to_json(stats));
  std::cout << "stats: " << stats.size() << " domains from " << stats.front().provenance << '\n';
}

void cmd_train_mdpo(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  MdpoDatasets data;
  data.preference = read_jsonl<PreferenceTuple>(o.run_dir / "preference.jsonl", "gen-world", preference_from_json);
  data.crossmodal = read_jsonl<CrossModalPair>(o.run_dir / "crossmodal.jsonl", "gen-world", crossmodal_from_json);
  data.calibration = read_jsonl<PreferenceTuple>(o.run_dir / "calibration.jsonl", "gen-world", preference_from_json);
  const auto featurizer = world_featurizer(world);
  ToyPolicy policy(featurizer.dim(), world.answer_vocab);
  const ToyPolicy reference = policy.frozen_clone();
  const auto result = train_mdpo(data, policy, reference, featurizer, cfg.mdpo);
  write_json(o.run_dir / "policy.json", policy_to_json(result.policy));
  write_json(o.run_dir / "reference_policy.json", policy_to_json(reference));
  write_json(o.run_dir / "anchor.json", {{"delta", result.anchor.delta},
                                         {"percentile_q", result.anchor.percentile_q},
                                         {"calibration_size", result.anchor.calibration_size}});
  write_text(o.run_dir / "loss_trace.csv", loss_trace_csv(result.trace));
  std::cout << "mdpo: " << result.trace.size() << " batches, final total loss " << result.trace.back().total << '\n';
}

void cmd_train_estimator(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  const auto experts = make_experts(world.spec.domains, cfg.experts);
  const auto corpus = collect_estimator_corpus(world, experts, cfg);
  const auto fit = fit_estimator(corpus, cfg);
  write_json(o.run_dir / "estimator.json", estimator_to_json(fit.estimator));
  write_json(o.run_dir / "parent_means.json", parent_means_to_json(compute_parent_means(corpus)));
  std::ostringstream trace;
  trace.precision(17);
  trace << "step,loss\n";
  for (std::size_t i = 0; i < fit.loss_trace.size(); ++i) trace << i << ',' << fit.loss_trace[i] << '\n';
  write_text(o.run_dir / "estimator_loss.csv", trace.str());
  if (fit.single_class_warning) std::cerr << "warning: estimator corpus holds a single class\n";
  std::cout << "estimator: " << corpus.size() << " states, loss " << fit.loss_trace.front() << " -> "
            << fit.loss_trace.back() << '\n';
}

void cmd_build_graph(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto graph = build_world_graph(world_of(o), cfg);
  write_json(o.run_dir / "graph.json", graph_to_json(graph));
  std::cout << "graph: " << graph.edges.size() << " edges\n";
}

Artifacts artifacts_of(const Options& o) {
  Artifacts a = load_artifacts(o.run_dir);
  const fs::path prompt = fs::path(MEDALIGN_ASSET_DIR) / "synthesis_prompt.txt";
  if (fs::exists(prompt)) a.prompt_template = load_synthesis_template(prompt);
  return a;
}

void cmd_route(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  Artifacts a;
  a.kbs = kbs_of(o);
  std::ifstream is(o.run_dir / "stats.json");
  if (!is) throw MissingArtifactError("calibrate", (o.run_dir / "stats.json").string());
  a.stats = stats_from_json(json::parse(is));
  const auto routing = route_queries(world, a, cfg);
  std::ostringstream os;
  for (std::size_t i = 0; i < routing.size(); ++i) {
    auto entry = routing_log_entry(world.live[i].id, routing[i]);
    entry["true_domain"] = world.live[i].domain;
    os << entry.dump() << '\n';
  }
  write_text(o.run_dir / "routing.jsonl", os.str());
  std::cout << "routing accuracy " << routing_accuracy(world, routing) << '\n';
}

void cmd_simulate(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  const auto run = run_pipeline(world, artifacts_of(o), cfg);
  write_run(o.run_dir, world, run);
  const auto& r = run.report;
  std::cout << "routing " << r.routing_accuracy << ", accuracy " << r.task_accuracy << " (fixed "
            << r.task_accuracy_fixed << "), f1 " << r.f1 << ", chain " << r.avg_chain_length_adaptive << " vs "
            << r.avg_chain_length_fixed << " (" << r.reduction_percent << "% shorter)\n";
}

void cmd_sweep(const Options& o) {
  const AppConfig cfg = resolve_config(o);
  const auto world = world_of(o);
  const auto sweep = compare_adaptive_vs_fixed(world, artifacts_of(o), cfg, cfg.sweep_gammas);
  write_sweep(o.run_dir, sweep);
  std::cout << sweep_csv(sweep);
}

int cmd_report(const Options& o, const std::optional<fs::path>& out) {
  const RunReport recounted = recount_run(o.run_dir);
  std::ifstream is(o.run_dir / "report.json");
  const json emitted = json::parse(is);
  const json again = report_to_json(recounted);
  validate_report_json(again);
  write_text(out.value_or(o.run_dir / "report.json"), again.dump(2) + "\n");
  if (again != emitted) {
    std::cerr << "report.json disagrees with the recount from the run logs\n";
    return 1;
  }
  std::cout << "report matches the run logs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale retrieval-routed, federated adaptive-halting simulator"};
  app.require_subcommand(1);
  Options o;
  std::optional<fs::path> report_out;

  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage stages[] = {
      {"gen-world", "Generate the synthetic world and preference data"},
      {"build-kb", "Encode documents into per-domain knowledge bases"},
      {"calibrate", "Estimate routing statistics on held-out queries"},
      {"train-mdpo", "Train the toy policy with the combined preference loss"},
      {"train-estimator", "Train the confidence estimator and compute parent means"},
      {"build-graph", "Build the expert dependency graph"},
      {"route", "Route live queries and write routing.jsonl"},
      {"simulate", "Run routing, federation and aggregation for every live query"},
      {"sweep", "Compare adaptive halting against fixed depth over the gamma grid"},
      {"report", "Recount metrics from the run logs and re-emit report.json"},
  };
  std::vector<CLI::App*> cmds;
  for (const auto& s : stages) {
    auto* c = app.add_subcommand(s.name, s.help);
    add_common(c, o);
    cmds.push_back(c);
  }
  cmds.back()->add_option("--out", report_out, "Where to write the re-emitted report");

  CLI11_PARSE(app, argc, argv);
  try {
    if (cmds[0]->parsed()) cmd_gen_world(o);
    if (cmds[1]->parsed()) cmd_build_kb(o);
    if (cmds[2]->parsed()) cmd_calibrate(o);
    if (cmds[3]->parsed()) cmd_train_mdpo(o);
    if (cmds[4]->parsed()) cmd_train_estimator(o);
    if (cmds[5]->parsed()) cmd_build_graph(o);
    if (cmds[6]->parsed()) cmd_route(o);
    if (cmds[7]->parsed()) cmd_simulate(o);
    if (cmds[8]->parsed()) cmd_sweep(o);
    if (cmds[9]->parsed()) return cmd_report(o, report_out);
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
