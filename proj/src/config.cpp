#include "medalign/config.hpp"

#include <fstream>

#include "medalign/errors.hpp"

namespace medalign {

void AppConfig::validate() const {
  if (world.domains < 1) throw ConfigError("world.domains must be >= 1");
  if (world.num_answers != experts.num_answers) throw ConfigError("world.num_answers must equal experts.num_answers");
  if (routing.k == 0) throw ConfigError("retrieval.k must be >= 1");
  if (!(routing.temperature > 0.0)) throw ConfigError("routing.tau must be > 0");
  if (!(routing.epsilon > 0.0)) throw ConfigError("routing.epsilon must be > 0");
  if (routing.max_active == 0) throw ConfigError("routing.max_active must be >= 1");
  if (!(aggregation.radius > 0.0)) throw ConfigError("aggregation.radius must be > 0");
  if (graph.restarts < 2) throw ConfigError("graph.restarts must be >= 2");
  federation.validate();
  experts.validate();
  mdpo.validate();
}

nlohmann::json world_spec_to_json(const WorldSpec& w) {
  return {{"domains", w.domains},
                {"image_dim", w.image_dim},
                {"question_dim", w.question_dim},
                {"embed_dim", w.embed_dim},
                {"docs_per_domain", w.docs_per_domain},
                {"queries", w.queries},
                {"heldout", w.heldout},
                {"calibration_per_domain", w.calibration_per_domain},
                {"num_answers", w.num_answers},
                {"separation_margin", w.separation_margin},
                {"query_noise", w.query_noise},
                {"doc_noise", w.doc_noise},
                {"cross_domain_fraction", w.cross_domain_fraction},
                {"hard_fraction", w.hard_fraction},
                {"preference_count", w.preference_count},
                {"crossmodal_count", w.crossmodal_count},
                {"anchor_calibration_count", w.anchor_calibration_count},
                {"label_signal", w.label_signal},
                {"mdpo_noise", w.mdpo_noise}};
}

nlohmann::json config_to_json(const AppConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["world"] = world_spec_to_json(c.world);
    j["retrieval"] = {{"k", c.routing.k}, {"m", c.retrieved_texts}};
  j["routing"] = {{"tau", c.routing.temperature},
                  {"epsilon", c.routing.epsilon},
                  {"entropy_threshold", c.routing.entropy_threshold},
                  {"max_active", c.routing.max_active}};
  j["federation"] = {{"N", c.federation.n_sites},
                     {"M", c.federation.quorum},
                     {"gamma", c.federation.gamma},
                     {"t_max", c.federation.t_max},
                     {"unit", c.federation.unit_mode == UnitMode::kToken ? "token" : "segment"}};
  j["experts"] = dynamics_to_json(c.experts);
  const auto& e = c.estimator;
  j["estimator"] = {{"hidden_dim", e.hidden_dim}, {"alpha", e.alpha},   {"epsilon_interp", e.epsilon_interp},
                    {"s_norm", e.s_norm},         {"u_low", e.u_low},   {"u_high", e.u_high},
                    {"learning_rate", e.learning_rate}, {"steps", e.steps}};
  const auto& g = c.graph;
  j["graph"] = {{"edge_threshold", g.edge_threshold},
                {"significance_level", g.significance_level},
                {"restarts", g.restarts},
                {"eval_queries", g.eval_queries},
                {"base_accuracy", g.base_accuracy}};
  const auto& a = c.aggregation;
  j["aggregation"] = {{"supermajority_fraction", a.supermajority_fraction},
                      {"radius", a.radius},
                      {"min_points", a.min_points},
                      {"encoder_dim", a.encoder_dim}};
  j["mdpo"] = mdpo_config_to_json(c.mdpo);
  j["sweep"] = {{"gammas", c.sweep_gammas}};
  j["metadata"] = c.metadata;
  return j;
}

namespace {
template <typename T>
void read(const nlohmann::json& j, const char* section, const char* key, T& out) {
  if (!j.contains(section)) return;
  const auto& s = j.at(section);
  if (s.contains(key)) out = s.at(key).get<T>();
}
template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace

WorldSpec world_spec_from_json(const nlohmann::json& j) {
  WorldSpec w;
  read_key(j, "domains", w.domains);
  read_key(j, "image_dim", w.image_dim);
  read_key(j, "question_dim", w.question_dim);
  read_key(j, "embed_dim", w.embed_dim);
  read_key(j, "docs_per_domain", w.docs_per_domain);
  read_key(j, "queries", w.queries);
  read_key(j, "heldout", w.heldout);
  read_key(j, "calibration_per_domain", w.calibration_per_domain);
  read_key(j, "num_answers", w.num_answers);
  read_key(j, "separation_margin", w.separation_margin);
  read_key(j, "query_noise", w.query_noise);
  read_key(j, "doc_noise", w.doc_noise);
  read_key(j, "cross_domain_fraction", w.cross_domain_fraction);
  read_key(j, "hard_fraction", w.hard_fraction);
  read_key(j, "preference_count", w.preference_count);
  read_key(j, "crossmodal_count", w.crossmodal_count);
  read_key(j, "anchor_calibration_count", w.anchor_calibration_count);
  read_key(j, "label_signal", w.label_signal);
  read_key(j, "mdpo_noise", w.mdpo_noise);
  return w;
}

AppConfig config_from_json(const nlohmann::json& j) {
  AppConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("world")) c.world = world_spec_from_json(j.at("world"));
  read(j, "retrieval", "k", c.routing.k);
  read(j, "retrieval", "m", c.retrieved_texts);
  read(j, "routing", "tau", c.routing.temperature);
  read(j, "routing", "epsilon", c.routing.epsilon);
  read(j, "routing", "entropy_threshold", c.routing.entropy_threshold);
  read(j, "routing", "max_active", c.routing.max_active);
  read(j, "federation", "N", c.federation.n_sites);
  read(j, "federation", "M", c.federation.quorum);
  read(j, "federation", "gamma", c.federation.gamma);
  read(j, "federation", "t_max", c.federation.t_max);
  std::string unit = "segment";
  read(j, "federation", "unit", unit);
  if (unit != "segment" && unit != "token") throw ConfigError("federation.unit must be 'segment' or 'token'");
  c.federation.unit_mode = unit == "token" ? UnitMode::kToken : UnitMode::kSegment;
  if (j.contains("experts")) c.experts = dynamics_from_json(j.at("experts"));
  auto& e = c.estimator;
  read(j, "estimator", "hidden_dim", e.hidden_dim);
  read(j, "estimator", "alpha", e.alpha);
  read(j, "estimator", "epsilon_interp", e.epsilon_interp);
  read(j, "estimator", "s_norm", e.s_norm);
  read(j, "estimator", "u_low", e.u_low);
  read(j, "estimator", "u_high", e.u_high);
  read(j, "estimator", "learning_rate", e.learning_rate);
  read(j, "estimator", "steps", e.steps);
  auto& g = c.graph;
  read(j, "graph", "edge_threshold", g.edge_threshold);
  read(j, "graph", "significance_level", g.significance_level);
  read(j, "graph", "restarts", g.restarts);
  read(j, "graph", "eval_queries", g.eval_queries);
  read(j, "graph", "base_accuracy", g.base_accuracy);
  auto& a = c.aggregation;
  read(j, "aggregation", "supermajority_fraction", a.supermajority_fraction);
  read(j, "aggregation", "radius", a.radius);
  read(j, "aggregation", "min_points", a.min_points);
  read(j, "aggregation", "encoder_dim", a.encoder_dim);
  if (j.contains("mdpo")) c.mdpo = mdpo_config_from_json(j.at("mdpo"));
  read(j, "sweep", "gammas", c.sweep_gammas);
  if (j.contains("metadata")) c.metadata = j.at("metadata");
  c.validate();
  return c;
}

AppConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("config", path.string());
  return config_from_json(nlohmann::json::parse(is));
}

nlohmann::json apply_overrides(nlohmann::json base, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + a);
    std::string pointer = "/" + a.substr(0, eq);
    for (auto& ch : pointer)
      if (ch == '.') ch = '/';
    const std::string raw = a.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    base[nlohmann::json::json_pointer(pointer)] = value;
  }
  return base;
}

}  // namespace medalign
