#include "medalign/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "medalign/errors.hpp"

namespace medalign {

namespace {

const char* const kRateFields[] = {"routing_accuracy", "task_accuracy", "f1", "task_accuracy_fixed", "f1_fixed"};

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("report", path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  const auto rank = static_cast<std::size_t>(std::clamp(std::ceil(q / 100.0 * n), 1.0, n));
  return v[rank - 1];
}

}  // namespace

nlohmann::json report_to_json(const RunReport& r) {
  return {{"seed", r.seed},
          {"gamma", r.gamma},
          {"num_queries", r.num_queries},
          {"routing_accuracy", r.routing_accuracy},
          {"task_accuracy", r.task_accuracy},
          {"f1", r.f1},
          {"task_accuracy_fixed", r.task_accuracy_fixed},
          {"f1_fixed", r.f1_fixed},
          {"avg_chain_length_adaptive", r.avg_chain_length_adaptive},
          {"avg_chain_length_fixed", r.avg_chain_length_fixed},
          {"reduction_percent", r.reduction_percent},
          {"config", r.config}};
}

RunReport report_from_json(const nlohmann::json& j) {
  validate_report_json(j);
  RunReport r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.gamma = j.at("gamma").get<double>();
  r.num_queries = j.at("num_queries").get<std::size_t>();
  r.routing_accuracy = j.at("routing_accuracy").get<double>();
  r.task_accuracy = j.at("task_accuracy").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.task_accuracy_fixed = j.at("task_accuracy_fixed").get<double>();
  r.f1_fixed = j.at("f1_fixed").get<double>();
  r.avg_chain_length_adaptive = j.at("avg_chain_length_adaptive").get<double>();
  r.avg_chain_length_fixed = j.at("avg_chain_length_fixed").get<double>();
  r.reduction_percent = j.at("reduction_percent").get<double>();
  r.config = j.at("config");
  return r;
}

void validate_report_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DomainError("report must be a JSON object");
  for (const char* key : {"seed", "num_queries"})
    if (!j.contains(key) || !j.at(key).is_number_unsigned()) throw DomainError(std::string("report.") + key);
  for (const char* key : kRateFields) {
    if (!j.contains(key) || !j.at(key).is_number()) throw DomainError(std::string("report.") + key);
    const double v = j.at(key).get<double>();
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError(std::string("report.") + key + " outside [0,1]");
  }
  for (const char* key : {"gamma", "avg_chain_length_adaptive", "avg_chain_length_fixed", "reduction_percent"})
    if (!j.contains(key) || !j.at(key).is_number()) throw DomainError(std::string("report.") + key);
  if (!j.contains("config") || !j.at("config").is_object()) throw DomainError("report.config");
  const double a = j.at("avg_chain_length_adaptive").get<double>();
  const double f = j.at("avg_chain_length_fixed").get<double>();
  if (!(f > 0.0)) throw DomainError("report.avg_chain_length_fixed must be > 0");
  if (std::abs(j.at("reduction_percent").get<double>() - 100.0 * (1.0 - a / f)) > 1e-9)
    throw DomainError("report.reduction_percent disagrees with the chain lengths");
}

nlohmann::json timing_to_json(std::span<const double> latencies_ms) {
  if (latencies_ms.empty()) return {{"count", 0}};
  std::vector<double> v(latencies_ms.begin(), latencies_ms.end());
  return {{"count", v.size()}, {"latency_ms_median", percentile(v, 50.0)}, {"latency_ms_p95", percentile(v, 95.0)}};
}

std::string sweep_csv(const SweepResult& sweep) {
  std::ostringstream os;
  os << "gamma,f1,task_accuracy,avg_chain_length,fixed_f1,fixed_avg_chain_length,reduction_percent\n";
  for (const auto& r : sweep.rows)
    os << num(r.gamma) << ',' << num(r.adaptive.f1) << ',' << num(r.adaptive.task_accuracy) << ','
       << num(r.adaptive.avg_chain_length) << ',' << num(sweep.fixed.f1) << ',' << num(sweep.fixed.avg_chain_length)
       << ',' << num(r.reduction_percent) << '\n';
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

void write_run(const std::filesystem::path& dir, const SyntheticWorld& world, const PipelineRun& run) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::ostringstream routing, federation, outcome;
  for (std::size_t i = 0; i < run.routing.size(); ++i) {
    auto entry = routing_log_entry(world.live[i].id, run.routing[i]);
    entry["true_domain"] = world.live[i].domain;
    routing << entry.dump() << '\n';
  }
  for (std::size_t i = 0; i < run.adaptive.size(); ++i) {
    const auto& a = run.adaptive[i];
    const auto& f = run.fixed[i];
    for (const auto& s : a.federation.log) federation << step_log_json(a.query_id, s).dump() << '\n';
    nlohmann::json rec{{"query_id", a.query_id},
                       {"true_domain", a.true_domain},
                       {"true_answer", world.answer_vocab.at(static_cast<std::size_t>(a.true_answer))},
                       {"answer", a.answer},
                       {"from_stub", a.from_stub},
                       {"consensus", outcome_to_json(a.outcome)},
                       {"federation", federation_summary_json(a.federation)},
                       {"executed_steps", a.federation.executed_steps},
                       {"fixed",
                        {{"answer", f.answer},
                         {"mode", mode_name(f.outcome.mode)},
                         {"from_stub", f.from_stub},
                         {"executed_steps", f.federation.executed_steps}}}};
    outcome << rec.dump() << '\n';
  }
  write_text(dir / "routing.jsonl", routing.str());
  write_text(dir / "federation.jsonl", federation.str());
  write_text(dir / "outcome.jsonl", outcome.str());
  write_text(dir / "report.json", report_to_json(run.report).dump(2) + "\n");
  write_text(dir / "timing.json", timing_to_json(run.report.latencies_ms).dump(2) + "\n");
}

void write_sweep(const std::filesystem::path& dir, const SweepResult& sweep) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "sweep.csv", sweep_csv(sweep));
}

RunReport recount_run(const std::filesystem::path& dir) {
  std::ifstream is(dir / "report.json");
  if (!is) throw MissingArtifactError("report", (dir / "report.json").string());
  RunReport out = report_from_json(nlohmann::json::parse(is));

  const auto routing = read_jsonl(dir / "routing.jsonl");
  if (routing.empty()) throw DomainError("routing log is empty");
  std::size_t routed_right = 0;
  for (const auto& r : routing)
    if (r.at("active_experts").at(0).get<int>() == r.at("true_domain").get<int>()) ++routed_right;
  out.routing_accuracy = static_cast<double>(routed_right) / static_cast<double>(routing.size());

  // Executed steps per (query, site) = last logged step.
  std::map<std::pair<std::string, int>, std::size_t> last_step;
  for (const auto& s : read_jsonl(dir / "federation.jsonl")) {
    auto& v = last_step[{s.at("query_id").get<std::string>(), s.at("site_id").get<int>()}];
    v = std::max(v, s.at("step").get<std::size_t>());
  }
  double adaptive_steps = 0.0;
  for (const auto& [key, steps] : last_step) adaptive_steps += static_cast<double>(steps);

  const auto outcomes = read_jsonl(dir / "outcome.jsonl");
  if (outcomes.size() != routing.size()) throw DomainError("outcome and routing logs differ in length");
  std::vector<std::string> truth, adaptive, fixed;
  std::size_t adaptive_right = 0, fixed_right = 0, fixed_sites = 0;
  double fixed_steps = 0.0;
  for (const auto& o : outcomes) {
    truth.push_back(o.at("true_answer").get<std::string>());
    adaptive.push_back(o.at("answer").get<std::string>());
    fixed.push_back(o.at("fixed").at("answer").get<std::string>());
    if (adaptive.back() == truth.back()) ++adaptive_right;
    if (fixed.back() == truth.back()) ++fixed_right;
    for (const auto& s : o.at("fixed").at("executed_steps")) {
      fixed_steps += s.get<double>();
      ++fixed_sites;
    }
  }
  const auto n = static_cast<double>(outcomes.size());
  out.num_queries = outcomes.size();
  out.task_accuracy = static_cast<double>(adaptive_right) / n;
  out.task_accuracy_fixed = static_cast<double>(fixed_right) / n;
  out.f1 = macro_f1(truth, adaptive);
  out.f1_fixed = macro_f1(truth, fixed);
  if (last_step.empty() || fixed_sites == 0) throw DomainError("no executed steps in the run logs");
  out.avg_chain_length_adaptive = adaptive_steps / static_cast<double>(last_step.size());
  out.avg_chain_length_fixed = fixed_steps / static_cast<double>(fixed_sites);
  out.reduction_percent = 100.0 * (1.0 - out.avg_chain_length_adaptive / out.avg_chain_length_fixed);
  return out;
}

}  // namespace medalign
