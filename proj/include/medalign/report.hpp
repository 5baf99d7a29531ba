#pragma once

#include <filesystem>
#include <span>
#include <string>

#include <json.hpp>

#include "medalign/pipeline.hpp"

namespace medalign {

// Deterministic part of a run report; latencies live in timing.json.
nlohmann::json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);

// Throws DomainError naming the first violated field.
void validate_report_json(const nlohmann::json& j);

// Nearest-rank percentile of per-query latencies.
nlohmann::json timing_to_json(std::span<const double> latencies_ms);

std::string sweep_csv(const SweepResult& sweep);

// report.json, routing.jsonl, federation.jsonl, outcome.jsonl and timing.json.
void write_run(const std::filesystem::path& dir, const SyntheticWorld& world, const PipelineRun& run);
void write_sweep(const std::filesystem::path& dir, const SweepResult& sweep);

// Metrics recounted from routing.jsonl, federation.jsonl and outcome.jsonl
// alone. Seed, gamma and config are copied from report.json.
RunReport recount_run(const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace medalign
