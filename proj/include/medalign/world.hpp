#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/config.hpp"
#include "medalign/knowledge.hpp"
#include "medalign/mdpo.hpp"
#include "medalign/metacog.hpp"
#include "medalign/policy.hpp"

namespace medalign {

struct QueryRecord {
  std::string id;
  int domain = 0;
  int answer = 0;
  bool hard = false;
  FeatureVector image;
  FeatureVector question;
  std::string text;
};

struct DocRecord {
  std::string doc_id;
  int domain = 0;   // KB the document is filed under
  int source = 0;   // domain whose prototype generated it
  FeatureVector image;
  FeatureVector question;
  std::string text;
};

// Fully synthetic task world. Query sets:
//   live:        routed and answered by the pipeline
//   heldout:     routing statistics only
//   calibration: estimator corpus and parent means
struct SyntheticWorld {
  std::uint64_t seed = 0;
  WorldSpec spec;
  std::vector<std::string> domain_names;
  std::vector<std::string> answer_vocab;
  std::vector<FeatureVector> image_prototypes;
  std::vector<FeatureVector> question_prototypes;
  std::vector<FeatureVector> embedding_prototypes;  // unit, encoder space
  std::vector<DocRecord> docs;
  std::vector<QueryRecord> live;
  std::vector<QueryRecord> heldout;
  std::vector<QueryRecord> calibration;
  // gains[i][j]: accuracy gain of expert j when it receives expert i's retrieved context.
  std::vector<std::vector<double>> influence_gains;
};

ToyQueryEncoder world_encoder(const WorldSpec& spec);

// Throws ConfigError for D < 2 or a negative margin and GenerationError when
// queries meeting the margin cannot be sampled.
SyntheticWorld generate_world(const WorldSpec& spec, std::uint64_t seed);

// Smallest (own-prototype cosine - best other-prototype cosine) over all queries.
double min_query_margin(const SyntheticWorld& world);

nlohmann::json world_to_json(const SyntheticWorld& world);
SyntheticWorld world_from_json(const nlohmann::json& j);
void save_world(const std::filesystem::path& path, const SyntheticWorld& world);
SyntheticWorld load_world(const std::filesystem::path& path);

std::vector<DomainKB> build_kbs(const SyntheticWorld& world, const QueryEncoder& encoder);

std::string question_text(const QueryRecord& q);

// Candidate features over the answer vocabulary for the toy policy.
CandidateFeaturizer world_featurizer(const SyntheticWorld& world);

// Preference, cross-modal and anchor-calibration sets. The image block carries
// the answer's image signature; the question block is noise.
MdpoDatasets generate_mdpo_data(const SyntheticWorld& world, const CandidateFeaturizer& featurizer);

// Simulated restart accuracies for every ordered expert pair.
std::vector<InfluenceSamples> simulate_influence(const SyntheticWorld& world, const GraphSettings& settings,
                                                 std::uint64_t seed);

}  // namespace medalign
