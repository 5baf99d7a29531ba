#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medalign/federation.hpp"

namespace medalign {

// Sentence encoder contract for final answers.
class AnswerEncoder {
 public:
  virtual ~AnswerEncoder() = default;
  virtual std::size_t dim() const = 0;
  // Unnormalized embedding; may be all zero when the text has no tokens.
  virtual std::vector<double> encode(const std::string& text) const = 0;
};

// Lower-cased alphanumeric tokens hashed (FNV-1a, seeded) into signed buckets.
class HashedBagOfTokens final : public AnswerEncoder {
 public:
  explicit HashedBagOfTokens(std::size_t dim = 256, std::uint64_t seed = 0);
  std::size_t dim() const override { return dim_; }
  std::vector<double> encode(const std::string& text) const override;

  static std::vector<std::string> tokenize(const std::string& text);
  // Bucket and sign of one token.
  std::pair<std::size_t, double> slot(const std::string& token) const;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

struct AnswerEmbedding {
  std::string answer_text;
  FeatureVector vector;  // unit length
  int source_site = 0;
  double confidence = 0.0;
};

// Throws DomainError for empty (or token-free) text.
AnswerEmbedding embed_answer(const AnswerEncoder& encoder, const std::string& answer_text, int source_site = 0,
                             double confidence = 0.0);

using Cluster = std::vector<int>;  // source site ids, ascending

// DBSCAN under cosine distance. Core points within `radius` of each other are
// merged; border points join the cluster of their nearest core point (ties by
// lower site id); everything else becomes a singleton noise cluster. Clusters
// are returned sorted by their smallest site id, which makes the output
// independent of input order. Site ids must be unique.
std::vector<Cluster> cluster_answers(std::span<const AnswerEmbedding> embeddings, double radius,
                                     std::size_t min_points);

enum class ConsensusMode { kSupermajority, kSynthesis };

struct ConsensusOutcome {
  ConsensusMode mode = ConsensusMode::kSynthesis;
  std::string final_answer;  // the adopted answer, or the synthesis prompt
  std::optional<Cluster> winning_cluster;
  std::vector<Cluster> clusters;
  std::optional<std::string> prompt;
};

std::string default_synthesis_template();
std::string load_synthesis_template(const std::filesystem::path& path);

// One labelled block per chain: "[site i]" followed by its units, one per line.
std::string render_chain(const HaltEvent& event);

// Role line that opens every synthesis prompt.
inline constexpr const char* kReviewerRole = "You will act as an impartial reviewer.";

// Role line, then the template with {Q} substituted, then every chain once in
// (step, site_id) order.
std::string build_synthesis_prompt(const std::string& question, std::span<const HaltEvent> events,
                                   const std::string& prompt_template);

inline constexpr double kDefaultSupermajority = 2.0 / 3.0;

ConsensusOutcome resolve(std::span<const Cluster> clusters, std::span<const HaltEvent> events,
                         double supermajority_fraction, const std::string& question,
                         const std::string& prompt_template = default_synthesis_template());

struct SynthesisResult {
  std::string answer;
  bool from_stub = false;
};

// A reviewer maps a synthesis prompt to an answer; nullopt or an exception means unavailable.
using Reviewer = std::function<std::optional<std::string>(const std::string& prompt)>;

// Calls `reviewer` exactly once. Without a reviewer, returns the answer of the
// highest-confidence chain (ties by lower site id), flagged as stub output.
SynthesisResult synthesize(const Reviewer& reviewer, const std::string& prompt, std::span<const HaltEvent> events);

const char* mode_name(ConsensusMode m);
nlohmann::json outcome_to_json(const ConsensusOutcome& o);

}  // namespace medalign
