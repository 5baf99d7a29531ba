#include "medalign/aggregation.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "medalign/errors.hpp"

namespace medalign {

HashedBagOfTokens::HashedBagOfTokens(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim_ == 0) throw ShapeError("encoder dim must be positive");
}

std::vector<std::string> HashedBagOfTokens::tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::pair<std::size_t, double> HashedBagOfTokens::slot(const std::string& token) const {
  std::uint64_t h = 14695981039346656037ULL ^ seed_;
  for (char ch : token) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  return {static_cast<std::size_t>(h % dim_), ((h >> 63) & 1U) ? -1.0 : 1.0};
}

std::vector<double> HashedBagOfTokens::encode(const std::string& text) const {
  std::vector<double> v(dim_, 0.0);
  for (const auto& tok : tokenize(text)) {
    const auto [bucket, sign] = slot(tok);
    v[bucket] += sign;
  }
  return v;
}

AnswerEmbedding embed_answer(const AnswerEncoder& encoder, const std::string& answer_text, int source_site,
                             double confidence) {
  if (answer_text.empty()) throw DomainError("cannot embed an empty answer");
  const auto raw = encoder.encode(answer_text);
  if (!(norm(raw) > 0.0)) throw DomainError("answer has no encodable tokens: " + answer_text);
  return {answer_text, FeatureVector(normalized(raw)), source_site, confidence};
}

namespace {
struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};
}  // namespace

std::vector<Cluster> cluster_answers(std::span<const AnswerEmbedding> embeddings, double radius,
                                     std::size_t min_points) {
  if (!(radius > 0.0)) throw DomainError("clustering radius must be > 0");
  if (embeddings.empty()) throw DomainError("nothing to cluster");
  // Work in site-id order so the result does not depend on input order.
  std::vector<const AnswerEmbedding*> pts;
  for (const auto& e : embeddings) pts.push_back(&e);
  std::sort(pts.begin(), pts.end(), [](auto* a, auto* b) { return a->source_site < b->source_site; });
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (pts[i]->source_site == pts[i - 1]->source_site) throw DomainError("duplicate source site in clustering");

  const std::size_t n = pts.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist[i * n + j] = dist[j * n + i] = 1.0 - dot(pts[i]->vector.values(), pts[j]->vector.values());

  std::vector<bool> core(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) count += dist[i * n + j] <= radius ? 1 : 0;
    core[i] = count >= min_points;
  }
  DisjointSet ds(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (core[i] && core[j] && dist[i * n + j] <= radius) ds.unite(i, j);

  std::vector<std::size_t> label(n);
  for (std::size_t i = 0; i < n; ++i) {
    label[i] = i;
    if (core[i]) {
      label[i] = ds.find(i);
      continue;
    }
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < n; ++j) {
      if (!core[j] || dist[i * n + j] > radius) continue;
      if (!best || dist[i * n + j] < dist[i * n + *best]) best = j;
    }
    if (best) label[i] = ds.find(*best);
  }

  std::map<std::size_t, Cluster> groups;
  for (std::size_t i = 0; i < n; ++i) groups[label[i]].push_back(pts[i]->source_site);
  std::vector<Cluster> out;
  for (auto& [root, members] : groups) {
    std::sort(members.begin(), members.end());
    out.push_back(std::move(members));
  }
  std::sort(out.begin(), out.end(), [](const Cluster& a, const Cluster& b) { return a.front() < b.front(); });
  return out;
}

std::string default_synthesis_template() {
  return "Given the following conflicting reasoning paths from multiple experts attempting to answer the "
         "question '{Q}', analyze the logic, identify potential errors or hallucinations in each path, and "
         "synthesize a final, conclusive answer based on the most plausible evidence.";
}

std::string load_synthesis_template(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("aggregation", path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  std::string text = ss.str();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  if (text.find("{Q}") == std::string::npos) throw ConfigError("synthesis template lacks a {Q} placeholder");
  return text;
}

std::string render_chain(const HaltEvent& event) {
  std::string out = "[site " + std::to_string(event.site_id) + "]";
  for (const auto& unit : event.chain) out += "\n  " + unit;
  return out;
}

std::string build_synthesis_prompt(const std::string& question, std::span<const HaltEvent> events,
                                   const std::string& prompt_template) {
  std::string head = prompt_template;
  const auto pos = head.find("{Q}");
  if (pos == std::string::npos) throw ConfigError("synthesis template lacks a {Q} placeholder");
  head.replace(pos, 3, question);

  std::vector<const HaltEvent*> ordered;
  for (const auto& e : events) ordered.push_back(&e);
  std::sort(ordered.begin(), ordered.end(),
            [](auto* a, auto* b) { return std::tie(a->step, a->site_id) < std::tie(b->step, b->site_id); });
  std::string out = std::string(kReviewerRole) + "\n" + head + "\n";
  for (std::size_t i = 0; i < ordered.size(); ++i)
    out += "\nPath " + std::to_string(i + 1) + " " + render_chain(*ordered[i]) + "\n";
  return out;
}

namespace {
const HaltEvent* best_event(std::span<const HaltEvent* const> candidates) {
  const HaltEvent* best = nullptr;
  for (const auto* e : candidates)
    if (!best || e->confidence > best->confidence || (e->confidence == best->confidence && e->site_id < best->site_id))
      best = e;
  return best;
}
}  // namespace

ConsensusOutcome resolve(std::span<const Cluster> clusters, std::span<const HaltEvent> events,
                         double supermajority_fraction, const std::string& question,
                         const std::string& prompt_template) {
  if (events.empty()) throw DomainError("resolve needs at least one event");
  ConsensusOutcome out;
  out.clusters.assign(clusters.begin(), clusters.end());

  std::map<int, const HaltEvent*> by_site;
  bool all_forced = true;
  for (const auto& e : events) {
    by_site[e.site_id] = &e;
    all_forced = all_forced && e.forced;
  }

  const double needed = supermajority_fraction * static_cast<double>(events.size());
  const Cluster* winner = nullptr;
  for (const auto& c : clusters)
    if (static_cast<double>(c.size()) > needed && (!winner || c.size() > winner->size())) winner = &c;

  if (winner) {
    std::vector<const HaltEvent*> eligible;
    for (int site : *winner) {
      auto it = by_site.find(site);
      if (it == by_site.end()) throw DomainError("cluster references a site without an event");
      if (all_forced || !it->second->forced) eligible.push_back(it->second);
    }
    if (const HaltEvent* best = best_event(eligible)) {
      out.mode = ConsensusMode::kSupermajority;
      out.final_answer = best->answer;
      out.winning_cluster = *winner;
      return out;
    }
  }
  out.mode = ConsensusMode::kSynthesis;
  out.prompt = build_synthesis_prompt(question, events, prompt_template);
  out.final_answer = *out.prompt;
  return out;
}

SynthesisResult synthesize(const Reviewer& reviewer, const std::string& prompt, std::span<const HaltEvent> events) {
  if (!reviewer) {
    std::vector<const HaltEvent*> all;
    for (const auto& e : events) all.push_back(&e);
    const HaltEvent* best = best_event(all);
    if (!best) throw SynthesisUnavailable("stub reviewer has no chains to choose from");
    return {best->answer, true};
  }
  std::optional<std::string> answer;
  try {
    answer = reviewer(prompt);
  } catch (const std::exception& ex) {
    throw SynthesisUnavailable(std::string("reviewer failed: ") + ex.what());
  }
  if (!answer) throw SynthesisUnavailable("reviewer returned no answer");
  return {*answer, false};
}

const char* mode_name(ConsensusMode m) { return m == ConsensusMode::kSupermajority ? "supermajority" : "synthesis"; }

nlohmann::json outcome_to_json(const ConsensusOutcome& o) {
  nlohmann::json j{{"mode", mode_name(o.mode)}, {"final_answer", o.final_answer}, {"clusters", o.clusters}};
  j["winning_cluster"] = o.winning_cluster ? nlohmann::json(*o.winning_cluster) : nlohmann::json(nullptr);
  if (o.prompt) j["prompt"] = *o.prompt;
  return j;
}

}  // namespace medalign
