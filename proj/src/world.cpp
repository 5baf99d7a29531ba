#include "medalign/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "medalign/errors.hpp"

namespace medalign {

namespace {

constexpr std::size_t kMaxAttempts = 1000;

const char* const kDomainNames[] = {"radiology", "pathology",  "ophthalmology", "dermatology",
                                    "cardiology", "neurology", "oncology",      "pediatrics"};
const char* const kAnswerWords[] = {"pneumothorax", "effusion", "cardiomegaly", "atelectasis",
                                    "edema",        "nodule",   "consolidation", "fracture",
                                    "emphysema",    "fibrosis", "hernia",        "pneumonia"};

std::string padded(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

FeatureVector noisy(std::mt19937_64& rng, const FeatureVector& proto, double stddev) {
  auto v = gaussian_vector(rng, proto.dim(), stddev);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += proto[i];
  return FeatureVector(std::move(v));
}

std::vector<double> prototype_cosines(const SyntheticWorld& w, std::span<const double> unit_embedding) {
  std::vector<double> out;
  out.reserve(w.embedding_prototypes.size());
  for (const auto& p : w.embedding_prototypes) out.push_back(dot(unit_embedding, p.values()));
  return out;
}

double query_margin(const SyntheticWorld& w, const QueryEncoder& enc, const FeatureVector& image,
                    const FeatureVector& question, int domain) {
  const auto e = normalized(enc.project(image, question));
  const auto cos = prototype_cosines(w, e);
  double best_other = -2.0;
  for (std::size_t d = 0; d < cos.size(); ++d)
    if (static_cast<int>(d) != domain) best_other = std::max(best_other, cos[d]);
  return cos[static_cast<std::size_t>(domain)] - best_other;
}

std::vector<QueryRecord> sample_queries(const SyntheticWorld& w, const QueryEncoder& enc, const char* prefix,
                                        std::size_t count, std::uint64_t stream, bool fixed_domains) {
  const auto& spec = w.spec;
  std::mt19937_64 rng(mix_seed(w.seed, stream));
  std::uniform_int_distribution<int> pick_domain(0, spec.domains - 1);
  std::uniform_int_distribution<int> pick_answer(0, static_cast<int>(spec.num_answers) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<QueryRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    QueryRecord q;
    q.id = padded(prefix, i);
    q.domain = fixed_domains ? static_cast<int>(i % static_cast<std::size_t>(spec.domains)) : pick_domain(rng);
    q.answer = pick_answer(rng);
    q.hard = unit(rng) < spec.hard_fraction;
    const auto d = static_cast<std::size_t>(q.domain);
    bool ok = false;
    for (std::size_t a = 0; a < kMaxAttempts && !ok; ++a) {
      q.image = noisy(rng, w.image_prototypes[d], spec.query_noise);
      q.question = noisy(rng, w.question_prototypes[d], spec.query_noise);
      ok = query_margin(w, enc, q.image, q.question, q.domain) >= spec.separation_margin;
    }
    if (!ok)
      throw GenerationError("could not sample query " + q.id + " with separation margin " +
                            std::to_string(spec.separation_margin));
    q.text = question_text(q);
    out.push_back(std::move(q));
  }
  return out;
}

nlohmann::json query_json(const QueryRecord& q) {
  return {{"id", q.id},
          {"domain", q.domain},
          {"answer", q.answer},
          {"hard", q.hard},
          {"image", q.image.vec()},
          {"question", q.question.vec()},
          {"text", q.text}};
}

QueryRecord query_from(const nlohmann::json& j) {
  QueryRecord q;
  q.id = j.at("id").get<std::string>();
  q.domain = j.at("domain").get<int>();
  q.answer = j.at("answer").get<int>();
  q.hard = j.at("hard").get<bool>();
  q.image = FeatureVector(j.at("image").get<std::vector<double>>());
  q.question = FeatureVector(j.at("question").get<std::vector<double>>());
  q.text = j.at("text").get<std::string>();
  return q;
}

std::vector<FeatureVector> vectors_from(const nlohmann::json& j) {
  std::vector<FeatureVector> out;
  for (const auto& v : j) out.emplace_back(v.get<std::vector<double>>());
  return out;
}

nlohmann::json vectors_json(const std::vector<FeatureVector>& vs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& v : vs) out.push_back(v.vec());
  return out;
}

}  // namespace

ToyQueryEncoder world_encoder(const WorldSpec& spec) {
  return ToyQueryEncoder(spec.image_dim, spec.question_dim, spec.embed_dim);
}

std::string question_text(const QueryRecord& q) { return "what is the principal finding for case " + q.id + "?"; }

SyntheticWorld generate_world(const WorldSpec& spec, std::uint64_t seed) {
  if (spec.domains < 2) throw ConfigError("a world needs at least two domains");
  if (spec.separation_margin < 0.0) throw ConfigError("separation_margin must be >= 0");
  if (spec.num_answers < 2) throw ConfigError("a world needs at least two answers");
  if (spec.docs_per_domain == 0 || spec.heldout == 0) throw ConfigError("docs_per_domain and heldout must be > 0");

  SyntheticWorld w;
  w.seed = seed;
  w.spec = spec;
  const auto D = static_cast<std::size_t>(spec.domains);
  for (std::size_t d = 0; d < D; ++d)
    w.domain_names.push_back(d < std::size(kDomainNames) ? kDomainNames[d] : padded("domain", d));
  for (std::size_t a = 0; a < spec.num_answers; ++a)
    w.answer_vocab.push_back(a < std::size(kAnswerWords) ? kAnswerWords[a] : padded("finding", a));

  const auto enc = world_encoder(spec);
  std::mt19937_64 proto_rng(mix_seed(seed, 0x9e0));
  for (std::size_t d = 0; d < D; ++d) {
    w.image_prototypes.emplace_back(gaussian_vector(proto_rng, spec.image_dim));
    w.question_prototypes.emplace_back(gaussian_vector(proto_rng, spec.question_dim));
    w.embedding_prototypes.emplace_back(normalized(enc.project(w.image_prototypes[d], w.question_prototypes[d])));
  }
  double worst = 2.0;
  for (std::size_t d = 0; d < D; ++d) {
    const auto cos = prototype_cosines(w, w.embedding_prototypes[d].values());
    for (std::size_t e = 0; e < D; ++e)
      if (e != d) worst = std::min(worst, 1.0 - cos[e]);
  }
  if (worst < spec.separation_margin)
    throw GenerationError("domain prototypes are too close for separation margin " +
                          std::to_string(spec.separation_margin));

  std::mt19937_64 doc_rng(mix_seed(seed, 0xd0c));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, spec.domains - 2);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t i = 0; i < spec.docs_per_domain; ++i) {
      DocRecord doc;
      doc.doc_id = padded(("d" + std::to_string(d) + "-").c_str(), i);
      doc.domain = static_cast<int>(d);
      doc.source = doc.domain;
      if (unit(doc_rng) < spec.cross_domain_fraction) {
        int o = other(doc_rng);
        if (o >= doc.domain) ++o;
        doc.source = o;
      }
      const auto s = static_cast<std::size_t>(doc.source);
      doc.image = noisy(doc_rng, w.image_prototypes[s], spec.doc_noise);
      doc.question = noisy(doc_rng, w.question_prototypes[s], spec.doc_noise);
      doc.text = "reference note " + doc.doc_id + " filed under " + w.domain_names[d];
      w.docs.push_back(std::move(doc));
    }
  }

  w.live = sample_queries(w, enc, "q", spec.queries, 0x11fe, false);
  w.heldout = sample_queries(w, enc, "h", spec.heldout, 0x4e1d, false);
  w.calibration = sample_queries(w, enc, "c", spec.calibration_per_domain * D, 0xca1, true);

  std::mt19937_64 gain_rng(mix_seed(seed, 0x1f1));
  std::uniform_real_distribution<double> gain(0.05, 0.2);
  w.influence_gains.assign(D, std::vector<double>(D, 0.0));
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) {
      const bool has_edge = unit(gain_rng) < 0.5;
      const double g = gain(gain_rng);
      if (i != j && has_edge) w.influence_gains[i][j] = g;
    }
  return w;
}

double min_query_margin(const SyntheticWorld& world) {
  const auto enc = world_encoder(world.spec);
  double worst = 2.0;
  for (const auto* set : {&world.live, &world.heldout, &world.calibration})
    for (const auto& q : *set) worst = std::min(worst, query_margin(world, enc, q.image, q.question, q.domain));
  return worst;
}

nlohmann::json world_to_json(const SyntheticWorld& w) {
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& d : w.docs)
    docs.push_back({{"doc_id", d.doc_id},
                    {"domain", d.domain},
                    {"source", d.source},
                    {"image", d.image.vec()},
                    {"question", d.question.vec()},
                    {"text", d.text}});
  auto queries = [](const std::vector<QueryRecord>& qs) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& q : qs) out.push_back(query_json(q));
    return out;
  };
  return {{"seed", w.seed},
          {"spec", world_spec_to_json(w.spec)},
          {"domain_names", w.domain_names},
          {"answer_vocab", w.answer_vocab},
          {"image_prototypes", vectors_json(w.image_prototypes)},
          {"question_prototypes", vectors_json(w.question_prototypes)},
          {"embedding_prototypes", vectors_json(w.embedding_prototypes)},
          {"docs", docs},
          {"live", queries(w.live)},
          {"heldout", queries(w.heldout)},
          {"calibration", queries(w.calibration)},
          {"influence_gains", w.influence_gains}};
}

SyntheticWorld world_from_json(const nlohmann::json& j) {
  SyntheticWorld w;
  w.seed = j.at("seed").get<std::uint64_t>();
  w.spec = world_spec_from_json(j.at("spec"));
  w.domain_names = j.at("domain_names").get<std::vector<std::string>>();
  w.answer_vocab = j.at("answer_vocab").get<std::vector<std::string>>();
  w.image_prototypes = vectors_from(j.at("image_prototypes"));
  w.question_prototypes = vectors_from(j.at("question_prototypes"));
  w.embedding_prototypes = vectors_from(j.at("embedding_prototypes"));
  for (const auto& d : j.at("docs")) {
    DocRecord doc;
    doc.doc_id = d.at("doc_id").get<std::string>();
    doc.domain = d.at("domain").get<int>();
    doc.source = d.at("source").get<int>();
    doc.image = FeatureVector(d.at("image").get<std::vector<double>>());
    doc.question = FeatureVector(d.at("question").get<std::vector<double>>());
    doc.text = d.at("text").get<std::string>();
    w.docs.push_back(std::move(doc));
  }
  for (const auto& q : j.at("live")) w.live.push_back(query_from(q));
  for (const auto& q : j.at("heldout")) w.heldout.push_back(query_from(q));
  for (const auto& q : j.at("calibration")) w.calibration.push_back(query_from(q));
  w.influence_gains = j.at("influence_gains").get<std::vector<std::vector<double>>>();
  return w;
}

void save_world(const std::filesystem::path& path, const SyntheticWorld& world) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << world_to_json(world).dump() << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

SyntheticWorld load_world(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("gen-world", path.string());
  return world_from_json(nlohmann::json::parse(is));
}

std::vector<DomainKB> build_kbs(const SyntheticWorld& world, const QueryEncoder& encoder) {
  std::vector<DomainKB> kbs;
  for (int d = 0; d < world.spec.domains; ++d) kbs.emplace_back(d, encoder.output_dim());
  for (const auto& doc : world.docs)
    kbs.at(static_cast<std::size_t>(doc.domain))
        .add(Document{doc.doc_id, FeatureVector(encoder.project(doc.image, doc.question)), doc.text});
  return kbs;
}

CandidateFeaturizer world_featurizer(const SyntheticWorld& world) {
  return CandidateFeaturizer(world.spec.image_dim, world.spec.question_dim, world.answer_vocab,
                             mix_seed(world.seed, 0xfea7));
}

MdpoDatasets generate_mdpo_data(const SyntheticWorld& world, const CandidateFeaturizer& featurizer) {
  const auto& spec = world.spec;
  std::mt19937_64 rng(mix_seed(world.seed, 0x3d90));
  const int n = static_cast<int>(world.answer_vocab.size());
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::uniform_int_distribution<int> pick_other(0, n - 2);
  auto other_than = [&](int y) {
    int o = pick_other(rng);
    return o >= y ? o + 1 : o;
  };
  auto image_for = [&](int y) {
    auto v = gaussian_vector(rng, spec.image_dim, spec.mdpo_noise);
    const auto sig = featurizer.image_signature(static_cast<std::size_t>(y));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += spec.label_signal * sig[i];
    return FeatureVector(std::move(v));
  };
  auto tuple = [&](const std::string& id) {
    const int y = pick(rng);
    const int l = other_than(y);
    FeatureVector image = image_for(y);
    FeatureVector question(gaussian_vector(rng, spec.question_dim));
    return PreferenceTuple(id, std::move(image), std::move(question), world.answer_vocab[static_cast<std::size_t>(y)],
                           world.answer_vocab[static_cast<std::size_t>(l)]);
  };

  MdpoDatasets data;
  for (std::size_t i = 0; i < spec.preference_count; ++i) data.preference.push_back(tuple(padded("pref", i)));
  for (std::size_t i = 0; i < spec.crossmodal_count; ++i) {
    const int y = pick(rng);
    const int l = other_than(y);
    FeatureVector question(gaussian_vector(rng, spec.question_dim));
    FeatureVector pos = image_for(y);
    FeatureVector neg = image_for(l);
    data.crossmodal.emplace_back(std::move(question), world.answer_vocab[static_cast<std::size_t>(y)], std::move(pos),
                                 std::move(neg));
  }
  for (std::size_t i = 0; i < spec.anchor_calibration_count; ++i) data.calibration.push_back(tuple(padded("cal", i)));
  return data;
}

std::vector<InfluenceSamples> simulate_influence(const SyntheticWorld& world, const GraphSettings& settings,
                                                 std::uint64_t seed) {
  const int D = world.spec.domains;
  const int trials = static_cast<int>(settings.eval_queries);
  std::vector<InfluenceSamples> out;
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) {
      if (i == j) continue;
      InfluenceSamples s{i, j, {}};
      std::mt19937_64 rng(mix_seed(seed, 0x1f5, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)));
      const double gain = world.influence_gains[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const double p_with = std::clamp(settings.base_accuracy + gain, 0.0, 1.0);
      for (std::size_t r = 0; r < settings.restarts; ++r) {
        std::binomial_distribution<int> base(trials, settings.base_accuracy);
        std::binomial_distribution<int> with(trials, p_with);
        const double acc_base = static_cast<double>(base(rng)) / trials;
        const double acc_with = static_cast<double>(with(rng)) / trials;
        s.restarts.emplace_back(acc_with, acc_base);
      }
      out.push_back(std::move(s));
    }
  return out;
}

}  // namespace medalign
