#include "medalign/knowledge.hpp"

#include <cmath>
#include <fstream>

#include "medalign/errors.hpp"

namespace medalign {

DomainKB::DomainKB(int domain_id, std::size_t dim) : domain_id_(domain_id), dim_(dim) {
  if (dim_ == 0) throw ShapeError("knowledge base dim must be positive");
}

void DomainKB::add(Document doc) {
  if (doc.vector.dim() != dim_) throw ShapeError("document " + doc.doc_id + " has the wrong dim");
  const auto unit = normalized(doc.vector.values());
  if (!id_set_.insert(doc.doc_id).second)
    throw DomainError("duplicate doc_id in domain " + std::to_string(domain_id_) + ": " + doc.doc_id);
  unit_rows_.insert(unit_rows_.end(), unit.begin(), unit.end());
  ids_.push_back(doc.doc_id);
  docs_.push_back(std::move(doc));
}

ToyQueryEncoder::ToyQueryEncoder(std::size_t image_dim, std::size_t question_dim, std::size_t output_dim,
                                 std::uint64_t seed)
    : image_dim_(image_dim), question_dim_(question_dim), output_dim_(output_dim) {
  const std::size_t in = image_dim + question_dim;
  if (in == 0 || output_dim == 0) throw ShapeError("encoder dims must be positive");
  std::mt19937_64 rng(seed);
  matrix_ = gaussian_vector(rng, output_dim * in, 1.0 / std::sqrt(static_cast<double>(in)));
}

std::vector<double> ToyQueryEncoder::project(const FeatureVector& image, const FeatureVector& question) const {
  if (image.dim() != image_dim_ || question.dim() != question_dim_)
    throw ShapeError("encoder input dims do not match");
  const FeatureVector x = concat(image, question);
  std::vector<double> out(output_dim_);
  const std::vector<double> zero(output_dim_, 0.0);
  kernels::affine_serial(matrix_, zero, x.values(), out);
  return out;
}

MultimodalQuery embed_query(const QueryEncoder& encoder, const FeatureVector& image,
                            const FeatureVector& question) {
  auto raw = encoder.project(image, question);
  return {image, question, FeatureVector(normalized(raw))};
}

RetrievalResult knn(const DomainKB& kb, const MultimodalQuery& query, std::size_t k, Execution exec) {
  if (k == 0) throw DomainError("knn requires k >= 1");
  if (kb.empty()) throw EmptyResultError("knn over empty knowledge base " + std::to_string(kb.domain_id()));
  if (query.embedding.dim() != kb.dim()) throw ShapeError("query embedding dim differs from KB dim");
  const auto q = normalized(query.embedding.values());
  std::vector<double> sims(kb.size());
  kernels::row_dots(exec, kb.unit_rows(), kb.dim(), q, sims);
  for (double& s : sims) s = std::clamp(s, -1.0, 1.0);
  const auto best = kernels::top_k(sims, kb.ids(), k);
  RetrievalResult out{kb.domain_id(), {}, k};
  out.hits.reserve(best.size());
  for (std::size_t i : best) out.hits.push_back({kb.ids()[i], sims[i]});
  return out;
}

std::vector<RetrievalResult> retrieve_all(std::span<const DomainKB> kbs, const MultimodalQuery& query,
                                          std::size_t k, Execution exec) {
  for (const auto& kb : kbs)
    if (kb.dim() != kbs.front().dim()) throw ShapeError("knowledge bases do not share a dim");
  std::vector<RetrievalResult> out(kbs.size());
  if (exec == Execution::kSerial) {
    for (std::size_t d = 0; d < kbs.size(); ++d) out[d] = knn(kbs[d], query, k, Execution::kSerial);
    return out;
  }
  // Each domain writes only its own slot; exceptions are rethrown after the region.
  std::vector<std::exception_ptr> errors(kbs.size());
  const auto n = static_cast<std::ptrdiff_t>(kbs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t d = 0; d < n; ++d) {
    try {
      out[d] = knn(kbs[d], query, k, Execution::kSerial);
    } catch (...) {
      errors[d] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

nlohmann::json retrieval_to_json(const RetrievalResult& r) {
  nlohmann::json hits = nlohmann::json::array();
  for (const auto& h : r.hits) hits.push_back({{"doc_id", h.doc_id}, {"similarity", h.similarity}});
  return {{"domain_id", r.domain_id}, {"k", r.k}, {"hits", hits}};
}

void save_kbs(const std::filesystem::path& dir, std::span<const DomainKB> kbs) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["dim"] = kbs.empty() ? 0 : kbs.front().dim();
  manifest["domains"] = nlohmann::json::array();
  for (const auto& kb : kbs) {
    const std::string name = "kb_" + std::to_string(kb.domain_id()) + ".jsonl";
    std::ofstream os(dir / name);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    for (const auto& doc : kb.docs()) {
      nlohmann::json line{{"doc_id", doc.doc_id}, {"text", doc.text}, {"vector", doc.vector.vec()}};
      os << line.dump() << '\n';
    }
    manifest["domains"].push_back({{"domain_id", kb.domain_id()}, {"path", name}, {"count", kb.size()}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

std::vector<DomainKB> load_kbs(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw MissingArtifactError("build-kb", manifest_path.string());
  const auto manifest = nlohmann::json::parse(is);
  const auto dim = manifest.at("dim").get<std::size_t>();
  std::vector<DomainKB> kbs;
  for (const auto& d : manifest.at("domains")) {
    DomainKB kb(d.at("domain_id").get<int>(), dim);
    const auto path = manifest_path.parent_path() / d.at("path").get<std::string>();
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("build-kb", path.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      kb.add({j.at("doc_id").get<std::string>(), FeatureVector(j.at("vector").get<std::vector<double>>()),
              j.at("text").get<std::string>()});
    }
    if (kb.size() != d.at("count").get<std::size_t>())
      throw IoError("document count mismatch in " + path.string());
    kbs.push_back(std::move(kb));
  }
  return kbs;
}

}  // namespace medalign
