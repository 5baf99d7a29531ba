#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "medalign/feature_vector.hpp"
#include "medalign/kernels.hpp"

namespace medalign {

using kernels::Execution;

struct Document {
  std::string doc_id;
  FeatureVector vector;
  std::string text;
};

// Vector store for one domain. Vectors are kept unit-normalized in a
// contiguous row-major block so similarity is a plain dot product.
class DomainKB {
 public:
  DomainKB(int domain_id, std::size_t dim);

  // Throws ShapeError on dim mismatch, DomainError on duplicate id or zero vector.
  void add(Document doc);

  int domain_id() const noexcept { return domain_id_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return docs_.size(); }
  bool empty() const noexcept { return docs_.empty(); }
  const std::vector<Document>& docs() const noexcept { return docs_; }
  std::span<const double> unit_rows() const noexcept { return unit_rows_; }
  std::span<const std::string> ids() const noexcept { return ids_; }

 private:
  int domain_id_;
  std::size_t dim_;
  std::vector<Document> docs_;
  std::vector<std::string> ids_;
  std::unordered_set<std::string> id_set_;
  std::vector<double> unit_rows_;
};

// Frozen retrieval encoder E(image, question) -> R^p.
class QueryEncoder {
 public:
  virtual ~QueryEncoder() = default;
  virtual std::size_t image_dim() const = 0;
  virtual std::size_t question_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  // Raw (unnormalized) embedding.
  virtual std::vector<double> project(const FeatureVector& image, const FeatureVector& question) const = 0;
};

// Concatenates the two modality blocks and applies a fixed Gaussian
// projection drawn from `seed`.
class ToyQueryEncoder final : public QueryEncoder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 7;

  ToyQueryEncoder(std::size_t image_dim, std::size_t question_dim, std::size_t output_dim,
                  std::uint64_t seed = kDefaultSeed);

  std::size_t image_dim() const override { return image_dim_; }
  std::size_t question_dim() const override { return question_dim_; }
  std::size_t output_dim() const override { return output_dim_; }
  std::vector<double> project(const FeatureVector& image, const FeatureVector& question) const override;
  std::span<const double> matrix() const noexcept { return matrix_; }

 private:
  std::size_t image_dim_;
  std::size_t question_dim_;
  std::size_t output_dim_;
  std::vector<double> matrix_;  // [output][image_dim + question_dim]
};

struct MultimodalQuery {
  FeatureVector image;
  FeatureVector question;
  FeatureVector embedding;  // unit length
};

MultimodalQuery embed_query(const QueryEncoder& encoder, const FeatureVector& image,
                            const FeatureVector& question);

struct Hit {
  std::string doc_id;
  double similarity = 0.0;
  friend bool operator==(const Hit&, const Hit&) = default;
};

struct RetrievalResult {
  int domain_id = 0;
  std::vector<Hit> hits;
  std::size_t k = 0;
  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

inline constexpr std::size_t kDefaultTopK = 5;

// Exact top-k by cosine similarity; ties broken by ascending doc_id.
// Throws EmptyResultError for an empty KB and DomainError for k == 0.
RetrievalResult knn(const DomainKB& kb, const MultimodalQuery& query, std::size_t k = kDefaultTopK,
                    Execution exec = Execution::kParallel);

// One knn per domain, in KB order. Parallel over domains when exec is kParallel.
std::vector<RetrievalResult> retrieve_all(std::span<const DomainKB> kbs, const MultimodalQuery& query,
                                          std::size_t k = kDefaultTopK, Execution exec = Execution::kParallel);

nlohmann::json retrieval_to_json(const RetrievalResult& r);

// kb_<domain_id>.jsonl per domain plus manifest.json.
void save_kbs(const std::filesystem::path& dir, std::span<const DomainKB> kbs);
std::vector<DomainKB> load_kbs(const std::filesystem::path& manifest);

}  // namespace medalign
