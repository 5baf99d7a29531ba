#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace medalign {

// Dense real vector with a finiteness invariant.
class FeatureVector {
 public:
  FeatureVector() = default;
  explicit FeatureVector(std::vector<double> values);
  FeatureVector(std::initializer_list<double> values);

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& vec() const noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;

 private:
  std::vector<double> values_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
// Throws DomainError for a zero vector.
std::vector<double> normalized(std::span<const double> a);
double cosine(std::span<const double> a, std::span<const double> b);
FeatureVector concat(const FeatureVector& a, const FeatureVector& b);

double sigmoid(double x);
// log(1 + exp(x)) without overflow.
double softplus(double x);
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// Derives independent stream seeds from a root seed and a tuple of ids.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t dim, double stddev = 1.0);

}  // namespace medalign
