#include "medalign/feature_vector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "medalign/errors.hpp"

namespace medalign {

FeatureVector::FeatureVector(std::vector<double> values) : values_(std::move(values)) {
  for (double v : values_) {
    if (!std::isfinite(v)) throw DomainError("feature vector contains a non-finite value");
  }
}

FeatureVector::FeatureVector(std::initializer_list<double> values)
    : FeatureVector(std::vector<double>(values)) {}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> normalized(std::span<const double> a) {
  const double n = norm(a);
  if (!(n > 0.0)) throw DomainError("cannot normalize a zero vector");
  std::vector<double> out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DomainError("cosine of a zero vector");
  return dot(a, b) / (na * nb);
}

FeatureVector concat(const FeatureVector& a, const FeatureVector& b) {
  std::vector<double> out;
  out.reserve(a.dim() + b.dim());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return FeatureVector(std::move(out));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax over an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double lz = m + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax over an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t dim, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(dim);
  for (double& v : out) v = dist(rng);
  return out;
}

}  // namespace medalign
