#include "medalign/kernels.hpp"

#include <algorithm>
#include <numeric>

#include <omp.h>

#include "medalign/errors.hpp"

namespace medalign::kernels {

namespace {
void check_rows(std::span<const double> rows, std::size_t dim, std::span<const double> query,
                std::span<const double> out) {
  if (query.size() != dim) throw ShapeError("row_dots: query length differs from row dim");
  if (dim == 0 ? !rows.empty() : rows.size() != out.size() * dim)
    throw ShapeError("row_dots: matrix size does not match output length");
}

inline double row_dot(const double* row, const double* q, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) s += row[j] * q[j];
  return s;
}
}  // namespace

void row_dots_serial(std::span<const double> rows, std::size_t dim, std::span<const double> query,
                     std::span<double> out) {
  check_rows(rows, dim, query, out);
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = row_dot(rows.data() + r * dim, query.data(), dim);
}

void row_dots_parallel(std::span<const double> rows, std::size_t dim,
                       std::span<const double> query, std::span<double> out) {
  check_rows(rows, dim, query, out);
  const auto n = static_cast<std::ptrdiff_t>(out.size());
  const double* base = rows.data();
  const double* q = query.data();
  double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 256)
  for (std::ptrdiff_t r = 0; r < n; ++r) o[r] = row_dot(base + r * dim, q, dim);
}

void row_dots(Execution exec, std::span<const double> rows, std::size_t dim,
              std::span<const double> query, std::span<double> out) {
  if (exec == Execution::kParallel)
    row_dots_parallel(rows, dim, query, out);
  else
    row_dots_serial(rows, dim, query, out);
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::span<const std::string> keys,
                               std::size_t k) {
  if (scores.size() != keys.size()) throw ShapeError("top_k: scores and keys differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(k, idx.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return keys[a] < keys[b];
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), better);
  idx.resize(take);
  return idx;
}

void affine_serial(std::span<const double> weights, std::span<const double> bias,
                   std::span<const double> x, std::span<double> y) {
  if (weights.size() != y.size() * x.size() || bias.size() != y.size())
    throw ShapeError("affine: weight/bias shape mismatch");
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = bias[i] + row_dot(weights.data() + i * x.size(), x.data(), x.size());
}

void affine_parallel(std::span<const double> weights, std::span<const double> bias,
                     std::span<const double> x, std::span<double> y) {
  if (weights.size() != y.size() * x.size() || bias.size() != y.size())
    throw ShapeError("affine: weight/bias shape mismatch");
  const auto n = static_cast<std::ptrdiff_t>(y.size());
  const std::size_t in = x.size();
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(in) > 4096)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    y[i] = bias[i] + row_dot(weights.data() + i * in, x.data(), in);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace medalign::kernels
