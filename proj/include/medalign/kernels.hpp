#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

// Data-parallel inner loops. Every parallel kernel has a serial twin that
// computes each output element with the same operation order, so the two
// agree bit for bit and the serial one serves as the test reference.
namespace medalign::kernels {

enum class Execution { kSerial, kParallel };

// out[r] = <rows[r*dim .. r*dim+dim), query> for a row-major matrix of unit rows.
void row_dots_serial(std::span<const double> rows, std::size_t dim, std::span<const double> query,
                     std::span<double> out);
void row_dots_parallel(std::span<const double> rows, std::size_t dim,
                       std::span<const double> query, std::span<double> out);
void row_dots(Execution exec, std::span<const double> rows, std::size_t dim,
              std::span<const double> query, std::span<double> out);

// Indices of the k best scores, descending; equal scores ordered by ascending key.
std::vector<std::size_t> top_k(std::span<const double> scores, std::span<const std::string> keys,
                               std::size_t k);

// Affine layer y = W x + b with W row-major [out][in].
void affine_serial(std::span<const double> weights, std::span<const double> bias,
                   std::span<const double> x, std::span<double> y);
void affine_parallel(std::span<const double> weights, std::span<const double> bias,
                     std::span<const double> x, std::span<double> y);

int max_threads();

}  // namespace medalign::kernels
