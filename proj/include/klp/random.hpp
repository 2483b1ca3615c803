#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "klp/embed.hpp"

namespace klp::rnd {

// Draws are built from raw engine output so they do not depend on the
// standard library's distribution implementations.

/// Uniform in [0, 1).
double unit_uniform(std::mt19937_64& rng);
/// Box-Muller.
double standard_normal(std::mt19937_64& rng);
/// Orthonormal columns (rows >= cols) or rows (rows < cols) via QR of a
/// Gaussian matrix.
Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng);
/// Uniformly random unit vector.
Vector random_unit(std::size_t dimension, std::mt19937_64& rng);
/// Fisher-Yates.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng);

}  // namespace klp::rnd
