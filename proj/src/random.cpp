#include "klp/random.hpp"

#include <cmath>
#include <utility>

namespace klp::rnd {

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const auto r = static_cast<Eigen::Index>(rows);
    const auto c = static_cast<Eigen::Index>(cols);
    const bool tall = rows >= cols;
    Matrix g(tall ? r : c, tall ? c : r);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(g.rows(), g.cols());
    return tall ? q : Matrix(q.transpose());
}

Vector random_unit(std::size_t dimension, std::mt19937_64& rng) {
    Vector v(static_cast<Eigen::Index>(dimension));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = standard_normal(rng);
    return v / v.norm();
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace klp::rnd
