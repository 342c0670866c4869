#ifndef IOSVD_TEST_UTIL_HPP
#define IOSVD_TEST_UTIL_HPP

#include <random>

#include "iosvd/netmodel.hpp"
#include "iosvd/toy.hpp"

namespace testutil {

using iosvd::Index;
using iosvd::Matrix;
using iosvd::Vector;

inline Matrix gaussian(std::mt19937_64& rng, Index rows, Index cols)
{
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix M(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            M(i, j) = n(rng);
    return M;
}

inline Matrix random_spd(std::mt19937_64& rng, Index n)
{
    const Matrix X = gaussian(rng, n + 3, n);
    return X.transpose() * X / static_cast<double>(n + 3);
}

inline Vector random_distribution(std::mt19937_64& rng, Index n)
{
    const Vector z = gaussian(rng, n, 1);
    return iosvd::softmax(z);
}

inline double rel_fro(const Matrix& got, const Matrix& want)
{
    return (got - want).norm() / std::max(want.norm(), 1e-300);
}

// Small network: 6 -> 5 -> tanh -> 4 -> tanh -> 6 logits, with a batch.
inline iosvd::ToyData small_toy(std::uint64_t seed, Index tokens = 12)
{
    iosvd::ToyShape shape;
    shape.input_dim = 6;
    shape.hidden = {5, 4};
    shape.vocab_size = 6;
    shape.tokens = tokens;
    return iosvd::generate_toy(seed, shape);
}

}  // namespace testutil

#endif
