#ifndef IOSVD_TYPES_HPP
#define IOSVD_TYPES_HPP

#include <Eigen/Dense>

#include <string>

#include "iosvd/error.hpp"

namespace iosvd {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols)
{
    return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what)
{
    if (!m.allFinite())
        throw Error(what + ": non-finite entry in " + shape_string(m.rows(), m.cols()) + " matrix");
}

}  // namespace iosvd

#endif
