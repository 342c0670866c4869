#ifndef IOSVD_LINALG_HPP
#define IOSVD_LINALG_HPP

//
// Dense SVD, symmetric eigendecomposition and damped PSD (inverse) square
// roots. Both factorizations are Jacobi methods: slow for large matrices but
// deterministic and accurate to working precision on the small matrices the
// whitening code feeds them.
//

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "iosvd/types.hpp"

namespace iosvd {

template <typename Scalar>
struct SvdResult {
    MatrixX<Scalar> U;                 // m x k
    VectorX<Scalar> singular_values;  // k, descending
    MatrixX<Scalar> V;                 // n x k
};

template <typename Scalar>
struct EigResult {
    MatrixX<Scalar> Q;
    VectorX<Scalar> eigenvalues;  // descending
};

namespace linalg {

inline constexpr int kMaxSweeps = 100;
inline constexpr double kRotationTol = 1e-12;
inline constexpr double kSymmetryTol = 1e-10;
inline constexpr double kNegativeEigenTol = 1e-10;
inline constexpr double kEigenFloor = 1e-12;

namespace detail {

// Flip columns so that the largest-magnitude entry of each column of `lead`
// is positive (first occurrence wins ties); `follow` gets the same flips.
template <typename Scalar>
void fix_signs(MatrixX<Scalar>& lead, MatrixX<Scalar>* follow)
{
    for (Index j = 0; j < lead.cols(); ++j) {
        Index arg = 0;
        Scalar best = Scalar(-1);
        for (Index i = 0; i < lead.rows(); ++i) {
            const Scalar a = std::abs(lead(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (lead.rows() > 0 && lead(arg, j) < Scalar(0)) {
            lead.col(j) = -lead.col(j);
            if (follow != nullptr)
                follow->col(j) = -follow->col(j);
        }
    }
}

template <typename Scalar>
std::vector<Index> descending_order(const VectorX<Scalar>& values)
{
    std::vector<Index> order(static_cast<std::size_t>(values.size()));
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return values(a) > values(b); });
    return order;
}

// Replace the columns of U flagged in `degenerate` by an orthonormal
// completion built from canonical basis vectors (two Gram-Schmidt passes).
template <typename Scalar>
void complete_orthonormal(MatrixX<Scalar>& U, const std::vector<bool>& degenerate)
{
    const Index m = U.rows();
    Index next_basis = 0;
    for (Index j = 0; j < U.cols(); ++j) {
        if (!degenerate[static_cast<std::size_t>(j)])
            continue;
        for (; next_basis < m; ++next_basis) {
            VectorX<Scalar> cand = VectorX<Scalar>::Unit(m, next_basis);
            for (int pass = 0; pass < 2; ++pass) {
                for (Index k = 0; k < U.cols(); ++k) {
                    if (k == j || (degenerate[static_cast<std::size_t>(k)] && k > j))
                        continue;
                    cand -= U.col(k).dot(cand) * U.col(k);
                }
            }
            const Scalar norm = cand.norm();
            if (norm > Scalar(1e-6)) {
                U.col(j) = cand / norm;
                ++next_basis;
                break;
            }
        }
    }
}

// One-sided (Hestenes) Jacobi on a tall matrix, m >= n.
template <typename Scalar>
SvdResult<Scalar> jacobi_svd_tall(MatrixX<Scalar> A)
{
    const Index m = A.rows();
    const Index n = A.cols();
    MatrixX<Scalar> V = MatrixX<Scalar>::Identity(n, n);
    const Scalar tol = Scalar(kRotationTol);

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (Index p = 0; p + 1 < n; ++p) {
            for (Index q = p + 1; q < n; ++q) {
                const Scalar alpha = A.col(p).squaredNorm();
                const Scalar beta = A.col(q).squaredNorm();
                const Scalar gamma = A.col(p).dot(A.col(q));
                if (gamma == Scalar(0) || std::abs(gamma) <= tol * std::sqrt(alpha * beta))
                    continue;
                converged = false;
                const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
                const Scalar t = (zeta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                                 (std::abs(zeta) + std::sqrt(Scalar(1) + zeta * zeta));
                const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
                const Scalar s = c * t;
                for (Index i = 0; i < m; ++i) {
                    const Scalar ap = A(i, p);
                    const Scalar aq = A(i, q);
                    A(i, p) = c * ap - s * aq;
                    A(i, q) = s * ap + c * aq;
                }
                for (Index i = 0; i < n; ++i) {
                    const Scalar vp = V(i, p);
                    const Scalar vq = V(i, q);
                    V(i, p) = c * vp - s * vq;
                    V(i, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged)
        throw Error("svd: one-sided Jacobi did not converge within " + std::to_string(kMaxSweeps) +
                    " sweeps on a " + shape_string(m, n) + " matrix");

    VectorX<Scalar> sigma(n);
    std::vector<bool> degenerate(static_cast<std::size_t>(n), false);
    for (Index j = 0; j < n; ++j) {
        sigma(j) = A.col(j).norm();
        if (sigma(j) <= std::numeric_limits<Scalar>::min()) {
            sigma(j) = Scalar(0);
            degenerate[static_cast<std::size_t>(j)] = true;
        } else {
            A.col(j) /= sigma(j);
        }
    }

    const auto order = descending_order(sigma);
    SvdResult<Scalar> out{MatrixX<Scalar>(m, n), VectorX<Scalar>(n), MatrixX<Scalar>(n, n)};
    std::vector<bool> sorted_degenerate(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) {
        const Index j = order[static_cast<std::size_t>(k)];
        out.U.col(k) = A.col(j);
        out.singular_values(k) = sigma(j);
        out.V.col(k) = V.col(j);
        sorted_degenerate[static_cast<std::size_t>(k)] = degenerate[static_cast<std::size_t>(j)];
    }
    complete_orthonormal(out.U, sorted_degenerate);
    return out;
}

}  // namespace detail

// Thin SVD, M = U diag(s) V^T with k = min(m, n) columns.
template <typename Derived>
SvdResult<typename Derived::Scalar> svd(const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    require_finite(M, "svd");
    SvdResult<Scalar> out;
    if (M.rows() >= M.cols()) {
        out = detail::jacobi_svd_tall<Scalar>(M);
    } else {
        auto t = detail::jacobi_svd_tall<Scalar>(M.transpose());
        out.U = std::move(t.V);
        out.V = std::move(t.U);
        out.singular_values = std::move(t.singular_values);
    }
    detail::fix_signs(out.U, &out.V);
    return out;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
template <typename Derived>
EigResult<typename Derived::Scalar> symmetric_eig(const Eigen::MatrixBase<Derived>& S)
{
    using Scalar = typename Derived::Scalar;
    require_finite(S, "symmetric_eig");
    if (S.rows() != S.cols())
        throw Error("symmetric_eig: matrix is " + shape_string(S.rows(), S.cols()) + ", not square");

    const Index n = S.rows();
    MatrixX<Scalar> A = (S + S.transpose()) / Scalar(2);
    MatrixX<Scalar> Q = MatrixX<Scalar>::Identity(n, n);
    const Scalar tol = Scalar(kRotationTol);
    const Scalar floor = std::numeric_limits<Scalar>::epsilon() * Scalar(1e-4) * A.norm();

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (Index p = 0; p + 1 < n; ++p) {
            for (Index q = p + 1; q < n; ++q) {
                const Scalar apq = A(p, q);
                if (std::abs(apq) <= floor ||
                    std::abs(apq) <= tol * std::sqrt(std::abs(A(p, p) * A(q, q))))
                    continue;
                converged = false;
                const Scalar theta = (A(q, q) - A(p, p)) / (Scalar(2) * apq);
                const Scalar t = (theta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                                 (std::abs(theta) + std::sqrt(Scalar(1) + theta * theta));
                const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
                const Scalar s = t * c;
                for (Index k = 0; k < n; ++k) {
                    const Scalar akp = A(k, p);
                    const Scalar akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (Index k = 0; k < n; ++k) {
                    const Scalar apk = A(p, k);
                    const Scalar aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                A(p, q) = Scalar(0);
                A(q, p) = Scalar(0);
                for (Index k = 0; k < n; ++k) {
                    const Scalar qkp = Q(k, p);
                    const Scalar qkq = Q(k, q);
                    Q(k, p) = c * qkp - s * qkq;
                    Q(k, q) = s * qkp + c * qkq;
                }
            }
        }
    }
    if (!converged)
        throw Error("symmetric_eig: Jacobi did not converge within " + std::to_string(kMaxSweeps) +
                    " sweeps on a " + shape_string(n, n) + " matrix");

    const VectorX<Scalar> diag = A.diagonal();
    const auto order = detail::descending_order(diag);
    EigResult<Scalar> out{MatrixX<Scalar>(n, n), VectorX<Scalar>(n)};
    for (Index k = 0; k < n; ++k) {
        out.Q.col(k) = Q.col(order[static_cast<std::size_t>(k)]);
        out.eigenvalues(k) = diag(order[static_cast<std::size_t>(k)]);
    }
    detail::fix_signs<Scalar>(out.Q, nullptr);
    return out;
}

namespace detail {

template <typename Derived>
EigResult<typename Derived::Scalar> damped_eig(const Eigen::MatrixBase<Derived>& S,
                                               typename Derived::Scalar damping,
                                               const char* who)
{
    using Scalar = typename Derived::Scalar;
    if (S.rows() != S.cols())
        throw Error(std::string(who) + ": matrix is " + shape_string(S.rows(), S.cols()) + ", not square");
    if (!(damping >= Scalar(0)) || !std::isfinite(static_cast<double>(damping)))
        throw Error(std::string(who) + ": damping must be a finite nonnegative number");
    require_finite(S, who);
    const Scalar scale = std::max(Scalar(1), S.cwiseAbs().maxCoeff());
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > Scalar(kSymmetryTol) * scale)
        throw Error(std::string(who) + ": statistics matrix is not symmetric");

    MatrixX<Scalar> damped = S;
    damped.diagonal().array() += damping;
    auto eig = symmetric_eig(damped);
    const Scalar smallest = eig.eigenvalues(eig.eigenvalues.size() - 1);
    if (eig.eigenvalues.size() > 0 && smallest < -Scalar(kNegativeEigenTol))
        throw Error(std::string(who) + ": statistics matrix is not PSD (smallest damped eigenvalue " +
                    std::to_string(static_cast<double>(smallest)) + ")");
    return eig;
}

}  // namespace detail

// Symmetric M with M*M = S + damping*I. Eigenvalues are clamped at 1e-12.
template <typename Derived>
MatrixX<typename Derived::Scalar> psd_sqrt(const Eigen::MatrixBase<Derived>& S,
                                           typename Derived::Scalar damping)
{
    using Scalar = typename Derived::Scalar;
    if (S.size() == 0)
        return MatrixX<Scalar>(S.rows(), S.cols());
    const auto eig = detail::damped_eig(S, damping, "psd_sqrt");
    const VectorX<Scalar> root = eig.eigenvalues.array().max(Scalar(kEigenFloor)).sqrt();
    return eig.Q * root.asDiagonal() * eig.Q.transpose();
}

// Symmetric N with N*(S + damping*I)*N = I. Fails when the damped matrix is
// numerically singular.
template <typename Derived>
MatrixX<typename Derived::Scalar> psd_inv_sqrt(const Eigen::MatrixBase<Derived>& S,
                                               typename Derived::Scalar damping)
{
    using Scalar = typename Derived::Scalar;
    if (S.size() == 0)
        return MatrixX<Scalar>(S.rows(), S.cols());
    const auto eig = detail::damped_eig(S, damping, "psd_inv_sqrt");
    const Scalar smallest = eig.eigenvalues(eig.eigenvalues.size() - 1);
    if (!(smallest > Scalar(kEigenFloor)))
        throw Error("psd_inv_sqrt: damped matrix is near-singular (smallest eigenvalue " +
                    std::to_string(static_cast<double>(smallest)) + "); increase the damping");
    const VectorX<Scalar> inv_root = eig.eigenvalues.array().sqrt().inverse();
    return eig.Q * inv_root.asDiagonal() * eig.Q.transpose();
}

// Best rank-r approximation assembled from an SVD.
template <typename Scalar>
MatrixX<Scalar> truncated_product(const SvdResult<Scalar>& f, Index r)
{
    return f.U.leftCols(r) * f.singular_values.head(r).asDiagonal() * f.V.leftCols(r).transpose();
}

}  // namespace linalg
}  // namespace iosvd

#endif
