#ifndef IOSVD_CURVATURE_HPP
#define IOSVD_CURVATURE_HPP

#include <cmath>
#include <map>

#include "iosvd/linalg.hpp"
#include "iosvd/netmodel.hpp"

namespace iosvd {

// Per-layer second-moment statistics: input covariance R (in x in) and
// output-side KL curvature C (out x out), plus damped whitening maps.
struct LayerStats {
    int layer = -1;
    Matrix R;
    Matrix C;
    Index token_count = 0;
    Index curvature_tokens = 0;
    Index top_k = 0;
    double lambda_R = 0.0;
    double lambda_C = 0.0;
    bool finalized = false;
    Matrix R_half, R_inv_half, C_half, C_inv_half;

    static LayerStats zeros(int layer, Index in_dim, Index out_dim);
    Index in_dim() const { return R.rows(); }
    Index out_dim() const { return C.rows(); }
};

using StatsMap = std::map<int, LayerStats>;

namespace curvature {

inline constexpr double kNormalizationTol = 1e-10;
inline constexpr double kRelativeDamping = 1e-4;
inline constexpr double kDampingFloor = 1e-8;

template <typename Derived>
void require_distribution(const Eigen::MatrixBase<Derived>& p, const char* who)
{
    using Scalar = typename Derived::Scalar;
    require_finite(p, who);
    if (p.size() == 0 || (p.array() < Scalar(0)).any() ||
        std::abs(static_cast<double>(p.sum()) - 1.0) > kNormalizationTol)
        throw Error(std::string(who) + ": probabilities must be nonnegative and sum to 1");
}

}  // namespace curvature

// H = Diag(p) - p p^T, the logit Hessian of KL(p || softmax(.)) at p.
template <typename Derived>
MatrixX<typename Derived::Scalar> kl_hessian(const Eigen::MatrixBase<Derived>& p)
{
    curvature::require_distribution(p, "kl_hessian");
    MatrixX<typename Derived::Scalar> H = -p * p.transpose();
    H.diagonal() += p;
    return H;
}

// A = Diag(sqrt p) (I - s s^T) with s = sqrt p, so that A A^T = kl_hessian(p).
template <typename Derived>
MatrixX<typename Derived::Scalar> probe_factor(const Eigen::MatrixBase<Derived>& p)
{
    using Scalar = typename Derived::Scalar;
    curvature::require_distribution(p, "probe_factor");
    const VectorX<Scalar> s = p.cwiseSqrt();
    MatrixX<Scalar> projector = -s * s.transpose();
    projector.diagonal().array() += Scalar(1);
    return s.asDiagonal() * projector;
}

// Streaming update R <- mean of x x^T.
void accumulate_input_covariance(LayerStats& stats, const Vector& x);

// Adds the top-K probe-swept curvature of every batch token into the C of
// each target layer, and the matching input covariance into R.
void accumulate_output_curvature(const NetworkSpec& net, const CalibrationBatch& batch, Index K,
                                 StatsMap& stats, bool accumulate_inputs = true);

// Relative damping: 1e-4 x mean diagonal, floored at 1e-8.
double default_damping(const Matrix& S);

void finalize(LayerStats& stats, double lambda_R, double lambda_C);
void finalize_default(LayerStats& stats);

Index default_top_k(Index vocab_size);

// Allocates, accumulates and returns stats for every target layer (unfinalized).
StatsMap collect_stats(const NetworkSpec& net, const CalibrationBatch& batch, Index K);

}  // namespace iosvd

#endif
