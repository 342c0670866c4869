#ifndef IOSVD_WHITEN_HPP
#define IOSVD_WHITEN_HPP

#include <string>

#include "iosvd/curvature.hpp"
#include "iosvd/linalg.hpp"
#include "iosvd/netmodel.hpp"

namespace iosvd {

enum class WhiteningMode { none, input_only, double_sided };

std::string to_string(WhiteningMode m);
WhiteningMode whitening_from_string(const std::string& s);

// The four maps C^{+-1/2}, R^{+-1/2} a factorization was built with.
struct WhiteningMaps {
    Matrix C_half, C_inv_half;
    Matrix R_half, R_inv_half;

    static WhiteningMaps from_stats(const LayerStats& stats, WhiteningMode mode);
    static WhiteningMaps identity(Index out_dim, Index in_dim);
};

struct WhitenedFactorization {
    int layer = -1;
    Matrix W;  // the dense weight that was whitened
    Matrix B;  // C^{1/2} W R^{1/2}
    SvdResult<double> svd;
    WhiteningMaps maps;

    Index rows() const { return W.rows(); }
    Index cols() const { return W.cols(); }
    Index max_rank() const { return svd.singular_values.size(); }
};

WhitenedFactorization whiten(const Matrix& W, const WhiteningMaps& maps, int layer = -1);
WhitenedFactorization whiten(const Matrix& W, const LayerStats& stats);
WhitenedFactorization input_only_whiten(const Matrix& W, const LayerStats& stats);
WhitenedFactorization whiten_mode(const Matrix& W, const LayerStats& stats, WhiteningMode mode);

// A = C^{-1/2} U_r S_r, D = R^{-1/2} V_r. Rank must lie in [1, min(m, n)].
LowRankLayer truncate_and_unwhiten(const WhitenedFactorization& f, Index r);

// 1/2 || C^{1/2} (W - W_hat) R^{1/2} ||_F^2 with the stats' damped roots.
double whitened_error(const Matrix& W, const Matrix& W_hat, const LayerStats& stats);
// 1/2 tr(dW (R + lR I) dW^T (C + lC I)); equal to whitened_error.
double whitened_error_trace(const Matrix& W, const Matrix& W_hat, const LayerStats& stats);

}  // namespace iosvd

#endif
