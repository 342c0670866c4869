#include "iosvd/whiten.hpp"

namespace iosvd {

namespace {

void require_finalized(const LayerStats& stats, const char* who)
{
    if (!stats.finalized)
        throw Error(std::string(who) + ": stats for layer " + std::to_string(stats.layer) + " are not finalized");
}

void require_shape(const Matrix& W, const LayerStats& stats, const char* who)
{
    if (W.rows() != stats.out_dim() || W.cols() != stats.in_dim())
        throw Error(std::string(who) + ": weight is " + shape_string(W.rows(), W.cols()) + " but stats are for " +
                    shape_string(stats.out_dim(), stats.in_dim()));
}

}  // namespace

std::string to_string(WhiteningMode m)
{
    switch (m) {
    case WhiteningMode::none:
        return "none";
    case WhiteningMode::input_only:
        return "input";
    case WhiteningMode::double_sided:
        return "double";
    }
    return "?";
}

WhiteningMode whitening_from_string(const std::string& s)
{
    if (s == "none")
        return WhiteningMode::none;
    if (s == "input" || s == "input_only")
        return WhiteningMode::input_only;
    if (s == "double" || s == "double_sided")
        return WhiteningMode::double_sided;
    throw IoError("unknown whitening mode '" + s + "'");
}

WhiteningMaps WhiteningMaps::identity(Index out_dim, Index in_dim)
{
    return {Matrix::Identity(out_dim, out_dim), Matrix::Identity(out_dim, out_dim),
            Matrix::Identity(in_dim, in_dim), Matrix::Identity(in_dim, in_dim)};
}

WhiteningMaps WhiteningMaps::from_stats(const LayerStats& stats, WhiteningMode mode)
{
    if (mode == WhiteningMode::none)
        return identity(stats.out_dim(), stats.in_dim());
    require_finalized(stats, "whiten");
    WhiteningMaps maps = identity(stats.out_dim(), stats.in_dim());
    maps.R_half = stats.R_half;
    maps.R_inv_half = stats.R_inv_half;
    if (mode == WhiteningMode::double_sided) {
        maps.C_half = stats.C_half;
        maps.C_inv_half = stats.C_inv_half;
    }
    return maps;
}

WhitenedFactorization whiten(const Matrix& W, const WhiteningMaps& maps, int layer)
{
    if (maps.C_half.rows() != W.rows() || maps.R_half.rows() != W.cols())
        throw Error("whiten: whitening maps do not match a " + shape_string(W.rows(), W.cols()) + " weight");
    WhitenedFactorization f;
    f.layer = layer;
    f.W = W;
    f.B = maps.C_half * W * maps.R_half;
    f.svd = linalg::svd(f.B);
    f.maps = maps;
    return f;
}

WhitenedFactorization whiten(const Matrix& W, const LayerStats& stats)
{
    return whiten_mode(W, stats, WhiteningMode::double_sided);
}

WhitenedFactorization input_only_whiten(const Matrix& W, const LayerStats& stats)
{
    return whiten_mode(W, stats, WhiteningMode::input_only);
}

WhitenedFactorization whiten_mode(const Matrix& W, const LayerStats& stats, WhiteningMode mode)
{
    require_shape(W, stats, "whiten");
    return whiten(W, WhiteningMaps::from_stats(stats, mode), stats.layer);
}

LowRankLayer truncate_and_unwhiten(const WhitenedFactorization& f, Index r)
{
    if (r < 1 || r > f.max_rank())
        throw Error("truncate_and_unwhiten: rank " + std::to_string(r) + " outside [1, " +
                    std::to_string(f.max_rank()) + "]");
    LowRankLayer out;
    out.A = f.maps.C_inv_half * f.svd.U.leftCols(r) * f.svd.singular_values.head(r).asDiagonal();
    out.D = f.maps.R_inv_half * f.svd.V.leftCols(r);
    return out;
}

double whitened_error(const Matrix& W, const Matrix& W_hat, const LayerStats& stats)
{
    require_finalized(stats, "whitened_error");
    require_shape(W, stats, "whitened_error");
    require_shape(W_hat, stats, "whitened_error");
    return 0.5 * (stats.C_half * (W - W_hat) * stats.R_half).squaredNorm();
}

double whitened_error_trace(const Matrix& W, const Matrix& W_hat, const LayerStats& stats)
{
    require_shape(W, stats, "whitened_error_trace");
    require_shape(W_hat, stats, "whitened_error_trace");
    Matrix R = stats.R;
    R.diagonal().array() += stats.lambda_R;
    Matrix C = stats.C;
    C.diagonal().array() += stats.lambda_C;
    const Matrix dW = W - W_hat;
    return 0.5 * (dW * R * dW.transpose() * C).trace();
}

}  // namespace iosvd
