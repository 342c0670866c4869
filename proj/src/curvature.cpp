#include "iosvd/curvature.hpp"

#include <algorithm>

namespace iosvd {

LayerStats LayerStats::zeros(int layer, Index in_dim, Index out_dim)
{
    LayerStats s;
    s.layer = layer;
    s.R = Matrix::Zero(in_dim, in_dim);
    s.C = Matrix::Zero(out_dim, out_dim);
    return s;
}

void accumulate_input_covariance(LayerStats& stats, const Vector& x)
{
    if (x.size() != stats.R.rows())
        throw Error("accumulate_input_covariance: layer " + std::to_string(stats.layer) + " expects length " +
                    std::to_string(stats.R.rows()) + ", got " + std::to_string(x.size()));
    require_finite(x, "accumulate_input_covariance");
    ++stats.token_count;
    const double w = 1.0 / static_cast<double>(stats.token_count);
    stats.R += w * (x * x.transpose() - stats.R);
    stats.finalized = false;
}

void accumulate_output_curvature(const NetworkSpec& net, const CalibrationBatch& batch, Index K,
                                 StatsMap& stats, bool accumulate_inputs)
{
    if (K < 1 || K > net.vocab_size)
        throw Error("accumulate_output_curvature: K=" + std::to_string(K) + " outside [1, " +
                    std::to_string(net.vocab_size) + "]");
    batch.validate(net);
    for (int t : net.target_layers) {
        const auto it = stats.find(t);
        if (it == stats.end())
            throw Error("accumulate_output_curvature: no stats allocated for layer " + std::to_string(t));
        const auto& l = net.linear_layer(t);
        if (it->second.C.rows() != l.out_dim() || it->second.R.rows() != l.in_dim())
            throw Error("accumulate_output_curvature: stats for layer " + std::to_string(t) +
                        " do not match its shape");
        if (it->second.top_k != 0 && it->second.top_k != K)
            throw Error("accumulate_output_curvature: layer " + std::to_string(t) +
                        " was accumulated with a different K");
    }

    Matrix seeds(net.vocab_size, K);
    for (Index i = 0; i < batch.size(); ++i) {
        const Vector x = batch.inputs.row(i).transpose();
        const auto trace = forward(net, x);
        const auto support = top_k_support(trace.logits, K);
        const Matrix A = probe_factor(support.probs);

        // Column j of `seeds` is the probe A e_j scattered onto the support.
        seeds.setZero();
        for (Index r = 0; r < K; ++r)
            seeds.row(support.indices[static_cast<std::size_t>(r)]) = A.row(r);
        const auto g = backprop_to_outputs(net, trace, seeds, net.target_layers);

        for (int t : net.target_layers) {
            auto& s = stats.at(t);
            if (accumulate_inputs)
                accumulate_input_covariance(s, trace.layer_inputs[static_cast<std::size_t>(t)]);
            ++s.curvature_tokens;
            const Matrix& gt = g.at(t);
            const double w = 1.0 / static_cast<double>(s.curvature_tokens);
            s.C += w * (gt * gt.transpose() - s.C);
            s.top_k = K;
            s.finalized = false;
        }
    }
}

double default_damping(const Matrix& S)
{
    if (S.rows() == 0)
        return curvature::kDampingFloor;
    const double mean_diag = S.diagonal().mean();
    return std::max(curvature::kRelativeDamping * mean_diag, curvature::kDampingFloor);
}

void finalize(LayerStats& stats, double lambda_R, double lambda_C)
{
    if (stats.token_count <= 0)
        throw Error("finalize: layer " + std::to_string(stats.layer) + " has no accumulated tokens");
    stats.lambda_R = lambda_R;
    stats.lambda_C = lambda_C;
    stats.R_half = linalg::psd_sqrt(stats.R, lambda_R);
    stats.R_inv_half = linalg::psd_inv_sqrt(stats.R, lambda_R);
    stats.C_half = linalg::psd_sqrt(stats.C, lambda_C);
    stats.C_inv_half = linalg::psd_inv_sqrt(stats.C, lambda_C);
    stats.finalized = true;
}

void finalize_default(LayerStats& stats)
{
    finalize(stats, default_damping(stats.R), default_damping(stats.C));
}

Index default_top_k(Index vocab_size)
{
    return std::min<Index>(32, vocab_size);
}

StatsMap collect_stats(const NetworkSpec& net, const CalibrationBatch& batch, Index K)
{
    StatsMap stats;
    for (int t : net.target_layers) {
        const auto& l = net.linear_layer(t);
        stats.emplace(t, LayerStats::zeros(t, l.in_dim(), l.out_dim()));
    }
    accumulate_output_curvature(net, batch, K, stats);
    return stats;
}

}  // namespace iosvd
