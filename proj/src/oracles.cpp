#include "iosvd/oracles.hpp"

#include <cmath>
#include <limits>

namespace iosvd::oracles {

OracleReport OracleReport::make(std::string name, double err, double tol, std::string details)
{
    return {std::move(name), err, tol, err <= tol, std::move(details)};
}

Vector forward_from(const NetworkSpec& net, int layer, const Vector& layer_output)
{
    Vector h = layer_output;
    for (std::size_t k = static_cast<std::size_t>(layer) + 1; k < net.layers.size(); ++k) {
        const auto& l = net.layers[k];
        if (l.is_linear()) {
            Vector next = Vector::Zero(l.out_dim());
            for (Index i = 0; i < l.out_dim(); ++i) {
                double acc = l.bias ? (*l.bias)(i) : 0.0;
                for (Index j = 0; j < l.in_dim(); ++j)
                    acc += l.weight(i, j) * h(j);
                next(i) = acc;
            }
            h = std::move(next);
        } else {
            for (Index i = 0; i < h.size(); ++i) {
                const double v = h(i);
                switch (l.activation) {
                case Activation::tanh:
                    h(i) = std::tanh(v);
                    break;
                case Activation::relu:
                    h(i) = v > 0.0 ? v : 0.0;
                    break;
                case Activation::gelu:
                    h(i) = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
                    break;
                }
            }
        }
    }
    return h;
}

Matrix finite_diff_output_jacobian(const NetworkSpec& net, const Vector& x, const std::vector<Index>& support,
                                   int layer, double step)
{
    const Vector h = forward(net, x).layer_outputs.at(static_cast<std::size_t>(layer));
    Matrix J(static_cast<Index>(support.size()), h.size());
    for (Index c = 0; c < h.size(); ++c) {
        Vector hp = h, hm = h;
        hp(c) += step;
        hm(c) -= step;
        const Vector zp = forward_from(net, layer, hp);
        const Vector zm = forward_from(net, layer, hm);
        for (std::size_t r = 0; r < support.size(); ++r)
            J(static_cast<Index>(r), c) = (zp(support[r]) - zm(support[r])) / (2.0 * step);
    }
    return J;
}

Matrix explicit_layer_curvature(const NetworkSpec& net, const CalibrationBatch& batch, Index K, int layer)
{
    const auto& l = net.linear_layer(layer);
    if (l.out_dim() > kMaxOracleDim || net.vocab_size > kMaxOracleVocab)
        throw Error("explicit_layer_curvature: oracle limited to output dim <= 64 and vocab <= 32");
    batch.validate(net);
    Matrix C = Matrix::Zero(l.out_dim(), l.out_dim());
    for (Index t = 0; t < batch.size(); ++t) {
        const Vector x = batch.inputs.row(t).transpose();
        const Vector z = forward(net, x).logits;
        const auto support = top_k_support(z, K);

        Vector p(K);
        double denom = 0.0;
        for (Index j = 0; j < K; ++j)
            denom += std::exp(z(support.indices[static_cast<std::size_t>(j)]) - z(support.indices[0]));
        for (Index j = 0; j < K; ++j)
            p(j) = std::exp(z(support.indices[static_cast<std::size_t>(j)]) - z(support.indices[0])) / denom;
        Matrix H(K, K);
        for (Index a = 0; a < K; ++a)
            for (Index b = 0; b < K; ++b)
                H(a, b) = (a == b ? p(a) : 0.0) - p(a) * p(b);

        const Matrix J = finite_diff_output_jacobian(net, x, support.indices, layer);
        C += J.transpose() * H * J;
    }
    return C / static_cast<double>(batch.size());
}

namespace {

double oracle_loss(const NetworkSpec& net, const CalibrationBatch& batch, const Objective& objective)
{
    double total = 0.0;
    for (Index t = 0; t < batch.size(); ++t) {
        const Vector x = batch.inputs.row(t).transpose();
        const Vector z = forward(net, x).logits;
        const double m = z.maxCoeff();
        const double lse = m + std::log((z.array() - m).exp().sum());
        if (objective.kind == Objective::Kind::cross_entropy) {
            total += lse - z(batch.targets[static_cast<std::size_t>(t)]);
        } else {
            const Vector zr = forward(*objective.reference, x).logits;
            const double mr = zr.maxCoeff();
            const double lser = mr + std::log((zr.array() - mr).exp().sum());
            for (Index v = 0; v < z.size(); ++v) {
                const double lq = zr(v) - lser;
                total += std::exp(lq) * (lq - (z(v) - lse));
            }
        }
    }
    return total / static_cast<double>(batch.size());
}

NetworkSpec with_weight(const NetworkSpec& net, int layer, const Matrix& W)
{
    NetworkSpec out = net;
    auto& def = out.layers.at(static_cast<std::size_t>(layer));
    def = LayerDef::linear(W, def.bias);
    return out;
}

}  // namespace

Matrix finite_diff_weight_gradient(const NetworkSpec& net, const CalibrationBatch& batch, int layer, double step,
                                   const Objective& objective)
{
    if (!(step >= 1e-6 && step <= 1e-4))
        throw Error("finite_diff_weight_gradient: step must lie in [1e-6, 1e-4]");
    batch.validate(net);
    const Matrix W = net.linear_layer(layer).weight;
    Matrix G(W.rows(), W.cols());
    NetworkSpec probe = net;
    auto& def = probe.layers.at(static_cast<std::size_t>(layer));
    def.factors.reset();
    for (Index i = 0; i < W.rows(); ++i) {
        for (Index j = 0; j < W.cols(); ++j) {
            def.weight(i, j) = W(i, j) + step;
            const double up = oracle_loss(probe, batch, objective);
            def.weight(i, j) = W(i, j) - step;
            const double down = oracle_loss(probe, batch, objective);
            def.weight(i, j) = W(i, j);
            G(i, j) = (up - down) / (2.0 * step);
        }
    }
    return G;
}

double rebuild_loss(const NetworkSpec& net, const WhitenedFactorization& f, const CalibrationBatch& batch,
                    const Objective& objective)
{
    const Matrix rebuilt = f.maps.C_inv_half * f.B * f.maps.R_inv_half;
    return oracle_loss(with_weight(net, f.layer, rebuilt), batch, objective);
}

double drop_and_remeasure(const NetworkSpec& net, const WhitenedFactorization& f, const CalibrationBatch& batch,
                          Index component, const Objective& objective)
{
    if (component < 0 || component >= f.max_rank())
        throw Error("drop_and_remeasure: component " + std::to_string(component) + " out of range");
    Vector sigma = f.svd.singular_values;
    sigma(component) = 0.0;
    const Matrix B_dropped = f.svd.U * sigma.asDiagonal() * f.svd.V.transpose();
    const Matrix W_dropped = f.maps.C_inv_half * B_dropped * f.maps.R_inv_half;
    const double before = oracle_loss(net, batch, objective);
    const double after = oracle_loss(with_weight(net, f.layer, W_dropped), batch, objective);
    return after - before;
}

std::vector<DropCandidate> exhaustive_pool_scan(const std::vector<LayerScores>& layers, double pi, double eta)
{
    std::size_t total_candidates = 0;
    Index total_params = 0;
    std::vector<Index> rank, floor_rank;
    for (const auto& l : layers) {
        total_candidates += l.scores.size();
        total_params += l.rows * l.cols;
        rank.push_back(l.max_rank());
        floor_rank.push_back(static_cast<Index>(std::ceil(eta * static_cast<double>((l.rows * l.cols) / (l.rows + l.cols)) - 1e-9)));
    }
    if (total_candidates > kMaxPoolCandidates)
        throw Error("exhaustive_pool_scan: more than 10^4 candidates");
    const auto need = static_cast<Index>(std::ceil(pi * static_cast<double>(total_params) - 1e-9));

    std::vector<DropCandidate> sequence;
    Index removed = 0;
    while (removed < need) {
        std::size_t best = layers.size();
        for (std::size_t k = 0; k < layers.size(); ++k) {
            if (rank[k] <= floor_rank[k])
                continue;
            if (best == layers.size())
                best = k;
            const double s = layers[k].scores[static_cast<std::size_t>(rank[k] - 1)];
            const double sb = layers[best].scores[static_cast<std::size_t>(rank[best] - 1)];
            if (s < sb || (s == sb && (layers[k].layer < layers[best].layer ||
                                      (layers[k].layer == layers[best].layer && rank[k] < rank[best]))))
                best = k;
        }
        if (best == layers.size())
            break;
        const auto& l = layers[best];
        const Index r = rank[best];
        const Index thr = (l.rows * l.cols) / (l.rows + l.cols);
        Index gain = l.rows + l.cols;
        if (r > thr + 1)
            gain = 0;
        else if (r == thr + 1)
            gain = l.rows * l.cols - thr * (l.rows + l.cols);
        sequence.push_back({l.scores[static_cast<std::size_t>(r - 1)], l.layer, r, gain});
        removed += gain;
        rank[best] -= 1;
    }
    return sequence;
}

double exhaustive_min_selection(const std::vector<double>& scores, const std::vector<Index>& savings, Index need)
{
    const std::size_t n = scores.size();
    if (n > 20 || savings.size() != n)
        throw Error("exhaustive_min_selection: at most 20 candidates with matching savings");
    double best = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        Index covered = 0;
        double total = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            if (mask & (1u << k)) {
                covered += savings[k];
                total += scores[k];
            }
        if (covered >= need && total < best)
            best = total;
    }
    return best;
}

}  // namespace iosvd::oracles
