#include "iosvd/rank_alloc.hpp"

#include <cmath>
#include <queue>
#include <tuple>

namespace iosvd {

Matrix whitened_gradient(const Matrix& G, const WhiteningMaps& maps)
{
    if (G.rows() != maps.C_inv_half.rows() || G.cols() != maps.R_inv_half.rows())
        throw Error("whitened_gradient: gradient shape " + shape_string(G.rows(), G.cols()) +
                    " does not match the whitening maps");
    return maps.C_inv_half * G * maps.R_inv_half;
}

Matrix whitened_gradient(const Matrix& G, const LayerStats& stats)
{
    if (!stats.finalized)
        throw Error("whitened_gradient: stats for layer " + std::to_string(stats.layer) + " are not finalized");
    return whitened_gradient(G, WhiteningMaps::from_stats(stats, WhiteningMode::double_sided));
}

namespace {

double component_gradient(const WhitenedFactorization& f, const Matrix& G_tilde, Index i)
{
    if (i < 0 || i >= f.max_rank())
        throw Error("component index " + std::to_string(i) + " outside [0, " + std::to_string(f.max_rank()) + ")");
    if (G_tilde.rows() != f.rows() || G_tilde.cols() != f.cols())
        throw Error("whitened gradient shape does not match the factorization");
    return f.svd.U.col(i).dot(G_tilde * f.svd.V.col(i));
}

}  // namespace

double component_score(const WhitenedFactorization& f, const Matrix& G_tilde, Index i)
{
    return std::abs(component_gradient(f, G_tilde, i) * f.svd.singular_values(i));
}

double predicted_drop_change(const WhitenedFactorization& f, const Matrix& G_tilde, Index i)
{
    return -component_gradient(f, G_tilde, i) * f.svd.singular_values(i);
}

Index threshold_rank(Index m, Index n)
{
    if (m < 1 || n < 1)
        throw Error("threshold_rank: dimensions must be positive");
    return (m * n) / (m + n);
}

Index storage_gain(Index m, Index n, Index r)
{
    if (r < 1 || r > std::min(m, n))
        throw Error("storage_gain: rank " + std::to_string(r) + " outside [1, " + std::to_string(std::min(m, n)) + "]");
    const Index rs = threshold_rank(m, n);
    if (r > rs + 1)
        return 0;
    if (r == rs + 1)
        return m * n - rs * (m + n);
    return m + n;
}

bool candidate_before(const DropCandidate& a, const DropCandidate& b)
{
    return std::tie(a.score, a.layer, a.rank_before_drop) < std::tie(b.score, b.layer, b.rank_before_drop);
}

Index PlanLayer::stored_params() const
{
    return dense_fallback ? rows * cols : final_rank * (rows + cols);
}

const PlanLayer& CompressionPlan::layer(int index) const
{
    for (const auto& l : layers)
        if (l.layer == index)
            return l;
    throw Error("plan has no entry for layer " + std::to_string(index));
}

std::map<int, Index> CompressionPlan::ranks() const
{
    std::map<int, Index> out;
    for (const auto& l : layers)
        out[l.layer] = l.final_rank;
    return out;
}

std::set<int> CompressionPlan::dense_fallback() const
{
    std::set<int> out;
    for (const auto& l : layers)
        if (l.dense_fallback)
            out.insert(l.layer);
    return out;
}

Index CompressionPlan::recount_removed() const
{
    Index removed = 0;
    for (const auto& l : layers)
        for (Index r = l.original_rank; r > l.final_rank; --r)
            removed += storage_gain(l.rows, l.cols, r);
    return removed;
}

Index min_rank_for(Index m, Index n, double eta)
{
    if (!(eta >= 0.0 && eta < 1.0))
        throw Error("minimum-rank ratio eta must lie in [0, 1)");
    const double v = eta * static_cast<double>(threshold_rank(m, n));
    return static_cast<Index>(std::ceil(v - 1e-9));
}

Index removal_target(double pi, Index total_params)
{
    if (!(pi >= 0.0 && pi < 1.0))
        throw Error("pruning ratio must lie in [0, 1)");
    return static_cast<Index>(std::ceil(pi * static_cast<double>(total_params) - 1e-9));
}

LayerScores score_layer(const WhitenedFactorization& f, const Matrix& G)
{
    const Matrix G_tilde = whitened_gradient(G, f.maps);
    LayerScores s;
    s.layer = f.layer;
    s.rows = f.rows();
    s.cols = f.cols();
    s.scores.resize(static_cast<std::size_t>(f.max_rank()));
    for (Index i = 0; i < f.max_rank(); ++i)
        s.scores[static_cast<std::size_t>(i)] = component_score(f, G_tilde, i);
    return s;
}

CompressionPlan allocate_scores(const std::vector<LayerScores>& layers, double pi, double eta)
{
    CompressionPlan plan;
    for (const auto& l : layers) {
        if (l.max_rank() != std::min(l.rows, l.cols))
            throw Error("allocate: layer " + std::to_string(l.layer) + " has " + std::to_string(l.max_rank()) +
                        " scores for a " + shape_string(l.rows, l.cols) + " weight");
        PlanLayer p;
        p.layer = l.layer;
        p.rows = l.rows;
        p.cols = l.cols;
        p.original_rank = l.max_rank();
        p.final_rank = p.original_rank;
        p.threshold_rank = threshold_rank(l.rows, l.cols);
        p.min_rank = min_rank_for(l.rows, l.cols, eta);
        plan.layers.push_back(p);
        plan.total_params += l.rows * l.cols;
    }
    plan.target_removed = removal_target(pi, plan.total_params);

    auto later = [](const DropCandidate& a, const DropCandidate& b) { return candidate_before(b, a); };
    std::priority_queue<DropCandidate, std::vector<DropCandidate>, decltype(later)> pool(later);

    auto push_tail = [&](std::size_t k) {
        const auto& p = plan.layers[k];
        if (p.final_rank <= p.min_rank)
            return;
        pool.push({layers[k].scores[static_cast<std::size_t>(p.final_rank - 1)], p.layer, p.final_rank,
                   storage_gain(p.rows, p.cols, p.final_rank)});
    };
    std::map<int, std::size_t> slot;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        slot[layers[k].layer] = k;
        push_tail(k);
    }

    while (plan.removed_params < plan.target_removed && !pool.empty()) {
        const DropCandidate c = pool.top();
        pool.pop();
        const std::size_t k = slot.at(c.layer);
        plan.removed_params += c.storage_gain;
        plan.layers[k].final_rank -= 1;
        plan.drop_history.push_back(c);
        push_tail(k);
    }
    plan.budget_reached = plan.removed_params >= plan.target_removed;

    for (auto& p : plan.layers)
        p.dense_fallback = p.final_rank > p.threshold_rank;
    return plan;
}

CompressionPlan allocate(const std::vector<WhitenedFactorization>& factorizations,
                         const std::vector<Matrix>& gradients, double pi, double eta)
{
    if (factorizations.size() != gradients.size())
        throw Error("allocate: need one gradient per factorization");
    std::vector<LayerScores> scores;
    scores.reserve(factorizations.size());
    for (std::size_t k = 0; k < factorizations.size(); ++k)
        scores.push_back(score_layer(factorizations[k], gradients[k]));
    return allocate_scores(scores, pi, eta);
}

NetworkSpec materialize(const CompressionPlan& plan, const std::vector<WhitenedFactorization>& factorizations,
                        const NetworkSpec& net)
{
    NetworkSpec out = net;
    for (const auto& f : factorizations) {
        const PlanLayer& p = plan.layer(f.layer);
        auto& def = out.layers.at(static_cast<std::size_t>(f.layer));
        if (!def.is_linear() || def.weight.rows() != p.rows || def.weight.cols() != p.cols)
            throw Error("materialize: plan entry for layer " + std::to_string(f.layer) + " does not match the network");
        if (p.final_rank > p.threshold_rank) {
            def = LayerDef::linear(net.layers[static_cast<std::size_t>(f.layer)].weight, def.bias);
        } else if (p.final_rank == 0) {
            def = LayerDef::factored({Matrix::Zero(p.rows, 0), Matrix::Zero(p.cols, 0)}, def.bias);
        } else {
            def = LayerDef::factored(truncate_and_unwhiten(f, p.final_rank), def.bias);
        }
    }
    const Index stored = target_weight_params(out);
    if (stored != target_dense_params(net) - plan.removed_params)
        throw Error("materialize: stored parameter count " + std::to_string(stored) +
                    " disagrees with the plan ledger");
    return out;
}

}  // namespace iosvd

namespace iosvd {

SvdCompression compress_network(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                                double pi, double eta, WhiteningMode whitening, const Objective& objective,
                                const CompressionPlan* fixed_plan)
{
    SvdCompression out;
    const auto lg = calibration_loss_and_gradients(net, batch, objective);
    out.base_loss = lg.loss;
    for (int t : net.target_layers) {
        const auto it = stats.find(t);
        if (it == stats.end())
            throw Error("no statistics for target layer " + std::to_string(t));
        out.factorizations.push_back(whiten_mode(net.linear_layer(t).weight, it->second, whitening));
        out.gradients.push_back(lg.grads.at(t));
    }
    if (fixed_plan != nullptr) {
        out.plan = *fixed_plan;
        for (const auto& f : out.factorizations) {
            const auto& p = out.plan.layer(f.layer);
            if (p.rows != f.rows() || p.cols != f.cols() || p.final_rank < 0 || p.final_rank > f.max_rank())
                throw Error("plan entry for layer " + std::to_string(f.layer) + " does not fit the network");
        }
    } else {
        out.plan = allocate(out.factorizations, out.gradients, pi, eta);
    }
    out.compressed = materialize(out.plan, out.factorizations, net);
    return out;
}

}  // namespace iosvd
