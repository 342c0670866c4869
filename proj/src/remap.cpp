#include "iosvd/remap.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

namespace iosvd {

std::string to_string(Factor f)
{
    switch (f) {
    case Factor::A:
        return "A";
    case Factor::D:
        return "D";
    case Factor::W:
        return "W";
    }
    return "?";
}

Factor factor_from_string(const std::string& s)
{
    if (s == "A")
        return Factor::A;
    if (s == "D")
        return Factor::D;
    if (s == "W")
        return Factor::W;
    throw IoError("unknown factor '" + s + "'");
}

std::string to_string(RemapMode m)
{
    switch (m) {
    case RemapMode::off:
        return "off";
    case RemapMode::plain:
        return "plain";
    case RemapMode::loss_aware:
        return "loss";
    case RemapMode::hq:
        return "hq";
    }
    return "?";
}

RemapMode remap_from_string(const std::string& s)
{
    if (s == "off")
        return RemapMode::off;
    if (s == "plain")
        return RemapMode::plain;
    if (s == "loss" || s == "loss_aware")
        return RemapMode::loss_aware;
    if (s == "hq")
        return RemapMode::hq;
    throw IoError("unknown remap mode '" + s + "'");
}

double to_fp16_precision(double x)
{
    return static_cast<double>(static_cast<float>(Eigen::half(static_cast<float>(x))));
}

RemapBudget RemapBudget::make(Index C_target, Index C_svd)
{
    return {C_target, C_svd, std::max<Index>(0, C_target - C_svd)};
}

RemapBudget RemapBudget::for_ratio(Index dense_params, Index stored_params, double maintenance_ratio)
{
    if (!(maintenance_ratio > 0.0 && maintenance_ratio <= 1.0))
        throw Error("maintenance ratio must lie in (0, 1]");
    const Index dense_bytes = kFpBytes * dense_params;
    const auto allowed = static_cast<Index>(std::floor(maintenance_ratio * static_cast<double>(dense_bytes) + 1e-9));
    return make(dense_bytes - allowed, kFpBytes * (dense_params - stored_params));
}

bool RowCandidate::key_before(const RowCandidate& o) const
{
    return std::tie(layer, factor, row_index) < std::tie(o.layer, o.factor, o.row_index);
}

namespace {

std::vector<std::size_t> take_until_covered(const std::vector<RowCandidate>& candidates,
                                            const std::vector<std::size_t>& order, const RemapBudget& budget)
{
    std::vector<std::size_t> chosen;
    if (budget.C_rem <= 0)
        return chosen;
    Index covered = 0;
    for (std::size_t k : order) {
        chosen.push_back(k);
        covered += candidates[k].byte_saving;
        if (covered >= budget.C_rem)
            return chosen;
    }
    throw Error("select_rows: candidate pool saves " + std::to_string(covered) + " bytes but " +
                std::to_string(budget.C_rem) + " are required (shortfall " + std::to_string(budget.C_rem - covered) +
                ")");
}

void require_positive_savings(const std::vector<RowCandidate>& candidates)
{
    for (const auto& c : candidates)
        if (c.byte_saving <= 0)
            throw Error("select_rows: candidate row " + std::to_string(c.row_index) + " of layer " +
                        std::to_string(c.layer) + " saves no bytes");
}

}  // namespace

std::vector<std::size_t> select_rows(const std::vector<RowCandidate>& candidates, const RemapBudget& budget)
{
    require_positive_savings(candidates);
    const bool equal_cost = std::all_of(candidates.begin(), candidates.end(), [&](const RowCandidate& c) {
        return c.byte_saving == candidates.front().byte_saving;
    });
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& x = candidates[a];
        const auto& y = candidates[b];
        const double kx = equal_cost ? x.score : x.score / static_cast<double>(x.byte_saving);
        const double ky = equal_cost ? y.score : y.score / static_cast<double>(y.byte_saving);
        if (kx != ky)
            return kx < ky;
        return x.key_before(y);
    });
    auto chosen = take_until_covered(candidates, order, budget);
    if (equal_cost || chosen.empty())
        return chosen;

    // Completion pass: a prefix of the ratio order finished by the cheapest
    // single row that covers the remainder. Keeps the result within 2x of the
    // optimal cover, which the plain ratio order does not guarantee.
    auto total_score = [&](const std::vector<std::size_t>& sel) {
        double s = 0.0;
        for (std::size_t k : sel)
            s += candidates[k].score;
        return s;
    };
    double best = total_score(chosen);
    std::size_t best_prefix = chosen.size();
    std::size_t best_finish = candidates.size();
    Index covered = 0;
    double prefix_score = 0.0;
    for (std::size_t j = 0; j < chosen.size(); ++j) {
        const Index need = budget.C_rem - covered;
        for (std::size_t t = j; t < order.size(); ++t) {
            const auto& c = candidates[order[t]];
            if (c.byte_saving < need)
                continue;
            const double total = prefix_score + c.score;
            if (total < best) {
                best = total;
                best_prefix = j;
                best_finish = order[t];
            }
        }
        covered += candidates[order[j]].byte_saving;
        prefix_score += candidates[order[j]].score;
    }
    if (best_finish == candidates.size())
        return chosen;
    chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(best_prefix));
    chosen.push_back(best_finish);
    return chosen;
}

std::vector<std::size_t> select_rows_by_magnitude(const std::vector<RowCandidate>& candidates,
                                                  const RemapBudget& budget)
{
    require_positive_savings(candidates);
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& x = candidates[a];
        const auto& y = candidates[b];
        if (x.magnitude != y.magnitude)
            return x.magnitude > y.magnitude;
        return x.key_before(y);
    });
    return take_until_covered(candidates, order, budget);
}

Index HybridBlock::byte_count() const
{
    const Index q = static_cast<Index>(quantized.size());
    const Index len = values.cols();
    return kFpBytes * (values.rows() - q) * len + kQuantBytes * q * len + kRowOverheadBytes * q;
}

bool HybridBlock::is_quantized(Index row) const
{
    const auto it = std::lower_bound(quantized.begin(), quantized.end(), row,
                                     [](const QuantizedRow& q, Index r) { return q.row_index < r; });
    return it != quantized.end() && it->row_index == row;
}

Matrix HybridLayer::effective_weight() const
{
    if (dense)
        return blocks.at(0).values;
    return blocks.at(0).values * blocks.at(1).values.transpose();
}

Index HybridLayer::recount_bytes() const
{
    Index total = 0;
    for (const auto& b : blocks)
        total += b.byte_count();
    return total;
}

namespace {

struct BlockSource {
    Factor factor;
    const Matrix* values;
    Matrix gamma;
};

std::vector<BlockSource> blocks_of(const LayerDef& def, const Matrix* grad)
{
    std::vector<BlockSource> out;
    if (def.factors) {
        const auto& f = *def.factors;
        out.push_back({Factor::A, &f.A, grad ? Matrix(*grad * f.D) : Matrix()});
        out.push_back({Factor::D, &f.D, grad ? Matrix(grad->transpose() * f.A) : Matrix()});
    } else {
        out.push_back({Factor::W, &def.weight, grad ? *grad : Matrix()});
    }
    return out;
}

}  // namespace

std::vector<RowCandidate> remap_candidates(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                                           bool include_dense, bool payload_only)
{
    std::vector<RowCandidate> out;
    for (int t : compressed.target_layers) {
        const auto& def = compressed.linear_layer(t);
        if (!def.factors && !include_dense)
            continue;
        const auto git = grads.find(t);
        if (git == grads.end())
            throw Error("remap: no gradient for layer " + std::to_string(t));
        for (const auto& b : blocks_of(def, &git->second)) {
            const Index len = b.values->cols();
            const Index saving = (kFpBytes - kQuantBytes) * len - (payload_only ? 0 : kRowOverheadBytes);
            if (saving <= 0)
                continue;
            for (Index i = 0; i < b.values->rows(); ++i) {
                RowCandidate c;
                c.layer = t;
                c.factor = b.factor;
                c.row_index = i;
                c.score = row_score(b.gamma.row(i), b.values->row(i));
                c.magnitude = b.values->row(i).norm();
                c.byte_saving = saving;
                out.push_back(c);
            }
        }
    }
    return out;
}

HybridModel build_hybrid(const NetworkSpec& compressed, const std::vector<RowCandidate>& candidates,
                         const std::vector<std::size_t>& selection, const RemapBudget& budget)
{
    std::map<std::tuple<int, Factor>, std::vector<const RowCandidate*>> chosen;
    for (std::size_t k : selection)
        chosen[{candidates.at(k).layer, candidates.at(k).factor}].push_back(&candidates.at(k));

    HybridModel model;
    model.net = compressed;
    model.budget = budget;
    for (int t : compressed.target_layers) {
        const auto& def = compressed.linear_layer(t);
        HybridLayer layer;
        layer.layer = t;
        layer.rows = def.out_dim();
        layer.cols = def.in_dim();
        layer.dense = !def.factors.has_value();
        for (const auto& src : blocks_of(def, nullptr)) {
            HybridBlock block;
            block.factor = src.factor;
            block.values = src.values->unaryExpr([](double v) { return to_fp16_precision(v); });
            auto rows = chosen[{t, src.factor}];
            std::sort(rows.begin(), rows.end(),
                      [](const RowCandidate* a, const RowCandidate* b) { return a->row_index < b->row_index; });
            for (const RowCandidate* c : rows) {
                const auto q = quantize_dequantize_row(src.values->row(c->row_index));
                block.values.row(c->row_index) = q.dequant.transpose();
                block.quantized.push_back({t, src.factor, c->row_index, q.codes, q.scale, c->score});
            }
            model.quantized_rows += static_cast<Index>(block.quantized.size());
            layer.blocks.push_back(std::move(block));
        }
        layer.byte_count = layer.recount_bytes();
        model.total_bytes += layer.byte_count;
        for (const auto& b : layer.blocks)
            model.payload_bytes += b.byte_count() - kRowOverheadBytes * static_cast<Index>(b.quantized.size());
        model.dense_bytes += kFpBytes * layer.rows * layer.cols;

        auto& out_def = model.net.layers[static_cast<std::size_t>(t)];
        if (layer.dense) {
            out_def = LayerDef::linear(layer.blocks[0].values, def.bias);
        } else {
            out_def = LayerDef::factored({layer.blocks[0].values, layer.blocks[1].values}, def.bias);
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

HybridModel apply_remap(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                        const RemapBudget& budget, RemapMode mode)
{
    if (mode != RemapMode::plain && mode != RemapMode::loss_aware)
        throw Error("apply_remap: mode must be plain or loss-aware");
    const auto candidates = remap_candidates(compressed, grads, false, false);
    const auto selection = mode == RemapMode::loss_aware ? select_rows(candidates, budget)
                                                         : select_rows_by_magnitude(candidates, budget);
    return build_hybrid(compressed, candidates, selection, budget);
}

HybridModel apply_hq_remap(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                           const RemapBudget& budget)
{
    const auto candidates = remap_candidates(compressed, grads, true, true);
    return build_hybrid(compressed, candidates, select_rows(candidates, budget), budget);
}

HqResult hq_compress(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                     double target_ratio, double eta, WhiteningMode whitening, const Objective& objective)
{
    if (!(target_ratio > 0.0 && target_ratio < 0.5))
        throw Error("hq_compress: target maintenance ratio must lie in (0, 0.5)");
    auto svd = compress_network(net, stats, batch, 1.0 - 2.0 * target_ratio, eta, whitening, objective);
    const auto lg = calibration_loss_and_gradients(svd.compressed, batch, objective);
    const auto budget = RemapBudget::for_ratio(target_dense_params(net), target_weight_params(svd.compressed),
                                               target_ratio);
    HqResult out;
    out.plan = std::move(svd.plan);
    out.hybrid = apply_hq_remap(svd.compressed, lg.grads, budget);
    out.truncated = std::move(svd.compressed);
    return out;
}

}  // namespace iosvd
