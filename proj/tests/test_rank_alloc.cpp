#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "iosvd/oracles.hpp"
#include "iosvd/rank_alloc.hpp"
#include "test_util.hpp"

using namespace iosvd;
using testutil::gaussian;
using testutil::random_spd;

namespace {

LayerStats random_stats(std::mt19937_64& rng, int layer, Index m, Index n)
{
    auto s = LayerStats::zeros(layer, n, m);
    s.token_count = s.curvature_tokens = 1;
    s.R = random_spd(rng, n);
    s.C = random_spd(rng, m);
    finalize_default(s);
    return s;
}

std::vector<LayerScores> three_layer_scores(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<LayerScores> out;
    const std::pair<Index, Index> shapes[] = {{6, 4}, {5, 5}, {4, 6}};
    int layer = 0;
    for (auto [m, n] : shapes) {
        const auto s = random_stats(rng, layer, m, n);
        const auto f = whiten(gaussian(rng, m, n), s);
        out.push_back(score_layer(f, gaussian(rng, m, n)));
        layer += 2;
    }
    return out;
}

bool same_sequence(const std::vector<DropCandidate>& a, const std::vector<DropCandidate>& b)
{
    if (a.size() != b.size())
        return false;
    for (std::size_t k = 0; k < a.size(); ++k)
        if (a[k].layer != b[k].layer || a[k].rank_before_drop != b[k].rank_before_drop ||
            a[k].score != b[k].score || a[k].storage_gain != b[k].storage_gain)
            return false;
    return true;
}

}  // namespace

TEST_CASE("whitened gradient")
{
    std::mt19937_64 rng(1);
    const Matrix G = gaussian(rng, 4, 3);
    const auto id = WhiteningMaps::identity(4, 3);
    CHECK(whitened_gradient(G, id) == G);
    const auto s = random_stats(rng, 0, 4, 3);
    CHECK(whitened_gradient(Matrix::Zero(4, 3), s).norm() == 0.0);

    // <G_tilde, dB> = <G, dW> for dW = C^{-1/2} dB R^{-1/2}.
    const Matrix dB = gaussian(rng, 4, 3);
    const Matrix dW = s.C_inv_half * dB * s.R_inv_half;
    const Matrix Gt = whitened_gradient(G, s);
    CHECK((Gt.cwiseProduct(dB)).sum() == doctest::Approx((G.cwiseProduct(dW)).sum()).epsilon(1e-10));
}

TEST_CASE("component score")
{
    Matrix W = Matrix::Zero(3, 3);
    W(0, 0) = 2.0;
    const auto f = whiten(W, WhiteningMaps::identity(3, 3));
    std::mt19937_64 rng(2);
    const Matrix G = gaussian(rng, 3, 3);
    CHECK(component_score(f, G, 2) == 0.0);
    CHECK(component_score(f, Matrix::Zero(3, 3), 0) == 0.0);
    CHECK(component_score(f, G, 0) == doctest::Approx(std::abs(2.0 * G(0, 0))));
    CHECK(predicted_drop_change(f, G, 0) == doctest::Approx(-2.0 * G(0, 0) * f.svd.U(0, 0) * f.svd.V(0, 0)));
    CHECK_THROWS_AS(component_score(f, G, 3), Error);
}

TEST_CASE("predicted drop change tracks the measured change")
{
    const auto toy = generate_toy(1);
    auto stats = collect_stats(toy.net, toy.batch, 24);
    for (auto& [l, s] : stats)
        finalize_default(s);
    const auto lg = calibration_loss_and_gradients(toy.net, toy.batch);
    const int head = toy.net.target_layers.back();
    const auto f = whiten(toy.net.linear_layer(head).weight, stats.at(head));
    const Index i = f.max_rank() - 1;
    const double pred = predicted_drop_change(f, whitened_gradient(lg.grads.at(head), f.maps), i);
    const double actual = oracles::drop_and_remeasure(toy.net, f, toy.batch, i);
    CHECK(std::abs(actual - pred) / std::max(std::abs(pred), 1e-8) <= 0.1);
}

TEST_CASE("threshold rank")
{
    CHECK(threshold_rank(4096, 4096) == 2048);
    CHECK(threshold_rank(3, 2) == 1);
    for (Index n = 1; n <= 20; ++n)
        CHECK(threshold_rank(1, n) == 0);
    CHECK_THROWS_AS(threshold_rank(0, 3), Error);
}

TEST_CASE("storage gain")
{
    CHECK(storage_gain(3, 2, 2) == 1);
    CHECK(storage_gain(4, 4, 4) == 0);
    CHECK(storage_gain(8, 8, 3) == 16);
    CHECK_THROWS_AS(storage_gain(4, 4, 0), Error);
    CHECK_THROWS_AS(storage_gain(4, 4, 5), Error);

    // Summing gains from full rank down to r gives dense minus stored.
    for (Index m = 1; m <= 9; ++m)
        for (Index n = 1; n <= 9; ++n)
            for (Index r = 0; r < std::min(m, n); ++r) {
                Index sum = 0;
                for (Index k = std::min(m, n); k > r; --k)
                    sum += storage_gain(m, n, k);
                const Index stored = r > threshold_rank(m, n) ? m * n : r * (m + n);
                CHECK(sum == m * n - stored);
            }
}

TEST_CASE("minimum rank and removal target")
{
    CHECK(min_rank_for(32, 48, 0.05) == 1);
    CHECK(min_rank_for(32, 48, 0.0) == 0);
    CHECK(min_rank_for(4, 4, 0.5) == 1);
    CHECK_THROWS_AS(min_rank_for(4, 4, 1.0), Error);
    CHECK(removal_target(0.4, 100) == 40);
    CHECK(removal_target(0.3, 10) == 3);
    CHECK(removal_target(0.0, 10) == 0);
}

TEST_CASE("no budget means no drops")
{
    const auto scores = three_layer_scores(1);
    const auto plan = allocate_scores(scores, 0.0, 0.05);
    CHECK(plan.drop_history.empty());
    CHECK(plan.removed_params == 0);
    CHECK(plan.budget_reached);
    for (const auto& l : plan.layers)
        CHECK(l.dense_fallback);
}

TEST_CASE("single layer drops its tail in spectral order")
{
    LayerScores l;
    l.layer = 0;
    l.rows = 8;
    l.cols = 8;
    l.scores = {8, 7, 6, 5, 4, 3, 2, 1};
    // r* = 4 and 4 * 16 = 64: ranks 8..4 free nothing, later drops free 16 each.
    const auto one_past = allocate_scores({l}, 0.25, 0.0);
    CHECK(one_past.layers[0].final_rank == 3);
    CHECK(one_past.removed_params == 16);
    CHECK(one_past.drop_history.size() == 5);

    const auto one_more = allocate_scores({l}, 0.5, 0.0);
    CHECK(one_more.layers[0].final_rank == 2);
    CHECK(one_more.removed_params == 32);

    const auto two_more = allocate_scores({l}, 0.51, 0.0);
    CHECK(two_more.layers[0].final_rank == 1);
    CHECK(two_more.removed_params == 48);
    for (std::size_t k = 1; k < two_more.drop_history.size(); ++k) {
        CHECK(two_more.drop_history[k].rank_before_drop == two_more.drop_history[k - 1].rank_before_drop - 1);
        CHECK(two_more.drop_history[k].score > two_more.drop_history[k - 1].score);
    }
}

TEST_CASE("identical layers are balanced")
{
    LayerScores a;
    a.layer = 0;
    a.rows = 6;
    a.cols = 6;
    a.scores = {6, 5, 4, 3, 2, 1};
    LayerScores b = a;
    b.layer = 2;
    for (double pi : {0.3, 0.6, 0.7}) {
        const auto plan = allocate_scores({a, b}, pi, 0.0);
        CHECK(std::abs(plan.layers[0].final_rank - plan.layers[1].final_rank) <= 1);
        CHECK(plan.drop_history.front().layer == 0);
    }
}

TEST_CASE("greedy allocation equals the pool rescan")
{
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto scores = three_layer_scores(seed);
        for (double pi : {0.1, 0.3, 0.5, 0.7}) {
            const auto plan = allocate_scores(scores, pi, 0.05);
            CHECK(same_sequence(plan.drop_history, oracles::exhaustive_pool_scan(scores, pi, 0.05)));
            CHECK(plan.recount_removed() == plan.removed_params);
            for (const auto& l : plan.layers) {
                CHECK(l.final_rank >= l.min_rank);
                CHECK(l.dense_fallback == (l.final_rank > l.threshold_rank));
            }
        }
    }
}

TEST_CASE("unreachable budget is flagged")
{
    const auto scores = three_layer_scores(3);
    const auto plan = allocate_scores(scores, 0.9, 0.99);
    CHECK_FALSE(plan.budget_reached);
    CHECK(plan.removed_params < plan.target_removed);
}

TEST_CASE("materialize")
{
    const auto toy = testutil::small_toy(5, 16);
    auto stats = collect_stats(toy.net, toy.batch, 6);
    for (auto& [l, s] : stats)
        finalize_default(s);

    const auto none = compress_network(toy.net, stats, toy.batch, 0.0, 0.05, WhiteningMode::double_sided);
    for (int t : toy.net.target_layers)
        CHECK(none.compressed.linear_layer(t).weight == toy.net.linear_layer(t).weight);

    const auto c = compress_network(toy.net, stats, toy.batch, 0.4, 0.05, WhiteningMode::double_sided);
    CHECK(c.plan.budget_reached);
    Index stored = 0;
    for (const auto& p : c.plan.layers) {
        const auto& def = c.compressed.linear_layer(p.layer);
        if (p.dense_fallback) {
            CHECK_FALSE(def.factors.has_value());
        } else {
            REQUIRE(def.factors.has_value());
            CHECK(def.factors->rank() == p.final_rank);
            CHECK(p.final_rank * (p.rows + p.cols) <= p.rows * p.cols);
        }
        stored += def.stored_params();
    }
    CHECK(stored == c.plan.total_params - c.plan.removed_params);
    CHECK(c.plan.recount_removed() == c.plan.removed_params);
    CHECK(c.plan.removed_params >= c.plan.target_removed);
}
