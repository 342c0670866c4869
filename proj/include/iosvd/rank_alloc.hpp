#ifndef IOSVD_RANK_ALLOC_HPP
#define IOSVD_RANK_ALLOC_HPP

#include <map>
#include <set>
#include <vector>

#include "iosvd/whiten.hpp"

namespace iosvd {

// G_tilde = C^{-1/2} G R^{-1/2}, the gradient w.r.t. the whitened matrix B.
Matrix whitened_gradient(const Matrix& G, const LayerStats& stats);
Matrix whitened_gradient(const Matrix& G, const WhiteningMaps& maps);

// |g_i sigma_i| with g_i = u_i^T G_tilde v_i (component index is 0-based).
double component_score(const WhitenedFactorization& f, const Matrix& G_tilde, Index i);
// Signed first-order loss change of zeroing sigma_i: -g_i sigma_i.
double predicted_drop_change(const WhitenedFactorization& f, const Matrix& G_tilde, Index i);

// floor(mn / (m + n)): largest rank whose two factors cost no more than dense.
Index threshold_rank(Index m, Index n);
// Parameters freed by dropping the tail component when the current rank is r.
Index storage_gain(Index m, Index n, Index r);

// Scores of one layer's whitened components, descending-sigma order.
struct LayerScores {
    int layer = -1;
    Index rows = 0;
    Index cols = 0;
    std::vector<double> scores;

    Index max_rank() const { return static_cast<Index>(scores.size()); }
};

struct DropCandidate {
    double score = 0.0;
    int layer = -1;
    Index rank_before_drop = 0;
    Index storage_gain = 0;
};

bool candidate_before(const DropCandidate& a, const DropCandidate& b);

struct PlanLayer {
    int layer = -1;
    Index rows = 0;
    Index cols = 0;
    Index original_rank = 0;
    Index final_rank = 0;
    Index threshold_rank = 0;
    Index min_rank = 0;
    bool dense_fallback = false;

    Index stored_params() const;
};

struct CompressionPlan {
    std::vector<PlanLayer> layers;
    std::vector<DropCandidate> drop_history;
    Index total_params = 0;
    Index removed_params = 0;
    Index target_removed = 0;
    bool budget_reached = true;

    const PlanLayer& layer(int index) const;
    std::map<int, Index> ranks() const;
    std::set<int> dense_fallback() const;
    // Removed parameters recomputed from final ranks via the storage-gain closed forms.
    Index recount_removed() const;
};

Index min_rank_for(Index m, Index n, double eta);
// ceil(pi * total), guarded against round-off at exact multiples.
Index removal_target(double pi, Index total_params);

LayerScores score_layer(const WhitenedFactorization& f, const Matrix& G);

// Greedy min-heap allocation over the tail candidates of every layer.
CompressionPlan allocate_scores(const std::vector<LayerScores>& layers, double pi, double eta);
CompressionPlan allocate(const std::vector<WhitenedFactorization>& factorizations,
                         const std::vector<Matrix>& gradients, double pi, double eta);

// Replaces target layers by their plan-rank factors; layers above the
// threshold rank keep their dense weight.
NetworkSpec materialize(const CompressionPlan& plan, const std::vector<WhitenedFactorization>& factorizations,
                        const NetworkSpec& net);

struct SvdCompression {
    std::vector<WhitenedFactorization> factorizations;
    std::vector<Matrix> gradients;  // d loss / d W at the uncompressed model
    double base_loss = 0.0;
    CompressionPlan plan;
    NetworkSpec compressed;
};

// Whiten every target layer, score with calibration gradients, allocate at
// pruning ratio `pi` (or reuse `fixed_plan`) and materialize.
SvdCompression compress_network(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                                double pi, double eta, WhiteningMode whitening, const Objective& objective = {},
                                const CompressionPlan* fixed_plan = nullptr);

}  // namespace iosvd

#endif
