#ifndef IOSVD_ORACLES_HPP
#define IOSVD_ORACLES_HPP

//
// Brute-force references. Each one evaluates the quantity it names directly
// (finite differences, explicit Jacobians, linear rescans) and only shares
// forward evaluation with the code it checks.
//

#include <string>
#include <vector>

#include "iosvd/rank_alloc.hpp"

namespace iosvd::oracles {

struct OracleReport {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string details;

    static OracleReport make(std::string name, double err, double tol, std::string details = {});
};

inline constexpr Index kMaxOracleDim = 64;
inline constexpr Index kMaxOracleVocab = 32;
inline constexpr std::size_t kMaxPoolCandidates = 10000;

// Network output from the output of linear layer `layer` onward.
Vector forward_from(const NetworkSpec& net, int layer, const Vector& layer_output);

// d z_K / d h_layer by central differences of forward_from (K x out_dim).
Matrix finite_diff_output_jacobian(const NetworkSpec& net, const Vector& x, const std::vector<Index>& support,
                                   int layer, double step = 1e-5);

// mean_t J_t^T H_t J_t with J from finite differences and H = Diag(p) - p p^T
// formed entrywise on the renormalized top-K support.
Matrix explicit_layer_curvature(const NetworkSpec& net, const CalibrationBatch& batch, Index K, int layer);

// Central-difference d loss / d W for one linear layer (mean cross-entropy).
Matrix finite_diff_weight_gradient(const NetworkSpec& net, const CalibrationBatch& batch, int layer,
                                   double step = 1e-5, const Objective& objective = {});

// Actual calibration-loss change from zeroing whitened component `component`
// and rebuilding the layer through the unwhitening maps.
double drop_and_remeasure(const NetworkSpec& net, const WhitenedFactorization& f, const CalibrationBatch& batch,
                          Index component, const Objective& objective = {});

// Loss after replacing layer `layer` with the full-rank rebuild C^{-1/2} B R^{-1/2}.
double rebuild_loss(const NetworkSpec& net, const WhitenedFactorization& f, const CalibrationBatch& batch,
                    const Objective& objective = {});

// Greedy drop sequence with every pop re-derived by a linear scan over the
// layers' current tail candidates.
std::vector<DropCandidate> exhaustive_pool_scan(const std::vector<LayerScores>& layers, double pi, double eta);

// Minimal total score over all subsets covering `need` (n <= 20).
double exhaustive_min_selection(const std::vector<double>& scores, const std::vector<Index>& savings, Index need);

}  // namespace iosvd::oracles

#endif
