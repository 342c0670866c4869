#ifndef IOSVD_REMAP_HPP
#define IOSVD_REMAP_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "iosvd/rank_alloc.hpp"

namespace iosvd {

//
// Hybrid SVD + int8 storage. Byte accounting models unquantized parameters
// at 2 bytes (fp16), int8 codes at 1 byte, and each quantized row carries a
// 4-byte fp32 scale plus a 4-byte row index.
//

inline constexpr Index kFpBytes = 2;
inline constexpr Index kQuantBytes = 1;
inline constexpr Index kScaleBytes = 4;
inline constexpr Index kIndexBytes = 4;
inline constexpr Index kRowOverheadBytes = kScaleBytes + kIndexBytes;

enum class Factor : std::uint8_t { A, D, W };
std::string to_string(Factor f);
Factor factor_from_string(const std::string& s);

enum class RemapMode { off, plain, loss_aware, hq };
std::string to_string(RemapMode m);
RemapMode remap_from_string(const std::string& s);

template <typename Scalar>
struct RowQuantization {
    std::vector<std::int8_t> codes;
    float scale = 1.0f;
    VectorX<Scalar> dequant;
};

// Symmetric per-row absmax int8: scale = max|row| / 127 (rounded up to the
// next fp32), codes = round(row / scale) in [-127, 127]. A zero row uses scale 1.
template <typename Derived>
RowQuantization<typename Derived::Scalar> quantize_dequantize_row(const Eigen::MatrixBase<Derived>& row)
{
    using Scalar = typename Derived::Scalar;
    require_finite(row, "quantize_dequantize_row");
    RowQuantization<Scalar> q;
    const Index n = row.size();
    const double absmax = n > 0 ? static_cast<double>(row.cwiseAbs().maxCoeff()) : 0.0;
    if (absmax > 0.0) {
        const double exact = absmax / 127.0;
        float s = static_cast<float>(exact);
        if (static_cast<double>(s) < exact)
            s = std::nextafter(s, std::numeric_limits<float>::infinity());
        q.scale = s;
    }
    q.codes.resize(static_cast<std::size_t>(n));
    q.dequant.resize(n);
    const double scale = q.scale;
    for (Index j = 0; j < n; ++j) {
        const double c = std::clamp(std::round(static_cast<double>(row(j)) / scale), -127.0, 127.0);
        q.codes[static_cast<std::size_t>(j)] = static_cast<std::int8_t>(c);
        q.dequant(j) = static_cast<Scalar>(c * scale);
    }
    return q;
}

// |<gamma, Q8(row) - row>|, the first-order loss change of quantizing the row.
template <typename DerivedG, typename DerivedR>
double row_score(const Eigen::MatrixBase<DerivedG>& gamma, const Eigen::MatrixBase<DerivedR>& row)
{
    if (gamma.size() != row.size())
        throw Error("row_score: gradient length " + std::to_string(gamma.size()) + " does not match row length " +
                    std::to_string(row.size()));
    const auto q = quantize_dequantize_row(row);
    double dot = 0.0;
    for (Index j = 0; j < row.size(); ++j)
        dot += static_cast<double>(gamma(j)) * (static_cast<double>(q.dequant(j)) - static_cast<double>(row(j)));
    return std::abs(dot);
}

// Value as stored at fp16 precision.
double to_fp16_precision(double x);

struct RemapBudget {
    Index C_target = 0;  // bytes that must be saved overall
    Index C_svd = 0;     // bytes already saved by truncation
    Index C_rem = 0;     // max(0, C_target - C_svd)

    static RemapBudget make(Index C_target, Index C_svd);
    // Budget for reaching `maintenance_ratio` of the fp16 dense bytes.
    static RemapBudget for_ratio(Index dense_params, Index stored_params, double maintenance_ratio);
};

struct RowCandidate {
    int layer = -1;
    Factor factor = Factor::A;
    Index row_index = 0;
    double score = 0.0;       // loss-aware row score
    double magnitude = 0.0;   // L2 norm of the row, for the magnitude heuristic
    Index byte_saving = 0;

    bool key_before(const RowCandidate& o) const;
};

// Greedy loss-aware selection: ascending score when all savings are equal,
// otherwise ascending score / saving, with a final check that finishing a
// shorter prefix with one wide row is cheaper. Returns candidate positions.
// Throws when the pool cannot cover C_rem.
std::vector<std::size_t> select_rows(const std::vector<RowCandidate>& candidates, const RemapBudget& budget);
// Loss-agnostic baseline: largest-magnitude rows first.
std::vector<std::size_t> select_rows_by_magnitude(const std::vector<RowCandidate>& candidates,
                                                  const RemapBudget& budget);

struct QuantizedRow {
    int layer = -1;
    Factor factor = Factor::A;
    Index row_index = 0;
    std::vector<std::int8_t> codes;
    float scale = 1.0f;
    double score = 0.0;
};

// One stored matrix of a layer (A, D, or a dense W) with its row partition.
struct HybridBlock {
    Factor factor = Factor::A;
    Matrix values;                        // decoded values: fp16-rounded or dequantized int8
    std::vector<QuantizedRow> quantized;  // sorted by row_index

    Index byte_count() const;
    bool is_quantized(Index row) const;
};

struct HybridLayer {
    int layer = -1;
    Index rows = 0;
    Index cols = 0;
    bool dense = false;
    std::vector<HybridBlock> blocks;  // {W} when dense, {A, D} when factored
    Index byte_count = 0;

    Matrix effective_weight() const;
    Index recount_bytes() const;
};

struct HybridModel {
    NetworkSpec net;  // target layers hold the decoded effective weights
    std::vector<HybridLayer> layers;
    RemapBudget budget;
    Index dense_bytes = 0;    // fp16 bytes of the original dense target weights
    Index total_bytes = 0;    // sum of layer byte counts
    Index payload_bytes = 0;  // total_bytes without scale/index metadata
    Index quantized_rows = 0;
};

// Candidate rows of every factored target layer (and dense ones when asked),
// with loss-aware scores. Rows whose quantization saves nothing are skipped.
// `grads` holds d loss / d W_hat at the compressed model.
std::vector<RowCandidate> remap_candidates(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                                           bool include_dense, bool payload_only);

// Builds the hybrid model from a selection over `candidates`.
HybridModel build_hybrid(const NetworkSpec& compressed, const std::vector<RowCandidate>& candidates,
                         const std::vector<std::size_t>& selection, const RemapBudget& budget);

// Quantizes factor rows of an SVD-compressed model until C_rem is covered;
// dense-fallback layers are left alone. mode must be plain (magnitude order)
// or loss_aware.
HybridModel apply_remap(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                        const RemapBudget& budget, RemapMode mode);

// HQ selection: rows of every target layer, dense ones included, in
// ascending row-score order until the payload (metadata excluded) is covered.
HybridModel apply_hq_remap(const NetworkSpec& compressed, const std::map<int, Matrix>& grads,
                           const RemapBudget& budget);

struct HqResult {
    CompressionPlan plan;
    NetworkSpec truncated;
    HybridModel hybrid;
};

// Half-prune + quantize: allocate at maintenance 2 x target, then quantize
// rows in ascending row-score order until the fp16/int8 payload fits the
// target ratio.
HqResult hq_compress(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                     double target_ratio, double eta, WhiteningMode whitening, const Objective& objective = {});

}  // namespace iosvd

#endif
