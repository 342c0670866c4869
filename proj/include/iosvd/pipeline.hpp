#ifndef IOSVD_PIPELINE_HPP
#define IOSVD_PIPELINE_HPP

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "iosvd/oracles.hpp"
#include "iosvd/remap.hpp"
#include "iosvd/toy.hpp"

namespace iosvd {

// Everything a command needs. `ratio` is the maintenance ratio: the fraction
// of target-layer storage that survives (ratio 0.4 prunes 60%).
struct RunConfig {
    std::uint64_t seed = 1;
    double ratio = 0.6;
    double eta = 0.05;
    std::optional<Index> top_k;         // default: min(32, vocab)
    std::optional<double> damping_r;    // default: relative damping
    std::optional<double> damping_c;
    WhiteningMode whitening = WhiteningMode::double_sided;
    RemapMode remap = RemapMode::off;
    std::optional<double> svd_ratio;    // SVD-stage ratio before plain/loss remap
    Objective::Kind objective = Objective::Kind::cross_entropy;  // scoring loss
    ToyShape shape;
    std::vector<Index> k_list{1, 2, 4, 8, 16, 24};

    std::filesystem::path out = ".";
    std::optional<std::filesystem::path> model_file, calibration_file, stats_file, plan_file, compressed_file,
        candidate_file;

    double pruning_ratio() const { return 1.0 - ratio; }
    // Scoring objective; the KL variant measures against `original`.
    Objective objective_for(const NetworkSpec& original) const { return {objective, &original}; }
    // Maintenance ratio the SVD stage allocates at: the target itself without
    // remapping, ratio + 0.05 (capped at 1) before plain/loss remap, and
    // 2 x ratio for HQ.
    double svd_stage_ratio() const;
    void validate() const;

    std::filesystem::path model_path() const;
    std::filesystem::path calibration_path() const;
    std::filesystem::path stats_path() const;
    std::filesystem::path plan_path() const;
    std::filesystem::path compressed_path() const;
    std::filesystem::path hybrid_path() const;
    std::filesystem::path candidate_path() const;
    std::filesystem::path report_path() const;
};

// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
// Value settings only (no file paths); feeds back into config_from_json.
nlohmann::json config_to_json(const RunConfig& config);

// Accumulates stats with top-K support and finalizes them with the given
// damping (relative default where absent).
StatsMap calibrate(const NetworkSpec& net, const CalibrationBatch& batch, Index K,
                   std::optional<double> damping_r = std::nullopt, std::optional<double> damping_c = std::nullopt);

// SVD stage at config.svd_stage_ratio().
SvdCompression compress_stage(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                              const RunConfig& config, const CompressionPlan* fixed_plan = nullptr);

// Remap stage towards config.ratio on top of an SVD-compressed model.
HybridModel remap_stage(const NetworkSpec& original, const NetworkSpec& compressed, const CalibrationBatch& batch,
                        const RunConfig& config);

struct LayerReport {
    int layer = -1;
    Index rows = 0;
    Index cols = 0;
    Index rank = 0;  // retained rank, min(rows, cols) when dense
    bool dense = true;
    Index params_before = 0;
    Index params_after = 0;
    Index bytes_before = 0;
    Index bytes_after = 0;
    std::optional<double> whitened_error;
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct Report {
    std::vector<LayerReport> layers;
    Index params_before = 0;
    Index params_after = 0;
    Index bytes_before = 0;
    Index bytes_after = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    double kl_before = 0.0;
    double kl_after = 0.0;
    std::optional<nlohmann::json> drop_summary;
    // Kept out of to_json so reports stay byte-identical across runs.
    std::vector<StageTiming> timings;

    // True when every total equals the sum of its per-layer entries.
    bool totals_consistent() const;
    nlohmann::json to_json() const;
};

// Compares `candidate` with `original` on the calibration batch. Byte counts
// default to 2 bytes per stored parameter; `layer_bytes` overrides them
// (hybrid files). Whitened errors need `stats`.
Report evaluate(const NetworkSpec& original, const NetworkSpec& candidate, const CalibrationBatch& batch,
                const CompressionPlan* plan = nullptr, const StatsMap* stats = nullptr,
                const std::map<int, Index>* layer_bytes = nullptr);

nlohmann::json drop_summary(const CompressionPlan& plan);

struct SweepRow {
    Index k = 0;
    double kl = 0.0;
    double normalized = 0.0;  // kl / min over the sweep
};

// Recalibrates with every K and compresses at config.ratio (no remap).
std::vector<SweepRow> sweep_k(const NetworkSpec& net, const CalibrationBatch& batch, const RunConfig& config);
std::string sweep_csv(const std::vector<SweepRow>& rows);

// Definitional checks of the current model: curvature against explicit
// Jacobians, gradients against finite differences, allocation against the
// pool rescan, whitening identities and round trips.
std::vector<oracles::OracleReport> run_oracles(const NetworkSpec& net, const CalibrationBatch& batch,
                                               const RunConfig& config);
nlohmann::json oracle_reports_json(const std::vector<oracles::OracleReport>& reports);

class StageTimer {
public:
    explicit StageTimer(std::vector<StageTiming>& sink, std::string stage)
        : sink_(sink), stage_(std::move(stage)), start_(std::chrono::steady_clock::now())
    {
    }
    ~StageTimer()
    {
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start_;
        sink_.push_back({stage_, dt.count()});
    }
    StageTimer(const StageTimer&) = delete;
    StageTimer& operator=(const StageTimer&) = delete;

private:
    std::vector<StageTiming>& sink_;
    std::string stage_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace iosvd

#endif
