#include "iosvd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace iosvd {

using nlohmann::json;

double RunConfig::svd_stage_ratio() const
{
    switch (remap) {
    case RemapMode::off:
        return ratio;
    case RemapMode::plain:
    case RemapMode::loss_aware:
        return svd_ratio.value_or(std::min(1.0, ratio + 0.05));
    case RemapMode::hq:
        return 2.0 * ratio;
    }
    return ratio;
}

void RunConfig::validate() const
{
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw IoError("ratio (maintenance) must lie in (0, 1]");
    if (!(eta >= 0.0 && eta <= 1.0))
        throw IoError("eta must lie in [0, 1]");
    if (top_k && *top_k < 1)
        throw IoError("top-k must be at least 1");
    if ((damping_r && !(*damping_r >= 0.0)) || (damping_c && !(*damping_c >= 0.0)))
        throw IoError("damping must be nonnegative");
    if (svd_ratio && !(*svd_ratio >= ratio && *svd_ratio <= 1.0))
        throw IoError("svd-ratio must lie in [ratio, 1]");
    if (remap == RemapMode::hq && !(ratio < 0.5))
        throw IoError("hq remap needs ratio < 0.5 (the SVD stage runs at twice the ratio)");
    if (k_list.empty() || std::any_of(k_list.begin(), k_list.end(), [](Index k) { return k < 1; }))
        throw IoError("k-list must hold positive values");
    try {
        shape.validate();
    } catch (const Error& e) {
        throw IoError(e.what());
    }
}

std::filesystem::path RunConfig::model_path() const { return model_file.value_or(out / "model.bin"); }
std::filesystem::path RunConfig::calibration_path() const
{
    return calibration_file.value_or(out / "calibration.bin");
}
std::filesystem::path RunConfig::stats_path() const { return stats_file.value_or(out / "stats.bin"); }
std::filesystem::path RunConfig::plan_path() const { return out / "plan.json"; }
std::filesystem::path RunConfig::compressed_path() const { return compressed_file.value_or(out / "compressed.bin"); }
std::filesystem::path RunConfig::hybrid_path() const { return out / "hybrid.bin"; }
std::filesystem::path RunConfig::candidate_path() const
{
    if (candidate_file)
        return *candidate_file;
    return remap == RemapMode::off ? compressed_path() : hybrid_path();
}
std::filesystem::path RunConfig::report_path() const { return out / "report.json"; }

namespace {

template <typename T>
T field(const json& j, const std::string& key)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw IoError("config field '" + key + "': " + e.what());
    }
}

}  // namespace

RunConfig config_from_json(const json& j, RunConfig c)
{
    if (!j.is_object())
        throw IoError("config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "seed")
            c.seed = field<std::uint64_t>(j, key);
        else if (key == "ratio")
            c.ratio = field<double>(j, key);
        else if (key == "eta")
            c.eta = field<double>(j, key);
        else if (key == "top_k")
            c.top_k = field<Index>(j, key);
        else if (key == "damping_r")
            c.damping_r = field<double>(j, key);
        else if (key == "damping_c")
            c.damping_c = field<double>(j, key);
        else if (key == "whitening")
            c.whitening = whitening_from_string(field<std::string>(j, key));
        else if (key == "remap")
            c.remap = remap_from_string(field<std::string>(j, key));
        else if (key == "svd_ratio")
            c.svd_ratio = field<double>(j, key);
        else if (key == "objective") {
            const auto v = field<std::string>(j, key);
            if (v == "ce")
                c.objective = Objective::Kind::cross_entropy;
            else if (v == "kl")
                c.objective = Objective::Kind::kl_to_reference;
            else
                throw IoError("objective must be ce or kl");
        } else if (key == "input_dim")
            c.shape.input_dim = field<Index>(j, key);
        else if (key == "hidden")
            c.shape.hidden = field<std::vector<Index>>(j, key);
        else if (key == "vocab")
            c.shape.vocab_size = field<Index>(j, key);
        else if (key == "tokens")
            c.shape.tokens = field<Index>(j, key);
        else if (key == "activation")
            c.shape.activation = activation_from_string(field<std::string>(j, key));
        else if (key == "bias")
            c.shape.bias = field<bool>(j, key);
        else if (key == "teacher_shift")
            c.shape.teacher_shift = field<double>(j, key);
        else if (key == "k_list")
            c.k_list = field<std::vector<Index>>(j, key);
        else if (key == "out")
            c.out = field<std::string>(j, key);
        else if (key == "model")
            c.model_file = field<std::string>(j, key);
        else if (key == "calibration")
            c.calibration_file = field<std::string>(j, key);
        else if (key == "stats")
            c.stats_file = field<std::string>(j, key);
        else if (key == "plan")
            c.plan_file = field<std::string>(j, key);
        else if (key == "compressed")
            c.compressed_file = field<std::string>(j, key);
        else if (key == "candidate")
            c.candidate_file = field<std::string>(j, key);
        else
            throw IoError("unknown config key '" + key + "'");
    }
    return c;
}

json config_to_json(const RunConfig& c)
{
    json j = {{"seed", c.seed},
              {"ratio", c.ratio},
              {"eta", c.eta},
              {"whitening", to_string(c.whitening)},
              {"remap", to_string(c.remap)},
              {"objective", c.objective == Objective::Kind::cross_entropy ? "ce" : "kl"},
              {"input_dim", c.shape.input_dim},
              {"hidden", c.shape.hidden},
              {"vocab", c.shape.vocab_size},
              {"tokens", c.shape.tokens},
              {"activation", to_string(c.shape.activation)},
              {"bias", c.shape.bias},
              {"teacher_shift", c.shape.teacher_shift},
              {"k_list", c.k_list}};
    if (c.svd_ratio)
        j["svd_ratio"] = *c.svd_ratio;
    if (c.top_k)
        j["top_k"] = *c.top_k;
    if (c.damping_r)
        j["damping_r"] = *c.damping_r;
    if (c.damping_c)
        j["damping_c"] = *c.damping_c;
    return j;
}

StatsMap calibrate(const NetworkSpec& net, const CalibrationBatch& batch, Index K, std::optional<double> damping_r,
                   std::optional<double> damping_c)
{
    StatsMap stats = collect_stats(net, batch, K);
    for (auto& [layer, s] : stats)
        finalize(s, damping_r.value_or(default_damping(s.R)), damping_c.value_or(default_damping(s.C)));
    return stats;
}

SvdCompression compress_stage(const NetworkSpec& net, const StatsMap& stats, const CalibrationBatch& batch,
                              const RunConfig& config, const CompressionPlan* fixed_plan)
{
    return compress_network(net, stats, batch, 1.0 - config.svd_stage_ratio(), config.eta, config.whitening,
                            config.objective_for(net), fixed_plan);
}

HybridModel remap_stage(const NetworkSpec& original, const NetworkSpec& compressed, const CalibrationBatch& batch,
                        const RunConfig& config)
{
    if (config.remap == RemapMode::off)
        throw Error("remap stage needs a remap mode other than off");
    const auto lg = calibration_loss_and_gradients(compressed, batch, config.objective_for(original));
    const auto budget =
        RemapBudget::for_ratio(target_dense_params(original), target_weight_params(compressed), config.ratio);
    if (config.remap == RemapMode::hq)
        return apply_hq_remap(compressed, lg.grads, budget);
    return apply_remap(compressed, lg.grads, budget, config.remap);
}

bool Report::totals_consistent() const
{
    Index pb = 0, pa = 0, bb = 0, ba = 0;
    for (const auto& l : layers) {
        pb += l.params_before;
        pa += l.params_after;
        bb += l.bytes_before;
        ba += l.bytes_after;
    }
    return pb == params_before && pa == params_after && bb == bytes_before && ba == bytes_after;
}

json Report::to_json() const
{
    json layer_list = json::array();
    for (const auto& l : layers) {
        json e = {{"layer", l.layer},
                  {"rows", l.rows},
                  {"cols", l.cols},
                  {"rank", l.rank},
                  {"dense", l.dense},
                  {"params_before", l.params_before},
                  {"params_after", l.params_after},
                  {"bytes_before", l.bytes_before},
                  {"bytes_after", l.bytes_after}};
        if (l.whitened_error)
            e["whitened_error"] = *l.whitened_error;
        layer_list.push_back(e);
    }
    json j = {{"layers", layer_list},
              {"params_before", params_before},
              {"params_after", params_after},
              {"bytes_before", bytes_before},
              {"bytes_after", bytes_after},
              {"loss_before", loss_before},
              {"loss_after", loss_after},
              {"kl_before", kl_before},
              {"kl_after", kl_after}};
    if (drop_summary)
        j["drop_summary"] = *drop_summary;
    return j;
}

json drop_summary(const CompressionPlan& plan)
{
    std::map<int, Index> drops;
    double score_sum = 0.0;
    for (const auto& d : plan.drop_history) {
        ++drops[d.layer];
        score_sum += d.score;
    }
    json per_layer = json::array();
    for (const auto& l : plan.layers)
        per_layer.push_back({{"layer", l.layer},
                             {"drops", drops[l.layer]},
                             {"final_rank", l.final_rank},
                             {"dense_fallback", l.dense_fallback}});
    return {{"drops", plan.drop_history.size()},
            {"score_sum", score_sum},
            {"removed_params", plan.removed_params},
            {"target_removed", plan.target_removed},
            {"budget_reached", plan.budget_reached},
            {"layers", per_layer}};
}

Report evaluate(const NetworkSpec& original, const NetworkSpec& candidate, const CalibrationBatch& batch,
                const CompressionPlan* plan, const StatsMap* stats, const std::map<int, Index>* layer_bytes)
{
    if (original.target_layers != candidate.target_layers)
        throw Error("evaluate: original and candidate have different target layers");
    batch.validate(original);
    Report r;
    r.loss_before = calibration_loss(original, batch);
    r.loss_after = calibration_loss(candidate, batch);
    r.kl_before = mean_kl(original, original, batch.inputs);
    r.kl_after = mean_kl(original, candidate, batch.inputs);
    for (int t : original.target_layers) {
        const auto& o = original.linear_layer(t);
        const auto& c = candidate.linear_layer(t);
        if (o.out_dim() != c.out_dim() || o.in_dim() != c.in_dim())
            throw Error("evaluate: layer " + std::to_string(t) + " shapes differ");
        LayerReport l;
        l.layer = t;
        l.rows = o.out_dim();
        l.cols = o.in_dim();
        l.dense = !c.factors.has_value();
        l.rank = c.factors ? c.factors->rank() : std::min(l.rows, l.cols);
        l.params_before = o.stored_params();
        l.params_after = c.stored_params();
        l.bytes_before = kFpBytes * l.params_before;
        if (layer_bytes) {
            const auto it = layer_bytes->find(t);
            if (it == layer_bytes->end())
                throw Error("evaluate: no byte count for layer " + std::to_string(t));
            l.bytes_after = it->second;
        } else {
            l.bytes_after = kFpBytes * l.params_after;
        }
        if (stats) {
            const auto it = stats->find(t);
            if (it != stats->end() && it->second.finalized)
                l.whitened_error = whitened_error(o.weight, c.weight, it->second);
        }
        r.params_before += l.params_before;
        r.params_after += l.params_after;
        r.bytes_before += l.bytes_before;
        r.bytes_after += l.bytes_after;
        r.layers.push_back(l);
    }
    if (plan)
        r.drop_summary = drop_summary(*plan);
    return r;
}

std::vector<SweepRow> sweep_k(const NetworkSpec& net, const CalibrationBatch& batch, const RunConfig& config)
{
    RunConfig svd_only = config;
    svd_only.remap = RemapMode::off;
    std::vector<SweepRow> rows;
    for (Index k : config.k_list) {
        if (k > net.vocab_size)
            throw IoError("k-list value " + std::to_string(k) + " exceeds the vocabulary size " +
                          std::to_string(net.vocab_size));
        const auto stats = calibrate(net, batch, k, config.damping_r, config.damping_c);
        const auto svd = compress_stage(net, stats, batch, svd_only);
        rows.push_back({k, mean_kl(net, svd.compressed, batch.inputs), 0.0});
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : rows)
        best = std::min(best, r.kl);
    for (auto& r : rows)
        r.normalized = best > 0.0 ? r.kl / best : (r.kl == 0.0 ? 1.0 : std::numeric_limits<double>::infinity());
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows)
{
    std::ostringstream out;
    out.precision(17);
    out << "k,kl,normalized\n";
    for (const auto& r : rows)
        out << r.k << ',' << r.kl << ',' << r.normalized << '\n';
    return out.str();
}

namespace {

double relative_frobenius(const Matrix& got, const Matrix& want)
{
    const double scale = want.norm();
    const double diff = (got - want).norm();
    return scale > 0.0 ? diff / scale : diff;
}

}  // namespace

std::vector<oracles::OracleReport> run_oracles(const NetworkSpec& net, const CalibrationBatch& batch,
                                               const RunConfig& config)
{
    using oracles::OracleReport;
    batch.validate(net);
    std::vector<OracleReport> out;
    const Index V = net.vocab_size;
    const auto stats = calibrate(net, batch, V, config.damping_r, config.damping_c);
    const auto lg = calibration_loss_and_gradients(net, batch);

    for (int t : net.target_layers) {
        const auto& layer = net.linear_layer(t);
        const std::string tag = "layer " + std::to_string(t);
        if (layer.out_dim() <= oracles::kMaxOracleDim && V <= oracles::kMaxOracleVocab) {
            const Matrix C = oracles::explicit_layer_curvature(net, batch, V, t);
            out.push_back(OracleReport::make("curvature/" + std::to_string(t),
                                             relative_frobenius(stats.at(t).C, C), 1e-4,
                                             tag + ": probe-swept C vs explicit J^T H J at K = V"));
        }
        if (layer.out_dim() <= oracles::kMaxOracleDim && layer.in_dim() <= oracles::kMaxOracleDim) {
            const Matrix G = oracles::finite_diff_weight_gradient(net, batch, t);
            out.push_back(OracleReport::make("gradient/" + std::to_string(t), relative_frobenius(lg.grads.at(t), G),
                                             1e-6, tag + ": reverse-mode gradient vs central differences"));
        }

        const auto f = whiten_mode(layer.weight, stats.at(t), config.whitening);
        const double rebuilt = oracles::rebuild_loss(net, f, batch);
        out.push_back(OracleReport::make("rebuild/" + std::to_string(t),
                                         std::abs(rebuilt - lg.loss) / std::max(std::abs(lg.loss), 1e-12), 1e-8,
                                         tag + ": loss after full-rank unwhitened rebuild"));

        const Index r = std::max<Index>(1, f.max_rank() / 2);
        const Matrix W_hat = truncate_and_unwhiten(f, r).product();
        const double e1 = whitened_error(layer.weight, W_hat, stats.at(t));
        const double e2 = whitened_error_trace(layer.weight, W_hat, stats.at(t));
        out.push_back(OracleReport::make("trace_identity/" + std::to_string(t),
                                         std::abs(e1 - e2) / std::max(std::abs(e2), 1e-300), 1e-9,
                                         tag + ": Frobenius form vs trace form at rank " + std::to_string(r)));
    }

    std::vector<LayerScores> scores;
    for (int t : net.target_layers) {
        const auto f = whiten_mode(net.linear_layer(t).weight, stats.at(t), config.whitening);
        scores.push_back(score_layer(f, lg.grads.at(t)));
    }
    const auto plan = allocate_scores(scores, config.pruning_ratio(), config.eta);
    const auto scan = oracles::exhaustive_pool_scan(scores, config.pruning_ratio(), config.eta);
    std::size_t mismatches = plan.drop_history.size() > scan.size() ? plan.drop_history.size() - scan.size()
                                                                     : scan.size() - plan.drop_history.size();
    for (std::size_t k = 0; k < std::min(plan.drop_history.size(), scan.size()); ++k) {
        const auto& a = plan.drop_history[k];
        const auto& b = scan[k];
        if (a.layer != b.layer || a.rank_before_drop != b.rank_before_drop || a.storage_gain != b.storage_gain)
            ++mismatches;
    }
    out.push_back(OracleReport::make("allocation/pool_scan",
                                     static_cast<double>(mismatches) /
                                         static_cast<double>(std::max<std::size_t>(1, scan.size())),
                                     0.0, std::to_string(scan.size()) + " drops re-derived by linear scan"));
    const Index recount = plan.recount_removed();
    out.push_back(OracleReport::make(
        "allocation/ledger",
        std::abs(static_cast<double>(recount - plan.removed_params)) /
            static_cast<double>(std::max<Index>(1, plan.removed_params)),
        0.0, "removed " + std::to_string(plan.removed_params) + ", recomputed " + std::to_string(recount)));
    return out;
}

json oracle_reports_json(const std::vector<oracles::OracleReport>& reports)
{
    json arr = json::array();
    for (const auto& r : reports)
        arr.push_back({{"name", r.name},
                       {"max_rel_error", r.max_rel_error},
                       {"tolerance", r.tolerance},
                       {"pass", r.pass},
                       {"details", r.details}});
    return arr;
}

}  // namespace iosvd
