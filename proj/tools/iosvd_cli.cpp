// iosvd: command-line front end.
//
//   iosvd gen        --seed S --out DIR          toy model + calibration data
//   iosvd calibrate  --top-k K                   per-layer R, C statistics
//   iosvd compress   --ratio P --whitening M     plan + SVD-compressed model
//   iosvd remap      --ratio P --remap MODE      hybrid fp16/int8 model
//   iosvd eval                                   report against the original
//   iosvd verify                                 oracle checks, JSON array
//   iosvd sweep-k    --k-list 1,4,24             KL-to-original per K
//
// Files live in --out (model.bin, calibration.bin, stats.bin, plan.json,
// compressed.bin, hybrid.bin, report.json, sweep_k.csv) unless overridden.
// Settings come from flags, then --config JSON, then defaults.

#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "iosvd/io.hpp"
#include "iosvd/pipeline.hpp"

namespace {

using namespace iosvd;
using nlohmann::json;

struct Stage {
    std::vector<StageTiming> timings;

    void print(const std::string& command) const
    {
        for (const auto& t : timings)
            std::cerr << command << ": " << t.stage << " " << t.seconds << " s\n";
    }
};

void ensure_out_dir(const RunConfig& c)
{
    std::error_code ec;
    std::filesystem::create_directories(c.out, ec);
    if (ec)
        throw IoError("cannot create " + c.out.string() + ": " + ec.message());
}

Index resolve_top_k(const RunConfig& c, Index vocab)
{
    const Index K = c.top_k.value_or(default_top_k(vocab));
    if (K > vocab)
        throw IoError("top-k " + std::to_string(K) + " exceeds the vocabulary size " + std::to_string(vocab));
    return K;
}

StatsMap load_stats(const RunConfig& c)
{
    StatsMap stats = io::read_stats(c.stats_path());
    if (c.damping_r || c.damping_c)
        for (auto& [layer, s] : stats)
            finalize(s, c.damping_r.value_or(s.lambda_R), c.damping_c.value_or(s.lambda_C));
    return stats;
}

int cmd_gen(const RunConfig& c)
{
    Stage st;
    ToyData toy;
    {
        StageTimer t(st.timings, "generate");
        toy = generate_toy(c.seed, c.shape);
    }
    ensure_out_dir(c);
    io::write_model(c.model_path(), toy.net);
    io::write_calibration(c.calibration_path(), toy.batch, toy.net.vocab_size);
    const double loss = calibration_loss(toy.net, toy.batch);
    std::cout << json{{"model", c.model_path().string()},
                      {"calibration", c.calibration_path().string()},
                      {"calibration_loss", loss}}
                     .dump(2)
              << "\n";
    st.print("gen");
    return std::isfinite(loss) && loss > 0.0 ? 0 : 1;
}

int cmd_calibrate(const RunConfig& c)
{
    Stage st;
    const auto net = io::read_model(c.model_path());
    const auto batch = io::read_calibration(c.calibration_path());
    batch.validate(net);
    const Index K = resolve_top_k(c, net.vocab_size);
    StatsMap stats;
    {
        StageTimer t(st.timings, "calibrate");
        stats = calibrate(net, batch, K, c.damping_r, c.damping_c);
    }
    ensure_out_dir(c);
    io::write_stats(c.stats_path(), stats);
    json layers = json::array();
    for (const auto& [layer, s] : stats)
        layers.push_back({{"layer", layer}, {"lambda_R", s.lambda_R}, {"lambda_C", s.lambda_C}});
    std::cout << json{{"stats", c.stats_path().string()}, {"top_k", K}, {"layers", layers}}.dump(2) << "\n";
    st.print("calibrate");
    return 0;
}

int cmd_compress(const RunConfig& c)
{
    Stage st;
    const auto net = io::read_model(c.model_path());
    const auto batch = io::read_calibration(c.calibration_path());
    const auto stats = load_stats(c);
    std::optional<CompressionPlan> fixed;
    if (c.plan_file)
        fixed = io::read_plan(*c.plan_file);
    SvdCompression svd;
    {
        StageTimer t(st.timings, "compress");
        svd = compress_stage(net, stats, batch, c, fixed ? &*fixed : nullptr);
    }
    ensure_out_dir(c);
    json ranks = json::object();
    for (const auto& [layer, r] : svd.plan.ranks())
        ranks[std::to_string(layer)] = r;
    io::write_plan(c.plan_path(), svd.plan);
    io::write_model(c.compressed_path(), svd.compressed);
    std::cout << json{{"plan", c.plan_path().string()},
                      {"compressed", c.compressed_path().string()},
                      {"svd_stage_ratio", c.svd_stage_ratio()},
                      {"ranks", ranks},
                      {"removed_params", svd.plan.removed_params},
                      {"target_removed", svd.plan.target_removed},
                      {"budget_reached", svd.plan.budget_reached}}
                     .dump(2)
              << "\n";
    st.print("compress");
    if (!svd.plan.budget_reached) {
        std::cerr << "compress: budget unreachable: removed " << svd.plan.removed_params << " of "
                  << svd.plan.target_removed << " parameters (eta floors reached)\n";
        return 1;
    }
    return 0;
}

int cmd_remap(const RunConfig& c)
{
    if (c.remap == RemapMode::off)
        throw IoError("remap needs --remap plain, loss or hq");
    Stage st;
    const auto net = io::read_model(c.model_path());
    const auto compressed = io::read_model(c.compressed_path());
    const auto batch = io::read_calibration(c.calibration_path());
    HybridModel hybrid;
    {
        StageTimer t(st.timings, "remap");
        hybrid = remap_stage(net, compressed, batch, c);
    }
    ensure_out_dir(c);
    io::write_hybrid(c.hybrid_path(), hybrid);
    const auto layout = io::hybrid_layout(c.hybrid_path());
    const auto size = std::filesystem::file_size(c.hybrid_path());
    if (size != layout.header_bytes + layout.aux_bytes + static_cast<std::uintmax_t>(hybrid.total_bytes))
        throw Error("hybrid file size " + std::to_string(size) + " does not match its byte accounting");
    std::cout << json{{"hybrid", c.hybrid_path().string()},
                      {"mode", to_string(c.remap)},
                      {"quantized_rows", hybrid.quantized_rows},
                      {"target_bytes", hybrid.total_bytes},
                      {"payload_bytes", hybrid.payload_bytes},
                      {"dense_bytes", hybrid.dense_bytes},
                      {"C_target", hybrid.budget.C_target},
                      {"C_svd", hybrid.budget.C_svd},
                      {"C_rem", hybrid.budget.C_rem}}
                     .dump(2)
              << "\n";
    st.print("remap");
    return 0;
}

int cmd_eval(const RunConfig& c)
{
    Report report;
    NetworkSpec original, candidate;
    CalibrationBatch batch;
    std::optional<std::map<int, Index>> bytes;
    std::optional<CompressionPlan> plan;
    std::optional<StatsMap> stats;
    {
        StageTimer t(report.timings, "load");
        original = io::read_model(c.model_path());
        batch = io::read_calibration(c.calibration_path());
        const auto path = c.candidate_path();
        if (io::read_header(path).value("format", std::string()) == "iosvd-hybrid") {
            candidate = io::read_hybrid(path);
            bytes.emplace();
            for (const auto& [layer, n] : io::hybrid_layout(path).section_bytes)
                (*bytes)[layer] = static_cast<Index>(n);
        } else {
            candidate = io::read_model(path);
        }
        if (std::filesystem::exists(c.plan_path()))
            plan = io::read_plan(c.plan_path());
        if (std::filesystem::exists(c.stats_path()))
            stats = load_stats(c);
    }
    {
        StageTimer t(report.timings, "evaluate");
        const auto timings = std::move(report.timings);
        report = evaluate(original, candidate, batch, plan ? &*plan : nullptr, stats ? &*stats : nullptr,
                          bytes ? &*bytes : nullptr);
        report.timings = timings;
    }
    if (!report.totals_consistent())
        throw Error("report totals do not match their per-layer entries");
    ensure_out_dir(c);
    const std::string text = report.to_json().dump(2) + "\n";
    io::write_text(c.report_path(), text);
    std::cout << text;
    Stage st{report.timings};
    st.print("eval");
    return 0;
}

int cmd_verify(const RunConfig& c)
{
    const auto net = io::read_model(c.model_path());
    const auto batch = io::read_calibration(c.calibration_path());
    const auto reports = run_oracles(net, batch, c);
    std::cout << oracle_reports_json(reports).dump(2) << "\n";
    bool ok = true;
    for (const auto& r : reports)
        ok = ok && r.pass;
    return ok ? 0 : 1;
}

int cmd_sweep_k(const RunConfig& c)
{
    Stage st;
    const auto net = io::read_model(c.model_path());
    const auto batch = io::read_calibration(c.calibration_path());
    std::vector<SweepRow> rows;
    {
        StageTimer t(st.timings, "sweep");
        rows = sweep_k(net, batch, c);
    }
    ensure_out_dir(c);
    const std::string csv = sweep_csv(rows);
    io::write_text(c.out / "sweep_k.csv", csv);
    std::cout << csv;
    st.print("sweep-k");
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Low-rank compression of small dense networks with KL-aware double-sided whitening"};
    app.require_subcommand(1);
    app.fallthrough();

    // Every flag is collected into a JSON object that is overlaid on the
    // config file, so both go through the same parsing and validation.
    json flags = json::object();
    std::vector<std::function<void()>> collectors;
    auto number = [&](const std::string& name, const std::string& key, const std::string& help) {
        auto value = std::make_shared<double>();
        auto* opt = app.add_option(name, *value, help);
        collectors.push_back([=, &flags] {
            if (opt->count() > 0)
                flags[key] = *value;
        });
    };
    auto integer = [&](const std::string& name, const std::string& key, const std::string& help) {
        auto value = std::make_shared<std::int64_t>();
        auto* opt = app.add_option(name, *value, help);
        collectors.push_back([=, &flags] {
            if (opt->count() > 0)
                flags[key] = *value;
        });
    };
    auto text = [&](const std::string& name, const std::string& key, const std::string& help,
                    std::vector<std::string> choices = {}) {
        auto value = std::make_shared<std::string>();
        auto* opt = app.add_option(name, *value, help);
        if (!choices.empty())
            opt->check(CLI::IsMember(choices));
        collectors.push_back([=, &flags] {
            if (opt->count() > 0)
                flags[key] = *value;
        });
    };
    auto int_list = [&](const std::string& name, const std::string& key, const std::string& help) {
        auto value = std::make_shared<std::vector<std::int64_t>>();
        auto* opt = app.add_option(name, *value, help)->delimiter(',');
        collectors.push_back([=, &flags] {
            if (opt->count() > 0)
                flags[key] = *value;
        });
    };

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags take precedence)");
    auto* seed_opt = app.add_option("--seed", "Seed of the single random generator");
    std::uint64_t seed = 0;
    seed_opt->each([&](const std::string& s) {
        try {
            seed = std::stoull(s);
        } catch (const std::exception&) {
            throw CLI::ValidationError("--seed", "not an unsigned integer: " + s);
        }
    });
    collectors.push_back([&] {
        if (seed_opt->count() > 0)
            flags["seed"] = seed;
    });
    number("--ratio", "ratio", "Maintenance ratio: fraction of target storage kept (0.4 = 60% pruned)");
    number("--eta", "eta", "Minimum rank as a fraction of the threshold rank");
    integer("--top-k", "top_k", "Top-K support of the output curvature");
    number("--damping-r", "damping_r", "Absolute damping added to R (default relative)");
    number("--damping-c", "damping_c", "Absolute damping added to C (default relative)");
    text("--whitening", "whitening", "none | input | double", {"none", "input", "double"});
    text("--remap", "remap", "off | plain | loss | hq", {"off", "plain", "loss", "hq"});
    text("--objective", "objective", "Scoring loss: ce | kl (KL to the original model)", {"ce", "kl"});
    number("--svd-ratio", "svd_ratio", "SVD-stage maintenance ratio before plain/loss remap");
    text("--out", "out", "Working directory for all files");
    text("--model", "model", "Original model file");
    text("--calibration", "calibration", "Calibration file");
    text("--stats", "stats", "Statistics file");
    text("--plan", "plan", "Apply this plan instead of allocating (compress)");
    text("--compressed", "compressed", "SVD-compressed model file");
    text("--candidate", "candidate", "Model or hybrid file to evaluate");
    integer("--input-dim", "input_dim", "gen: input width");
    int_list("--hidden", "hidden", "gen: hidden widths, comma separated");
    integer("--vocab", "vocab", "gen: vocabulary size");
    integer("--tokens", "tokens", "gen: calibration tokens");
    text("--activation", "activation", "gen: tanh | relu | gelu", {"tanh", "relu", "gelu"});
    number("--teacher-shift", "teacher_shift", "gen: teacher head perturbation");
    int_list("--k-list", "k_list", "sweep-k: K values, comma separated");

    const std::vector<std::pair<std::string, std::function<int(const RunConfig&)>>> commands{
        {"gen", cmd_gen},         {"calibrate", cmd_calibrate}, {"compress", cmd_compress},
        {"remap", cmd_remap},     {"eval", cmd_eval},           {"verify", cmd_verify},
        {"sweep-k", cmd_sweep_k},
    };
    const std::map<std::string, std::string> descriptions{
        {"gen", "Generate a toy model and calibration set"},
        {"calibrate", "Accumulate input covariance and output curvature"},
        {"compress", "Whiten, allocate ranks and truncate"},
        {"remap", "Quantize rows to int8 until the byte budget is met"},
        {"eval", "Report parameters, bytes, loss and KL against the original"},
        {"verify", "Run the oracle checks and print them as JSON"},
        {"sweep-k", "KL-to-original for a list of top-K values"},
    };
    for (const auto& [name, fn] : commands)
        app.add_subcommand(name, descriptions.at(name));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        for (auto& collect : collectors)
            collect();
        RunConfig config;
        if (!config_path.empty()) {
            json file;
            try {
                file = json::parse(io::read_text(config_path));
            } catch (const json::exception& e) {
                throw IoError(config_path + ": " + e.what());
            }
            config = config_from_json(file, config);
        }
        config = config_from_json(flags, config);
        config.validate();
        for (const auto& [name, fn] : commands)
            if (app.got_subcommand(name))
                return fn(config);
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
