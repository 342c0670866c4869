// Acceptance criteria A1-A8. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "iosvd/io.hpp"
#include "iosvd/oracles.hpp"
#include "iosvd/pipeline.hpp"
#include "test_util.hpp"

#ifndef IOSVD_CLI_PATH
#error "IOSVD_CLI_PATH must name the iosvd executable"
#endif

using namespace iosvd;
using testutil::gaussian;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

StatsMap finalized(const ToyData& toy, Index K)
{
    auto stats = collect_stats(toy.net, toy.batch, K);
    for (auto& [l, s] : stats)
        finalize_default(s);
    return stats;
}

// Curvature exactness on the reference shape, K = V.
Outcome a1()
{
    const auto t0 = Clock::now();
    const auto toy = generate_toy(1);
    const Index V = toy.net.vocab_size;
    const auto stats = collect_stats(toy.net, toy.batch, V);
    double worst = 0.0;
    for (int layer : toy.net.target_layers) {
        const Matrix want = oracles::explicit_layer_curvature(toy.net, toy.batch, V, layer);
        worst = std::max(worst, testutil::rel_fro(stats.at(layer).C, want));
    }
    const double dt = seconds_since(t0);
    std::ostringstream d;
    d << "max rel Frobenius error " << worst << " (tol 1e-4), " << dt << " s (limit 10 s)";
    return {worst <= 1e-4 && dt < 10.0, d.str()};
}

// KL(p || softmax(z + eps d)) against its quadratic form.
Outcome a2()
{
    std::mt19937_64 rng(2);
    const Index V = 16;
    const double eps = 1e-3;
    int checked = 0, inside = 0;
    double lo = 1e300, hi = -1e300;
    for (int trial = 0; trial < 100; ++trial) {
        const Vector z = 2.0 * gaussian(rng, V, 1);
        const Vector d = gaussian(rng, V, 1);
        const Vector p = softmax(z);
        const Vector q = softmax(z + eps * d);
        double kl = 0.0;
        for (Index i = 0; i < V; ++i)
            if (p(i) > 0.0)
                kl += p(i) * (std::log(p(i)) - std::log(q(i)));
        const double quad = d.dot(kl_hessian(p) * d);
        if (quad <= 1e-6)
            continue;
        const double ratio = kl / (0.5 * eps * eps * quad);
        ++checked;
        if (ratio >= 0.98 && ratio <= 1.02)
            ++inside;
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
    }
    std::ostringstream d;
    d << inside << "/" << checked << " ratios in [0.98, 1.02], observed [" << lo << ", " << hi << "]";
    return {checked > 0 && inside == checked, d.str()};
}

// Eckart-Young in the whitened metric.
Outcome a3()
{
    std::mt19937_64 rng(3);
    const Index m = 8, n = 6;
    int beaten = 0;
    double worst_tail = 0.0;
    for (int instance = 0; instance < 20; ++instance) {
        auto s = LayerStats::zeros(0, n, m);
        s.token_count = s.curvature_tokens = 1;
        s.R = testutil::random_spd(rng, n);
        s.C = testutil::random_spd(rng, m);
        finalize(s, 0.0, 0.0);
        const Matrix W = gaussian(rng, m, n);
        const auto f = whiten(W, s);
        for (Index r = 1; r <= 3; ++r) {
            const LowRankLayer best = truncate_and_unwhiten(f, r);
            const double err = whitened_error(W, best.product(), s);
            const double tail = 0.5 * f.svd.singular_values.tail(f.max_rank() - r).squaredNorm();
            worst_tail = std::max(worst_tail, std::abs(err - tail) / tail);

            for (int alt = 0; alt < 1000; ++alt) {
                Matrix candidate;
                if (alt % 2 == 0) {
                    // Nearby factors.
                    const double step = std::pow(10.0, -1.0 - 3.0 * (alt % 10) / 10.0);
                    candidate = (best.A + step * gaussian(rng, m, r)) * (best.D + step * gaussian(rng, n, r)).transpose();
                } else {
                    // Unrelated rank-r matrices at the scale of W.
                    candidate = gaussian(rng, m, r) * gaussian(rng, r, n);
                    candidate *= W.norm() / candidate.norm();
                }
                if (whitened_error(W, candidate, s) < err * (1.0 - 1e-12))
                    ++beaten;
            }
        }
    }
    std::ostringstream d;
    d << beaten << " of 60000 random rank-r alternatives beat the truncation; tail identity max rel error "
      << worst_tail << " (tol 1e-6)";
    return {beaten == 0 && worst_tail <= 1e-6, d.str()};
}

// Score fidelity of the smallest component per layer.
Outcome a4()
{
    int ok = 0, total = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto toy = generate_toy(seed);
        const auto stats = finalized(toy, toy.net.vocab_size);
        const auto lg = calibration_loss_and_gradients(toy.net, toy.batch);
        for (int t : toy.net.target_layers) {
            const auto f = whiten(toy.net.linear_layer(t).weight, stats.at(t));
            const Index i = f.max_rank() - 1;
            const double pred = predicted_drop_change(f, whitened_gradient(lg.grads.at(t), f.maps), i);
            const double actual = oracles::drop_and_remeasure(toy.net, f, toy.batch, i);
            ++total;
            if (std::abs(pred - actual) / std::max(std::abs(pred), 1e-8) <= 0.15)
                ++ok;
        }
    }
    std::ostringstream d;
    d << ok << "/" << total << " cases within 0.15 (need >= 90%)";
    return {10 * ok >= 9 * total, d.str()};
}

// Allocation against the pool rescan, ledger recount and closed forms.
Outcome a5()
{
    int sequences = 0, mismatches = 0, ledger_bad = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto toy = generate_toy(seed);
        const auto stats = finalized(toy, toy.net.vocab_size);
        const auto lg = calibration_loss_and_gradients(toy.net, toy.batch);
        std::vector<LayerScores> scores;
        for (int t : toy.net.target_layers)
            scores.push_back(score_layer(whiten(toy.net.linear_layer(t).weight, stats.at(t)), lg.grads.at(t)));
        for (double pi : {0.2, 0.4, 0.6}) {
            const auto plan = allocate_scores(scores, pi, 0.05);
            const auto scan = oracles::exhaustive_pool_scan(scores, pi, 0.05);
            ++sequences;
            bool same = plan.drop_history.size() == scan.size();
            for (std::size_t k = 0; same && k < scan.size(); ++k)
                same = plan.drop_history[k].layer == scan[k].layer &&
                       plan.drop_history[k].rank_before_drop == scan[k].rank_before_drop &&
                       plan.drop_history[k].storage_gain == scan[k].storage_gain;
            if (!same)
                ++mismatches;

            // Ledger against per-layer storage recomputed from final ranks.
            Index stored = 0;
            for (const auto& l : plan.layers) {
                const Index rs = (l.rows * l.cols) / (l.rows + l.cols);
                stored += l.final_rank > rs ? l.rows * l.cols : l.final_rank * (l.rows + l.cols);
            }
            if (stored != plan.total_params - plan.removed_params)
                ++ledger_bad;
        }
    }
    int grid_bad = 0;
    for (Index m = 1; m <= 16; ++m)
        for (Index n = 1; n <= 16; ++n) {
            const Index rs = (m * n) / (m + n);
            if (threshold_rank(m, n) != rs)
                ++grid_bad;
            auto stored = [&](Index r) { return r > rs ? m * n : r * (m + n); };
            for (Index r = 1; r <= std::min(m, n); ++r)
                if (storage_gain(m, n, r) != stored(r) - stored(r - 1))
                    ++grid_bad;
        }
    std::ostringstream d;
    d << mismatches << "/" << sequences << " drop sequences differ from the rescan, " << ledger_bad
      << " ledger mismatches, " << grid_bad << " closed-form mismatches on m, n in [1, 16]";
    return {mismatches == 0 && ledger_bad == 0 && grid_bad == 0, d.str()};
}

// Remap accounting and selection.
Outcome a6()
{
    const fs::path dir = fs::temp_directory_path() / ("iosvd_acceptance_a6_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    int files = 0, size_bad = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto toy = generate_toy(seed);
        const auto stats = calibrate(toy.net, toy.batch, toy.net.vocab_size);
        for (auto mode : {RemapMode::plain, RemapMode::loss_aware, RemapMode::hq}) {
            RunConfig c;
            c.remap = mode;
            c.ratio = mode == RemapMode::hq ? 0.4 : 0.6;
            const auto svd = compress_stage(toy.net, stats, toy.batch, c);
            const auto h = remap_stage(toy.net, svd.compressed, toy.batch, c);
            const fs::path p = dir / "h.bin";
            io::write_hybrid(p, h);
            const auto layout = io::hybrid_layout(p);
            std::uintmax_t sections = 0;
            for (const auto& [layer, bytes] : layout.section_bytes)
                sections += bytes;
            ++files;
            if (sections != static_cast<std::uintmax_t>(h.total_bytes) ||
                fs::file_size(p) != layout.header_bytes + layout.aux_bytes + sections)
                ++size_bad;
        }
    }
    fs::remove_all(dir);

    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> row_len(9, 40);
    int equal_bad = 0, mixed_bad = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const int count = 2 + trial % 11;
        std::vector<RowCandidate> eq, mixed;
        std::vector<double> scores;
        std::vector<Index> savings;
        for (int k = 0; k < count; ++k) {
            RowCandidate c;
            c.layer = k % 3;
            c.row_index = k;
            c.score = u(rng);
            c.byte_saving = 7;
            eq.push_back(c);
            c.byte_saving = row_len(rng) - kRowOverheadBytes;
            mixed.push_back(c);
            scores.push_back(c.score);
            savings.push_back(c.byte_saving);
        }
        const Index need_k = 1 + trial % count;
        auto sel = select_rows(eq, RemapBudget::make(7 * need_k, 0));
        std::vector<std::size_t> sorted(count);
        std::iota(sorted.begin(), sorted.end(), std::size_t{0});
        std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
        sorted.resize(static_cast<std::size_t>(need_k));
        std::sort(sel.begin(), sel.end());
        std::sort(sorted.begin(), sorted.end());
        if (sel != sorted)
            ++equal_bad;

        const Index total = std::accumulate(savings.begin(), savings.end(), Index(0));
        const Index need = 1 + static_cast<Index>(u(rng) * static_cast<double>(total - 1));
        double greedy = 0.0;
        for (std::size_t k : select_rows(mixed, RemapBudget::make(need, 0)))
            greedy += mixed[k].score;
        const double best = oracles::exhaustive_min_selection(scores, savings, need);
        worst = std::max(worst, greedy / best);
        if (greedy > 2.0 * best)
            ++mixed_bad;
    }
    std::ostringstream d;
    d << size_bad << "/" << files << " hybrid files off their byte count, " << equal_bad
      << "/500 equal-cost selections differ from the k lowest, " << mixed_bad
      << "/500 mixed-cost selections above 2x optimum (worst ratio " << worst << ")";
    return {size_bad == 0 && equal_bad == 0 && mixed_bad == 0, d.str()};
}

struct AblationResult {
    Outcome whitening, remap, hq;
    double seconds = 0.0;
};

// Paired-seed ablations at maintenance 0.6 (0.4 for HQ).
AblationResult a7()
{
    const auto t0 = Clock::now();
    int ds = 0, la = 0, hq = 0;
    std::ostringstream ds_rows, la_rows, hq_rows;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto toy = generate_toy(seed);
        const auto stats = calibrate(toy.net, toy.batch, toy.net.vocab_size);

        RunConfig c;
        const double kl_ds = mean_kl(toy.net, compress_stage(toy.net, stats, toy.batch, c).compressed, toy.batch.inputs);
        c.whitening = WhiteningMode::input_only;
        const double kl_io = mean_kl(toy.net, compress_stage(toy.net, stats, toy.batch, c).compressed, toy.batch.inputs);
        if (kl_ds <= kl_io)
            ++ds;

        RunConfig r;
        r.remap = RemapMode::loss_aware;
        const auto svd = compress_stage(toy.net, stats, toy.batch, r);
        const double loss_la = calibration_loss(remap_stage(toy.net, svd.compressed, toy.batch, r).net, toy.batch);
        r.remap = RemapMode::plain;
        const double loss_plain = calibration_loss(remap_stage(toy.net, svd.compressed, toy.batch, r).net, toy.batch);
        if (loss_la <= loss_plain)
            ++la;

        RunConfig h;
        h.ratio = 0.4;
        const double loss_svd = calibration_loss(compress_stage(toy.net, stats, toy.batch, h).compressed, toy.batch);
        h.remap = RemapMode::hq;
        const auto half = compress_stage(toy.net, stats, toy.batch, h);
        const double loss_hq = calibration_loss(remap_stage(toy.net, half.compressed, toy.batch, h).net, toy.batch);
        if (loss_hq <= loss_svd)
            ++hq;
    }
    AblationResult out;
    out.seconds = seconds_since(t0);
    auto line = [](int wins, const char* what) {
        std::ostringstream d;
        d << wins << "/10 paired seeds " << what << " (need >= 8)";
        return Outcome{wins >= 8, d.str()};
    };
    out.whitening = line(ds, "with double-sided KL <= input-only KL");
    out.remap = line(la, "with loss-aware calibration loss <= plain remap");
    out.hq = line(hq, "with HQ calibration loss <= pure SVD at 0.4");
    return out;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every CLI command twice, outputs compared byte for byte.
Outcome a8()
{
    const fs::path root = fs::temp_directory_path() / ("iosvd_acceptance_a8_" + std::to_string(::getpid()));
    const std::string shared = "--model model.bin --calibration calibration.bin --stats stats.bin --out hq";
    const std::vector<std::pair<std::string, std::string>> steps = {
        {"gen", "gen --seed 5"},
        {"calibrate", "calibrate"},
        {"compress", "compress --remap loss"},
        {"remap", "remap --remap loss"},
        {"eval", "eval --remap loss"},
        {"verify", "verify"},
        {"sweep-k", "sweep-k --k-list 1,4,24"},
        {"compress-hq", "compress --remap hq --ratio 0.4 " + shared},
        {"remap-hq", "remap --remap hq --ratio 0.4 " + shared},
        {"eval-hq", "eval --remap hq --ratio 0.4 " + shared},
    };
    int failed_runs = 0;
    for (const char* run : {"a", "b"}) {
        const fs::path dir = root / run;
        fs::create_directories(dir);
        for (const auto& [name, args] : steps) {
            const std::string cmd = "cd '" + dir.string() + "' && '" + IOSVD_CLI_PATH + "' " + args + " > stdout_" +
                                    name + ".txt 2> /dev/null";
            if (std::system(cmd.c_str()) != 0)
                ++failed_runs;
        }
    }
    int files = 0, differ = 0;
    std::string first_diff;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file())
            continue;
        const fs::path rel = fs::relative(entry.path(), root / "a");
        ++files;
        if (!fs::exists(root / "b" / rel) || slurp(entry.path()) != slurp(root / "b" / rel)) {
            ++differ;
            if (first_diff.empty())
                first_diff = rel.string();
        }
    }
    fs::remove_all(root);
    std::ostringstream d;
    d << files << " files compared across two runs, " << differ << " differ";
    if (!first_diff.empty())
        d << " (first: " << first_diff << ")";
    d << ", " << failed_runs << " command failures";
    return {failed_runs == 0 && differ == 0 && files > 0, d.str()};
}

}  // namespace

int main()
{
    int failures = 0;
    auto report = [&](const char* id, const char* title, const Outcome& o) {
        std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << title << ": " << o.detail << std::endl;
        if (!o.pass)
            ++failures;
    };
    auto guarded = [&](const char* id, const char* title, const std::function<Outcome()>& fn) {
        try {
            report(id, title, fn());
        } catch (const std::exception& e) {
            report(id, title, {false, std::string("threw: ") + e.what()});
        }
    };

    guarded("A1", "curvature exactness", a1);
    guarded("A2", "KL quadratic form", a2);
    guarded("A3", "whitened Eckart-Young", a3);
    guarded("A4", "score fidelity", a4);
    guarded("A5", "allocation correctness", a5);
    guarded("A6", "remap accounting and selection", a6);
    try {
        const auto r = a7();
        const bool fast = r.seconds < 300.0;
        const bool all = r.whitening.pass && r.remap.pass && r.hq.pass && fast;
        std::ostringstream d;
        d << "whitening " << r.whitening.detail << "; remap " << r.remap.detail << "; hq " << r.hq.detail
          << "; runtime " << r.seconds << " s (limit 300 s)";
        report("A7", "ablation directions", {all, d.str()});
    } catch (const std::exception& e) {
        report("A7", "ablation directions", {false, std::string("threw: ") + e.what()});
    }
    guarded("A8", "determinism", a8);

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
