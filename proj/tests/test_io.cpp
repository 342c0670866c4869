#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "iosvd/io.hpp"
#include "test_util.hpp"

using namespace iosvd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir()
    {
        path = fs::temp_directory_path() / ("iosvd_test_io_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    fs::path operator/(const std::string& name) const { return path / name; }
};

std::string bytes_of(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

StatsMap finalized_stats(const ToyData& toy, Index K)
{
    auto stats = collect_stats(toy.net, toy.batch, K);
    for (auto& [l, s] : stats)
        finalize_default(s);
    return stats;
}

}  // namespace

TEST_CASE("model round trip")
{
    TempDir dir;
    const auto toy = testutil::small_toy(1);
    io::write_model(dir / "m.bin", toy.net);
    const auto back = io::read_model(dir / "m.bin");
    REQUIRE(back.layers.size() == toy.net.layers.size());
    CHECK(back.vocab_size == toy.net.vocab_size);
    CHECK(back.target_layers == toy.net.target_layers);
    for (int t : toy.net.target_layers)
        CHECK(testutil::rel_fro(back.linear_layer(t).weight, toy.net.linear_layer(t).weight) < 1e-7);
    io::write_model(dir / "m2.bin", back);
    CHECK(bytes_of(dir / "m.bin") == bytes_of(dir / "m2.bin"));
}

TEST_CASE("factored model round trip")
{
    TempDir dir;
    const auto toy = testutil::small_toy(2);
    const auto stats = finalized_stats(toy, 6);
    const auto c = compress_network(toy.net, stats, toy.batch, 0.5, 0.05, WhiteningMode::double_sided);
    io::write_model(dir / "c.bin", c.compressed);
    const auto back = io::read_model(dir / "c.bin");
    CHECK(target_weight_params(back) == target_weight_params(c.compressed));
    for (int t : toy.net.target_layers)
        CHECK(back.linear_layer(t).factors.has_value() == c.compressed.linear_layer(t).factors.has_value());
    CHECK(mean_kl(c.compressed, back, toy.batch.inputs) < 1e-8);
}

TEST_CASE("calibration round trip")
{
    TempDir dir;
    const auto toy = testutil::small_toy(3);
    io::write_calibration(dir / "cal.bin", toy.batch, toy.net.vocab_size);
    const auto back = io::read_calibration(dir / "cal.bin");
    CHECK(back.targets == toy.batch.targets);
    CHECK(testutil::rel_fro(back.inputs, toy.batch.inputs) < 1e-7);
}

TEST_CASE("stats round trip keeps the damping")
{
    TempDir dir;
    const auto toy = testutil::small_toy(4);
    auto stats = collect_stats(toy.net, toy.batch, 3);
    for (auto& [l, s] : stats)
        finalize(s, 0.01, 0.02);
    io::write_stats(dir / "s.bin", stats);
    const auto back = io::read_stats(dir / "s.bin");
    for (const auto& [l, s] : stats) {
        const auto& b = back.at(l);
        CHECK(b.finalized);
        CHECK(b.R == s.R);
        CHECK(b.C == s.C);
        CHECK(b.lambda_R == 0.01);
        CHECK(b.lambda_C == 0.02);
        CHECK(b.top_k == 3);
        CHECK(b.token_count == s.token_count);
        CHECK(b.C_half == s.C_half);
    }
}

TEST_CASE("plan round trip")
{
    TempDir dir;
    const auto toy = testutil::small_toy(5);
    const auto stats = finalized_stats(toy, 6);
    const auto c = compress_network(toy.net, stats, toy.batch, 0.4, 0.05, WhiteningMode::double_sided);
    io::write_plan(dir / "p.json", c.plan);
    const auto back = io::read_plan(dir / "p.json");
    CHECK(back.ranks() == c.plan.ranks());
    CHECK(back.removed_params == c.plan.removed_params);
    CHECK(back.drop_history.size() == c.plan.drop_history.size());
    CHECK(io::plan_to_json(back) == io::plan_to_json(c.plan));

    auto j = io::plan_to_json(c.plan);
    j["removed_params"] = c.plan.removed_params + 1;
    CHECK_THROWS_AS(io::plan_from_json(j), IoError);
}

TEST_CASE("hybrid file size equals the byte ledger")
{
    TempDir dir;
    const auto toy = generate_toy(6);
    const auto stats = finalized_stats(toy, 24);
    const auto svd = compress_network(toy.net, stats, toy.batch, 0.35, 0.05, WhiteningMode::double_sided);
    const auto grads = calibration_loss_and_gradients(svd.compressed, toy.batch).grads;
    const auto budget = RemapBudget::for_ratio(target_dense_params(toy.net), target_weight_params(svd.compressed), 0.6);
    const auto h = apply_remap(svd.compressed, grads, budget, RemapMode::loss_aware);
    REQUIRE(h.quantized_rows > 0);
    io::write_hybrid(dir / "h.bin", h);

    const auto layout = io::hybrid_layout(dir / "h.bin");
    std::uintmax_t sections = 0;
    for (const auto& [layer, bytes] : layout.section_bytes) {
        sections += bytes;
        for (const auto& l : h.layers)
            if (l.layer == layer)
                CHECK(static_cast<Index>(bytes) == l.byte_count);
    }
    CHECK(static_cast<Index>(sections) == h.total_bytes);
    CHECK(fs::file_size(dir / "h.bin") == layout.header_bytes + layout.aux_bytes + sections);

    const auto decoded = io::read_hybrid(dir / "h.bin");
    for (int t : toy.net.target_layers)
        CHECK((decoded.linear_layer(t).weight - h.net.linear_layer(t).weight).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(io::read_any_model(dir / "h.bin").layers.size() == toy.net.layers.size());
}

TEST_CASE("malformed files are rejected")
{
    TempDir dir;
    const auto toy = testutil::small_toy(7);
    io::write_model(dir / "m.bin", toy.net);
    const std::string good = bytes_of(dir / "m.bin");

    io::write_text(dir / "cut.bin", good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(io::read_model(dir / "cut.bin"), IoError);
    io::write_text(dir / "long.bin", good + "x");
    CHECK_THROWS_AS(io::read_model(dir / "long.bin"), IoError);
    io::write_text(dir / "noheader.bin", "no newline here");
    CHECK_THROWS_AS(io::read_model(dir / "noheader.bin"), IoError);
    io::write_text(dir / "empty.bin", "");
    CHECK_THROWS_AS(io::read_calibration(dir / "empty.bin"), IoError);
    CHECK_THROWS_AS(io::read_calibration(dir / "m.bin"), IoError);
    CHECK_THROWS_AS(io::read_model(dir / "missing.bin"), IoError);

    auto header = io::read_header(dir / "m.bin");
    header["version"] = 99;
    const auto nl = good.find('\n');
    io::write_text(dir / "v99.bin", header.dump() + good.substr(nl));
    CHECK_THROWS_AS(io::read_model(dir / "v99.bin"), IoError);

    io::write_text(dir / "bad.json", "{not json");
    CHECK_THROWS_AS(io::read_plan(dir / "bad.json"), IoError);
}

TEST_CASE("writes are deterministic")
{
    TempDir dir;
    const auto a = testutil::small_toy(8);
    const auto b = testutil::small_toy(8);
    io::write_model(dir / "a.bin", a.net);
    io::write_model(dir / "b.bin", b.net);
    CHECK(bytes_of(dir / "a.bin") == bytes_of(dir / "b.bin"));
    io::write_calibration(dir / "ca.bin", a.batch, a.net.vocab_size);
    io::write_calibration(dir / "cb.bin", b.batch, b.net.vocab_size);
    CHECK(bytes_of(dir / "ca.bin") == bytes_of(dir / "cb.bin"));

    const auto c = testutil::small_toy(9);
    io::write_model(dir / "c.bin", c.net);
    CHECK(bytes_of(dir / "a.bin") != bytes_of(dir / "c.bin"));
}
