#include "iosvd/io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace iosvd::io {

namespace {

constexpr int kVersion = 1;

class ByteWriter {
public:
    void u32(std::uint32_t v)
    {
        for (int k = 0; k < 4; ++k)
            bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
    }
    void u64(std::uint64_t v)
    {
        for (int k = 0; k < 8; ++k)
            bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
    }
    void u16(std::uint16_t v)
    {
        bytes_.push_back(static_cast<char>(v & 0xffu));
        bytes_.push_back(static_cast<char>(v >> 8));
    }
    void i8(std::int8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void fp16(double v) { u16(std::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(v)))); }

    template <typename Derived>
    void f32_matrix(const Eigen::MatrixBase<Derived>& m)
    {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j)
                f32(m(i, j));
    }
    template <typename Derived>
    void f64_matrix(const Eigen::MatrixBase<Derived>& m)
    {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j)
                f64(m(i, j));
    }

    std::size_t size() const { return bytes_.size(); }
    const std::string& bytes() const { return bytes_; }

private:
    std::string bytes_;
};

class ByteReader {
public:
    ByteReader(std::string bytes, std::size_t offset, std::string source)
        : bytes_(std::move(bytes)), pos_(offset), source_(std::move(source))
    {
    }

    std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
    std::uint64_t u64() { return take(8); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(take(2)); }
    std::int8_t i8() { return static_cast<std::int8_t>(static_cast<std::uint8_t>(take(1))); }
    double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
    double f64() { return std::bit_cast<double>(u64()); }
    double fp16() { return static_cast<double>(static_cast<float>(std::bit_cast<Eigen::half>(u16()))); }

    Matrix f32_matrix(Index rows, Index cols)
    {
        Matrix m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j)
                m(i, j) = f32();
        return m;
    }
    Matrix f64_matrix(Index rows, Index cols)
    {
        Matrix m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j)
                m(i, j) = f64();
        return m;
    }

    std::size_t position() const { return pos_; }
    void expect_end() const
    {
        if (pos_ != bytes_.size())
            throw IoError(source_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing payload bytes");
    }

private:
    std::uint64_t take(int n)
    {
        if (pos_ + static_cast<std::size_t>(n) > bytes_.size())
            throw IoError(source_ + ": payload truncated");
        std::uint64_t v = 0;
        for (int k = 0; k < n; ++k)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(k)]))
                 << (8 * k);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::string bytes_;
    std::size_t pos_;
    std::string source_;
};

struct RawFile {
    json header;
    std::string bytes;
    std::size_t payload_offset = 0;
};

RawFile load(const std::filesystem::path& path, const std::string& format)
{
    RawFile f;
    f.bytes = read_text(path);
    const auto nl = f.bytes.find('\n');
    if (nl == std::string::npos)
        throw IoError(path.string() + ": missing header line");
    try {
        f.header = json::parse(f.bytes.substr(0, nl));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": malformed header: " + e.what());
    }
    if (!format.empty() && f.header.value("format", std::string()) != format)
        throw IoError(path.string() + ": expected a " + format + " file");
    if (f.header.value("version", 0) != kVersion)
        throw IoError(path.string() + ": unsupported version");
    f.payload_offset = nl + 1;
    return f;
}

void save(const std::filesystem::path& path, const json& header, const ByteWriter& payload)
{
    write_text(path, header.dump() + "\n" + payload.bytes());
}

template <typename T>
T get(const json& j, const char* key, const std::string& source)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw IoError(source + ": bad or missing field '" + key + "': " + e.what());
    }
}

json layers_header(const NetworkSpec& net)
{
    json layers = json::array();
    for (const auto& l : net.layers) {
        if (l.is_linear()) {
            json e = {{"kind", "linear"}, {"rows", l.out_dim()}, {"cols", l.in_dim()}, {"bias", l.bias.has_value()}};
            if (l.factors)
                e["rank"] = l.factors->rank();
            layers.push_back(e);
        } else {
            layers.push_back({{"kind", "activation"}, {"activation", to_string(l.activation)}});
        }
    }
    return layers;
}

json network_header(const std::string& format, const NetworkSpec& net)
{
    return {{"format", format},
            {"version", kVersion},
            {"vocab_size", net.vocab_size},
            {"target_layers", net.target_layers},
            {"layers", layers_header(net)}};
}

struct LayerShape {
    bool linear = true;
    Index rows = 0, cols = 0;
    bool bias = false;
    std::optional<Index> rank;
    Activation activation = Activation::tanh;
};

std::vector<LayerShape> parse_layers(const json& header, const std::string& source)
{
    std::vector<LayerShape> out;
    for (const auto& e : get<json>(header, "layers", source)) {
        LayerShape s;
        const auto kind = get<std::string>(e, "kind", source);
        if (kind == "linear") {
            s.rows = get<Index>(e, "rows", source);
            s.cols = get<Index>(e, "cols", source);
            s.bias = get<bool>(e, "bias", source);
            if (e.contains("rank"))
                s.rank = get<Index>(e, "rank", source);
            if (s.rows < 1 || s.cols < 1 || (s.rank && (*s.rank < 0 || *s.rank > std::min(s.rows, s.cols))))
                throw IoError(source + ": invalid linear layer dimensions");
        } else if (kind == "activation") {
            s.linear = false;
            s.activation = activation_from_string(get<std::string>(e, "activation", source));
        } else {
            throw IoError(source + ": unknown layer kind '" + kind + "'");
        }
        out.push_back(s);
    }
    return out;
}

NetworkSpec finish_network(NetworkSpec net, const std::string& source)
{
    try {
        net.validate();
    } catch (const Error& e) {
        throw IoError(source + ": " + e.what());
    }
    return net;
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out)
        throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_header(const std::filesystem::path& path)
{
    return load(path, "").header;
}

void write_model(const std::filesystem::path& path, const NetworkSpec& net)
{
    net.validate();
    ByteWriter w;
    for (const auto& l : net.layers) {
        if (!l.is_linear())
            continue;
        if (l.factors) {
            w.f32_matrix(l.factors->A);
            w.f32_matrix(l.factors->D);
        } else {
            w.f32_matrix(l.weight);
        }
    }
    for (const auto& l : net.layers)
        if (l.is_linear() && l.bias)
            w.f32_matrix(l.bias->transpose());
    save(path, network_header("iosvd-model", net), w);
}

NetworkSpec read_model(const std::filesystem::path& path)
{
    const auto raw = load(path, "iosvd-model");
    const std::string src = path.string();
    const auto shapes = parse_layers(raw.header, src);
    ByteReader r(raw.bytes, raw.payload_offset, src);
    NetworkSpec net;
    net.vocab_size = get<Index>(raw.header, "vocab_size", src);
    net.target_layers = get<std::vector<int>>(raw.header, "target_layers", src);
    for (const auto& s : shapes) {
        if (!s.linear) {
            net.layers.push_back(LayerDef::act(s.activation));
        } else if (s.rank) {
            LowRankLayer f;
            f.A = r.f32_matrix(s.rows, *s.rank);
            f.D = r.f32_matrix(s.cols, *s.rank);
            net.layers.push_back(LayerDef::factored(std::move(f)));
        } else {
            net.layers.push_back(LayerDef::linear(r.f32_matrix(s.rows, s.cols)));
        }
    }
    for (std::size_t k = 0; k < shapes.size(); ++k)
        if (shapes[k].linear && shapes[k].bias)
            net.layers[k].bias = Vector(r.f32_matrix(shapes[k].rows, 1));
    r.expect_end();
    return finish_network(std::move(net), src);
}

void write_calibration(const std::filesystem::path& path, const CalibrationBatch& batch, Index vocab_size)
{
    if (static_cast<std::size_t>(batch.inputs.rows()) != batch.targets.size())
        throw Error("calibration batch inputs and targets differ in length");
    json header = {{"format", "iosvd-calibration"},
                   {"version", kVersion},
                   {"tokens", batch.inputs.rows()},
                   {"input_dim", batch.inputs.cols()},
                   {"vocab_size", vocab_size}};
    ByteWriter w;
    w.f32_matrix(batch.inputs);
    for (auto t : batch.targets)
        w.u32(t);
    save(path, header, w);
}

CalibrationBatch read_calibration(const std::filesystem::path& path)
{
    const auto raw = load(path, "iosvd-calibration");
    const std::string src = path.string();
    const auto tokens = get<Index>(raw.header, "tokens", src);
    const auto dim = get<Index>(raw.header, "input_dim", src);
    if (tokens < 0 || dim < 1)
        throw IoError(src + ": invalid calibration dimensions");
    ByteReader r(raw.bytes, raw.payload_offset, src);
    CalibrationBatch batch;
    batch.inputs = r.f32_matrix(tokens, dim);
    batch.targets.resize(static_cast<std::size_t>(tokens));
    for (auto& t : batch.targets)
        t = r.u32();
    r.expect_end();
    return batch;
}

void write_stats(const std::filesystem::path& path, const StatsMap& stats)
{
    json layers = json::array();
    ByteWriter w;
    Index top_k = 0;
    for (const auto& [layer, s] : stats) {
        layers.push_back({{"layer", layer},
                          {"in_dim", s.in_dim()},
                          {"out_dim", s.out_dim()},
                          {"token_count", s.token_count},
                          {"curvature_tokens", s.curvature_tokens},
                          {"lambda_R", s.lambda_R},
                          {"lambda_C", s.lambda_C}});
        w.f64_matrix(s.R);
        w.f64_matrix(s.C);
        top_k = s.top_k;
    }
    json header = {{"format", "iosvd-stats"}, {"version", kVersion}, {"top_k", top_k}, {"layers", layers}};
    save(path, header, w);
}

StatsMap read_stats(const std::filesystem::path& path)
{
    const auto raw = load(path, "iosvd-stats");
    const std::string src = path.string();
    ByteReader r(raw.bytes, raw.payload_offset, src);
    StatsMap out;
    const auto top_k = get<Index>(raw.header, "top_k", src);
    for (const auto& e : get<json>(raw.header, "layers", src)) {
        const int layer = get<int>(e, "layer", src);
        LayerStats s = LayerStats::zeros(layer, get<Index>(e, "in_dim", src), get<Index>(e, "out_dim", src));
        s.token_count = get<Index>(e, "token_count", src);
        s.curvature_tokens = get<Index>(e, "curvature_tokens", src);
        s.top_k = top_k;
        s.R = r.f64_matrix(s.R.rows(), s.R.cols());
        s.C = r.f64_matrix(s.C.rows(), s.C.cols());
        finalize(s, get<double>(e, "lambda_R", src), get<double>(e, "lambda_C", src));
        out.emplace(layer, std::move(s));
    }
    r.expect_end();
    return out;
}

json plan_to_json(const CompressionPlan& plan)
{
    json layers = json::array();
    for (const auto& l : plan.layers)
        layers.push_back({{"layer", l.layer},
                          {"rows", l.rows},
                          {"cols", l.cols},
                          {"original_rank", l.original_rank},
                          {"final_rank", l.final_rank},
                          {"threshold_rank", l.threshold_rank},
                          {"min_rank", l.min_rank},
                          {"dense_fallback", l.dense_fallback},
                          {"stored_params", l.stored_params()}});
    json history = json::array();
    for (const auto& d : plan.drop_history)
        history.push_back({{"layer", d.layer},
                           {"score", d.score},
                           {"rank_before_drop", d.rank_before_drop},
                           {"storage_gain", d.storage_gain}});
    return {{"format", "iosvd-plan"},
            {"version", kVersion},
            {"layers", layers},
            {"drop_history", history},
            {"total_params", plan.total_params},
            {"removed_params", plan.removed_params},
            {"target_removed", plan.target_removed},
            {"budget_reached", plan.budget_reached}};
}

CompressionPlan plan_from_json(const json& j)
{
    const std::string src = "plan";
    if (j.value("format", std::string()) != "iosvd-plan")
        throw IoError("not an iosvd-plan document");
    CompressionPlan plan;
    for (const auto& e : get<json>(j, "layers", src)) {
        PlanLayer l;
        l.layer = get<int>(e, "layer", src);
        l.rows = get<Index>(e, "rows", src);
        l.cols = get<Index>(e, "cols", src);
        l.original_rank = get<Index>(e, "original_rank", src);
        l.final_rank = get<Index>(e, "final_rank", src);
        l.threshold_rank = get<Index>(e, "threshold_rank", src);
        l.min_rank = get<Index>(e, "min_rank", src);
        l.dense_fallback = get<bool>(e, "dense_fallback", src);
        plan.layers.push_back(l);
    }
    for (const auto& e : get<json>(j, "drop_history", src))
        plan.drop_history.push_back({get<double>(e, "score", src), get<int>(e, "layer", src),
                                     get<Index>(e, "rank_before_drop", src), get<Index>(e, "storage_gain", src)});
    plan.total_params = get<Index>(j, "total_params", src);
    plan.removed_params = get<Index>(j, "removed_params", src);
    plan.target_removed = get<Index>(j, "target_removed", src);
    plan.budget_reached = get<bool>(j, "budget_reached", src);
    if (plan.recount_removed() != plan.removed_params)
        throw IoError("plan ledger does not match its final ranks");
    return plan;
}

void write_plan(const std::filesystem::path& path, const CompressionPlan& plan)
{
    write_text(path, plan_to_json(plan).dump(2) + "\n");
}

CompressionPlan read_plan(const std::filesystem::path& path)
{
    try {
        return plan_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": malformed plan: " + e.what());
    }
}

void write_hybrid(const std::filesystem::path& path, const HybridModel& model)
{
    const NetworkSpec& net = model.net;
    ByteWriter aux;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const auto& l = net.layers[k];
        if (l.is_linear() && std::find(net.target_layers.begin(), net.target_layers.end(), static_cast<int>(k)) ==
                                 net.target_layers.end())
            aux.f32_matrix(l.weight);
    }
    for (const auto& l : net.layers)
        if (l.is_linear() && l.bias)
            aux.f32_matrix(l.bias->transpose());

    json sections = json::array();
    ByteWriter body;
    for (const auto& layer : model.layers) {
        const std::size_t start = body.size();
        json blocks = json::array();
        for (const auto& b : layer.blocks) {
            for (const auto& q : b.quantized)
                body.u32(static_cast<std::uint32_t>(q.row_index));
            for (const auto& q : b.quantized)
                body.f32(q.scale);
            for (const auto& q : b.quantized)
                for (auto c : q.codes)
                    body.i8(c);
            for (Index i = 0; i < b.values.rows(); ++i) {
                if (b.is_quantized(i))
                    continue;
                for (Index j = 0; j < b.values.cols(); ++j)
                    body.fp16(b.values(i, j));
            }
            blocks.push_back({{"factor", to_string(b.factor)},
                              {"rows", b.values.rows()},
                              {"len", b.values.cols()},
                              {"quantized", b.quantized.size()}});
        }
        const auto written = static_cast<Index>(body.size() - start);
        if (written != layer.byte_count)
            throw Error("hybrid layer " + std::to_string(layer.layer) + " serialized to " + std::to_string(written) +
                        " bytes but accounts " + std::to_string(layer.byte_count));
        sections.push_back({{"layer", layer.layer},
                            {"dense", layer.dense},
                            {"rows", layer.rows},
                            {"cols", layer.cols},
                            {"byte_count", layer.byte_count},
                            {"blocks", blocks}});
    }
    json header = network_header("iosvd-hybrid", net);
    header["aux_bytes"] = aux.size();
    header["sections"] = sections;
    header["budget"] = {{"C_target", model.budget.C_target},
                        {"C_svd", model.budget.C_svd},
                        {"C_rem", model.budget.C_rem}};
    write_text(path, header.dump() + "\n" + aux.bytes() + body.bytes());
}

NetworkSpec read_hybrid(const std::filesystem::path& path)
{
    const auto raw = load(path, "iosvd-hybrid");
    const std::string src = path.string();
    const auto shapes = parse_layers(raw.header, src);
    NetworkSpec net;
    net.vocab_size = get<Index>(raw.header, "vocab_size", src);
    net.target_layers = get<std::vector<int>>(raw.header, "target_layers", src);
    auto is_target = [&](std::size_t k) {
        return std::find(net.target_layers.begin(), net.target_layers.end(), static_cast<int>(k)) !=
               net.target_layers.end();
    };

    ByteReader r(raw.bytes, raw.payload_offset, src);
    net.layers.resize(shapes.size());
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        if (!shapes[k].linear)
            net.layers[k] = LayerDef::act(shapes[k].activation);
        else if (!is_target(k))
            net.layers[k] = LayerDef::linear(r.f32_matrix(shapes[k].rows, shapes[k].cols));
    }
    std::vector<std::optional<Vector>> biases(shapes.size());
    for (std::size_t k = 0; k < shapes.size(); ++k)
        if (shapes[k].linear && shapes[k].bias)
            biases[k] = Vector(r.f32_matrix(shapes[k].rows, 1));

    for (const auto& sec : get<json>(raw.header, "sections", src)) {
        const int layer = get<int>(sec, "layer", src);
        if (layer < 0 || static_cast<std::size_t>(layer) >= shapes.size() || !is_target(static_cast<std::size_t>(layer)))
            throw IoError(src + ": section for non-target layer " + std::to_string(layer));
        std::vector<Matrix> decoded;
        for (const auto& blk : get<json>(sec, "blocks", src)) {
            const auto rows = get<Index>(blk, "rows", src);
            const auto len = get<Index>(blk, "len", src);
            const auto q = get<Index>(blk, "quantized", src);
            if (q < 0 || q > rows)
                throw IoError(src + ": bad quantized row count");
            std::vector<Index> idx(static_cast<std::size_t>(q));
            std::vector<double> scales(static_cast<std::size_t>(q));
            for (auto& i : idx)
                i = static_cast<Index>(r.u32());
            for (auto& s : scales)
                s = r.f32();
            Matrix values(rows, len);
            std::vector<bool> quantized(static_cast<std::size_t>(rows), false);
            for (std::size_t n = 0; n < idx.size(); ++n) {
                if (idx[n] >= rows || (n > 0 && idx[n] <= idx[n - 1]))
                    throw IoError(src + ": row indices must be sorted and in range");
                quantized[static_cast<std::size_t>(idx[n])] = true;
                for (Index j = 0; j < len; ++j)
                    values(idx[n], j) = static_cast<double>(r.i8()) * scales[n];
            }
            for (Index i = 0; i < rows; ++i) {
                if (quantized[static_cast<std::size_t>(i)])
                    continue;
                for (Index j = 0; j < len; ++j)
                    values(i, j) = r.fp16();
            }
            decoded.push_back(std::move(values));
        }
        auto& def = net.layers[static_cast<std::size_t>(layer)];
        if (get<bool>(sec, "dense", src) && decoded.size() == 1)
            def = LayerDef::linear(std::move(decoded[0]));
        else if (decoded.size() == 2)
            def = LayerDef::factored({std::move(decoded[0]), std::move(decoded[1])});
        else
            throw IoError(src + ": malformed section for layer " + std::to_string(layer));
    }
    for (std::size_t k = 0; k < shapes.size(); ++k)
        if (biases[k])
            net.layers[k].bias = biases[k];
    r.expect_end();
    return finish_network(std::move(net), src);
}

HybridFileLayout hybrid_layout(const std::filesystem::path& path)
{
    const auto raw = load(path, "iosvd-hybrid");
    HybridFileLayout out;
    out.header_bytes = raw.payload_offset;
    out.aux_bytes = get<std::uintmax_t>(raw.header, "aux_bytes", path.string());
    for (const auto& sec : get<json>(raw.header, "sections", path.string()))
        out.section_bytes.emplace_back(get<int>(sec, "layer", path.string()),
                                       get<std::uintmax_t>(sec, "byte_count", path.string()));
    return out;
}

NetworkSpec read_any_model(const std::filesystem::path& path)
{
    const auto format = read_header(path).value("format", std::string());
    if (format == "iosvd-model")
        return read_model(path);
    if (format == "iosvd-hybrid")
        return read_hybrid(path);
    throw IoError(path.string() + ": not a model or hybrid file");
}

}  // namespace iosvd::io
