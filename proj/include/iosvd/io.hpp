#ifndef IOSVD_IO_HPP
#define IOSVD_IO_HPP

//
// File formats. Every binary file starts with a one-line JSON header
// terminated by '\n', followed by a little-endian payload.
//
//   model        float32: per linear layer W (m x n) or A (m x r) then D (n x r),
//                row-major, in layer order; then every bias in layer order.
//   calibration  float32 inputs (tokens x input_dim), then uint32 targets.
//   stats        float64: per layer R (in x in) then C (out x out).
//   hybrid       aux section (float32 non-target weights, then every bias),
//                then one section per target layer. A section holds its
//                blocks (W, or A then D); a block with q quantized rows of
//                length len is: uint32 row indices[q], float32 scales[q],
//                int8 codes[q * len], fp16 rows[(rows - q) * len].
//
// Plans are plain JSON.
//

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "iosvd/curvature.hpp"
#include "iosvd/netmodel.hpp"
#include "iosvd/rank_alloc.hpp"
#include "iosvd/remap.hpp"

namespace iosvd::io {

using json = nlohmann::json;

void write_model(const std::filesystem::path& path, const NetworkSpec& net);
NetworkSpec read_model(const std::filesystem::path& path);

void write_calibration(const std::filesystem::path& path, const CalibrationBatch& batch, Index vocab_size);
CalibrationBatch read_calibration(const std::filesystem::path& path);

// Stats are stored unfinalized-plus-damping; reading finalizes them.
void write_stats(const std::filesystem::path& path, const StatsMap& stats);
StatsMap read_stats(const std::filesystem::path& path);

json plan_to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const json& j);
void write_plan(const std::filesystem::path& path, const CompressionPlan& plan);
CompressionPlan read_plan(const std::filesystem::path& path);

void write_hybrid(const std::filesystem::path& path, const HybridModel& model);
// Decodes a hybrid file into an evaluable network.
NetworkSpec read_hybrid(const std::filesystem::path& path);

struct HybridFileLayout {
    std::uintmax_t header_bytes = 0;  // including the newline
    std::uintmax_t aux_bytes = 0;
    std::vector<std::pair<int, std::uintmax_t>> section_bytes;
};
HybridFileLayout hybrid_layout(const std::filesystem::path& path);

// Reads the header line of any of the binary formats.
json read_header(const std::filesystem::path& path);
// Loads a model or hybrid file, whichever the header says it is.
NetworkSpec read_any_model(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace iosvd::io

#endif
