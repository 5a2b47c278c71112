#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "changedet/engine.hpp"
#include "changedet/image.hpp"
#include "changedet/metrics.hpp"

namespace changedet {

/// Input raster description. Supported formats, chosen by extension and
/// sidecar presence: 8/16-bit PNG (1 or 3 channels), or planar float32
/// little-endian raw with a "<path>.hdr" sidecar of text lines
/// height=, width=, bands=, dtype=f32le.
struct RasterSpec {
    enum class Normalization { automatic, divisor, minmax };

    std::string path;
    Normalization normalization = Normalization::automatic;
    double divisor = 0.0;  // used with Normalization::divisor

    static RasterSpec of(std::string p) { return RasterSpec{std::move(p)}; }
};

struct LoadedRaster {
    MultiBandImage image;
    uint64_t checksum = 0;  // FNV-1a over the raw file bytes
};

struct LoadedPair {
    MultiBandImage pre, post;
    uint64_t pre_checksum = 0, post_checksum = 0;
};

/// Decodes and normalizes into [0, 1]. PNG defaults to the fixed divisor of
/// its bit depth; raw rasters default to per-band min-max.
LoadedRaster load_raster(const RasterSpec& spec);

/// Both rasters, with a registration check on extents and band counts.
LoadedPair load_pair(const RasterSpec& pre, const RasterSpec& post);

/// 8-bit PNG; values >= 128 in the first channel count as change.
BinaryMask load_mask_png(const std::string& path);

// -- writers (PNG payloads are bit-exact: 16-bit grayscale stores
//    round(v * 65535) big-endian per the PNG byte order) --
void write_probability_png(const std::string& path, const ChangeProbabilityMap& map);
ChangeProbabilityMap read_probability_png(const std::string& path);
void write_mask_png(const std::string& path, const BinaryMask& mask);
void write_rgb_png(const std::string& path, const RgbImage& image);
void write_rgb8_png(const std::string& path, const MultiBandImage& rgb);  // 3-band, [0,1]
/// 16-bit grayscale of the difference map scaled by its maximum.
void write_difference_png(const std::string& path, const DifferenceImage& difference);

uint64_t fnv1a_file(const std::string& path);

/// key=value engine configuration, '#' comments allowed. Keys are documented
/// in the README; unknown keys are an error.
EngineConfig apply_config_file(EngineConfig base, const std::string& path);
void apply_config_entry(EngineConfig& config, const std::string& key, const std::string& value);

struct ReportInputs {
    std::string pre_path, post_path;
    uint64_t pre_checksum = 0, post_checksum = 0;
};

struct OutputSummary {
    std::string probability_path, mask_path, difference_path, confusion_path, report_path;
    std::optional<Scores> scores;
    std::optional<double> auc;
};

/// Writes probability.png, mask.png, difference.png, report.json, and (when
/// a reference is given) confusion.png plus the metrics block in the report.
OutputSummary write_outputs(const std::string& directory, const EngineConfig& config,
                            const RunResult& result, const ReportInputs& inputs,
                            const BinaryMask* reference);

}  // namespace changedet
