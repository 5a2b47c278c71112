#include "changedet/io.hpp"

#include <json.hpp>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

// ---------------------------------------------------------------------------
// PNG plumbing. The setjmp frames below keep only trivially-destructible
// state live across the libpng calls; buffers belong to the caller.
// ---------------------------------------------------------------------------

struct DecodedPng {
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<uint8_t> rows;  // packed row bytes, big-endian 16-bit samples
};

bool decode_png_file(const char* path, DecodedPng* out, std::string* err) {
    FILE* f = std::fopen(path, "rb");
    if (!f) {
        *err = "cannot open";
        return false;
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        *err = "libpng allocation failure";
        return false;
    }
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        *err = "corrupt or unsupported PNG";
        return false;
    }
    png_init_io(png, f);
    png_read_info(png, info);

    const png_byte color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);

    out->width = static_cast<int>(png_get_image_width(png, info));
    out->height = static_cast<int>(png_get_image_height(png, info));
    out->channels = png_get_channels(png, info);
    out->bit_depth = png_get_bit_depth(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    out->rows.resize(rowbytes * static_cast<size_t>(out->height));
    row_ptrs.resize(static_cast<size_t>(out->height));
    for (int y = 0; y < out->height; ++y)
        row_ptrs[static_cast<size_t>(y)] = out->rows.data() + rowbytes * static_cast<size_t>(y);
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    return true;
}

bool encode_png_file(const char* path, int width, int height, int channels, int bit_depth,
                     const std::vector<uint8_t>& rows, std::string* err) {
    FILE* f = std::fopen(path, "wb");
    if (!f) {
        *err = "cannot open for writing";
        return false;
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(f);
        *err = "libpng allocation failure";
        return false;
    }
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        *err = "PNG encode failure";
        return false;
    }
    png_init_io(png, f);
    const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const size_t rowbytes = static_cast<size_t>(width) * channels * (bit_depth / 8);
    row_ptrs.resize(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y)
        row_ptrs[static_cast<size_t>(y)] =
            const_cast<png_bytep>(rows.data() + rowbytes * static_cast<size_t>(y));
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    return true;
}

DecodedPng decode_png_or_throw(const std::string& path) {
    DecodedPng decoded;
    std::string err;
    if (!decode_png_file(path.c_str(), &decoded, &err)) {
        if (err == "cannot open") throw IoError("cannot open: " + path);
        throw FormatError(err + ": " + path);
    }
    if (decoded.channels != 1 && decoded.channels != 3)
        throw FormatError("unsupported channel count " + std::to_string(decoded.channels) + ": " +
                          path);
    return decoded;
}

void encode_png_or_throw(const std::string& path, int w, int h, int channels, int bit_depth,
                         const std::vector<uint8_t>& rows) {
    std::string err;
    if (!encode_png_file(path.c_str(), w, h, channels, bit_depth, rows, &err))
        throw IoError(err + ": " + path);
}

uint16_t sample_at(const DecodedPng& png, int y, int x, int c) {
    const size_t rowbytes =
        static_cast<size_t>(png.width) * png.channels * (png.bit_depth / 8);
    const uint8_t* row = png.rows.data() + rowbytes * static_cast<size_t>(y);
    if (png.bit_depth == 8) return row[static_cast<size_t>(x) * png.channels + c];
    const uint8_t* p = row + (static_cast<size_t>(x) * png.channels + c) * 2;
    return static_cast<uint16_t>((p[0] << 8) | p[1]);  // PNG is big-endian
}

// ---------------------------------------------------------------------------
// raw sidecar format
// ---------------------------------------------------------------------------

struct RawHeader {
    int height = 0, width = 0, bands = 0;
};

RawHeader read_raw_header(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open sidecar header: " + path);
    RawHeader hdr;
    bool dtype_ok = false;
    std::string line;
    while (std::getline(is, line)) {
        const size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "height")
            hdr.height = std::stoi(value);
        else if (key == "width")
            hdr.width = std::stoi(value);
        else if (key == "bands")
            hdr.bands = std::stoi(value);
        else if (key == "dtype")
            dtype_ok = value == "f32le";
    }
    if (hdr.height < 1 || hdr.width < 1 || hdr.bands < 1)
        throw FormatError("incomplete sidecar header: " + path);
    if (!dtype_ok) throw FormatError("sidecar must declare dtype=f32le: " + path);
    return hdr;
}

MultiBandImage load_raw(const std::string& path) {
    const RawHeader hdr = read_raw_header(path + ".hdr");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    MultiBandImage img = MultiBandImage::zeros(hdr.height, hdr.width, hdr.bands);
    is.read(reinterpret_cast<char*>(img.values.data()),
            static_cast<std::streamsize>(img.values.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(img.values.size() * sizeof(float)))
        throw FormatError("raw payload shorter than header extents: " + path);
    return img;
}

void normalize_minmax_per_band(MultiBandImage& img) {
    const int64_t n = img.pixel_count();
    for (int c = 0; c < img.bands; ++c) {
        float* plane = img.values.data() + static_cast<size_t>(c) * n;
        float lo = plane[0], hi = plane[0];
        for (int64_t i = 1; i < n; ++i) {
            lo = std::min(lo, plane[i]);
            hi = std::max(hi, plane[i]);
        }
        const float span = hi - lo;
        for (int64_t i = 0; i < n; ++i)
            plane[i] = span > 0.0f ? (plane[i] - lo) / span : 0.0f;
    }
}

bool is_png_path(const std::string& path) {
    return path.size() >= 4 && path.substr(path.size() - 4) == ".png";
}

}  // namespace

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[8192];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i)
            h = (h ^ static_cast<uint8_t>(buf[i])) * 1099511628211ull;
        if (n < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

LoadedRaster load_raster(const RasterSpec& spec) {
    LoadedRaster out;
    out.checksum = fnv1a_file(spec.path);
    if (is_png_path(spec.path)) {
        const DecodedPng png = decode_png_or_throw(spec.path);
        out.image = MultiBandImage::zeros(png.height, png.width, png.channels);
        const double full = png.bit_depth == 16 ? 65535.0 : 255.0;
        const double div = spec.normalization == RasterSpec::Normalization::divisor
                               ? spec.divisor
                               : full;
        if (div <= 0.0 && spec.normalization == RasterSpec::Normalization::divisor)
            throw ContractViolation("raster divisor must be positive");
        for (int c = 0; c < png.channels; ++c)
            for (int y = 0; y < png.height; ++y)
                for (int x = 0; x < png.width; ++x)
                    out.image.at(y, x, c) = static_cast<float>(
                        std::min(1.0, sample_at(png, y, x, c) / div));
        if (spec.normalization == RasterSpec::Normalization::minmax)
            normalize_minmax_per_band(out.image);
        return out;
    }
    if (std::filesystem::exists(spec.path + ".hdr")) {
        out.image = load_raw(spec.path);
        if (spec.normalization == RasterSpec::Normalization::divisor) {
            if (spec.divisor <= 0.0) throw ContractViolation("raster divisor must be positive");
            for (float& v : out.image.values)
                v = static_cast<float>(
                    std::min(1.0, std::max(0.0, static_cast<double>(v) / spec.divisor)));
        } else {
            normalize_minmax_per_band(out.image);
        }
        return out;
    }
    throw FormatError("unknown raster format (expected .png or a .hdr sidecar): " + spec.path);
}

LoadedPair load_pair(const RasterSpec& pre, const RasterSpec& post) {
    LoadedRaster a = load_raster(pre);
    LoadedRaster b = load_raster(post);
    if (a.image.height != b.image.height || a.image.width != b.image.width ||
        a.image.bands != b.image.bands)
        throw RegistrationError(
            "input rasters are not co-registered: " + pre.path + " is " +
            std::to_string(a.image.height) + "x" + std::to_string(a.image.width) + "x" +
            std::to_string(a.image.bands) + ", " + post.path + " is " +
            std::to_string(b.image.height) + "x" + std::to_string(b.image.width) + "x" +
            std::to_string(b.image.bands));
    return {std::move(a.image), std::move(b.image), a.checksum, b.checksum};
}

BinaryMask load_mask_png(const std::string& path) {
    const DecodedPng png = decode_png_or_throw(path);
    BinaryMask mask;
    mask.height = png.height;
    mask.width = png.width;
    mask.values.resize(static_cast<size_t>(png.height) * png.width);
    const int threshold = png.bit_depth == 16 ? 32768 : 128;
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            mask.values[static_cast<size_t>(y) * png.width + x] =
                sample_at(png, y, x, 0) >= threshold ? 1 : 0;
    return mask;
}

void write_probability_png(const std::string& path, const ChangeProbabilityMap& map) {
    std::vector<uint8_t> rows(static_cast<size_t>(map.height) * map.width * 2);
    for (size_t i = 0; i < map.values.size(); ++i) {
        const long q = std::lround(static_cast<double>(map.values[i]) * 65535.0);
        const uint16_t v = static_cast<uint16_t>(std::min(65535l, std::max(0l, q)));
        rows[2 * i] = static_cast<uint8_t>(v >> 8);
        rows[2 * i + 1] = static_cast<uint8_t>(v & 0xff);
    }
    encode_png_or_throw(path, map.width, map.height, 1, 16, rows);
}

ChangeProbabilityMap read_probability_png(const std::string& path) {
    const DecodedPng png = decode_png_or_throw(path);
    if (png.channels != 1 || png.bit_depth != 16)
        throw FormatError("probability map must be 16-bit grayscale: " + path);
    ChangeProbabilityMap map;
    map.height = png.height;
    map.width = png.width;
    map.values.resize(static_cast<size_t>(png.height) * png.width);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            map.values[static_cast<size_t>(y) * png.width + x] =
                static_cast<float>(sample_at(png, y, x, 0) / 65535.0);
    return map;
}

void write_mask_png(const std::string& path, const BinaryMask& mask) {
    std::vector<uint8_t> rows(mask.values.size());
    for (size_t i = 0; i < mask.values.size(); ++i) rows[i] = mask.values[i] ? 255 : 0;
    encode_png_or_throw(path, mask.width, mask.height, 1, 8, rows);
}

void write_rgb_png(const std::string& path, const RgbImage& image) {
    encode_png_or_throw(path, image.width, image.height, 3, 8, image.rgb);
}

void write_rgb8_png(const std::string& path, const MultiBandImage& rgb) {
    if (rgb.bands != 3) throw ContractViolation("write_rgb8_png expects a 3-band image");
    std::vector<uint8_t> rows(static_cast<size_t>(rgb.height) * rgb.width * 3);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const long q = std::lround(static_cast<double>(rgb.at(y, x, c)) * 255.0);
                rows[(static_cast<size_t>(y) * rgb.width + x) * 3 + c] =
                    static_cast<uint8_t>(std::min(255l, std::max(0l, q)));
            }
    encode_png_or_throw(path, rgb.width, rgb.height, 3, 8, rows);
}

void write_difference_png(const std::string& path, const DifferenceImage& difference) {
    float peak = 0.0f;
    for (float v : difference.values) peak = std::max(peak, v);
    ChangeProbabilityMap scaled;
    scaled.height = difference.height;
    scaled.width = difference.width;
    scaled.values.resize(difference.values.size());
    for (size_t i = 0; i < difference.values.size(); ++i)
        scaled.values[i] = peak > 0.0f ? difference.values[i] / peak : 0.0f;
    write_probability_png(path, scaled);
}

// ---------------------------------------------------------------------------
// configuration file
// ---------------------------------------------------------------------------

namespace {

bool parse_bool(const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ContractViolation("expected a boolean, got '" + value + "'");
}

std::vector<double> parse_list(const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_entry(EngineConfig& config, const std::string& key, const std::string& value) {
    if (key == "iterations")
        config.iterations = std::stoll(value);
    else if (key == "learning_rate")
        config.learning_rate = std::stod(value);
    else if (key == "threshold")
        config.threshold = std::stod(value);
    else if (key == "seed")
        config.seed = std::stoull(value);
    else if (key == "dcpg_blocks")
        config.dcpg.blocks = std::stoi(value);
    else if (key == "dcpg_channels")
        config.dcpg.channels = std::stoi(value);
    else if (key == "dfe_stages")
        config.dfe_stages = std::stoi(value);
    else if (key == "dfe_trainable")
        config.dfe_trainable = parse_bool(value);
    else if (key == "dfe_weights")
        config.dfe_weights_path = value;
    else if (key == "alpha_img")
        config.loss.alpha_img = std::stod(value);
    else if (key == "alpha_feat")
        config.loss.alpha_feat = parse_list(value);
    else if (key == "enable_img")
        config.loss.enable_img = parse_bool(value);
    else if (key == "enable_feat")
        config.loss.enable_feat = parse_bool(value);
    else if (key == "enable_ctx")
        config.loss.enable_ctx = parse_bool(value);
    else if (key == "enable_sparse")
        config.loss.enable_sparse = parse_bool(value);
    else if (key == "ctx_normalized")
        config.loss.ctx_normalized = parse_bool(value);
    else if (key == "ctx_stop_gradient")
        config.loss.ctx_stop_gradient = parse_bool(value);
    else if (key == "bands") {
        const std::vector<double> list = parse_list(value);
        if (list.size() != 3) throw ContractViolation("bands expects three indices");
        for (int i = 0; i < 3; ++i)
            config.band_mapping[static_cast<size_t>(i)] = static_cast<int>(list[static_cast<size_t>(i)]);
        config.band_mapping_explicit = true;
    } else if (key == "pcc_kernel")
        config.pcc_kernel = parse_kernel_kind(value);
    else if (key == "pcc_beta")
        config.pcc_beta = std::stoi(value);
    else if (key == "aug_brightness" || key == "aug_contrast" || key == "aug_saturation" ||
             key == "aug_hue") {
        const std::vector<double> range = parse_list(value);
        if (range.size() != 2) throw ContractViolation(key + " expects 'lo,hi'");
        const float lo = static_cast<float>(range[0]), hi = static_cast<float>(range[1]);
        if (key == "aug_brightness") {
            config.augmentation.brightness_lo = lo;
            config.augmentation.brightness_hi = hi;
        } else if (key == "aug_contrast") {
            config.augmentation.contrast_lo = lo;
            config.augmentation.contrast_hi = hi;
        } else if (key == "aug_saturation") {
            config.augmentation.saturation_lo = lo;
            config.augmentation.saturation_hi = hi;
        } else {
            config.augmentation.hue_lo = lo;
            config.augmentation.hue_hi = hi;
        }
    } else if (key == "aug_noise_sigma")
        config.augmentation.noise_sigma = static_cast<float>(std::stod(value));
    else if (key == "aug_noise_full_band")
        config.aug_noise_full_band = parse_bool(value);
    else
        throw ContractViolation("unknown configuration key '" + key + "'");
}

EngineConfig apply_config_file(EngineConfig base, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractViolation("config line " + std::to_string(line_no) +
                                    " is not key=value: '" + line + "'");
        try {
            apply_config_entry(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw ContractViolation("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return base;
}

// ---------------------------------------------------------------------------
// outputs
// ---------------------------------------------------------------------------

namespace {

std::string hex_checksum(uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a:%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json config_echo(const EngineConfig& c) {
    nlohmann::json j;
    j["iterations"] = c.iterations;
    j["learning_rate"] = c.learning_rate;
    j["threshold"] = c.threshold;
    j["seed"] = c.seed;
    j["dcpg_blocks"] = c.dcpg.blocks;
    j["dcpg_channels"] = c.dcpg.channels;
    j["dfe_stages"] = c.dfe_stages;
    j["dfe_trainable"] = c.dfe_trainable;
    j["dfe_weights"] = c.dfe_weights_path;
    j["alpha_img"] = c.loss.alpha_img;
    j["alpha_feat"] = c.loss.alpha_feat;
    j["enable_img"] = c.loss.enable_img;
    j["enable_feat"] = c.loss.enable_feat;
    j["enable_ctx"] = c.loss.enable_ctx;
    j["enable_sparse"] = c.loss.enable_sparse;
    j["ctx_normalized"] = c.loss.ctx_normalized;
    j["ctx_stop_gradient"] = c.loss.ctx_stop_gradient;
    j["bands"] = c.band_mapping;
    j["pcc_kernel"] = kernel_kind_name(c.pcc_kernel);
    j["pcc_beta"] = c.pcc_beta;
    j["aug_brightness"] = {c.augmentation.brightness_lo, c.augmentation.brightness_hi};
    j["aug_contrast"] = {c.augmentation.contrast_lo, c.augmentation.contrast_hi};
    j["aug_saturation"] = {c.augmentation.saturation_lo, c.augmentation.saturation_hi};
    j["aug_hue"] = {c.augmentation.hue_lo, c.augmentation.hue_hi};
    j["aug_noise_sigma"] = c.augmentation.noise_sigma;
    j["aug_noise_full_band"] = c.aug_noise_full_band;
    return j;
}

}  // namespace

OutputSummary write_outputs(const std::string& directory, const EngineConfig& config,
                            const RunResult& result, const ReportInputs& inputs,
                            const BinaryMask* reference) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(directory, ec);
    if (ec) throw IoError("cannot create output directory: " + directory);

    OutputSummary summary;
    summary.probability_path = (fs::path(directory) / "probability.png").string();
    summary.mask_path = (fs::path(directory) / "mask.png").string();
    summary.difference_path = (fs::path(directory) / "difference.png").string();
    summary.report_path = (fs::path(directory) / "report.json").string();
    write_probability_png(summary.probability_path, result.probability);
    write_mask_png(summary.mask_path, result.mask);
    write_difference_png(summary.difference_path, result.difference);

    nlohmann::json report;
    report["config"] = config_echo(config);
    report["inputs"]["pre"] = {{"path", inputs.pre_path},
                               {"checksum", hex_checksum(inputs.pre_checksum)}};
    report["inputs"]["post"] = {{"path", inputs.post_path},
                                {"checksum", hex_checksum(inputs.post_checksum)}};
    nlohmann::json losses = nlohmann::json::array();
    for (const LossBreakdown& bd : result.loss_history)
        losses.push_back({{"img", bd.img},
                          {"feat", bd.feat},
                          {"ctx", bd.ctx},
                          {"sparse", bd.sparse},
                          {"total", bd.total}});
    report["loss"] = std::move(losses);

    if (reference) {
        summary.confusion_path = (fs::path(directory) / "confusion.png").string();
        write_rgb_png(summary.confusion_path, render_confusion_map(result.mask, *reference));
        const ConfusionCounts counts = confusion(result.mask, *reference);
        const Scores s = scores(counts);
        summary.scores = s;
        report["metrics"] = {{"oa", s.oa}, {"ua", s.ua}, {"recall", s.recall}, {"f1", s.f1}};
        bool has_pos = false, has_neg = false;
        for (uint8_t v : reference->values) (v ? has_pos : has_neg) = true;
        if (has_pos && has_neg) {
            const double auc = roc_auc(result.probability, *reference).auc;
            summary.auc = auc;
            report["metrics"]["auc"] = auc;
        }
    }
    report["timing"]["totalSeconds"] = result.wall_seconds;

    std::ofstream os(summary.report_path);
    if (!os) throw IoError("cannot write: " + summary.report_path);
    os << report.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + summary.report_path);
    return summary;
}

}  // namespace changedet
