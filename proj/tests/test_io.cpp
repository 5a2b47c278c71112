#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "changedet/engine.hpp"
#include "changedet/errors.hpp"
#include "changedet/io.hpp"
#include "changedet/rng.hpp"
#include "changedet/synthetic.hpp"

using namespace changedet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() /
                     ("changedet_io_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

}  // namespace

TEST_CASE("8-bit rgb png round trip with divisor normalization") {
    SeededRng rng(1);
    MultiBandImage img = MultiBandImage::zeros(9, 7, 3);
    for (float& v : img.values) v = static_cast<float>(rng.next_double());
    const std::string path = (temp_dir() / "rgb8.png").string();
    write_rgb8_png(path, img);
    LoadedRaster loaded = load_raster(RasterSpec::of(path));
    REQUIRE(loaded.image.bands == 3);
    REQUIRE(loaded.image.height == 9);
    REQUIRE(loaded.image.width == 7);
    for (size_t i = 0; i < img.values.size(); ++i)
        CHECK(std::fabs(loaded.image.values[i] - img.values[i]) <= 0.5 / 255.0 + 1e-6);
    CHECK(loaded.checksum == fnv1a_file(path));
}

TEST_CASE("16-bit probability png round trip at quantization accuracy") {
    SeededRng rng(2);
    ChangeProbabilityMap map;
    map.height = 12;
    map.width = 8;
    map.values.resize(96);
    for (float& v : map.values) v = static_cast<float>(rng.next_double());
    const std::string path = (temp_dir() / "prob.png").string();
    write_probability_png(path, map);
    ChangeProbabilityMap loaded = read_probability_png(path);
    for (size_t i = 0; i < map.values.size(); ++i)
        CHECK(std::fabs(loaded.values[i] - map.values[i]) <= 1.0 / 65535.0);

    // constant 0.5 quantizes to 32768 exactly
    ChangeProbabilityMap half;
    half.height = half.width = 4;
    half.values.assign(16, 0.5f);
    const std::string hp = (temp_dir() / "half.png").string();
    write_probability_png(hp, half);
    ChangeProbabilityMap hept = read_probability_png(hp);
    for (float v : hept.values) CHECK(v == doctest::Approx(32768.0 / 65535.0).epsilon(1e-9));
}

TEST_CASE("mask png round trip and thresholded decoding") {
    BinaryMask mask;
    mask.height = 3;
    mask.width = 5;
    mask.values = {1, 0, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0};
    const std::string path = (temp_dir() / "mask.png").string();
    write_mask_png(path, mask);
    BinaryMask loaded = load_mask_png(path);
    CHECK(loaded.values == mask.values);
}

TEST_CASE("raw sidecar rasters load with per-band min-max normalization") {
    const int h = 6, w = 5, b = 13;
    const std::string path = (temp_dir() / "multi.raw").string();
    {
        std::ofstream os(path, std::ios::binary);
        SeededRng rng(3);
        for (int i = 0; i < h * w * b; ++i) {
            const float v = static_cast<float>(rng.uniform(100.0, 4000.0));  // reflectance-like
            os.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    {
        std::ofstream os(path + ".hdr");
        os << "height=" << h << "\nwidth=" << w << "\nbands=" << b << "\ndtype=f32le\n";
    }
    LoadedRaster loaded = load_raster(RasterSpec::of(path));
    CHECK(loaded.image.bands == 13);
    for (float v : loaded.image.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    // each band spans the full unit interval after min-max
    const int64_t n = loaded.image.pixel_count();
    for (int c = 0; c < b; ++c) {
        float lo = 1.0f, hi = 0.0f;
        for (int64_t i = 0; i < n; ++i) {
            const float v = loaded.image.values[static_cast<size_t>(c) * n + i];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }

    std::ofstream(path + ".hdr") << "height=6\nwidth=5\ndtype=f32le\n";  // missing bands
    CHECK_THROWS_AS(load_raster(RasterSpec::of(path)), FormatError);
}

TEST_CASE("format and registration errors") {
    const std::string garbage = (temp_dir() / "noformat.dat").string();
    std::ofstream(garbage) << "hello";
    CHECK_THROWS_AS(load_raster(RasterSpec::of(garbage)), FormatError);
    CHECK_THROWS_AS(load_raster(RasterSpec::of((temp_dir() / "missing.png").string())), IoError);

    SeededRng rng(4);
    MultiBandImage small = MultiBandImage::zeros(4, 4, 3);
    MultiBandImage big = MultiBandImage::zeros(6, 6, 3);
    for (float& v : small.values) v = static_cast<float>(rng.next_double());
    for (float& v : big.values) v = static_cast<float>(rng.next_double());
    const std::string p1 = (temp_dir() / "small.png").string();
    const std::string p2 = (temp_dir() / "big.png").string();
    write_rgb8_png(p1, small);
    write_rgb8_png(p2, big);
    CHECK_THROWS_WITH_AS(load_pair(RasterSpec::of(p1), RasterSpec::of(p2)),
                         doctest::Contains("4x4x3"), RegistrationError);
}

TEST_CASE("config file parsing, precedence layering, and unknown keys") {
    const std::string path = (temp_dir() / "run.cfg").string();
    {
        std::ofstream os(path);
        os << "# comment line\n"
              "iterations = 12\n"
              "learning_rate = 5e-4\n"
              "threshold=0.4\n"
              "seed = 99\n"
              "dcpg_blocks = 4\n"
              "dcpg_channels=16\n"
              "dfe_stages = 3\n"
              "dfe_trainable = false\n"
              "alpha_img = 0.5\n"
              "alpha_feat = 1.0,0.5\n"
              "enable_ctx = false\n"
              "ctx_normalized = false\n"
              "bands = 3,2,1\n"
              "pcc_kernel = poly2\n"
              "pcc_beta = 2\n"
              "aug_brightness = 0.9,1.1\n"
              "aug_noise_sigma = 0.01\n";
    }
    EngineConfig cfg = apply_config_file(EngineConfig{}, path);
    CHECK(cfg.iterations == 12);
    CHECK(cfg.learning_rate == doctest::Approx(5e-4));
    CHECK(cfg.threshold == doctest::Approx(0.4));
    CHECK(cfg.seed == 99);
    CHECK(cfg.dcpg.blocks == 4);
    CHECK(cfg.dcpg.channels == 16);
    CHECK(cfg.dfe_stages == 3);
    CHECK_FALSE(cfg.dfe_trainable);
    CHECK(cfg.loss.alpha_img == doctest::Approx(0.5));
    REQUIRE(cfg.loss.alpha_feat.size() == 2);
    CHECK(cfg.loss.alpha_feat[1] == doctest::Approx(0.5));
    CHECK_FALSE(cfg.loss.enable_ctx);
    CHECK_FALSE(cfg.loss.ctx_normalized);
    CHECK(cfg.band_mapping == std::array<int, 3>{3, 2, 1});
    CHECK(cfg.band_mapping_explicit);
    CHECK(cfg.pcc_kernel == PolynomialKernel::Kind::poly2);
    CHECK(cfg.pcc_beta == 2);
    CHECK(cfg.augmentation.brightness_lo == doctest::Approx(0.9f));
    CHECK(cfg.augmentation.noise_sigma == doctest::Approx(0.01f));

    // defaults survive for untouched keys
    CHECK(cfg.loss.enable_img);
    CHECK(cfg.augmentation.contrast_hi == doctest::Approx(1.2f));

    const std::string bad = (temp_dir() / "bad.cfg").string();
    std::ofstream(bad) << "no_such_key = 1\n";
    CHECK_THROWS_AS(apply_config_file(EngineConfig{}, bad), ContractViolation);
    std::ofstream(bad) << "not a key value line\n";
    CHECK_THROWS_AS(apply_config_file(EngineConfig{}, bad), ContractViolation);
}

TEST_CASE("write_outputs emits the documented files and a lossless report") {
    SyntheticSpec spec;
    spec.height = 24;
    spec.width = 24;
    spec.square = 8;
    SyntheticPair pair = make_synthetic_pair(spec);
    EngineConfig cfg;
    cfg.iterations = 2;
    cfg.dcpg.blocks = 1;
    cfg.dcpg.channels = 4;
    cfg.dfe_stages = 1;
    RunResult result = run_change_detection(pair.pre, pair.post, cfg);

    const std::string dir = (temp_dir() / "outputs").string();
    ReportInputs inputs{"pre.png", "post.png", 0xabcdull, 0x1234ull};

    SUBCASE("with a reference: five files and full metrics") {
        OutputSummary s = write_outputs(dir, cfg, result, inputs, &pair.reference);
        CHECK(fs::exists(s.probability_path));
        CHECK(fs::exists(s.mask_path));
        CHECK(fs::exists(s.difference_path));
        CHECK(fs::exists(s.confusion_path));
        CHECK(fs::exists(s.report_path));
        REQUIRE(s.scores.has_value());
        REQUIRE(s.auc.has_value());

        std::ifstream is(s.report_path);
        nlohmann::json report = nlohmann::json::parse(is);
        CHECK(report["config"]["iterations"] == 2);
        CHECK(report["config"]["pcc_kernel"] == "root2");
        CHECK(report["loss"].size() == 2);
        CHECK(report["loss"][0].contains("img"));
        CHECK(report["loss"][1].contains("total"));
        CHECK(report["metrics"].contains("oa"));
        CHECK(report["metrics"].contains("auc"));
        CHECK(report["timing"]["totalSeconds"].get<double>() >= 0.0);
        CHECK(report["inputs"]["pre"]["checksum"] == "fnv1a:000000000000abcd");

        // report numbers survive a serialization round trip losslessly
        const double total0 = report["loss"][0]["total"].get<double>();
        CHECK(total0 == result.loss_history[0].total);
        nlohmann::json reparsed = nlohmann::json::parse(report.dump());
        CHECK(reparsed["loss"][0]["total"].get<double>() == total0);
        CHECK(reparsed["metrics"]["auc"].get<double>() == *s.auc);

        // the written mask equals the thresholded probability map
        ChangeProbabilityMap prob = read_probability_png(s.probability_path);
        for (size_t i = 0; i < prob.values.size(); ++i) {
            const bool bit = result.mask.values[i] != 0;
            CHECK(bit == (result.probability.values[i] >= cfg.threshold));
        }
    }

    SUBCASE("without a reference: no confusion map, no metrics keys") {
        const std::string dir2 = (temp_dir() / "outputs_noref").string();
        OutputSummary s = write_outputs(dir2, cfg, result, inputs, nullptr);
        CHECK(s.confusion_path.empty());
        CHECK_FALSE(fs::exists(fs::path(dir2) / "confusion.png"));
        CHECK_FALSE(s.scores.has_value());
        std::ifstream is(s.report_path);
        nlohmann::json report = nlohmann::json::parse(is);
        CHECK_FALSE(report.contains("metrics"));
    }
}

TEST_CASE("fnv1a checksum is content-determined") {
    const std::string a = (temp_dir() / "f1.bin").string();
    const std::string b = (temp_dir() / "f2.bin").string();
    std::ofstream(a, std::ios::binary) << "payload";
    std::ofstream(b, std::ios::binary) << "payload";
    CHECK(fnv1a_file(a) == fnv1a_file(b));
    std::ofstream(b, std::ios::binary) << "payloae";
    CHECK(fnv1a_file(a) != fnv1a_file(b));
}
