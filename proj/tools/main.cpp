#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "changedet/engine.hpp"
#include "changedet/errors.hpp"
#include "changedet/io.hpp"

using namespace changedet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInputError = 2;
constexpr int kExitOptimizationAbort = 3;

std::array<int, 3> parse_bands(const std::string& text) {
    std::array<int, 3> bands{};
    int parsed = 0;
    size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
        const size_t comma = text.find(',', pos);
        const std::string tok =
            comma == std::string::npos ? text.substr(pos) : text.substr(pos, comma - pos);
        if (tok.empty()) break;
        bands[static_cast<size_t>(i)] = std::stoi(tok);
        ++parsed;
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (parsed != 3)
        throw ContractViolation("--bands expects three comma-separated indices, got '" + text +
                                "'");
    return bands;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unsupervised change detection on a co-registered bi-temporal image pair"};
    app.get_formatter()->column_width(30);

    std::string pre_path, post_path, out_dir, ref_path, config_path, bands_text, weights_path;
    uint64_t seed = 0;
    int64_t iterations = 0;
    double threshold = 0.0, learning_rate = 0.0;
    std::vector<std::string> disabled;
    bool freeze_dfe = false;

    app.add_option("--pre", pre_path, "Pre-change raster (PNG or raw+sidecar)")->required();
    app.add_option("--post", post_path, "Post-change raster")->required();
    app.add_option("--out", out_dir, "Output directory")->required();
    app.add_option("--ref", ref_path, "Reference change mask (8-bit PNG) for metrics");
    app.add_option("--config", config_path, "key=value configuration file");
    auto* seed_opt = app.add_option("--seed", seed, "Run seed");
    auto* iter_opt = app.add_option("--iterations", iterations, "Optimization iterations");
    auto* tau_opt = app.add_option("--threshold", threshold, "Mask threshold in (0,1)");
    auto* lr_opt = app.add_option("--lr", learning_rate, "Adam learning rate");
    auto* bands_opt = app.add_option("--bands", bands_text, "Three band indices i,j,k");
    auto* weights_opt =
        app.add_option("--weights", weights_path, "Feature-extractor weight archive");
    app.add_option("--disable-loss", disabled,
                   "Disable a loss term (img|feat|ctx|sparse); repeatable");
    auto* freeze_opt =
        app.add_flag("--freeze-dfe", freeze_dfe, "Keep feature-extractor weights fixed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInputError;
    }

    try {
        EngineConfig config;
        if (!config_path.empty()) config = apply_config_file(config, config_path);
        // command-line flags override configuration-file values
        if (*seed_opt) config.seed = seed;
        if (*iter_opt) config.iterations = iterations;
        if (*tau_opt) config.threshold = threshold;
        if (*lr_opt) config.learning_rate = learning_rate;
        if (*bands_opt) {
            config.band_mapping = parse_bands(bands_text);
            config.band_mapping_explicit = true;
        }
        if (*weights_opt) config.dfe_weights_path = weights_path;
        if (*freeze_opt) config.dfe_trainable = false;
        for (const std::string& term : disabled) {
            if (term == "img")
                config.loss.enable_img = false;
            else if (term == "feat")
                config.loss.enable_feat = false;
            else if (term == "ctx")
                config.loss.enable_ctx = false;
            else if (term == "sparse")
                config.loss.enable_sparse = false;
            else
                throw ContractViolation("--disable-loss expects img|feat|ctx|sparse, got '" +
                                        term + "'");
        }

        LoadedPair pair = load_pair(RasterSpec::of(pre_path), RasterSpec::of(post_path));
        BinaryMask reference;
        bool have_reference = false;
        if (!ref_path.empty()) {
            reference = load_mask_png(ref_path);
            have_reference = true;
        }

        const RunResult result = run_change_detection(pair.pre, pair.post, config);

        ReportInputs inputs{pre_path, post_path, pair.pre_checksum, pair.post_checksum};
        const OutputSummary summary =
            write_outputs(out_dir, config, result, inputs, have_reference ? &reference : nullptr);

        std::printf("wrote %s\n", summary.probability_path.c_str());
        std::printf("wrote %s\n", summary.mask_path.c_str());
        std::printf("wrote %s\n", summary.difference_path.c_str());
        if (!summary.confusion_path.empty())
            std::printf("wrote %s\n", summary.confusion_path.c_str());
        std::printf("wrote %s\n", summary.report_path.c_str());
        if (summary.scores) {
            std::printf("oa %.4f  ua %.4f  recall %.4f  f1 %.4f", summary.scores->oa,
                        summary.scores->ua, summary.scores->recall, summary.scores->f1);
            if (summary.auc) std::printf("  auc %.4f", *summary.auc);
            std::printf("\n");
        }
        if (!result.loss_history.empty())
            std::printf("loss %.6f -> %.6f over %zu iterations (%.1f s)\n",
                        result.loss_history.front().total, result.loss_history.back().total,
                        result.loss_history.size(), result.wall_seconds);
        return kExitOk;
    } catch (const OptimizationAbort& e) {
        std::fprintf(stderr, "optimization aborted: %s\n", e.what());
        return kExitOptimizationAbort;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInputError;
    }
}
