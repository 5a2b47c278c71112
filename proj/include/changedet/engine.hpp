#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "changedet/augment.hpp"
#include "changedet/image.hpp"
#include "changedet/losses.hpp"
#include "changedet/networks.hpp"
#include "changedet/preprocess.hpp"

namespace changedet {

struct EngineConfig {
    int64_t iterations = 80;
    // The mean-normalized losses keep gradients resolution-independent, which
    // calls for a larger step than a sum-aggregated objective would.
    double learning_rate = 1e-3;
    double threshold = 0.5;
    uint64_t seed = 0;
    LossWeights loss;
    DcpgConfig dcpg;  // its seed field is derived from `seed` at prepare time
    int dfe_stages = 2;
    bool dfe_trainable = true;
    AugmentationPolicy augmentation;
    std::array<int, 3> band_mapping{0, 1, 2};
    bool band_mapping_explicit = false;
    PolynomialKernel::Kind pcc_kernel = PolynomialKernel::Kind::root2;
    int pcc_beta = 0;              // 0 = auto: floor(sqrt(h*w/4096)), min 1
    std::string dfe_weights_path;  // optional weight archive for the D-FE
    bool aug_noise_full_band = false;  // per-iteration noise on the image-domain diffs
};

struct RunResult {
    ChangeProbabilityMap probability;
    BinaryMask mask;
    std::vector<LossBreakdown> loss_history;
    MultiBandImage pre_corrected;   // color-mapped pre-change image
    MultiBandImage post_corrected;  // post-change image, unchanged by design
    DifferenceImage difference;
    double wall_seconds = 0.0;
};

/// Raised when an iteration produces a non-finite loss; carries the per-term
/// breakdown of the offending iteration.
struct OptimizationAbort : std::runtime_error {
    OptimizationAbort(const std::string& msg, const LossBreakdown& bd, int64_t it)
        : std::runtime_error(msg), breakdown(bd), iteration(it) {}
    LossBreakdown breakdown;
    int64_t iteration;
};

BinaryMask threshold_map(const ChangeProbabilityMap& probability, double tau);

/// One per-image optimization: construction runs the full preparation
/// (color correction, covariance, difference image, frozen feature
/// covariances, seeded network and optimizer state); step() performs one
/// augment/forward/loss/backward/update pass; finish() emits the last-iterate
/// probability map.
class ChangeDetectionRun {
public:
    ChangeDetectionRun(const MultiBandImage& pre, const MultiBandImage& post,
                       const EngineConfig& config);
    ~ChangeDetectionRun();

    void step();
    RunResult finish();

    int64_t iteration() const { return iteration_; }
    const std::vector<LossBreakdown>& loss_history() const { return history_; }
    const DifferenceImage& difference() const { return difference_; }
    const ColorMapping& color_mapping() const { return mapping_; }
    const CovarianceModel& covariance() const { return covariance_; }
    DcpgNetwork& dcpg() { return *dcpg_; }
    DfeNetwork& dfe() { return *dfe_; }
    const EngineConfig& config() const { return config_; }

private:
    bool needs_features() const {
        return config_.loss.enable_feat || config_.loss.enable_ctx;
    }

    EngineConfig config_;
    MultiBandImage pre_corrected_, post_corrected_;
    ColorMapping mapping_;
    CovarianceModel covariance_;
    DifferenceImage difference_;
    MultiBandImage rgb_pre_, rgb_post_;
    Tensor id_tensor_, diffs_tensor_, sinv_;
    Tensor rgb_pre_tensor_, rgb_post_tensor_;
    std::unique_ptr<DcpgNetwork> dcpg_;
    std::unique_ptr<DfeNetwork> dfe_;
    std::vector<Tensor> feature_sinv_;
    std::vector<Tensor> frozen_f1_, frozen_f2_;  // cached when the D-FE is frozen
    std::optional<AdamOptimizer> opt_dcpg_, opt_dfe_;
    std::vector<LossBreakdown> history_;
    int64_t iteration_ = 0;
    std::chrono::steady_clock::time_point started_;
};

/// prepare + `iterations` steps + finish.
RunResult run_change_detection(const MultiBandImage& pre, const MultiBandImage& post,
                               const EngineConfig& config);

}  // namespace changedet
