#include "changedet/engine.hpp"

#include <cmath>

#include "changedet/errors.hpp"
#include "changedet/rng.hpp"

namespace changedet {

BinaryMask threshold_map(const ChangeProbabilityMap& probability, double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw ContractViolation("threshold must lie strictly inside (0, 1)");
    BinaryMask mask;
    mask.height = probability.height;
    mask.width = probability.width;
    mask.values.resize(probability.values.size());
    for (size_t i = 0; i < probability.values.size(); ++i)
        mask.values[i] = static_cast<double>(probability.values[i]) >= tau ? 1 : 0;
    return mask;
}

ChangeDetectionRun::ChangeDetectionRun(const MultiBandImage& pre, const MultiBandImage& post,
                                       const EngineConfig& config)
    : config_(config), started_(std::chrono::steady_clock::now()) {
    if (pre.height != post.height || pre.width != post.width || pre.bands != post.bands)
        throw RegistrationError("input pair is not co-registered: " + std::to_string(pre.height) +
                                "x" + std::to_string(pre.width) + "x" + std::to_string(pre.bands) +
                                " vs " + std::to_string(post.height) + "x" +
                                std::to_string(post.width) + "x" + std::to_string(post.bands));
    if (config.iterations < 0) throw ContractViolation("iterations must be >= 0");
    if (!(config.threshold > 0.0 && config.threshold < 1.0))
        throw ContractViolation("threshold must lie strictly inside (0, 1)");
    if (config.learning_rate < 0.0) throw ContractViolation("learning rate must be >= 0");
    if (!config.band_mapping_explicit && pre.bands < 3)
        throw ContractViolation("inputs with fewer than 3 bands need an explicit band mapping "
                                "(e.g. 0,0,0 for grayscale)");

    // polynomial color correction of the pre image into the post color space
    const int beta = config.pcc_beta > 0 ? config.pcc_beta
                                         : default_pcc_beta(pre.height, pre.width);
    PolynomialKernel kernel{config.pcc_kernel, pre.bands};
    mapping_ = fit_pcc(downsample_uniform(pre, beta), downsample_uniform(post, beta), kernel);
    pre_corrected_ = apply_pcc(pre, mapping_);
    post_corrected_ = post;

    covariance_ = estimate_covariance(image_diffs(pre_corrected_, post_corrected_), pre.height,
                                      pre.width, pre.bands);
    difference_ = difference_image(pre_corrected_, post_corrected_, covariance_);

    id_tensor_ = Tensor::from_data({1, 1, pre.height, pre.width}, difference_.values);
    diffs_tensor_ =
        Tensor::from_data({1, pre.bands, pre.height, pre.width}, difference_.diffs);
    sinv_ = sinv_tensor(covariance_);

    const std::array<int, 3> mapping =
        config.band_mapping_explicit || pre.bands >= 3 ? config.band_mapping
                                                       : std::array<int, 3>{0, 0, 0};
    rgb_pre_ = band_select(pre_corrected_, mapping);
    rgb_post_ = band_select(post_corrected_, mapping);
    rgb_pre_tensor_ = to_tensor(rgb_pre_);
    rgb_post_tensor_ = to_tensor(rgb_post_);

    SeededRng seeder(config.seed);
    DcpgConfig dcpg_cfg = config.dcpg;
    dcpg_cfg.seed = seeder.next_u64();
    dcpg_ = std::make_unique<DcpgNetwork>(dcpg_cfg);

    DfeConfig dfe_cfg{config.dfe_stages, config.dfe_trainable, seeder.next_u64()};
    dfe_ = std::make_unique<DfeNetwork>(dfe_cfg);
    if (!config.dfe_weights_path.empty())
        load_weights(read_weight_archive(config.dfe_weights_path), *dfe_);

    if (needs_features()) {
        // iteration-0 features fix the per-layer covariances for the whole run
        NoGradScope no_grad;
        auto f1 = dfe_->forward(rgb_pre_tensor_);
        auto f2 = dfe_->forward(rgb_post_tensor_);
        for (size_t l = 0; l < f1.size(); ++l)
            feature_sinv_.push_back(feature_sinv_diag(f1[l], f2[l]));
        if (!config.dfe_trainable) {
            frozen_f1_ = std::move(f1);
            frozen_f2_ = std::move(f2);
        }
    }

    AdamConfig adam{.learning_rate = config.learning_rate};
    opt_dcpg_.emplace(dcpg_->parameters(), adam);
    if (config.dfe_trainable && needs_features()) opt_dfe_.emplace(dfe_->parameters(), adam);
}

ChangeDetectionRun::~ChangeDetectionRun() = default;

void ChangeDetectionRun::step() {
    if (iteration_ >= config_.iterations)
        throw ContractViolation("step() past the configured iteration count");

    Tape tape;
    LossBreakdown breakdown;
    {
        TapeScope scope(tape);
        Tensor pc = dcpg_->forward(id_tensor_);

        Tensor img_term, feat_term, ctx_term, sparse_term;
        if (config_.loss.enable_img) {
            Tensor diffs = diffs_tensor_;
            if (config_.aug_noise_full_band && config_.augmentation.noise_sigma > 0.0f) {
                // per-iteration noise on both full-band images shows up in
                // their difference vectors
                SeededRng noise_rng =
                    SeededRng::substream(config_.seed, static_cast<uint64_t>(iteration_), 3);
                Tensor noisy = diffs_tensor_.clone();
                const double sigma = config_.augmentation.noise_sigma;
                float* d = noisy.data();
                for (int64_t i = 0; i < noisy.numel(); ++i)
                    d[i] += static_cast<float>(sigma * (noise_rng.gaussian() - noise_rng.gaussian()));
                diffs = noisy;
            }
            img_term = image_domain_loss(diffs, pc, sinv_, config_.loss.alpha_img);
        }

        if (needs_features()) {
            std::vector<Tensor> f1, f2;
            if (config_.dfe_trainable) {
                f1 = dfe_->forward(rgb_pre_tensor_);
                f2 = dfe_->forward(rgb_post_tensor_);
                // Re-whiten against the current feature statistics. With the
                // covariance held at its t=0 value a trainable extractor is
                // rewarded for inflating feature differences without bound;
                // tracking the statistics leaves reshaping (genuine metric
                // learning) as the only descent direction.
                for (size_t l = 0; l < f1.size(); ++l)
                    feature_sinv_[l] = feature_sinv_diag(f1[l], f2[l]);
            } else {
                f1 = frozen_f1_;
                f2 = frozen_f2_;
            }
            if (config_.loss.enable_feat) {
                std::vector<double> alphas;
                for (size_t l = 0; l < f1.size(); ++l)
                    alphas.push_back(config_.loss.alpha_feat_for(l));
                feat_term = feature_domain_loss(f1, f2, pc, alphas, feature_sinv_);
            }
            if (config_.loss.enable_ctx) {
                auto [aug1, aug2] = augment_pair(rgb_pre_, rgb_post_, config_.augmentation,
                                                 config_.seed, iteration_);
                auto fa1 = dfe_->forward(to_tensor(aug1));
                auto fa2 = dfe_->forward(to_tensor(aug2));
                ctx_term = context_consistency_loss(f1, f2, fa1, fa2,
                                                    config_.loss.ctx_normalized,
                                                    config_.loss.ctx_stop_gradient);
            }
        }

        if (config_.loss.enable_sparse) sparse_term = sparsity_penalty(pc);

        auto [total, bd] = total_loss(img_term, feat_term, ctx_term, sparse_term, config_.loss);
        breakdown = bd;
        if (!std::isfinite(breakdown.total))
            throw OptimizationAbort("non-finite loss at iteration " + std::to_string(iteration_) +
                                        " (img=" + std::to_string(breakdown.img) +
                                        " feat=" + std::to_string(breakdown.feat) +
                                        " ctx=" + std::to_string(breakdown.ctx) +
                                        " sparse=" + std::to_string(breakdown.sparse) + ")",
                                    breakdown, iteration_);
        tape.backward(total);
    }

    opt_dcpg_->step(tape);
    if (opt_dfe_) opt_dfe_->step(tape);
    history_.push_back(breakdown);
    ++iteration_;
}

RunResult ChangeDetectionRun::finish() {
    RunResult result;
    {
        NoGradScope no_grad;
        result.probability = to_probability_map(dcpg_->forward(id_tensor_));
    }
    result.mask = threshold_map(result.probability, config_.threshold);
    result.loss_history = history_;
    result.pre_corrected = pre_corrected_;
    result.post_corrected = post_corrected_;
    result.difference = difference_;
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    return result;
}

RunResult run_change_detection(const MultiBandImage& pre, const MultiBandImage& post,
                               const EngineConfig& config) {
    ChangeDetectionRun run(pre, post, config);
    for (int64_t t = 0; t < config.iterations; ++t) run.step();
    return run.finish();
}

}  // namespace changedet
