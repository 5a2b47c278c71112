#pragma once

#include <utility>
#include <vector>

#include "changedet/preprocess.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

struct LossWeights {
    double alpha_img = 1.0;
    std::vector<double> alpha_feat;  // per layer; missing entries default to 1.0
    bool enable_img = true;
    bool enable_feat = true;
    bool enable_ctx = true;
    bool enable_sparse = true;
    bool ctx_normalized = true;      // mean-per-element L1; false keeps the raw sum
    bool ctx_stop_gradient = false;  // treat original features as fixed targets

    double alpha_feat_for(size_t layer) const {
        return layer < alpha_feat.size() ? alpha_feat[layer] : 1.0;
    }
};

struct LossBreakdown {
    double img = 0.0;
    double feat = 0.0;
    double ctx = 0.0;
    double sparse = 0.0;
    double total = 0.0;
};

/// Mean over pixels of sqrt((w d)^T Sinv (w d) + eps): each pixel's
/// difference vector is scaled by its probability before the Mahalanobis
/// norm. diffs is 1 x b x h x w, weights 1 x 1 x h x w in [0, 1], sinv a
/// constant b x b tensor. Differentiable in diffs and weights.
Tensor weighted_mahalanobis(const Tensor& diffs, const Tensor& weights, const Tensor& sinv);

/// Change/no-change similarity-dissimilarity loss in the image domain:
/// -alpha * WM(d, Pc) + WM(d, 1 - Pc).
Tensor image_domain_loss(const Tensor& diffs, const Tensor& pc, const Tensor& sinv,
                         double alpha_img);

/// Same construction per feature layer, with Pc nearest-downsampled to each
/// layer's spatial extent; terms summed over layers.
Tensor feature_domain_loss(const std::vector<Tensor>& feats1, const std::vector<Tensor>& feats2,
                           const Tensor& pc, const std::vector<double>& alpha_feat,
                           const std::vector<Tensor>& sinv_per_layer);

/// L1 agreement between original and augmented features, both temporal
/// branches, summed over layers. Normalized variant divides per layer by the
/// element count.
Tensor context_consistency_loss(const std::vector<Tensor>& feats1,
                                const std::vector<Tensor>& feats2,
                                const std::vector<Tensor>& feats1_aug,
                                const std::vector<Tensor>& feats2_aug, bool normalized,
                                bool stop_gradient);

/// 1 / sin(pi * mean(Pc)) with the mean clamped to [1e-3, 1 - 1e-3]; minimum
/// value 1 at mean 0.5, symmetric about it.
Tensor sparsity_penalty(const Tensor& pc);

/// Unweighted sum of the enabled terms (per-term alphas are already inside
/// the terms). Undefined tensors stand for terms that were never built.
std::pair<Tensor, LossBreakdown> total_loss(const Tensor& img, const Tensor& feat,
                                            const Tensor& ctx, const Tensor& sparse,
                                            const LossWeights& weights);

/// Constant b x b tensor of a covariance model's inverse.
Tensor sinv_tensor(const CovarianceModel& cov);

/// Diagonal inverse-covariance of channelwise feature differences (variance
/// across pixels per channel, ridge-stabilized), as a constant c x c tensor.
/// Runs untaped regardless of the inputs' tape state.
Tensor feature_sinv_diag(const Tensor& f1, const Tensor& f2, double ridge_scale = 1e-6);

}  // namespace changedet
