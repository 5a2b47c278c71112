#include "changedet/losses.hpp"

#include <cmath>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

constexpr double kSparsityClamp = 1e-3;

Tensor one_minus(const Tensor& t) { return add_scalar(scale(t, -1.0), 1.0); }

}  // namespace

Tensor weighted_mahalanobis(const Tensor& diffs, const Tensor& weights, const Tensor& sinv) {
    if (diffs.rank() != 4 || weights.rank() != 4)
        throw ContractViolation("weighted_mahalanobis expects rank-4 diffs and weights");
    const int64_t b = diffs.dim(1);
    if (sinv.rank() != 2 || sinv.dim(0) != b || sinv.dim(1) != b)
        throw ContractViolation("weighted_mahalanobis: sinv must be " + std::to_string(b) + "x" +
                                std::to_string(b) + ", got " + shape_to_string(sinv.shape()));
    if (sinv.requires_grad())
        throw ContractViolation("weighted_mahalanobis: sinv must be a constant");
    Tensor v = scale_by_map(diffs, weights);
    Tensor mixed = conv2d(v, sinv.reshaped({b, b, 1, 1}), Tensor(), 1, 0);
    // relu guards the quadratic form against tiny negative rounding
    Tensor q = relu(reduce(ReduceOp::sum, mul(v, mixed), {1}, true));
    return mean(sqrt(q));
}

Tensor image_domain_loss(const Tensor& diffs, const Tensor& pc, const Tensor& sinv,
                         double alpha_img) {
    return add(scale(weighted_mahalanobis(diffs, pc, sinv), -alpha_img),
               weighted_mahalanobis(diffs, one_minus(pc), sinv));
}

Tensor feature_domain_loss(const std::vector<Tensor>& feats1, const std::vector<Tensor>& feats2,
                           const Tensor& pc, const std::vector<double>& alpha_feat,
                           const std::vector<Tensor>& sinv_per_layer) {
    if (feats1.size() != feats2.size() || feats1.size() != sinv_per_layer.size())
        throw ContractViolation("feature_domain_loss: layer list lengths differ");
    if (feats1.empty()) throw ContractViolation("feature_domain_loss: no layers");
    Tensor total;
    for (size_t l = 0; l < feats1.size(); ++l) {
        const double alpha = l < alpha_feat.size() ? alpha_feat[l] : 1.0;
        Tensor fd = sub(feats1[l], feats2[l]);
        Tensor w = nearest_downsample(pc, feats1[l].dim(2), feats1[l].dim(3));
        Tensor term = add(scale(weighted_mahalanobis(fd, w, sinv_per_layer[l]), -alpha),
                          weighted_mahalanobis(fd, one_minus(w), sinv_per_layer[l]));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor context_consistency_loss(const std::vector<Tensor>& feats1,
                                const std::vector<Tensor>& feats2,
                                const std::vector<Tensor>& feats1_aug,
                                const std::vector<Tensor>& feats2_aug, bool normalized,
                                bool stop_gradient) {
    if (feats1.size() != feats1_aug.size() || feats2.size() != feats2_aug.size() ||
        feats1.size() != feats2.size())
        throw ContractViolation("context_consistency_loss: layer list lengths differ");
    if (feats1.empty()) throw ContractViolation("context_consistency_loss: no layers");
    Tensor total;
    for (size_t l = 0; l < feats1.size(); ++l) {
        Tensor o1 = stop_gradient ? feats1[l].detached() : feats1[l];
        Tensor o2 = stop_gradient ? feats2[l].detached() : feats2[l];
        Tensor d1 = abs(sub(o1, feats1_aug[l]));
        Tensor d2 = abs(sub(o2, feats2_aug[l]));
        Tensor term = normalized ? add(mean(d1), mean(d2)) : add(sum(d1), sum(d2));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

Tensor sparsity_penalty(const Tensor& pc) {
    // sin_pi keeps the minimum at mean 0.5 an exact stationary point
    Tensor m = clamp(mean(pc), kSparsityClamp, 1.0 - kSparsityClamp);
    return reciprocal(sin_pi(m));
}

std::pair<Tensor, LossBreakdown> total_loss(const Tensor& img, const Tensor& feat,
                                            const Tensor& ctx, const Tensor& sparse,
                                            const LossWeights& weights) {
    LossBreakdown breakdown;
    Tensor total;
    auto take = [&total](const Tensor& term, bool enabled, const char* name) {
        if (!enabled) return 0.0;
        if (!term.defined())
            throw ContractViolation(std::string("total_loss: enabled term '") + name +
                                    "' was not provided");
        total = total.defined() ? add(total, term) : term;
        return static_cast<double>(term.item());
    };
    breakdown.img = take(img, weights.enable_img, "img");
    breakdown.feat = take(feat, weights.enable_feat, "feat");
    breakdown.ctx = take(ctx, weights.enable_ctx, "ctx");
    breakdown.sparse = take(sparse, weights.enable_sparse, "sparse");
    if (!total.defined()) throw ContractViolation("total_loss: every term is disabled");
    breakdown.total = static_cast<double>(total.item());
    return {total, breakdown};
}

Tensor sinv_tensor(const CovarianceModel& cov) {
    std::vector<float> values(cov.sinv.size());
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(cov.sinv[i]);
    return Tensor::from_data({cov.bands, cov.bands}, std::move(values));
}

Tensor feature_sinv_diag(const Tensor& f1, const Tensor& f2, double ridge_scale) {
    if (f1.shape() != f2.shape() || f1.rank() != 4)
        throw ContractViolation("feature_sinv_diag: features must share a rank-4 shape");
    const int64_t c = f1.dim(1);
    const int64_t hw = f1.dim(2) * f1.dim(3);
    if (hw < 2) throw ContractViolation("feature_sinv_diag: need at least 2 spatial cells");
    std::vector<double> var(static_cast<size_t>(c), 0.0);
    double var_sum = 0.0;
    for (int64_t ci = 0; ci < c; ++ci) {
        const float* a = f1.data() + ci * hw;
        const float* b = f2.data() + ci * hw;
        double m = 0.0;
        for (int64_t i = 0; i < hw; ++i) m += static_cast<double>(a[i]) - b[i];
        m /= static_cast<double>(hw);
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
            const double d = (static_cast<double>(a[i]) - b[i]) - m;
            acc += d * d;
        }
        var[static_cast<size_t>(ci)] = acc / static_cast<double>(hw - 1);
        var_sum += var[static_cast<size_t>(ci)];
    }
    const double ridge = std::max(ridge_scale * var_sum / static_cast<double>(c), 1e-12);
    std::vector<float> sinv(static_cast<size_t>(c * c), 0.0f);
    for (int64_t ci = 0; ci < c; ++ci)
        sinv[static_cast<size_t>(ci * c + ci)] =
            static_cast<float>(1.0 / (var[static_cast<size_t>(ci)] + ridge));
    return Tensor::from_data({c, c}, std::move(sinv));
}

}  // namespace changedet
