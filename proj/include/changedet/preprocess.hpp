#pragma once

#include <string>
#include <vector>

#include "changedet/image.hpp"

namespace changedet {

/// Spectral-vector expansion for polynomial color correction.
/// Monomial orders are fixed and documented per kind:
///   identity: [x_0 .. x_{b-1}]
///   poly2:    [x_0 .. x_{b-1}, x_i*x_j for i<=j lexicographic, 1]
///   root2:    [x_0 .. x_{b-1}, sqrt(x_i*x_j) for i<j lexicographic]
/// root2 is degree-1 homogeneous in the input (scale-aware).
struct PolynomialKernel {
    enum class Kind { identity, poly2, root2 };

    Kind kind = Kind::root2;
    int input_bands = 0;

    static int expansion_dim(Kind kind, int bands);
    int expansion_dim() const { return expansion_dim(kind, input_bands); }

    /// Expands one spectral vector (length input_bands) into `out`
    /// (length expansion_dim()).
    void expand(const float* in, double* out) const;
    void expand(const double* in, double* out) const;
};

PolynomialKernel::Kind parse_kernel_kind(const std::string& name);
std::string kernel_kind_name(PolynomialKernel::Kind kind);

/// Row-major sample matrix (rows = pixels, cols = bands or monomials).
struct Samples {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> values;

    double at(int64_t r, int64_t c) const { return values[static_cast<size_t>(r * cols + c)]; }
};

/// Closed-form color mapping: expanded pre-change spectra times m approximate
/// the post-change spectra. m is expansion_dim x bands, row-major.
struct ColorMapping {
    PolynomialKernel kernel;
    int output_bands = 0;
    std::vector<double> m;
    double rms_residual = 0.0;  // RMS over fitting samples and bands
};

/// b x b covariance with a ridge-regularized symmetric inverse.
struct CovarianceModel {
    int bands = 0;
    std::vector<double> s;     // row-major, includes the ridge diagonal
    std::vector<double> sinv;  // row-major
    double ridge = 0.0;
};

/// Mahalanobis dissimilarity per pixel plus the raw difference vectors
/// (planar b x h x w) retained for the loss terms.
struct DifferenceImage {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<float> values;  // h*w, nonnegative
    std::vector<float> diffs;   // planar band-major
};

/// Pixel spectra on a regular stride-beta grid starting at (0, 0), row-major
/// grid order; rows = ceil(h/beta) * ceil(w/beta).
Samples downsample_uniform(const MultiBandImage& img, int beta);

/// Applies the kernel expansion to every row.
Samples kernel_expand(const Samples& samples, const PolynomialKernel& kernel);

/// Least-squares fit of the mapping from kernel-expanded `pre` samples to
/// `post` samples via the ridge-stabilized normal equations.
ColorMapping fit_pcc(const Samples& pre, const Samples& post, const PolynomialKernel& kernel);

/// Maps every pixel spectrum through the fitted kernel mapping; output is
/// clamped to [0, 1]. The post-change image is never transformed.
MultiBandImage apply_pcc(const MultiBandImage& img, const ColorMapping& mapping);

/// Per-pixel difference vectors (planar b x h x w) of two equal-shape rasters.
std::vector<float> image_diffs(const MultiBandImage& a, const MultiBandImage& b);

/// Sample covariance (denominator n-1) of per-pixel difference vectors with
/// ridge_scale * trace/b added to the diagonal before inversion. A
/// ridge_scale of exactly 0 disables regularization.
CovarianceModel estimate_covariance(const std::vector<float>& diffs, int height, int width,
                                    int bands, double ridge_scale = 1e-6);

/// Eq-style Mahalanobis map: per pixel sqrt(d^T Sinv d + eps) with
/// d = a(i,j) - b(i,j); the difference vectors are retained.
DifferenceImage difference_image(const MultiBandImage& a, const MultiBandImage& b,
                                 const CovarianceModel& cov);

/// Default color-sampling stride: beta = floor(sqrt(h*w / 4096)), at least 1.
int default_pcc_beta(int height, int width);

}  // namespace changedet
