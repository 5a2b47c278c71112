#include "changedet/preprocess.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void check_pair_shapes(const char* op, const MultiBandImage& a, const MultiBandImage& b) {
    if (a.height != b.height || a.width != b.width || a.bands != b.bands)
        throw ContractViolation(std::string(op) + ": image shapes differ (" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                                std::to_string(a.bands) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + "x" + std::to_string(b.bands) + ")");
}

}  // namespace

int PolynomialKernel::expansion_dim(Kind kind, int bands) {
    switch (kind) {
        case Kind::identity:
            return bands;
        case Kind::poly2:
            return bands + bands * (bands + 1) / 2 + 1;
        case Kind::root2:
            return bands + bands * (bands - 1) / 2;
    }
    throw ContractViolation("unknown kernel kind");
}

template <typename In>
static void expand_impl(PolynomialKernel::Kind kind, int b, const In* in, double* out) {
    int k = 0;
    for (int i = 0; i < b; ++i) out[k++] = static_cast<double>(in[i]);
    switch (kind) {
        case PolynomialKernel::Kind::identity:
            break;
        case PolynomialKernel::Kind::poly2:
            for (int i = 0; i < b; ++i)
                for (int j = i; j < b; ++j)
                    out[k++] = static_cast<double>(in[i]) * static_cast<double>(in[j]);
            out[k++] = 1.0;
            break;
        case PolynomialKernel::Kind::root2:
            for (int i = 0; i < b; ++i)
                for (int j = i + 1; j < b; ++j) {
                    const double p = static_cast<double>(in[i]) * static_cast<double>(in[j]);
                    out[k++] = std::sqrt(p > 0.0 ? p : 0.0);
                }
            break;
    }
}

void PolynomialKernel::expand(const float* in, double* out) const {
    expand_impl(kind, input_bands, in, out);
}

void PolynomialKernel::expand(const double* in, double* out) const {
    expand_impl(kind, input_bands, in, out);
}

PolynomialKernel::Kind parse_kernel_kind(const std::string& name) {
    if (name == "identity") return PolynomialKernel::Kind::identity;
    if (name == "poly2") return PolynomialKernel::Kind::poly2;
    if (name == "root2") return PolynomialKernel::Kind::root2;
    throw ContractViolation("unknown polynomial kernel '" + name +
                            "' (expected identity, poly2 or root2)");
}

std::string kernel_kind_name(PolynomialKernel::Kind kind) {
    switch (kind) {
        case PolynomialKernel::Kind::identity:
            return "identity";
        case PolynomialKernel::Kind::poly2:
            return "poly2";
        case PolynomialKernel::Kind::root2:
            return "root2";
    }
    return "?";
}

int default_pcc_beta(int height, int width) {
    const double hw = static_cast<double>(height) * static_cast<double>(width);
    const int beta = static_cast<int>(std::floor(std::sqrt(hw / 4096.0)));
    return beta < 1 ? 1 : beta;
}

Samples downsample_uniform(const MultiBandImage& img, int beta) {
    if (beta < 1) throw ContractViolation("downsample_uniform: beta must be >= 1");
    if (beta > img.height || beta > img.width)
        throw ContractViolation("downsample_uniform: beta " + std::to_string(beta) +
                                " exceeds extents " + std::to_string(img.height) + "x" +
                                std::to_string(img.width));
    const int gh = (img.height + beta - 1) / beta;
    const int gw = (img.width + beta - 1) / beta;
    Samples out;
    out.rows = static_cast<int64_t>(gh) * gw;
    out.cols = img.bands;
    out.values.resize(static_cast<size_t>(out.rows * out.cols));
    int64_t r = 0;
    for (int y = 0; y < img.height; y += beta)
        for (int x = 0; x < img.width; x += beta, ++r)
            for (int b = 0; b < img.bands; ++b)
                out.values[static_cast<size_t>(r * out.cols + b)] = img.at(y, x, b);
    return out;
}

Samples kernel_expand(const Samples& samples, const PolynomialKernel& kernel) {
    if (kernel.input_bands != samples.cols)
        throw ContractViolation("kernel_expand: kernel bands " +
                                std::to_string(kernel.input_bands) + " != sample cols " +
                                std::to_string(samples.cols));
    Samples out;
    out.rows = samples.rows;
    out.cols = kernel.expansion_dim();
    out.values.resize(static_cast<size_t>(out.rows * out.cols));
    for (int64_t r = 0; r < samples.rows; ++r)
        kernel.expand(samples.values.data() + r * samples.cols, out.values.data() + r * out.cols);
    return out;
}

ColorMapping fit_pcc(const Samples& pre, const Samples& post, const PolynomialKernel& kernel) {
    if (pre.rows != post.rows) throw ContractViolation("fit_pcc: sample counts differ");
    const Samples rho = kernel_expand(pre, kernel);
    const int64_t n = rho.rows;
    const int64_t d = rho.cols;
    const int64_t b = post.cols;
    if (n < d)
        throw InsufficientSamplesError("fit_pcc: " + std::to_string(n) + " samples for " +
                                       std::to_string(d) + " unknowns");

    // row-major N x d data seen as a column-major d x N matrix
    Eigen::Map<const MatrixXd> r(rho.values.data(), d, n);
    Eigen::Map<const MatrixXd> y(post.values.data(), b, n);
    MatrixXd gram = r * r.transpose();  // d x d
    MatrixXd rhs = r * y.transpose();   // d x b
    if (!gram.allFinite() || !rhs.allFinite())
        throw DegenerateInputError("fit_pcc: non-finite normal equations");

    const double ridge = 1e-6 * gram.trace() / static_cast<double>(d);
    MatrixXd reg = gram;
    reg.diagonal().array() += ridge > 0.0 ? ridge : 1e-12;
    Eigen::LDLT<MatrixXd> ldlt(reg);
    MatrixXd m = ldlt.solve(rhs);
    // Two refinement passes against the unregularized system strip the ridge
    // bias whenever the Gram matrix is actually well posed.
    for (int pass = 0; pass < 2; ++pass) m += ldlt.solve(rhs - gram * m);
    if (!m.allFinite()) throw DegenerateInputError("fit_pcc: solve produced non-finite mapping");

    ColorMapping mapping;
    mapping.kernel = kernel;
    mapping.output_bands = static_cast<int>(b);
    mapping.m.resize(static_cast<size_t>(d * b));
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < b; ++j) mapping.m[static_cast<size_t>(i * b + j)] = m(i, j);

    double sq = 0.0;
    for (int64_t s = 0; s < n; ++s)
        for (int64_t j = 0; j < b; ++j) {
            double pred = 0.0;
            for (int64_t i = 0; i < d; ++i)
                pred += rho.values[static_cast<size_t>(s * d + i)] *
                        mapping.m[static_cast<size_t>(i * b + j)];
            const double e = pred - post.values[static_cast<size_t>(s * b + j)];
            sq += e * e;
        }
    mapping.rms_residual = std::sqrt(sq / static_cast<double>(n * b));
    return mapping;
}

MultiBandImage apply_pcc(const MultiBandImage& img, const ColorMapping& mapping) {
    if (mapping.kernel.input_bands != img.bands)
        throw ContractViolation("apply_pcc: mapping expects " +
                                std::to_string(mapping.kernel.input_bands) + " bands, image has " +
                                std::to_string(img.bands));
    const int d = mapping.kernel.expansion_dim();
    const int b = mapping.output_bands;
    MultiBandImage out = MultiBandImage::zeros(img.height, img.width, b);
    std::vector<double> spectrum(static_cast<size_t>(img.bands));
    std::vector<double> expanded(static_cast<size_t>(d));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.bands; ++c) spectrum[static_cast<size_t>(c)] = img.at(y, x, c);
            mapping.kernel.expand(spectrum.data(), expanded.data());
            for (int j = 0; j < b; ++j) {
                double v = 0.0;
                for (int i = 0; i < d; ++i)
                    v += expanded[static_cast<size_t>(i)] *
                         mapping.m[static_cast<size_t>(i * b + j)];
                out.at(y, x, j) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
        }
    return out;
}

std::vector<float> image_diffs(const MultiBandImage& a, const MultiBandImage& b) {
    check_pair_shapes("image_diffs", a, b);
    std::vector<float> diffs(a.values.size());
    for (size_t i = 0; i < diffs.size(); ++i) diffs[i] = a.values[i] - b.values[i];
    return diffs;
}

CovarianceModel estimate_covariance(const std::vector<float>& diffs, int height, int width,
                                    int bands, double ridge_scale) {
    const int64_t n = static_cast<int64_t>(height) * width;
    if (n < 2) throw ContractViolation("estimate_covariance: need at least 2 pixels");
    if (static_cast<int64_t>(diffs.size()) != n * bands)
        throw ContractViolation("estimate_covariance: buffer size mismatch");

    VectorXd mean = VectorXd::Zero(bands);
    for (int c = 0; c < bands; ++c) {
        double s = 0.0;
        const float* plane = diffs.data() + static_cast<size_t>(c) * n;
        for (int64_t i = 0; i < n; ++i) s += plane[i];
        mean(c) = s / static_cast<double>(n);
    }
    MatrixXd s = MatrixXd::Zero(bands, bands);
    for (int ci = 0; ci < bands; ++ci) {
        const float* pi = diffs.data() + static_cast<size_t>(ci) * n;
        for (int cj = ci; cj < bands; ++cj) {
            const float* pj = diffs.data() + static_cast<size_t>(cj) * n;
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += (pi[i] - mean(ci)) * (pj[i] - mean(cj));
            s(ci, cj) = s(cj, ci) = acc / static_cast<double>(n - 1);
        }
    }

    // ridge_scale == 0 disables regularization entirely; otherwise a floor
    // keeps a zero-variance field invertible
    double ridge = 0.0;
    if (ridge_scale > 0.0)
        ridge = std::max(ridge_scale * s.trace() / static_cast<double>(bands), 1e-12);
    s.diagonal().array() += ridge;

    MatrixXd sinv = Eigen::LDLT<MatrixXd>(s).solve(MatrixXd::Identity(bands, bands));

    CovarianceModel model;
    model.bands = bands;
    model.ridge = ridge;
    model.s.assign(s.data(), s.data() + bands * bands);  // symmetric, storage order moot
    model.sinv.assign(sinv.data(), sinv.data() + bands * bands);
    return model;
}

DifferenceImage difference_image(const MultiBandImage& a, const MultiBandImage& b,
                                 const CovarianceModel& cov) {
    check_pair_shapes("difference_image", a, b);
    if (cov.bands != a.bands)
        throw ContractViolation("difference_image: covariance bands mismatch");
    DifferenceImage out;
    out.height = a.height;
    out.width = a.width;
    out.bands = a.bands;
    out.diffs = image_diffs(a, b);
    const int64_t n = static_cast<int64_t>(a.height) * a.width;
    out.values.resize(static_cast<size_t>(n));
    std::vector<double> d(static_cast<size_t>(a.bands));
    for (int64_t p = 0; p < n; ++p) {
        for (int c = 0; c < a.bands; ++c)
            d[static_cast<size_t>(c)] = out.diffs[static_cast<size_t>(c) * n + p];
        double q = 0.0;
        for (int ci = 0; ci < a.bands; ++ci) {
            double row = 0.0;
            for (int cj = 0; cj < a.bands; ++cj)
                row += cov.sinv[static_cast<size_t>(ci * a.bands + cj)] *
                       d[static_cast<size_t>(cj)];
            q += d[static_cast<size_t>(ci)] * row;
        }
        out.values[static_cast<size_t>(p)] =
            static_cast<float>(std::sqrt((q > 0.0 ? q : 0.0) + 1e-12));
    }
    return out;
}

}  // namespace changedet
