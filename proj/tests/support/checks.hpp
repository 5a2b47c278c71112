#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "changedet/rng.hpp"
#include "changedet/tensor.hpp"

namespace testsupport {

inline bool close_abs(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

inline bool close_rel(double a, double b, double tol, double floor = 0.0) {
    return std::fabs(a - b) <= tol * std::max({std::fabs(a), std::fabs(b), floor});
}

/// Gradient agreement rule used throughout the suite: relative for gradients
/// of magnitude >= 1, absolute below that. Float32 forward passes bound the
/// attainable finite-difference resolution, so a unit floor is applied.
inline bool grad_close(double analytic, double fd, double tol) {
    return std::fabs(analytic - fd) <= tol * std::max({std::fabs(analytic), std::fabs(fd), 1.0});
}

struct GradCheckFailure {
    size_t leaf = 0;
    int64_t index = 0;
    double analytic = 0.0;
    double fd = 0.0;
};

struct GradCheckReport {
    int checked = 0;
    int skipped_nonsmooth = 0;
    std::vector<GradCheckFailure> failures;
    bool ok() const { return failures.empty() && checked > 0; }
};

/// Central finite differences against the analytic tape gradients.
/// `loss_fn` rebuilds the scalar loss from the leaves' current payloads; the
/// oracle never touches the tape (forward evaluations run untaped). The
/// effective step is measured from the rounded float32 perturbations.
/// Components whose one-sided slopes disagree materially sit on a relu/abs
/// kink inside the bracket, where central differences are not a derivative
/// oracle; they are skipped and counted.
inline GradCheckReport check_gradients(const std::function<changedet::Tensor()>& loss_fn,
                                       const std::vector<changedet::Tensor>& leaves,
                                       changedet::SeededRng& rng, double eps = 1e-3,
                                       double tol = 1e-3, int samples_per_leaf = 32) {
    using namespace changedet;
    GradCheckReport report;

    std::vector<Tensor> grads;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        tape.backward(loss);
        for (const Tensor& leaf : leaves) grads.push_back(tape.grad(leaf));
    }
    double f_mid;
    {
        NoGradScope no_grad;
        f_mid = static_cast<double>(loss_fn().item());
    }

    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        const int64_t n = leaf.numel();
        std::vector<int64_t> indices;
        if (n <= samples_per_leaf) {
            for (int64_t i = 0; i < n; ++i) indices.push_back(i);
        } else {
            for (int s = 0; s < samples_per_leaf; ++s)
                indices.push_back(static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n)));
        }
        for (int64_t idx : indices) {
            float* p = leaf.data() + idx;
            const float saved = *p;
            const double analytic = static_cast<double>(grads[li].data()[idx]);

            auto central_fd = [&](double step, double& slope_l, double& slope_r) {
                const float hi = static_cast<float>(static_cast<double>(saved) + step);
                const float lo = static_cast<float>(static_cast<double>(saved) - step);
                double f_hi, f_lo;
                {
                    NoGradScope no_grad;
                    *p = hi;
                    f_hi = static_cast<double>(loss_fn().item());
                    *p = lo;
                    f_lo = static_cast<double>(loss_fn().item());
                }
                *p = saved;
                const double h_hi = static_cast<double>(hi) - static_cast<double>(saved);
                const double h_lo = static_cast<double>(saved) - static_cast<double>(lo);
                slope_r = (f_hi - f_mid) / h_hi;
                slope_l = (f_mid - f_lo) / h_lo;
                return (f_hi - f_lo) / (h_hi + h_lo);
            };

            double slope_l, slope_r;
            double fd = central_fd(eps, slope_l, slope_r);
            if (std::fabs(slope_r - slope_l) >
                10.0 * tol * std::max({std::fabs(slope_r), std::fabs(slope_l), 1.0})) {
                ++report.skipped_nonsmooth;
                continue;
            }
            // A kink inside the bracket biases the central quotient. Shrinking
            // the step can move the kink out; if it sits at the point itself,
            // the analytic value must equal one of the one-sided slopes (it is
            // a subderivative there). A wrong gradient matches neither side at
            // any step size.
            bool pass = grad_close(analytic, fd, tol) || grad_close(analytic, slope_l, tol) ||
                        grad_close(analytic, slope_r, tol);
            for (double step = eps / 2.0; !pass && step >= eps / 4.0 - 1e-18; step /= 2.0) {
                fd = central_fd(step, slope_l, slope_r);
                pass = grad_close(analytic, fd, tol) || grad_close(analytic, slope_l, tol) ||
                       grad_close(analytic, slope_r, tol);
            }
            ++report.checked;
            if (!pass) report.failures.push_back({li, idx, analytic, fd});
        }
    }
    return report;
}

inline changedet::Tensor random_tensor(const changedet::Shape& shape, changedet::SeededRng& rng,
                                       double lo = -2.0, double hi = 2.0,
                                       bool requires_grad = false) {
    std::vector<float> values(static_cast<size_t>(changedet::shape_numel(shape)));
    for (float& v : values) v = static_cast<float>(rng.uniform(lo, hi));
    return changedet::Tensor::from_data(shape, std::move(values), requires_grad);
}

/// Random values with an excluded band around the given kink points, for
/// checking subgradient conventions away from the non-smooth set.
inline changedet::Tensor random_tensor_away_from(const changedet::Shape& shape,
                                                 changedet::SeededRng& rng,
                                                 const std::vector<double>& kinks, double margin,
                                                 double lo = -2.0, double hi = 2.0,
                                                 bool requires_grad = false) {
    std::vector<float> values(static_cast<size_t>(changedet::shape_numel(shape)));
    for (float& v : values) {
        double x;
        bool ok;
        do {
            x = rng.uniform(lo, hi);
            ok = true;
            for (double k : kinks)
                if (std::fabs(x - k) < margin) ok = false;
        } while (!ok);
        v = static_cast<float>(x);
    }
    return changedet::Tensor::from_data(shape, std::move(values), requires_grad);
}

}  // namespace testsupport
