#include "changedet/augment.hpp"

#include <algorithm>
#include <cmath>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double maxc = std::max({r, g, b});
    const double minc = std::min({r, g, b});
    v = maxc;
    const double d = maxc - minc;
    if (d <= 0.0 || maxc <= 0.0) {
        h = 0.0;
        s = 0.0;
        return;
    }
    s = d / maxc;
    if (maxc == r)
        h = (g - b) / d;
    else if (maxc == g)
        h = 2.0 + (b - r) / d;
    else
        h = 4.0 + (r - g) / d;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    if (s <= 0.0) {
        r = g = b = v;
        return;
    }
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int sector = std::min(5, static_cast<int>(hh));
    const double f = hh - sector;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace

MultiBandImage color_jitter(const MultiBandImage& rgb, const AugmentationPolicy& policy,
                            SeededRng& rng) {
    if (rgb.bands != 3)
        throw ContractViolation("color_jitter expects a 3-channel image, got " +
                                std::to_string(rgb.bands) + " bands");
    const double fb = rng.uniform(policy.brightness_lo, policy.brightness_hi);
    const double fc = rng.uniform(policy.contrast_lo, policy.contrast_hi);
    const double fs = rng.uniform(policy.saturation_lo, policy.saturation_hi);
    const double dh = rng.uniform(policy.hue_lo, policy.hue_hi);

    MultiBandImage out = rgb;
    const int64_t n = out.pixel_count();
    float* r = out.values.data();
    float* g = out.values.data() + n;
    float* b = out.values.data() + 2 * n;

    if (fb != 1.0) {
        for (size_t i = 0; i < out.values.size(); ++i)
            out.values[i] = clamp01(static_cast<double>(out.values[i]) * fb);
    }
    if (fc != 1.0) {
        double m = 0.0;
        for (float v : out.values) m += v;
        m /= static_cast<double>(out.values.size());
        for (size_t i = 0; i < out.values.size(); ++i)
            out.values[i] = clamp01(m + fc * (static_cast<double>(out.values[i]) - m));
    }
    if (fs != 1.0) {
        for (int64_t i = 0; i < n; ++i) {
            const double luma = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
            r[i] = clamp01(luma + fs * (r[i] - luma));
            g[i] = clamp01(luma + fs * (g[i] - luma));
            b[i] = clamp01(luma + fs * (b[i] - luma));
        }
    }
    if (dh != 0.0) {
        for (int64_t i = 0; i < n; ++i) {
            double h, s, v, rr, gg, bb;
            rgb_to_hsv(r[i], g[i], b[i], h, s, v);
            hsv_to_rgb(h + dh, s, v, rr, gg, bb);
            r[i] = clamp01(rr);
            g[i] = clamp01(gg);
            b[i] = clamp01(bb);
        }
    }
    return out;
}

MultiBandImage add_gaussian_noise(const MultiBandImage& img, float sigma, SeededRng& rng) {
    if (sigma < 0.0f) throw ContractViolation("add_gaussian_noise: sigma must be >= 0");
    if (sigma == 0.0f) return img;
    MultiBandImage out = img;
    for (float& v : out.values)
        v = clamp01(static_cast<double>(v) + static_cast<double>(sigma) * rng.gaussian());
    return out;
}

std::pair<MultiBandImage, MultiBandImage> augment_pair(const MultiBandImage& img1,
                                                       const MultiBandImage& img2,
                                                       const AugmentationPolicy& policy,
                                                       uint64_t seed, int64_t iteration) {
    SeededRng rng1 = SeededRng::substream(seed, static_cast<uint64_t>(iteration), 1);
    SeededRng rng2 = SeededRng::substream(seed, static_cast<uint64_t>(iteration), 2);
    MultiBandImage a = add_gaussian_noise(color_jitter(img1, policy, rng1), policy.noise_sigma, rng1);
    MultiBandImage b = add_gaussian_noise(color_jitter(img2, policy, rng2), policy.noise_sigma, rng2);
    return {std::move(a), std::move(b)};
}

}  // namespace changedet
