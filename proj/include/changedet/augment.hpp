#pragma once

#include <cstdint>
#include <utility>

#include "changedet/image.hpp"
#include "changedet/rng.hpp"

namespace changedet {

/// Photometric jitter ranges (multiplicative, all containing 1) plus additive
/// Gaussian noise. Hue shifts are fractions of the hue circle.
struct AugmentationPolicy {
    float brightness_lo = 0.8f, brightness_hi = 1.2f;
    float contrast_lo = 0.8f, contrast_hi = 1.2f;
    float saturation_lo = 0.8f, saturation_hi = 1.2f;
    float hue_lo = -0.05f, hue_hi = 0.05f;
    float noise_sigma = 0.02f;

    static AugmentationPolicy identity() {
        return {1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 0.0f, 0.0f, 0.0f};
    }
};

/// Random brightness, contrast, saturation and hue jitter, applied in that
/// fixed order with factors drawn uniformly from the policy ranges (one draw
/// per op, in application order). Clamped to [0, 1] after each op; identity
/// factors short-circuit bit-exactly. Contrast blends with the per-image
/// scalar mean; saturation blends with per-pixel Rec.601 luma.
MultiBandImage color_jitter(const MultiBandImage& rgb, const AugmentationPolicy& policy,
                            SeededRng& rng);

/// Adds i.i.d. zero-mean Gaussian noise from the seeded stream, clamps to
/// [0, 1]. sigma = 0 is a bit-exact identity.
MultiBandImage add_gaussian_noise(const MultiBandImage& img, float sigma, SeededRng& rng);

/// Independent jitter+noise draws for each temporal branch, sub-streamed from
/// (seed, iteration) so any iteration is reproducible in isolation.
std::pair<MultiBandImage, MultiBandImage> augment_pair(const MultiBandImage& img1,
                                                       const MultiBandImage& img2,
                                                       const AugmentationPolicy& policy,
                                                       uint64_t seed, int64_t iteration);

}  // namespace changedet
