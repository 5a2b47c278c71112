#pragma once

#include <array>
#include <cstdint>

#include "changedet/image.hpp"

namespace changedet {

/// Recipe for a self-contained evaluation pair: a shared smooth base
/// texture, a square of altered content inserted into the post image, a
/// global per-band linear color shift on the post image, and independent
/// additive Gaussian noise on both.
struct SyntheticSpec {
    int height = 128;
    int width = 128;
    int bands = 3;
    int square = 24;
    uint64_t seed = 7;
    float noise_sigma = 0.02f;
    std::array<float, 3> gains{0.85f, 0.95f, 1.10f};
    std::array<float, 3> square_offset{0.35f, -0.25f, 0.20f};
};

struct SyntheticPair {
    MultiBandImage pre;
    MultiBandImage post;
    BinaryMask reference;  // 1 inside the inserted square
};

SyntheticPair make_synthetic_pair(const SyntheticSpec& spec);

}  // namespace changedet
