#include "changedet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "changedet/errors.hpp"
#include "changedet/rng.hpp"

namespace changedet {

namespace {

/// Bilinearly interpolated random lattice, one octave of value noise.
std::vector<float> value_noise(int h, int w, int cell, float amplitude, SeededRng& rng) {
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<float> grid(static_cast<size_t>(gh) * gw);
    for (float& v : grid) v = static_cast<float>(rng.uniform(-amplitude, amplitude));
    std::vector<float> out(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double fy = static_cast<double>(y) / cell;
            const double fx = static_cast<double>(x) / cell;
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const double ty = fy - y0, tx = fx - x0;
            const double v00 = grid[static_cast<size_t>(y0 * gw + x0)];
            const double v01 = grid[static_cast<size_t>(y0 * gw + x0 + 1)];
            const double v10 = grid[static_cast<size_t>((y0 + 1) * gw + x0)];
            const double v11 = grid[static_cast<size_t>((y0 + 1) * gw + x0 + 1)];
            out[static_cast<size_t>(y * w + x)] = static_cast<float>(
                (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11));
        }
    return out;
}

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

}  // namespace

SyntheticPair make_synthetic_pair(const SyntheticSpec& spec) {
    if (spec.bands != 3) throw ContractViolation("synthetic pair generator produces 3 bands");
    if (spec.square >= spec.height || spec.square >= spec.width)
        throw ContractViolation("synthetic square exceeds the image extents");
    SeededRng rng(spec.seed);
    const int h = spec.height, w = spec.width;
    const int64_t n = static_cast<int64_t>(h) * w;

    // shared base texture: a luminance field plus small per-band tints
    std::vector<float> luma = value_noise(h, w, std::max(4, h / 8), 0.28f, rng);
    std::vector<float> detail = value_noise(h, w, 4, 0.06f, rng);
    MultiBandImage base = MultiBandImage::zeros(h, w, 3);
    for (int c = 0; c < 3; ++c) {
        std::vector<float> tint = value_noise(h, w, std::max(4, h / 4), 0.08f, rng);
        for (int64_t i = 0; i < n; ++i)
            base.values[static_cast<size_t>(c) * n + static_cast<size_t>(i)] =
                clamp01(0.5 + luma[static_cast<size_t>(i)] + detail[static_cast<size_t>(i)] +
                        tint[static_cast<size_t>(i)]);
    }

    // square of altered content, fixed interior position
    const int y0 = h / 2 - spec.square / 2 + h / 8;
    const int x0 = w / 2 - spec.square / 2 - w / 10;

    SyntheticPair pair;
    pair.pre = MultiBandImage::zeros(h, w, 3);
    pair.post = MultiBandImage::zeros(h, w, 3);
    pair.reference.height = h;
    pair.reference.width = w;
    pair.reference.values.assign(static_cast<size_t>(n), 0);

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const size_t i = (static_cast<size_t>(c) * h + y) * w + x;
                const double b = base.at(y, x, c);
                double post = b * spec.gains[static_cast<size_t>(c)];
                const bool inside = y >= y0 && y < y0 + spec.square && x >= x0 &&
                                    x < x0 + spec.square;
                if (inside) post += spec.square_offset[static_cast<size_t>(c)];
                pair.pre.values[i] = clamp01(b + spec.noise_sigma * rng.gaussian());
                pair.post.values[i] = clamp01(post + spec.noise_sigma * rng.gaussian());
                if (c == 0 && inside)
                    pair.reference.values[static_cast<size_t>(y * w + x)] = 1;
            }
    return pair;
}

}  // namespace changedet
