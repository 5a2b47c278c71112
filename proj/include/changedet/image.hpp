#pragma once

#include <cstdint>
#include <vector>

#include "changedet/errors.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

/// Multi-band raster with planar (band-major) storage:
/// values[(band * height + y) * width + x]. Ingestion normalizes to [0, 1].
struct MultiBandImage {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<float> values;

    static MultiBandImage zeros(int h, int w, int b) {
        MultiBandImage img;
        img.height = h;
        img.width = w;
        img.bands = b;
        img.values.assign(static_cast<size_t>(h) * w * b, 0.0f);
        return img;
    }

    int64_t pixel_count() const { return static_cast<int64_t>(height) * width; }

    float at(int y, int x, int band) const {
        return values[(static_cast<size_t>(band) * height + y) * width + x];
    }
    float& at(int y, int x, int band) {
        return values[(static_cast<size_t>(band) * height + y) * width + x];
    }
};

/// Per-pixel change probabilities in (0, 1), row-major.
struct ChangeProbabilityMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;
};

/// Row-major {0,1} mask; 1 = change.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> values;
};

/// Interleaved 8-bit RGB, row-major.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> rgb;
};

/// 1 x bands x height x width tensor view of a raster (planar layouts match).
inline Tensor to_tensor(const MultiBandImage& img, bool requires_grad = false) {
    return Tensor::from_data({1, img.bands, img.height, img.width}, img.values, requires_grad);
}

/// Extracts a 1 x 1 x h x w probability tensor into map form.
inline ChangeProbabilityMap to_probability_map(const Tensor& t) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
        throw ContractViolation("probability map tensor must be 1x1xHxW, got " +
                                shape_to_string(t.shape()));
    ChangeProbabilityMap map;
    map.height = static_cast<int>(t.dim(2));
    map.width = static_cast<int>(t.dim(3));
    map.values.assign(t.data(), t.data() + t.numel());
    return map;
}

}  // namespace changedet
