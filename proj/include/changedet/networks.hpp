#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "changedet/image.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

struct DcpgConfig {
    int blocks = 32;
    int channels = 32;
    int kernel_size = 3;
    int input_channels = 1;
    uint64_t seed = 0;
};

/// Change-probability generator: a stem conv, `blocks` pre-activation
/// residual blocks (relu-conv-relu-conv with identity skip), and a sigmoid
/// head. All convs are stride-1 same-padding, so output extent equals input
/// extent. Residual branches carry a fixed 1/sqrt(2N) scale; without it the
/// activation variance doubles per block and the head saturates at N = 32.
class DcpgNetwork {
public:
    explicit DcpgNetwork(const DcpgConfig& config);

    /// 1 x 1 x h x w difference map -> probabilities strictly inside (0, 1).
    Tensor forward(const Tensor& difference_map) const;

    /// Parameters in fixed catalog order: stem w/b, per block w1/b1/w2/b2,
    /// head w/b. The order also defines seeded-init RNG consumption.
    std::vector<Tensor> parameters() const;
    int64_t parameter_count() const;
    const DcpgConfig& config() const { return config_; }

    /// Side length of the theoretical sensitivity footprint of one output
    /// pixel: (2N + 2) convolutions each widen it by kernel_size - 1.
    int receptive_field() const;

private:
    DcpgConfig config_;
    float branch_scale_;
    Tensor stem_w_, stem_b_;
    struct Block {
        Tensor w1, b1, w2, b2;
    };
    std::vector<Block> blocks_;
    Tensor head_w_, head_b_;
};

struct DfeConfig {
    int stages = 2;  // 1..4
    bool trainable = true;
    uint64_t seed = 0;
};

/// VGG-16-style feature extractor: stage l is a group of 3x3 conv+relu
/// layers followed by a 2x2 max-pool; taps are taken after each pool, so
/// stage l has spatial extent floor(h / 2^l). Channel plan 64/128/256/512
/// with 2/2/3/3 convs per stage. Expects 3-channel input in [0, 1].
class DfeNetwork {
public:
    explicit DfeNetwork(const DfeConfig& config);

    /// Feature taps F^1..F^L. With trainable=false the pass runs untaped, so
    /// no gradient ever reaches the parameters.
    std::vector<Tensor> forward(const Tensor& rgb) const;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    bool trainable() const { return config_.trainable; }
    const DfeConfig& config() const { return config_; }

    static const std::array<int, 4>& stage_channels();
    static const std::array<int, 4>& stage_conv_counts();

private:
    DfeConfig config_;
    struct Conv {
        std::string name;
        Tensor w, b;
    };
    std::vector<std::vector<Conv>> stages_;
};

/// Named float32 arrays with shapes; the external carrier for pretrained
/// feature-extractor weights.
struct WeightArchive {
    struct Entry {
        std::string name;
        std::vector<uint32_t> shape;
        std::vector<float> data;
    };
    std::vector<Entry> entries;

    const Entry* find(const std::string& name) const;
};

/// Binary layout (all integers and reals little-endian): magic "WARC",
/// u32 version = 1, u32 arrayCount, then per array u16 nameLen, UTF-8 name,
/// u8 rank, rank x u32 extents, row-major float32 payload.
WeightArchive read_weight_archive(const std::string& path);
void write_weight_archive(const std::string& path, const WeightArchive& archive);

/// Snapshot of a network's parameter catalog.
WeightArchive archive_from(const DfeNetwork& net);

/// Overwrites parameters from the archive. Missing entries are fatal under
/// strict, otherwise the seeded initialization is kept for them; shape
/// mismatches are always fatal. Errors name the offending entry.
void load_weights(const WeightArchive& archive, DfeNetwork& net, bool strict = true);

/// Channel-ordered extraction of three bands (repetition allowed).
MultiBandImage band_select(const MultiBandImage& img, const std::array<int, 3>& mapping);

}  // namespace changedet
