#include "changedet/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

#include "changedet/errors.hpp"
#include "changedet/rng.hpp"

namespace changedet {

namespace {

/// Fan-in scaled uniform weights, bound sqrt(6 / fanIn); biases start at zero.
Tensor init_conv_weight(int out_ch, int in_ch, int k, SeededRng& rng) {
    const double fan_in = static_cast<double>(in_ch) * k * k;
    const double bound = std::sqrt(6.0 / fan_in);
    std::vector<float> w(static_cast<size_t>(out_ch) * in_ch * k * k);
    for (float& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    return Tensor::from_data({out_ch, in_ch, k, k}, std::move(w), true);
}

Tensor init_conv_bias(int out_ch) { return Tensor::zeros({out_ch}, true); }

}  // namespace

// ---------------------------------------------------------------------------
// DcpgNetwork
// ---------------------------------------------------------------------------

DcpgNetwork::DcpgNetwork(const DcpgConfig& config) : config_(config) {
    if (config.blocks < 1 || config.channels < 1)
        throw ContractViolation("dcpg: blocks and channels must be >= 1");
    if (config.kernel_size % 2 == 0 || config.kernel_size < 1)
        throw ContractViolation("dcpg: kernel size must be odd");
    branch_scale_ = static_cast<float>(1.0 / std::sqrt(2.0 * config.blocks));
    SeededRng rng(config.seed);
    const int c = config.channels, k = config.kernel_size;
    stem_w_ = init_conv_weight(c, config.input_channels, k, rng);
    stem_b_ = init_conv_bias(c);
    blocks_.resize(static_cast<size_t>(config.blocks));
    for (auto& block : blocks_) {
        block.w1 = init_conv_weight(c, c, k, rng);
        block.b1 = init_conv_bias(c);
        block.w2 = init_conv_weight(c, c, k, rng);
        block.b2 = init_conv_bias(c);
    }
    head_w_ = init_conv_weight(1, c, k, rng);
    head_b_ = init_conv_bias(1);
}

Tensor DcpgNetwork::forward(const Tensor& difference_map) const {
    if (difference_map.rank() != 4 || difference_map.dim(1) != config_.input_channels)
        throw ContractViolation("dcpg forward: expected 1x" +
                                std::to_string(config_.input_channels) + "xHxW, got " +
                                shape_to_string(difference_map.shape()));
    if (!difference_map.all_finite())
        throw ContractViolation("dcpg forward: non-finite input");
    const int pad = (config_.kernel_size - 1) / 2;
    Tensor x = conv2d(difference_map, stem_w_, stem_b_, 1, pad);
    for (const Block& block : blocks_) {
        Tensor y = relu(x);
        y = conv2d(y, block.w1, block.b1, 1, pad);
        y = relu(y);
        y = conv2d(y, block.w2, block.b2, 1, pad);
        x = add(x, scale(y, branch_scale_));
    }
    return sigmoid(conv2d(x, head_w_, head_b_, 1, pad));
}

std::vector<Tensor> DcpgNetwork::parameters() const {
    std::vector<Tensor> params{stem_w_, stem_b_};
    for (const Block& block : blocks_) {
        params.push_back(block.w1);
        params.push_back(block.b1);
        params.push_back(block.w2);
        params.push_back(block.b2);
    }
    params.push_back(head_w_);
    params.push_back(head_b_);
    return params;
}

int64_t DcpgNetwork::parameter_count() const {
    int64_t n = 0;
    for (const Tensor& p : parameters()) n += p.numel();
    return n;
}

int DcpgNetwork::receptive_field() const {
    return (2 * config_.blocks + 2) * (config_.kernel_size - 1) + config_.kernel_size;
}

// ---------------------------------------------------------------------------
// DfeNetwork
// ---------------------------------------------------------------------------

const std::array<int, 4>& DfeNetwork::stage_channels() {
    static const std::array<int, 4> plan{64, 128, 256, 512};
    return plan;
}

const std::array<int, 4>& DfeNetwork::stage_conv_counts() {
    static const std::array<int, 4> plan{2, 2, 3, 3};
    return plan;
}

DfeNetwork::DfeNetwork(const DfeConfig& config) : config_(config) {
    if (config.stages < 1 || config.stages > 4)
        throw ContractViolation("dfe: stages must be in 1..4");
    SeededRng rng(config.seed);
    int in_ch = 3;
    stages_.resize(static_cast<size_t>(config.stages));
    for (int s = 0; s < config.stages; ++s) {
        const int out_ch = stage_channels()[static_cast<size_t>(s)];
        for (int ci = 0; ci < stage_conv_counts()[static_cast<size_t>(s)]; ++ci) {
            Conv conv;
            conv.name = "stage" + std::to_string(s + 1) + ".conv" + std::to_string(ci + 1);
            conv.w = init_conv_weight(out_ch, in_ch, 3, rng);
            conv.b = init_conv_bias(out_ch);
            stages_[static_cast<size_t>(s)].push_back(std::move(conv));
            in_ch = out_ch;
        }
    }
}

std::vector<Tensor> DfeNetwork::forward(const Tensor& rgb) const {
    if (rgb.rank() != 4 || rgb.dim(1) != 3)
        throw ContractViolation("dfe forward: expected 1x3xHxW, got " +
                                shape_to_string(rgb.shape()));
    std::optional<NoGradScope> frozen;
    if (!config_.trainable) frozen.emplace();
    std::vector<Tensor> taps;
    Tensor x = rgb;
    for (const auto& stage : stages_) {
        for (const Conv& conv : stage) x = relu(conv2d(x, conv.w, conv.b, 1, 1));
        x = maxpool2x2(x);
        taps.push_back(x);
    }
    return taps;
}

std::vector<std::pair<std::string, Tensor>> DfeNetwork::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& stage : stages_)
        for (const Conv& conv : stage) {
            out.emplace_back(conv.name + ".weight", conv.w);
            out.emplace_back(conv.name + ".bias", conv.b);
        }
    return out;
}

std::vector<Tensor> DfeNetwork::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

// ---------------------------------------------------------------------------
// weight archive
// ---------------------------------------------------------------------------

const WeightArchive::Entry* WeightArchive::find(const std::string& name) const {
    for (const Entry& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

namespace {

constexpr char kMagic[4] = {'W', 'A', 'R', 'C'};

void put_u16(std::ostream& os, uint16_t v) {
    const char bytes[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(bytes, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
    char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(bytes, 4);
}

uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_weight_archive(const std::string& path, const WeightArchive& archive) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(archive.entries.size()));
    for (const auto& e : archive.entries) {
        if (e.name.size() > 0xffff) throw ContractViolation("archive entry name too long");
        put_u16(os, static_cast<uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(static_cast<char>(e.shape.size()));
        uint64_t count = 1;
        for (uint32_t d : e.shape) {
            put_u32(os, d);
            count *= d;
        }
        if (count != e.data.size())
            throw ContractViolation("archive entry '" + e.name + "' shape/payload mismatch");
        for (float v : e.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(os, bits);
        }
    }
    if (!os) throw IoError("write failed: " + path);
}

WeightArchive read_weight_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("not a weight archive: " + path);
    const uint32_t version = get_u32(is);
    if (version != 1)
        throw FormatError("unsupported weight archive version " + std::to_string(version));
    const uint32_t count = get_u32(is);
    WeightArchive archive;
    archive.entries.resize(count);
    for (auto& e : archive.entries) {
        const uint16_t name_len = get_u16(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const int rank = is.get();
        if (rank < 0 || rank > 8) throw FormatError("corrupt archive entry rank in " + path);
        uint64_t n = 1;
        e.shape.resize(static_cast<size_t>(rank));
        for (auto& d : e.shape) {
            d = get_u32(is);
            n *= d;
        }
        e.data.resize(n);
        for (float& v : e.data) {
            const uint32_t bits = get_u32(is);
            std::memcpy(&v, &bits, 4);
        }
        if (!is) throw FormatError("truncated weight archive: " + path);
    }
    return archive;
}

WeightArchive archive_from(const DfeNetwork& net) {
    WeightArchive archive;
    for (const auto& [name, t] : net.named_parameters()) {
        WeightArchive::Entry e;
        e.name = name;
        for (int64_t d : t.shape()) e.shape.push_back(static_cast<uint32_t>(d));
        e.data.assign(t.data(), t.data() + t.numel());
        archive.entries.push_back(std::move(e));
    }
    return archive;
}

void load_weights(const WeightArchive& archive, DfeNetwork& net, bool strict) {
    for (auto& [name, tensor] : net.named_parameters()) {
        const WeightArchive::Entry* entry = archive.find(name);
        if (!entry) {
            if (strict) throw WeightLoadError("weight archive is missing '" + name + "'");
            continue;  // keep the seeded initialization for this entry
        }
        const Shape& want = tensor.shape();
        bool match = entry->shape.size() == want.size();
        if (match)
            for (size_t i = 0; i < want.size(); ++i)
                if (static_cast<int64_t>(entry->shape[i]) != want[i]) match = false;
        if (!match) {
            std::string got = "[";
            for (size_t i = 0; i < entry->shape.size(); ++i)
                got += (i ? "x" : "") + std::to_string(entry->shape[i]);
            throw WeightLoadError("shape mismatch for '" + name + "': archive " + got +
                                  "], network " + shape_to_string(want));
        }
        std::memcpy(tensor.data(), entry->data.data(), entry->data.size() * sizeof(float));
    }
}

// ---------------------------------------------------------------------------
// band_select
// ---------------------------------------------------------------------------

MultiBandImage band_select(const MultiBandImage& img, const std::array<int, 3>& mapping) {
    for (int idx : mapping)
        if (idx < 0 || idx >= img.bands)
            throw ContractViolation("band_select: index " + std::to_string(idx) +
                                    " out of range for " + std::to_string(img.bands) + " bands");
    MultiBandImage out = MultiBandImage::zeros(img.height, img.width, 3);
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    for (int c = 0; c < 3; ++c)
        std::memcpy(out.values.data() + static_cast<size_t>(c) * plane,
                    img.values.data() + static_cast<size_t>(mapping[static_cast<size_t>(c)]) * plane,
                    plane * sizeof(float));
    return out;
}

}  // namespace changedet
