#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace changedet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

/// Dense float32 tensor of rank 0..4. Image-like data uses N x C x H x W.
/// Copies are shallow handles onto a shared payload; grad-tracked tensors
/// (requires_grad) act as differentiation leaves on an active Tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    /// Allocated but intentionally uninitialized payload.
    static Tensor uninitialized(const Shape& shape, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int64_t dim(int axis) const;
    int64_t numel() const;
    bool requires_grad() const;
    uint64_t id() const;

    float* data();
    const float* data() const;
    float item() const;  // contract: numel() == 1

    /// Deep copy with its own payload.
    Tensor clone() const;
    /// Deep copy that is never grad-tracked; cuts the tape link.
    Tensor detached() const;
    /// Same payload reinterpreted under a new shape (equal element count).
    Tensor reshaped(const Shape& shape) const;

    bool all_finite() const;

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of primitive operations. Ops executed under a TapeScope
/// whose inputs are grad-tracked (directly or transitively) append nodes;
/// backward() replays the record once, in reverse, accumulating exactly one
/// gradient per reachable leaf. Intermediate buffers are dropped eagerly.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Reverse sweep from a scalar root. Single-shot: the record is consumed.
    void backward(const Tensor& root);

    /// Gradient of a grad-tracked leaf after backward(); zero if the leaf was
    /// never touched by the root's history.
    Tensor grad(const Tensor& leaf) const;

    void clear();
    size_t node_count() const { return nodes_.size(); }

    // -- internal API used by the op implementations --
    bool is_tracked(const Tensor& t) const;
    void register_node(std::unique_ptr<detail::Node> node);
    std::vector<float>& grad_buffer(uint64_t id, int64_t numel);

private:
    std::vector<std::unique_ptr<detail::Node>> nodes_;
    std::unordered_set<uint64_t> tracked_;
    std::unordered_map<uint64_t, std::vector<float>> grads_;
    bool consumed_ = false;
};

/// Makes a tape the active recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
};

/// Suspends recording (forward-only evaluation) until destroyed.
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);        // subgradient at 0 is 0
Tensor sigmoid(const Tensor& x);     // output clamped inside (0,1); see impl
Tensor abs(const Tensor& x);         // sign convention: -1 / 0 / +1
Tensor sqrt(const Tensor& x);        // computes sqrt(x + 1e-12); contract x >= 0
Tensor sin(const Tensor& x);
Tensor sin_pi(const Tensor& x);  // sin(pi * x), argument scaled in double
Tensor reciprocal(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);  // gradient 0 outside [lo, hi]

/// Multiplies every channel of x (N x C x H x W) by map (N x 1 x H x W).
Tensor scale_by_map(const Tensor& x, const Tensor& map);

// ---- reductions (accumulate in double) ----
enum class ReduceOp { sum, mean };
Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes, bool keepdim);
Tensor sum(const Tensor& x);   // all axes -> scalar
Tensor mean(const Tensor& x);  // all axes -> scalar

// ---- spatial ----
/// Cross-correlation with odd square kernels: input N x C x H x W,
/// weight K x C x k x k, optional bias K. Differentiable in all three.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped). Ties
/// route the gradient to the first maximum in scan order.
Tensor maxpool2x2(const Tensor& x);

/// Nearest-neighbour downsampling of the spatial dims; source index per
/// output pixel is floor((dst + 0.5) * src/dst). Gradient routes to the
/// selected source pixel.
Tensor nearest_downsample(const Tensor& x, int64_t target_h, int64_t target_w);

// ---- optimizer ----
struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Bias-corrected Adam on in-place parameter payloads.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, const AdamConfig& config);

    /// One update from the gradients a consumed tape holds for the bound
    /// parameters (zero where a parameter was untouched).
    void step(const Tape& tape);
    void step(const std::vector<std::vector<float>>& grads);

    int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return config_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    AdamConfig config_;
    int64_t step_count_ = 0;
};

}  // namespace changedet
