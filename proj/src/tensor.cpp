#include "changedet/tensor.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

std::atomic<uint64_t> g_next_id{1};

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CMapMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// C (MxN, row-major) = alpha * op(A) * op(B) + beta * C
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
          const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
          int64_t ldc) {
    CMapMat ma(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
    CMapMat mb(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
    MapMat mc(c, m, n, Eigen::OuterStride<>(ldc));
    if (beta == 0.0f) {
        if (!trans_a && !trans_b)
            mc.noalias() = alpha * (ma * mb);
        else if (trans_a && !trans_b)
            mc.noalias() = alpha * (ma.transpose() * mb);
        else if (!trans_a && trans_b)
            mc.noalias() = alpha * (ma * mb.transpose());
        else
            mc.noalias() = alpha * (ma.transpose() * mb.transpose());
    } else {
        if (beta != 1.0f) mc *= beta;
        if (!trans_a && !trans_b)
            mc.noalias() += alpha * (ma * mb);
        else if (trans_a && !trans_b)
            mc.noalias() += alpha * (ma.transpose() * mb);
        else if (!trans_a && trans_b)
            mc.noalias() += alpha * (ma * mb.transpose());
        else
            mc.noalias() += alpha * (ma.transpose() * mb.transpose());
    }
}

thread_local std::vector<Tape*> g_tape_stack;

Tape* active_tape() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

}  // namespace

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    uint64_t id = 0;
};

struct Node {
    uint64_t out_id = 0;
    virtual ~Node() = default;
    virtual void backward(const float* grad_out, Tape& tape) = 0;
    // Drops saved tensors once the node has been replayed.
    virtual void release() = 0;
};

}  // namespace detail

using detail::Node;
using detail::TensorImpl;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, bool requires_grad) {
    if (shape.size() > 4) throw ContractViolation("tensor rank > 4: " + shape_to_string(shape));
    for (int64_t d : shape)
        if (d < 1) throw ContractViolation("non-positive extent in shape " + shape_to_string(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->requires_grad = requires_grad;
    impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return impl;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto impl = make_impl(shape, requires_grad);
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    auto impl = make_impl(shape, requires_grad);
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw ContractViolation("data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_to_string(shape));
    auto impl = make_impl(shape, requires_grad);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data(Shape{}, {value}, requires_grad);
}

Tensor Tensor::uninitialized(const Shape& shape, bool requires_grad) {
    auto impl = make_impl(shape, requires_grad);
    impl->data.resize(static_cast<size_t>(shape_numel(shape)));
    return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const {
    if (!impl_) throw ContractViolation("undefined tensor");
    return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ContractViolation("axis " + std::to_string(axis) + " out of range for " +
                                shape_to_string(s));
    return s[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

uint64_t Tensor::id() const {
    if (!impl_) throw ContractViolation("undefined tensor");
    return impl_->id;
}

float* Tensor::data() {
    if (!impl_) throw ContractViolation("undefined tensor");
    return impl_->data.data();
}

const float* Tensor::data() const {
    if (!impl_) throw ContractViolation("undefined tensor");
    return impl_->data.data();
}

float Tensor::item() const {
    if (numel() != 1) throw ContractViolation("item() on non-scalar tensor " + shape_to_string(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    auto impl = make_impl(shape(), impl_->requires_grad);
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
    if (!impl_) throw ContractViolation("undefined tensor");
    auto impl = make_impl(impl_->shape, false);
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::reshaped(const Shape& shape) const {
    if (shape_numel(shape) != numel())
        throw ContractViolation("reshape " + shape_to_string(this->shape()) + " -> " +
                                shape_to_string(shape) + " changes element count");
    auto impl = make_impl(shape, impl_->requires_grad);
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
    for (float v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() = default;
Tape::~Tape() = default;

TapeScope::TapeScope(Tape& tape) { g_tape_stack.push_back(&tape); }
TapeScope::~TapeScope() { g_tape_stack.pop_back(); }

NoGradScope::NoGradScope() { g_tape_stack.push_back(nullptr); }
NoGradScope::~NoGradScope() { g_tape_stack.pop_back(); }

bool Tape::is_tracked(const Tensor& t) const {
    return t.requires_grad() || tracked_.count(t.id()) != 0;
}

void Tape::register_node(std::unique_ptr<Node> node) {
    tracked_.insert(node->out_id);
    nodes_.push_back(std::move(node));
}

std::vector<float>& Tape::grad_buffer(uint64_t id, int64_t numel) {
    auto& buf = grads_[id];
    if (buf.empty()) buf.assign(static_cast<size_t>(numel), 0.0f);
    return buf;
}

void Tape::backward(const Tensor& root) {
    if (consumed_) throw ContractViolation("tape already consumed by backward(); call clear()");
    if (root.numel() != 1)
        throw ContractViolation("backward root must be scalar, got " + shape_to_string(root.shape()));
    if (!is_tracked(root))
        throw ContractViolation("backward root is not reachable from any grad-tracked tensor");
    consumed_ = true;
    grads_[root.id()] = {1.0f};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* node = it->get();
        auto g = grads_.find(node->out_id);
        if (g == grads_.end()) continue;  // not on a path from the root
        node->backward(g->second.data(), *this);
        node->release();
        grads_.erase(g);  // intermediates are never read again
    }
}

Tensor Tape::grad(const Tensor& leaf) const {
    if (!leaf.requires_grad())
        throw ContractViolation("grad() queried for a tensor that is not grad-tracked");
    auto it = grads_.find(leaf.id());
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return Tensor::from_data(leaf.shape(), it->second);
}

void Tape::clear() {
    nodes_.clear();
    tracked_.clear();
    grads_.clear();
    consumed_ = false;
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                                " vs " + shape_to_string(b.shape()));
}

void axpy(std::vector<float>& acc, const float* g, const float* scale_src, int64_t n) {
    // acc += g * scale_src (or acc += g when scale_src is null)
    float* out = acc.data();
    if (scale_src) {
        for (int64_t i = 0; i < n; ++i) out[i] += g[i] * scale_src[i];
    } else {
        for (int64_t i = 0; i < n; ++i) out[i] += g[i];
    }
}

enum class UnaryKind { scale, add_scalar, relu, sigmoid, abs, sqrt, sin, sin_pi, reciprocal, clamp };

constexpr float kSqrtEps = 1e-12f;
constexpr float kSigmoidLo = 1e-6f;
constexpr float kSigmoidHi = 1.0f - 1e-6f;

struct UnaryNode final : Node {
    UnaryKind kind;
    Tensor in, out;
    double p0 = 0.0, p1 = 0.0;

    void backward(const float* g, Tape& tape) override {
        const int64_t n = in.numel();
        auto& acc = tape.grad_buffer(in.id(), n);
        const float* x = in.data();
        const float* y = out.data();
        float* d = acc.data();
        switch (kind) {
            case UnaryKind::scale: {
                const float c = static_cast<float>(p0);
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * c;
                break;
            }
            case UnaryKind::add_scalar:
                axpy(acc, g, nullptr, n);
                break;
            case UnaryKind::relu:
                for (int64_t i = 0; i < n; ++i)
                    if (x[i] > 0.0f) d[i] += g[i];
                break;
            case UnaryKind::sigmoid:
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * y[i] * (1.0f - y[i]);
                break;
            case UnaryKind::abs:
                for (int64_t i = 0; i < n; ++i) {
                    if (x[i] > 0.0f)
                        d[i] += g[i];
                    else if (x[i] < 0.0f)
                        d[i] -= g[i];
                }
                break;
            case UnaryKind::sqrt:
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * 0.5f / y[i];
                break;
            case UnaryKind::sin:
                for (int64_t i = 0; i < n; ++i) d[i] += g[i] * std::cos(x[i]);
                break;
            case UnaryKind::sin_pi: {
                // cos(pi x) written as sin(pi (1/2 - x)) so the derivative is
                // exactly zero at x = 1/2, making it a true stationary point
                constexpr double pi = 3.14159265358979323846;
                for (int64_t i = 0; i < n; ++i)
                    d[i] += static_cast<float>(static_cast<double>(g[i]) * pi *
                                               std::sin(pi * (0.5 - static_cast<double>(x[i]))));
                break;
            }
            case UnaryKind::reciprocal:
                for (int64_t i = 0; i < n; ++i) d[i] -= g[i] * y[i] * y[i];
                break;
            case UnaryKind::clamp: {
                const float lo = static_cast<float>(p0), hi = static_cast<float>(p1);
                for (int64_t i = 0; i < n; ++i)
                    if (x[i] >= lo && x[i] <= hi) d[i] += g[i];
                break;
            }
        }
    }

    void release() override {
        in = Tensor();
        out = Tensor();
    }
};

Tensor unary_op(UnaryKind kind, const Tensor& x, double p0 = 0.0, double p1 = 0.0) {
    const int64_t n = x.numel();
    Tensor out = Tensor::uninitialized(x.shape());
    const float* in = x.data();
    float* o = out.data();
    switch (kind) {
        case UnaryKind::scale: {
            const float c = static_cast<float>(p0);
            for (int64_t i = 0; i < n; ++i) o[i] = in[i] * c;
            break;
        }
        case UnaryKind::add_scalar: {
            const float c = static_cast<float>(p0);
            for (int64_t i = 0; i < n; ++i) o[i] = in[i] + c;
            break;
        }
        case UnaryKind::relu:
            for (int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;
            break;
        case UnaryKind::sigmoid:
            // Clamped away from exact 0/1: float32 sigmoid saturates beyond
            // |x| ~ 17 and downstream terms divide by these probabilities.
            for (int64_t i = 0; i < n; ++i) {
                const float v = in[i];
                float s;
                if (v >= 0.0f) {
                    s = 1.0f / (1.0f + std::exp(-v));
                } else {
                    const float e = std::exp(v);
                    s = e / (1.0f + e);
                }
                o[i] = std::min(std::max(s, kSigmoidLo), kSigmoidHi);
            }
            break;
        case UnaryKind::abs:
            for (int64_t i = 0; i < n; ++i) o[i] = std::fabs(in[i]);
            break;
        case UnaryKind::sqrt:
            for (int64_t i = 0; i < n; ++i) {
                if (in[i] < 0.0f)
                    throw ContractViolation("sqrt of negative value " + std::to_string(in[i]));
                o[i] = std::sqrt(in[i] + kSqrtEps);
            }
            break;
        case UnaryKind::sin:
            for (int64_t i = 0; i < n; ++i) o[i] = std::sin(in[i]);
            break;
        case UnaryKind::sin_pi: {
            constexpr double pi = 3.14159265358979323846;
            for (int64_t i = 0; i < n; ++i)
                o[i] = static_cast<float>(std::sin(pi * static_cast<double>(in[i])));
            break;
        }
        case UnaryKind::reciprocal:
            for (int64_t i = 0; i < n; ++i) o[i] = 1.0f / in[i];
            break;
        case UnaryKind::clamp: {
            const float lo = static_cast<float>(p0), hi = static_cast<float>(p1);
            for (int64_t i = 0; i < n; ++i) o[i] = std::min(std::max(in[i], lo), hi);
            break;
        }
    }
    if (Tape* tp = active_tape(); tp && tp->is_tracked(x)) {
        auto node = std::make_unique<UnaryNode>();
        node->kind = kind;
        node->in = x;
        node->out = out;
        node->p0 = p0;
        node->p1 = p1;
        node->out_id = out.id();
        tp->register_node(std::move(node));
    }
    return out;
}

enum class BinaryKind { add, sub, mul };

struct BinaryNode final : Node {
    BinaryKind kind;
    Tensor a, b;
    bool track_a = false, track_b = false;

    void backward(const float* g, Tape& tape) override {
        const int64_t n = a.numel();
        switch (kind) {
            case BinaryKind::add:
                if (track_a) axpy(tape.grad_buffer(a.id(), n), g, nullptr, n);
                if (track_b) axpy(tape.grad_buffer(b.id(), n), g, nullptr, n);
                break;
            case BinaryKind::sub:
                if (track_a) axpy(tape.grad_buffer(a.id(), n), g, nullptr, n);
                if (track_b) {
                    auto& acc = tape.grad_buffer(b.id(), n);
                    for (int64_t i = 0; i < n; ++i) acc[i] -= g[i];
                }
                break;
            case BinaryKind::mul:
                if (track_a) axpy(tape.grad_buffer(a.id(), n), g, b.data(), n);
                if (track_b) axpy(tape.grad_buffer(b.id(), n), g, a.data(), n);
                break;
        }
    }

    void release() override {
        a = Tensor();
        b = Tensor();
    }
};

Tensor binary_op(BinaryKind kind, const char* name, const Tensor& a, const Tensor& b) {
    check_same_shape(name, a, b);
    const int64_t n = a.numel();
    Tensor out = Tensor::uninitialized(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* o = out.data();
    switch (kind) {
        case BinaryKind::add:
            for (int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
            break;
        case BinaryKind::sub:
            for (int64_t i = 0; i < n; ++i) o[i] = pa[i] - pb[i];
            break;
        case BinaryKind::mul:
            for (int64_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
            break;
    }
    if (Tape* tp = active_tape()) {
        const bool ta = tp->is_tracked(a), tb = tp->is_tracked(b);
        if (ta || tb) {
            auto node = std::make_unique<BinaryNode>();
            node->kind = kind;
            node->a = a;
            node->b = b;
            node->track_a = ta;
            node->track_b = tb;
            node->out_id = out.id();
            tp->register_node(std::move(node));
        }
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinaryKind::mul, "mul", a, b); }
Tensor scale(const Tensor& x, double factor) { return unary_op(UnaryKind::scale, x, factor); }
Tensor add_scalar(const Tensor& x, double value) { return unary_op(UnaryKind::add_scalar, x, value); }
Tensor relu(const Tensor& x) { return unary_op(UnaryKind::relu, x); }
Tensor sigmoid(const Tensor& x) { return unary_op(UnaryKind::sigmoid, x); }
Tensor abs(const Tensor& x) { return unary_op(UnaryKind::abs, x); }
Tensor sqrt(const Tensor& x) { return unary_op(UnaryKind::sqrt, x); }
Tensor sin(const Tensor& x) { return unary_op(UnaryKind::sin, x); }
Tensor sin_pi(const Tensor& x) { return unary_op(UnaryKind::sin_pi, x); }
Tensor reciprocal(const Tensor& x) { return unary_op(UnaryKind::reciprocal, x); }

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) throw ContractViolation("clamp: lo > hi");
    return unary_op(UnaryKind::clamp, x, lo, hi);
}

// ---------------------------------------------------------------------------
// scale_by_map
// ---------------------------------------------------------------------------

namespace {

struct ScaleByMapNode final : Node {
    Tensor x, map;
    bool track_x = false, track_map = false;

    void backward(const float* g, Tape& tape) override {
        const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const int64_t hw = h * w;
        if (track_x) {
            auto& acc = tape.grad_buffer(x.id(), x.numel());
            const float* m = map.data();
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t ci = 0; ci < c; ++ci) {
                    float* d = acc.data() + (ni * c + ci) * hw;
                    const float* gp = g + (ni * c + ci) * hw;
                    const float* mp = m + ni * hw;
                    for (int64_t i = 0; i < hw; ++i) d[i] += gp[i] * mp[i];
                }
        }
        if (track_map) {
            auto& acc = tape.grad_buffer(map.id(), map.numel());
            const float* xv = x.data();
            for (int64_t ni = 0; ni < n; ++ni) {
                float* d = acc.data() + ni * hw;
                for (int64_t ci = 0; ci < c; ++ci) {
                    const float* gp = g + (ni * c + ci) * hw;
                    const float* xp = xv + (ni * c + ci) * hw;
                    for (int64_t i = 0; i < hw; ++i) d[i] += gp[i] * xp[i];
                }
            }
        }
    }

    void release() override {
        x = Tensor();
        map = Tensor();
    }
};

}  // namespace

Tensor scale_by_map(const Tensor& x, const Tensor& map) {
    if (x.rank() != 4 || map.rank() != 4)
        throw ContractViolation("scale_by_map expects rank-4 tensors");
    if (map.dim(1) != 1 || map.dim(0) != x.dim(0) || map.dim(2) != x.dim(2) ||
        map.dim(3) != x.dim(3))
        throw ContractViolation("scale_by_map: map " + shape_to_string(map.shape()) +
                                " incompatible with " + shape_to_string(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out = Tensor::uninitialized(x.shape());
    const float* xv = x.data();
    const float* mv = map.data();
    float* o = out.data();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const float* xp = xv + (ni * c + ci) * hw;
            const float* mp = mv + ni * hw;
            float* op = o + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] * mp[i];
        }
    if (Tape* tp = active_tape()) {
        const bool tx = tp->is_tracked(x), tm = tp->is_tracked(map);
        if (tx || tm) {
            auto node = std::make_unique<ScaleByMapNode>();
            node->x = x;
            node->map = map;
            node->track_x = tx;
            node->track_map = tm;
            node->out_id = out.id();
            tp->register_node(std::move(node));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace {

struct ReduceNode final : Node {
    Tensor in;
    Shape out_shape;
    std::vector<int> axes;  // normalized, sorted
    double inv_count = 1.0;  // 1/count for mean, 1 for sum

    void backward(const float* g, Tape& tape) override {
        const Shape& is = in.shape();
        const int r = static_cast<int>(is.size());
        auto& acc = tape.grad_buffer(in.id(), in.numel());
        // strides of the reduced (kept-dim) view of the input
        int64_t kept_stride[4] = {0, 0, 0, 0};
        {
            int64_t s = 1;
            bool reduced[4] = {false, false, false, false};
            for (int a : axes) reduced[a] = true;
            for (int d = r - 1; d >= 0; --d) {
                kept_stride[d] = reduced[d] ? 0 : s;
                if (!reduced[d]) s *= is[static_cast<size_t>(d)];
            }
        }
        const float go = static_cast<float>(inv_count);
        int64_t idx[4] = {0, 0, 0, 0};
        const int64_t n = in.numel();
        float* d = acc.data();
        for (int64_t i = 0; i < n; ++i) {
            int64_t oi = 0;
            for (int dd = 0; dd < r; ++dd) oi += idx[dd] * kept_stride[dd];
            d[i] += g[oi] * go;
            for (int dd = r - 1; dd >= 0; --dd) {
                if (++idx[dd] < is[static_cast<size_t>(dd)]) break;
                idx[dd] = 0;
            }
        }
    }

    void release() override { in = Tensor(); }
};

}  // namespace

Tensor reduce(ReduceOp op, const Tensor& x, const std::vector<int>& axes, bool keepdim) {
    const Shape& is = x.shape();
    const int r = static_cast<int>(is.size());
    bool reduced[4] = {false, false, false, false};
    std::vector<int> norm;
    for (int a : axes) {
        if (a < 0 || a >= r)
            throw ContractViolation("reduce: axis " + std::to_string(a) + " invalid for " +
                                    shape_to_string(is));
        if (!reduced[a]) {
            reduced[a] = true;
            norm.push_back(a);
        }
    }
    if (norm.empty())
        for (int d = 0; d < r; ++d) {
            reduced[d] = true;
            norm.push_back(d);
        }

    Shape out_shape;
    int64_t count = 1;
    for (int d = 0; d < r; ++d) {
        if (reduced[d]) {
            count *= is[static_cast<size_t>(d)];
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(is[static_cast<size_t>(d)]);
        }
    }

    // strides of the output under the kept-dim view
    int64_t kept_stride[4] = {0, 0, 0, 0};
    {
        int64_t s = 1;
        for (int d = r - 1; d >= 0; --d) {
            kept_stride[d] = reduced[d] ? 0 : s;
            if (!reduced[d]) s *= is[static_cast<size_t>(d)];
        }
    }

    std::vector<double> acc(static_cast<size_t>(shape_numel(out_shape)), 0.0);
    const float* in = x.data();
    int64_t idx[4] = {0, 0, 0, 0};
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        int64_t oi = 0;
        for (int d = 0; d < r; ++d) oi += idx[d] * kept_stride[d];
        acc[static_cast<size_t>(oi)] += in[i];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < is[static_cast<size_t>(d)]) break;
            idx[d] = 0;
        }
    }

    const double inv = op == ReduceOp::mean ? 1.0 / static_cast<double>(count) : 1.0;
    Tensor out = Tensor::uninitialized(out_shape);
    float* o = out.data();
    for (size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<float>(acc[i] * inv);

    if (Tape* tp = active_tape(); tp && tp->is_tracked(x)) {
        auto node = std::make_unique<ReduceNode>();
        node->in = x;
        node->out_shape = out_shape;
        node->axes = std::move(norm);
        node->inv_count = inv;
        node->out_id = out.id();
        tp->register_node(std::move(node));
    }
    return out;
}

Tensor sum(const Tensor& x) { return reduce(ReduceOp::sum, x, {}, false); }
Tensor mean(const Tensor& x) { return reduce(ReduceOp::mean, x, {}, false); }

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t n, c, h, w, k_out, k;
    int stride, padding;
    int64_t oh, ow;
};

// cols is (C*k*k) x (OH*OW), row-major.
void im2col(const float* in, const ConvDims& d, float* cols) {
    const int64_t ohw = d.oh * d.ow;
    if (d.stride == 1) {
        // stride-1 rows of the col matrix are shifted copies of input rows
        for (int64_t c = 0; c < d.c; ++c) {
            const float* plane = in + c * d.h * d.w;
            for (int64_t ky = 0; ky < d.k; ++ky)
                for (int64_t kx = 0; kx < d.k; ++kx) {
                    float* row = cols + ((c * d.k + ky) * d.k + kx) * ohw;
                    for (int64_t oy = 0; oy < d.oh; ++oy) {
                        const int64_t iy = oy - d.padding + ky;
                        float* dst = row + oy * d.ow;
                        if (iy < 0 || iy >= d.h) {
                            std::memset(dst, 0, sizeof(float) * static_cast<size_t>(d.ow));
                            continue;
                        }
                        const int64_t ix0 = -d.padding + kx;  // input x of output col 0
                        int64_t lo = std::max<int64_t>(0, -ix0);
                        int64_t hi = std::min<int64_t>(d.ow, d.w - ix0);
                        if (lo > 0) std::memset(dst, 0, sizeof(float) * static_cast<size_t>(lo));
                        if (hi > lo)
                            std::memcpy(dst + lo, plane + iy * d.w + ix0 + lo,
                                        sizeof(float) * static_cast<size_t>(hi - lo));
                        if (hi < d.ow)
                            std::memset(dst + std::max<int64_t>(hi, 0), 0,
                                        sizeof(float) * static_cast<size_t>(d.ow - std::max<int64_t>(hi, 0)));
                    }
                }
        }
        return;
    }
    for (int64_t c = 0; c < d.c; ++c)
        for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
                float* row = cols + ((c * d.k + ky) * d.k + kx) * ohw;
                for (int64_t oy = 0; oy < d.oh; ++oy) {
                    const int64_t iy = oy * d.stride - d.padding + ky;
                    for (int64_t ox = 0; ox < d.ow; ++ox) {
                        const int64_t ix = ox * d.stride - d.padding + kx;
                        row[oy * d.ow + ox] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                                  ? in[(c * d.h + iy) * d.w + ix]
                                                  : 0.0f;
                    }
                }
            }
}

void col2im_add(const float* cols, const ConvDims& d, float* out) {
    const int64_t ohw = d.oh * d.ow;
    for (int64_t c = 0; c < d.c; ++c)
        for (int64_t ky = 0; ky < d.k; ++ky)
            for (int64_t kx = 0; kx < d.k; ++kx) {
                const float* row = cols + ((c * d.k + ky) * d.k + kx) * ohw;
                for (int64_t oy = 0; oy < d.oh; ++oy) {
                    const int64_t iy = oy * d.stride - d.padding + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int64_t ox = 0; ox < d.ow; ++ox) {
                        const int64_t ix = ox * d.stride - d.padding + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        out[(c * d.h + iy) * d.w + ix] += row[oy * d.ow + ox];
                    }
                }
            }
}

std::vector<float>& conv_scratch() {
    thread_local std::vector<float> scratch;
    return scratch;
}

std::vector<float>& conv_scratch2() {
    thread_local std::vector<float> scratch;
    return scratch;
}

struct Conv2dNode final : Node {
    Tensor input, weight, bias, out;
    ConvDims dims{};
    bool track_in = false, track_w = false, track_b = false;

    void backward(const float* g, Tape& tape) override {
        const ConvDims& d = dims;
        const int64_t ohw = d.oh * d.ow;
        const int64_t ckk = d.c * d.k * d.k;
        const bool one_by_one = d.k == 1 && d.stride == 1 && d.padding == 0;

        if (track_b) {
            auto& acc = tape.grad_buffer(bias.id(), d.k_out);
            for (int64_t n = 0; n < d.n; ++n)
                for (int64_t k = 0; k < d.k_out; ++k) {
                    const float* gp = g + (n * d.k_out + k) * ohw;
                    double s = 0.0;
                    for (int64_t i = 0; i < ohw; ++i) s += gp[i];
                    acc[static_cast<size_t>(k)] += static_cast<float>(s);
                }
        }

        std::vector<float>* cols = nullptr;
        if (track_w && !one_by_one) {
            cols = &conv_scratch();
            cols->resize(static_cast<size_t>(ckk * ohw));
        }

        for (int64_t n = 0; n < d.n; ++n) {
            const float* gn = g + n * d.k_out * ohw;
            const float* in_n = input.data() + n * d.c * d.h * d.w;
            if (track_w) {
                auto& acc = tape.grad_buffer(weight.id(), weight.numel());
                const float* colp = in_n;
                if (!one_by_one) {
                    im2col(in_n, d, cols->data());
                    colp = cols->data();
                }
                // dW (K x CKK) += G (K x OHW) * cols^T
                gemm(false, true, d.k_out, ckk, ohw, 1.0f, gn, ohw, colp, ohw, 1.0f, acc.data(), ckk);
            }
            if (track_in) {
                auto& acc = tape.grad_buffer(input.id(), input.numel());
                float* din = acc.data() + n * d.c * d.h * d.w;
                if (one_by_one) {
                    // dIn (C x HW) += W^T (C x K) * G (K x HW)
                    gemm(true, false, d.c, ohw, d.k_out, 1.0f, weight.data(), d.c, gn, ohw, 1.0f,
                         din, ohw);
                } else {
                    auto& dcols = conv_scratch2();
                    dcols.resize(static_cast<size_t>(ckk * ohw));
                    gemm(true, false, ckk, ohw, d.k_out, 1.0f, weight.data(), ckk, gn, ohw, 0.0f,
                         dcols.data(), ohw);
                    col2im_add(dcols.data(), d, din);
                }
            }
        }
    }

    void release() override {
        input = Tensor();
        weight = Tensor();
        bias = Tensor();
        out = Tensor();
    }
};

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw ContractViolation("conv2d expects rank-4 input and weight");
    ConvDims d;
    d.n = input.dim(0);
    d.c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.k_out = weight.dim(0);
    d.k = weight.dim(2);
    d.stride = stride;
    d.padding = padding;
    if (weight.dim(1) != d.c)
        throw ContractViolation("conv2d: weight channels " + std::to_string(weight.dim(1)) +
                                " != input channels " + std::to_string(d.c));
    if (weight.dim(3) != d.k) throw ContractViolation("conv2d: kernel must be square");
    if (d.k % 2 == 0) throw ContractViolation("conv2d: kernel size must be odd");
    if (stride < 1 || padding < 0) throw ContractViolation("conv2d: invalid stride/padding");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.k_out))
        throw ContractViolation("conv2d: bias shape must be [" + std::to_string(d.k_out) + "]");
    const int64_t span_h = d.h + 2 * padding - d.k;
    const int64_t span_w = d.w + 2 * padding - d.k;
    if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
        throw ContractViolation("conv2d: extents " + shape_to_string(input.shape()) +
                                " incompatible with k=" + std::to_string(d.k) +
                                " s=" + std::to_string(stride) + " p=" + std::to_string(padding));
    d.oh = span_h / stride + 1;
    d.ow = span_w / stride + 1;

    Tensor out = Tensor::uninitialized({d.n, d.k_out, d.oh, d.ow});
    const int64_t ohw = d.oh * d.ow;
    const int64_t ckk = d.c * d.k * d.k;
    const bool one_by_one = d.k == 1 && stride == 1 && padding == 0;

    for (int64_t n = 0; n < d.n; ++n) {
        const float* in_n = input.data() + n * d.c * d.h * d.w;
        const float* colp = in_n;
        if (!one_by_one) {
            auto& cols = conv_scratch();
            cols.resize(static_cast<size_t>(ckk * ohw));
            im2col(in_n, d, cols.data());
            colp = cols.data();
        }
        float* out_n = out.data() + n * d.k_out * ohw;
        gemm(false, false, d.k_out, ohw, ckk, 1.0f, weight.data(), ckk, colp, ohw, 0.0f, out_n, ohw);
        if (bias.defined()) {
            const float* b = bias.data();
            for (int64_t k = 0; k < d.k_out; ++k) {
                float* row = out_n + k * ohw;
                const float bv = b[k];
                for (int64_t i = 0; i < ohw; ++i) row[i] += bv;
            }
        }
    }

    if (Tape* tp = active_tape()) {
        const bool ti = tp->is_tracked(input);
        const bool tw = tp->is_tracked(weight);
        const bool tb = bias.defined() && tp->is_tracked(bias);
        if (ti || tw || tb) {
            auto node = std::make_unique<Conv2dNode>();
            node->input = input;
            node->weight = weight;
            node->bias = bias;
            node->out = out;
            node->dims = d;
            node->track_in = ti;
            node->track_w = tw;
            node->track_b = tb;
            node->out_id = out.id();
            tp->register_node(std::move(node));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// maxpool2x2
// ---------------------------------------------------------------------------

namespace {

struct MaxPoolNode final : Node {
    Tensor in;
    std::vector<int64_t> argmax;  // flat input offsets, one per output element

    void backward(const float* g, Tape& tape) override {
        auto& acc = tape.grad_buffer(in.id(), in.numel());
        for (size_t i = 0; i < argmax.size(); ++i)
            acc[static_cast<size_t>(argmax[i])] += g[i];
    }

    void release() override {
        in = Tensor();
        argmax.clear();
        argmax.shrink_to_fit();
    }
};

}  // namespace

Tensor maxpool2x2(const Tensor& x) {
    if (x.rank() != 4) throw ContractViolation("maxpool2x2 expects rank-4 input");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h / 2, ow = w / 2;
    if (oh < 1 || ow < 1)
        throw ContractViolation("maxpool2x2: spatial extents too small in " +
                                shape_to_string(x.shape()));
    Tensor out = Tensor::uninitialized({n, c, oh, ow});
    std::vector<int64_t> argmax(static_cast<size_t>(n * c * oh * ow));
    const float* in = x.data();
    float* o = out.data();
    int64_t oi = 0;
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const int64_t base = (ni * c + ci) * h * w;
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    const int64_t i0 = base + 2 * oy * w + 2 * ox;
                    int64_t best = i0;
                    float bv = in[i0];
                    const int64_t cand[3] = {i0 + 1, i0 + w, i0 + w + 1};
                    for (int64_t idx : cand)
                        if (in[idx] > bv) {
                            bv = in[idx];
                            best = idx;
                        }
                    o[oi] = bv;
                    argmax[static_cast<size_t>(oi)] = best;
                    ++oi;
                }
        }
    if (Tape* tp = active_tape(); tp && tp->is_tracked(x)) {
        auto node = std::make_unique<MaxPoolNode>();
        node->in = x;
        node->argmax = std::move(argmax);
        node->out_id = out.id();
        tp->register_node(std::move(node));
    }
    return out;
}

// ---------------------------------------------------------------------------
// nearest_downsample
// ---------------------------------------------------------------------------

namespace {

struct NearestNode final : Node {
    Tensor in;
    std::vector<int64_t> src_y, src_x;
    int64_t oh = 0, ow = 0;

    void backward(const float* g, Tape& tape) override {
        const int64_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
        auto& acc = tape.grad_buffer(in.id(), in.numel());
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                const int64_t ibase = (ni * c + ci) * h * w;
                const int64_t obase = (ni * c + ci) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox)
                        acc[static_cast<size_t>(ibase + src_y[static_cast<size_t>(oy)] * w +
                                                src_x[static_cast<size_t>(ox)])] +=
                            g[obase + oy * ow + ox];
            }
    }

    void release() override { in = Tensor(); }
};

}  // namespace

Tensor nearest_downsample(const Tensor& x, int64_t target_h, int64_t target_w) {
    if (x.rank() != 4) throw ContractViolation("nearest_downsample expects rank-4 input");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (target_h < 1 || target_w < 1)
        throw ContractViolation("nearest_downsample: zero target extent");
    if (target_h > h || target_w > w)
        throw ContractViolation("nearest_downsample: target exceeds source extents");

    std::vector<int64_t> src_y(static_cast<size_t>(target_h));
    std::vector<int64_t> src_x(static_cast<size_t>(target_w));
    const double sy = static_cast<double>(h) / static_cast<double>(target_h);
    const double sx = static_cast<double>(w) / static_cast<double>(target_w);
    for (int64_t i = 0; i < target_h; ++i)
        src_y[static_cast<size_t>(i)] =
            std::min<int64_t>(h - 1, static_cast<int64_t>((static_cast<double>(i) + 0.5) * sy));
    for (int64_t i = 0; i < target_w; ++i)
        src_x[static_cast<size_t>(i)] =
            std::min<int64_t>(w - 1, static_cast<int64_t>((static_cast<double>(i) + 0.5) * sx));

    Tensor out = Tensor::uninitialized({n, c, target_h, target_w});
    const float* in = x.data();
    float* o = out.data();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const int64_t ibase = (ni * c + ci) * h * w;
            for (int64_t oy = 0; oy < target_h; ++oy) {
                const float* row = in + ibase + src_y[static_cast<size_t>(oy)] * w;
                for (int64_t ox = 0; ox < target_w; ++ox)
                    *o++ = row[src_x[static_cast<size_t>(ox)]];
            }
        }

    if (Tape* tp = active_tape(); tp && tp->is_tracked(x)) {
        auto node = std::make_unique<NearestNode>();
        node->in = x;
        node->src_y = std::move(src_y);
        node->src_x = std::move(src_x);
        node->oh = target_h;
        node->ow = target_w;
        node->out_id = out.id();
        tp->register_node(std::move(node));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, const AdamConfig& config)
    : params_(std::move(params)), config_(config) {
    if (config_.learning_rate < 0.0) throw ContractViolation("adam: negative learning rate");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
}

void AdamOptimizer::step(const Tape& tape) {
    std::vector<std::vector<float>> grads;
    grads.reserve(params_.size());
    for (const Tensor& p : params_) {
        Tensor g = tape.grad(p);
        grads.emplace_back(g.data(), g.data() + g.numel());
    }
    step(grads);
}

void AdamOptimizer::step(const std::vector<std::vector<float>>& grads) {
    if (grads.size() != params_.size())
        throw ContractViolation("adam: gradient count does not match parameter count");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        const int64_t n = p.numel();
        if (static_cast<int64_t>(grads[pi].size()) != n)
            throw ContractViolation("adam: gradient shape mismatch for parameter " +
                                    std::to_string(pi));
        float* w = p.data();
        float* m = m_[pi].data();
        float* v = v_[pi].data();
        const float* g = grads[pi].data();
        for (int64_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            const double vi = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            w[i] = static_cast<float>(w[i] - config_.learning_rate * mhat /
                                                 (std::sqrt(vhat) + config_.epsilon));
        }
    }
}

}  // namespace changedet
