#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "haan/common.hpp"

namespace haan {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// kFrozenStats normalizes with batch statistics like kTrain but leaves the
// running buffers untouched (a frozen discriminator inside a generator step).
enum class Mode { kTrain, kEval, kFrozenStats };
enum class Act { kRelu, kLeakyRelu, kSigmoid, kTanh };
enum class PoolKind { kMax, kAvg };
enum class ReduceKind { kMean, kSum, kMax, kMin };
enum class EwKind { kAdd, kSub, kMul, kDiv };

// When enabled, every op validates that its output is finite and throws
// NumericError otherwise. Off by default (hot path).
void set_checked_mode(bool on);
bool checked_mode();

// N-dimensional array with optional gradient accumulator. Value-semantic
// handle over shared storage; ops never mutate an existing tensor's values,
// only its grad (and batch-norm running-stat buffers, which are state).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }

    // Ref-qualified: binding the contents of a temporary tensor would leave
    // a dangling reference once the handle dies at the end of the statement.
    std::vector<T>& data() & { return node_->values; }
    const std::vector<T>& data() const& { return node_->values; }
    std::vector<T>& data() && = delete;
    const std::vector<T>& data() const&& = delete;
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Allocates (zero-filled) on first use.
    std::vector<T>& grad();
    const std::vector<T>& grad() const;
    void zero_grad();

    // Same values (copied), no grad, not tied to any tape history.
    Tensor detach() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    struct Node {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Node> node_;
};

// Define-by-run gradient tape. Ops append backward closures while a tape is
// active on the current thread; backward() replays them in reverse,
// accumulating into leaf grads (op-output grads are reset per pass, so
// repeated backward calls add one full contribution each). Closures hold the
// tensors they need alive, so clear() is what frees intermediates.
template <typename T>
class Tape {
public:
    void record(Tensor<T> output, std::function<void()> backward_fn) {
        ops_.push_back({std::move(output), std::move(backward_fn)});
    }
    void backward(const Tensor<T>& loss);
    void clear() { ops_.clear(); }
    std::size_t size() const { return ops_.size(); }

    static Tape* active();

private:
    friend class TapeScope;
    struct Node {
        Tensor<T> output;
        std::function<void()> fn;
    };
    std::vector<Node> ops_;

public:
    // RAII activation; the tape is cleared when the scope ends.
    class TapeScope {
    public:
        explicit TapeScope(Tape& tape);
        ~TapeScope();
        TapeScope(const TapeScope&) = delete;
        TapeScope& operator=(const TapeScope&) = delete;

    private:
        Tape* previous_;
    };

    // Temporarily suspends recording (frozen sub-networks, metrics).
    class PauseScope {
    public:
        PauseScope();
        ~PauseScope();
        PauseScope(const PauseScope&) = delete;
        PauseScope& operator=(const PauseScope&) = delete;

    private:
        Tape* previous_;
    };
};

// ---- ops -------------------------------------------------------------

// input NCHW, weight OIKK, bias O (may be undefined for no bias).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

// weight IOKK; output spatial = (in-1)*stride - 2*padding + k + output_padding.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding);

// Train mode normalizes over N,H,W per channel and updates running stats
// in place; eval mode normalizes with the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                     Mode mode);

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Act kind, T negative_slope = T(0.2));

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return activation(x, Act::kRelu);
}
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
    return activation(x, Act::kLeakyRelu, slope);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return activation(x, Act::kSigmoid);
}
template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
    return activation(x, Act::kTanh);
}

template <typename T>
Tensor<T> pool(const Tensor<T>& input, PoolKind kind, int kernel, int stride);

template <typename T>
Tensor<T> global_pool(const Tensor<T>& input, PoolKind kind);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> inputs) {
    std::vector<Tensor<T>> v(inputs);
    return concat_channels(std::span<const Tensor<T>>(v));
}

// Channels [start, start+count) of an NCHW tensor.
template <typename T>
Tensor<T> narrow_channels(const Tensor<T>& input, std::size_t start, std::size_t count);

// b broadcasts into a's shape, numpy-style right-aligned (covers CX1X1 and
// 1XHXW weights against NCHW).
template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(a, b, EwKind::kAdd);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(a, b, EwKind::kSub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(a, b, EwKind::kMul);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(a, b, EwKind::kDiv);
}

// x*scale + shift, elementwise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift);

// Natural log, elementwise. Inputs must be positive.
template <typename T>
Tensor<T> ln(const Tensor<T>& x);

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// Empty axes reduce nothing (identity copy). keepdim keeps reduced axes as 1.
template <typename T>
Tensor<T> reduce(const Tensor<T>& input, ReduceKind kind, std::span<const std::size_t> axes,
                 bool keepdim);

template <typename T>
Tensor<T> reduce(const Tensor<T>& input, ReduceKind kind, std::initializer_list<std::size_t> axes,
                 bool keepdim) {
    std::vector<std::size_t> v(axes);
    return reduce(input, kind, std::span<const std::size_t>(v), keepdim);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

// mean((a-b)^2) over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---- optimizer -------------------------------------------------------

// Named, ordered parameter/buffer collection for one network. Buffers
// (trainable=false) are checkpointed but never stepped.
template <typename T>
struct NetworkParams {
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable = true;
    };
    std::vector<Entry> entries;

    Tensor<T> add(const std::string& name, Tensor<T> tensor, bool trainable = true);
    Tensor<T>* find(const std::string& name);
    void zero_grads();
    std::size_t value_count() const;
    std::size_t trainable_value_count() const;
};

template <typename T>
struct AdamState {
    struct Slot {
        std::vector<T> m, v;
    };
    std::unordered_map<std::string, Slot> slots;
};

template <typename T>
struct AdamHyper {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Standard bias-corrected Adam update, in place, on trainable entries with an
// allocated grad. step is 1-based.
template <typename T>
void adam_step(NetworkParams<T>& params, AdamState<T>& state, const AdamHyper<T>& hyper,
               long step);

}  // namespace haan
