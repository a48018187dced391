#include "haan/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace haan {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {
std::atomic<bool> g_checked{false};
}

void set_checked_mode(bool on) { g_checked.store(on); }
bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }

// ---- Tensor ----------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values.assign(shape_size(t.node_->shape), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_size(shape) != values.size())
        throw DimensionError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->values.size(), T(0));
    return node_->grad;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    if (node_->grad.empty()) throw ContractError("grad read before backward");
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->requires_grad = false;
    return t;
}

// ---- Tape ------------------------------------------------------------

namespace {
template <typename T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}
}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
    return active_tape_slot<T>();
}

template <typename T>
Tape<T>::TapeScope::TapeScope(Tape& tape) : previous_(active_tape_slot<T>()) {
    active_tape_slot<T>() = &tape;
}

template <typename T>
Tape<T>::TapeScope::~TapeScope() {
    active_tape_slot<T>()->clear();
    active_tape_slot<T>() = previous_;
}

template <typename T>
Tape<T>::PauseScope::PauseScope() : previous_(active_tape_slot<T>()) {
    active_tape_slot<T>() = nullptr;
}

template <typename T>
Tape<T>::PauseScope::~PauseScope() {
    active_tape_slot<T>() = previous_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    for (auto& node : ops_)
        if (node.output.defined() && node.output.has_grad()) node.output.zero_grad();
    Tensor<T> seed = loss;  // shares the node; allocates the grad slot
    seed.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->fn();
}

// ---- op helpers --------------------------------------------------------

namespace {

template <typename T>
bool tape_on() {
    return Tape<T>::active() != nullptr;
}

template <typename T>
void record(const Tensor<T>& output, std::function<void()> fn) {
    Tape<T>::active()->record(output, std::move(fn));
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!checked_mode()) return;
    for (T v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output value");
}

// Accumulate src into dst.grad (dst must have grad allocated by caller).
template <typename T>
void axpy(std::vector<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---- conv2d ------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw DimensionError("conv2d: expected NCHW input and OIKK weight");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = weight.dim(0), I = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    if (C != I)
        throw DimensionError("conv2d: input channels " + std::to_string(C) +
                             " != weight in-channels " + std::to_string(I));
    if (bias.defined() && bias.size() != O) throw DimensionError("conv2d: bias size != out channels");
    if (stride < 1 || padding < 0) throw ContractError("conv2d: stride >= 1, padding >= 0");
    if (KH > H + 2 * static_cast<std::size_t>(padding) || KW > W + 2 * static_cast<std::size_t>(padding))
        throw GeometryError("conv2d: kernel larger than padded input");
    const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
    if (OH == 0 || OW == 0) throw GeometryError("conv2d: degenerate output geometry");

    Tensor<T> out = Tensor<T>::zeros({N, O, OH, OW});
    const T* x = input.data().data();
    const T* w = weight.data().data();
    const T* b = bias.defined() ? bias.data().data() : nullptr;
    T* y = out.data().data();

    // Valid output ranges per kernel offset are computed once; the inner
    // loops are branch-free and vectorize.
    auto valid_range = [](long k, long pad, long in_extent, long out_extent, int s) {
        long lo = 0;
        while (lo < out_extent && lo * s + k - pad < 0) ++lo;
        long hi = out_extent;
        while (hi > lo && (hi - 1) * s + k - pad >= in_extent) --hi;
        return std::pair<long, long>{lo, hi};
    };
    std::vector<std::pair<long, long>> oh_range(KH), ow_range(KW);
    for (std::size_t kh = 0; kh < KH; ++kh)
        oh_range[kh] = valid_range(static_cast<long>(kh), padding, static_cast<long>(H),
                                   static_cast<long>(OH), stride);
    for (std::size_t kw = 0; kw < KW; ++kw)
        ow_range[kw] = valid_range(static_cast<long>(kw), padding, static_cast<long>(W),
                                   static_cast<long>(OW), stride);

    parallel_for(N * O, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t no = lo; no < hi; ++no) {
            const std::size_t n = no / O, oc = no % O;
            T* yrow = y + (n * O + oc) * OH * OW;
            const T bv = b ? b[oc] : T(0);
            std::fill(yrow, yrow + OH * OW, bv);
            for (std::size_t ic = 0; ic < C; ++ic) {
                const T* xc = x + (n * C + ic) * H * W;
                const T* wk = w + ((oc * I + ic) * KH) * KW;
                for (std::size_t kh = 0; kh < KH; ++kh) {
                    const auto [oh_lo, oh_hi] = oh_range[kh];
                    for (std::size_t kw = 0; kw < KW; ++kw) {
                        const T wv = wk[kh * KW + kw];
                        const auto [ow_lo, ow_hi] = ow_range[kw];
                        for (long oh = oh_lo; oh < oh_hi; ++oh) {
                            const long ih = oh * stride + static_cast<long>(kh) - padding;
                            const T* __restrict__ xrow = xc + ih * W + (ow_lo * stride + static_cast<long>(kw) - padding);
                            T* __restrict__ yr = yrow + oh * OW + ow_lo;
                            const long span = ow_hi - ow_lo;
                            if (stride == 1) {
                                for (long i = 0; i < span; ++i) yr[i] += wv * xrow[i];
                            } else {
                                for (long i = 0; i < span; ++i) yr[i] += wv * xrow[i * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    check_finite(out, "conv2d");

    const bool needs = input.requires_grad() || weight.requires_grad() ||
                       (bias.defined() && bias.requires_grad());
    if (tape_on<T>() && needs) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, w_c = weight, b_c = bias, out_c = out;
        record<T>(out, [in_c, w_c, b_c, out_c, stride, padding]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::size_t O = w_c.dim(0), KH = w_c.dim(2), KW = w_c.dim(3);
            const std::size_t OH = out_c.dim(2), OW = out_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            const T* x = in_c.data().data();
            const T* w = w_c.data().data();

            if (in_c.requires_grad()) {
                std::vector<T>& gx = in_c.grad();
                auto valid_range = [&](long k, long in_extent, long out_extent) {
                    long r_lo = 0;
                    while (r_lo < out_extent && r_lo * stride + k - padding < 0) ++r_lo;
                    long r_hi = out_extent;
                    while (r_hi > r_lo && (r_hi - 1) * stride + k - padding >= in_extent) --r_hi;
                    return std::pair<long, long>{r_lo, r_hi};
                };
                std::vector<std::pair<long, long>> oh_range(KH), ow_range(KW);
                for (std::size_t kh = 0; kh < KH; ++kh)
                    oh_range[kh] = valid_range(static_cast<long>(kh), static_cast<long>(H),
                                               static_cast<long>(OH));
                for (std::size_t kw = 0; kw < KW; ++kw)
                    ow_range[kw] = valid_range(static_cast<long>(kw), static_cast<long>(W),
                                               static_cast<long>(OW));
                parallel_for(N * C, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t ni = lo; ni < hi; ++ni) {
                        const std::size_t n = ni / C, ic = ni % C;
                        T* gxc = gx.data() + (n * C + ic) * H * W;
                        for (std::size_t oc = 0; oc < O; ++oc) {
                            const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                            const T* wk = w + ((oc * C + ic) * KH) * KW;
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                const auto [oh_lo, oh_hi] = oh_range[kh];
                                for (std::size_t kw = 0; kw < KW; ++kw) {
                                    const T wv = wk[kh * KW + kw];
                                    const auto [ow_lo, ow_hi] = ow_range[kw];
                                    for (long oh = oh_lo; oh < oh_hi; ++oh) {
                                        const long ih = oh * stride + static_cast<long>(kh) - padding;
                                        T* __restrict__ gxrow = gxc + ih * W + (ow_lo * stride + static_cast<long>(kw) - padding);
                                        const T* __restrict__ gyr = gyc + oh * OW + ow_lo;
                                        const long span = ow_hi - ow_lo;
                                        if (stride == 1) {
                                            for (long i = 0; i < span; ++i) gxrow[i] += wv * gyr[i];
                                        } else {
                                            for (long i = 0; i < span; ++i) gxrow[i * stride] += wv * gyr[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if (w_c.requires_grad()) {
                std::vector<T>& gw = w_c.grad();
                auto valid_range = [&](long k, long in_extent, long out_extent) {
                    long r_lo = 0;
                    while (r_lo < out_extent && r_lo * stride + k - padding < 0) ++r_lo;
                    long r_hi = out_extent;
                    while (r_hi > r_lo && (r_hi - 1) * stride + k - padding >= in_extent) --r_hi;
                    return std::pair<long, long>{r_lo, r_hi};
                };
                std::vector<std::pair<long, long>> oh_range(KH), ow_range(KW);
                for (std::size_t kh = 0; kh < KH; ++kh)
                    oh_range[kh] = valid_range(static_cast<long>(kh), static_cast<long>(H),
                                               static_cast<long>(OH));
                for (std::size_t kw = 0; kw < KW; ++kw)
                    ow_range[kw] = valid_range(static_cast<long>(kw), static_cast<long>(W),
                                               static_cast<long>(OW));
                parallel_for(O, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t oc = lo; oc < hi; ++oc) {
                        for (std::size_t ic = 0; ic < C; ++ic) {
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                const auto [oh_lo, oh_hi] = oh_range[kh];
                                for (std::size_t kw = 0; kw < KW; ++kw) {
                                    const auto [ow_lo, ow_hi] = ow_range[kw];
                                    T acc = T(0);
                                    for (std::size_t n = 0; n < N; ++n) {
                                        const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                                        const T* xc = x + (n * C + ic) * H * W;
                                        for (long oh = oh_lo; oh < oh_hi; ++oh) {
                                            const long ih = oh * stride + static_cast<long>(kh) - padding;
                                            const T* __restrict__ xrow = xc + ih * W + (ow_lo * stride + static_cast<long>(kw) - padding);
                                            const T* __restrict__ gyr = gyc + oh * OW + ow_lo;
                                            const long span = ow_hi - ow_lo;
                                            if (stride == 1) {
                                                for (long i = 0; i < span; ++i) acc += gyr[i] * xrow[i];
                                            } else {
                                                for (long i = 0; i < span; ++i) acc += gyr[i] * xrow[i * stride];
                                            }
                                        }
                                    }
                                    gw[((oc * C + ic) * KH + kh) * KW + kw] += acc;
                                }
                            }
                        }
                    }
                });
            }
            if (b_c.defined() && b_c.requires_grad()) {
                std::vector<T>& gb = b_c.grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t oc = 0; oc < O; ++oc) {
                        const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                        T acc = T(0);
                        for (std::size_t i = 0; i < OH * OW; ++i) acc += gyc[i];
                        gb[oc] += acc;
                    }
            }
        });
    }
    return out;
}

// ---- conv_transpose2d ---------------------------------------------------

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw DimensionError("conv_transpose2d: expected NCHW input and IOKK weight");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t I = weight.dim(0), O = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    if (C != I) throw DimensionError("conv_transpose2d: input channels != weight in-channels");
    const long oh_l = static_cast<long>((H - 1)) * stride - 2 * padding + static_cast<long>(KH) + output_padding;
    const long ow_l = static_cast<long>((W - 1)) * stride - 2 * padding + static_cast<long>(KW) + output_padding;
    if (oh_l <= 0 || ow_l <= 0) throw GeometryError("conv_transpose2d: degenerate output geometry");
    const std::size_t OH = static_cast<std::size_t>(oh_l), OW = static_cast<std::size_t>(ow_l);

    Tensor<T> out = Tensor<T>::zeros({N, O, OH, OW});
    const T* x = input.data().data();
    const T* w = weight.data().data();
    const T* b = bias.defined() ? bias.data().data() : nullptr;
    T* y = out.data().data();

    // Input ranges with all kernel taps landing inside the output are
    // precomputed per offset; inner loops stay branch-free.
    auto valid_in_range = [&](long k, long out_extent, long in_extent) {
        long lo = 0;
        while (lo < in_extent && lo * stride + k - padding < 0) ++lo;
        long hi = in_extent;
        while (hi > lo && (hi - 1) * stride + k - padding >= out_extent) --hi;
        return std::pair<long, long>{lo, hi};
    };
    std::vector<std::pair<long, long>> ih_range(KH), iw_range(KW);
    for (std::size_t kh = 0; kh < KH; ++kh)
        ih_range[kh] = valid_in_range(static_cast<long>(kh), static_cast<long>(OH), static_cast<long>(H));
    for (std::size_t kw = 0; kw < KW; ++kw)
        iw_range[kw] = valid_in_range(static_cast<long>(kw), static_cast<long>(OW), static_cast<long>(W));

    parallel_for(N * O, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t no = lo; no < hi; ++no) {
            const std::size_t n = no / O, oc = no % O;
            T* yc = y + (n * O + oc) * OH * OW;
            if (b) std::fill(yc, yc + OH * OW, b[oc]);
            for (std::size_t ic = 0; ic < C; ++ic) {
                const T* xc = x + (n * C + ic) * H * W;
                const T* wk = w + ((ic * O + oc) * KH) * KW;
                for (std::size_t kh = 0; kh < KH; ++kh) {
                    const auto [ih_lo, ih_hi] = ih_range[kh];
                    for (std::size_t kw = 0; kw < KW; ++kw) {
                        const T wv = wk[kh * KW + kw];
                        const auto [iw_lo, iw_hi] = iw_range[kw];
                        for (long ih = ih_lo; ih < ih_hi; ++ih) {
                            const long oy = ih * stride + static_cast<long>(kh) - padding;
                            T* __restrict__ yrow = yc + oy * OW + (iw_lo * stride + static_cast<long>(kw) - padding);
                            const T* __restrict__ xrow = xc + ih * W + iw_lo;
                            const long span = iw_hi - iw_lo;
                            for (long i = 0; i < span; ++i) yrow[i * stride] += wv * xrow[i];
                        }
                    }
                }
            }
        }
    });
    check_finite(out, "conv_transpose2d");

    const bool needs = input.requires_grad() || weight.requires_grad() ||
                       (bias.defined() && bias.requires_grad());
    if (tape_on<T>() && needs) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, w_c = weight, b_c = bias, out_c = out;
        record<T>(out, [in_c, w_c, b_c, out_c, stride, padding]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::size_t O = w_c.dim(1), KH = w_c.dim(2), KW = w_c.dim(3);
            const std::size_t OH = out_c.dim(2), OW = out_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            const T* x = in_c.data().data();
            const T* w = w_c.data().data();

            if (in_c.requires_grad()) {
                std::vector<T>& gx = in_c.grad();
                auto valid_in_range = [&](long k, long out_extent, long in_extent) {
                    long r_lo = 0;
                    while (r_lo < in_extent && r_lo * stride + k - padding < 0) ++r_lo;
                    long r_hi = in_extent;
                    while (r_hi > r_lo && (r_hi - 1) * stride + k - padding >= out_extent) --r_hi;
                    return std::pair<long, long>{r_lo, r_hi};
                };
                std::vector<std::pair<long, long>> ih_range(KH), iw_range(KW);
                for (std::size_t kh = 0; kh < KH; ++kh)
                    ih_range[kh] = valid_in_range(static_cast<long>(kh), static_cast<long>(OH),
                                                  static_cast<long>(H));
                for (std::size_t kw = 0; kw < KW; ++kw)
                    iw_range[kw] = valid_in_range(static_cast<long>(kw), static_cast<long>(OW),
                                                  static_cast<long>(W));
                parallel_for(N * C, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t ni = lo; ni < hi; ++ni) {
                        const std::size_t n = ni / C, ic = ni % C;
                        T* gxc = gx.data() + (n * C + ic) * H * W;
                        for (std::size_t oc = 0; oc < O; ++oc) {
                            const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                            const T* wk = w + ((ic * O + oc) * KH) * KW;
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                const auto [ih_lo, ih_hi] = ih_range[kh];
                                for (std::size_t kw = 0; kw < KW; ++kw) {
                                    const T wv = wk[kh * KW + kw];
                                    const auto [iw_lo, iw_hi] = iw_range[kw];
                                    for (long ih = ih_lo; ih < ih_hi; ++ih) {
                                        const long oy = ih * stride + static_cast<long>(kh) - padding;
                                        const T* __restrict__ gyr = gyc + oy * OW + (iw_lo * stride + static_cast<long>(kw) - padding);
                                        T* __restrict__ gxrow = gxc + ih * W + iw_lo;
                                        const long span = iw_hi - iw_lo;
                                        for (long i = 0; i < span; ++i) gxrow[i] += wv * gyr[i * stride];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if (w_c.requires_grad()) {
                std::vector<T>& gw = w_c.grad();
                auto valid_in_range = [&](long k, long out_extent, long in_extent) {
                    long r_lo = 0;
                    while (r_lo < in_extent && r_lo * stride + k - padding < 0) ++r_lo;
                    long r_hi = in_extent;
                    while (r_hi > r_lo && (r_hi - 1) * stride + k - padding >= out_extent) --r_hi;
                    return std::pair<long, long>{r_lo, r_hi};
                };
                std::vector<std::pair<long, long>> ih_range(KH), iw_range(KW);
                for (std::size_t kh = 0; kh < KH; ++kh)
                    ih_range[kh] = valid_in_range(static_cast<long>(kh), static_cast<long>(OH),
                                                  static_cast<long>(H));
                for (std::size_t kw = 0; kw < KW; ++kw)
                    iw_range[kw] = valid_in_range(static_cast<long>(kw), static_cast<long>(OW),
                                                  static_cast<long>(W));
                parallel_for(C, [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t ic = lo; ic < hi; ++ic) {
                        for (std::size_t oc = 0; oc < O; ++oc)
                            for (std::size_t kh = 0; kh < KH; ++kh) {
                                const auto [ih_lo, ih_hi] = ih_range[kh];
                                for (std::size_t kw = 0; kw < KW; ++kw) {
                                    const auto [iw_lo, iw_hi] = iw_range[kw];
                                    T acc = T(0);
                                    for (std::size_t n = 0; n < N; ++n) {
                                        const T* xc = x + (n * C + ic) * H * W;
                                        const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                                        for (long ih = ih_lo; ih < ih_hi; ++ih) {
                                            const long oy = ih * stride + static_cast<long>(kh) - padding;
                                            const T* __restrict__ gyr = gyc + oy * OW + (iw_lo * stride + static_cast<long>(kw) - padding);
                                            const T* __restrict__ xrow = xc + ih * W + iw_lo;
                                            const long span = iw_hi - iw_lo;
                                            for (long i = 0; i < span; ++i) acc += xrow[i] * gyr[i * stride];
                                        }
                                    }
                                    gw[((ic * O + oc) * KH + kh) * KW + kw] += acc;
                                }
                            }
                    }
                });
            }
            if (b_c.defined() && b_c.requires_grad()) {
                std::vector<T>& gb = b_c.grad();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t oc = 0; oc < O; ++oc) {
                        const T* gyc = gy.data() + (n * O + oc) * OH * OW;
                        T acc = T(0);
                        for (std::size_t i = 0; i < OH * OW; ++i) acc += gyc[i];
                        gb[oc] += acc;
                    }
            }
        });
    }
    return out;
}

// ---- batch_norm ----------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                     Mode mode) {
    if (input.rank() != 4) throw DimensionError("batch_norm: expected NCHW input");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C)
        throw DimensionError("batch_norm: per-channel parameter size != C");
    if (eps <= T(0)) throw ContractError("batch_norm: eps must be positive");

    const std::size_t M = N * H * W;  // elements per channel
    std::vector<T> mean(C), var(C);
    const T* x = input.data().data();

    const bool batch_stats = mode == Mode::kTrain || mode == Mode::kFrozenStats;
    if (batch_stats) {
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* xc = x + (n * C + c) * H * W;
                for (std::size_t i = 0; i < H * W; ++i) s += xc[i];
            }
            mean[c] = s / static_cast<T>(M);
            T sv = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* xc = x + (n * C + c) * H * W;
                for (std::size_t i = 0; i < H * W; ++i) {
                    const T d = xc[i] - mean[c];
                    sv += d * d;
                }
            }
            var[c] = sv / static_cast<T>(M);
        }
        // running stats keep the unbiased variance.
        if (mode == Mode::kTrain) {
            for (std::size_t c = 0; c < C; ++c) {
                const T unbiased = M > 1 ? var[c] * static_cast<T>(M) / static_cast<T>(M - 1) : var[c];
                running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mean[c];
                running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * unbiased;
            }
        }
    } else {
        mean.assign(running_mean.data().begin(), running_mean.data().end());
        var.assign(running_var.data().begin(), running_var.data().end());
    }

    Tensor<T> out = Tensor<T>::zeros({N, C, H, W});
    T* y = out.data().data();
    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    parallel_for(N * C, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t nc = lo; nc < hi; ++nc) {
            const std::size_t c = nc % C;
            const T* xc = x + nc * H * W;
            T* yc = y + nc * H * W;
            const T g = gamma.data()[c], bt = beta.data()[c], mu = mean[c], is = inv_std[c];
            for (std::size_t i = 0; i < H * W; ++i) yc[i] = g * (xc[i] - mu) * is + bt;
        }
    });
    check_finite(out, "batch_norm");

    const bool needs = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (tape_on<T>() && needs) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, g_c = gamma, b_c = beta, out_c = out;
        auto mean_c = std::make_shared<std::vector<T>>(std::move(mean));
        auto inv_c = std::make_shared<std::vector<T>>(std::move(inv_std));
        record<T>(out, [in_c, g_c, b_c, out_c, mean_c, inv_c, mode]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::size_t M = N * H * W;
            const std::vector<T>& gy = out_c.grad();
            const T* x = in_c.data().data();

            for (std::size_t c = 0; c < C; ++c) {
                const T mu = (*mean_c)[c], is = (*inv_c)[c], g = g_c.data()[c];
                T sum_gy = T(0), sum_gy_xhat = T(0);
                for (std::size_t n = 0; n < N; ++n) {
                    const T* gyc = gy.data() + (n * C + c) * H * W;
                    const T* xc = x + (n * C + c) * H * W;
                    for (std::size_t i = 0; i < H * W; ++i) {
                        sum_gy += gyc[i];
                        sum_gy_xhat += gyc[i] * (xc[i] - mu) * is;
                    }
                }
                if (b_c.requires_grad()) b_c.grad()[c] += sum_gy;
                if (g_c.requires_grad()) g_c.grad()[c] += sum_gy_xhat;
                if (in_c.requires_grad()) {
                    std::vector<T>& gx = in_c.grad();
                    if (mode == Mode::kTrain || mode == Mode::kFrozenStats) {
                        const T inv_m = T(1) / static_cast<T>(M);
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* gyc = gy.data() + (n * C + c) * H * W;
                            const T* xc = x + (n * C + c) * H * W;
                            T* gxc = gx.data() + (n * C + c) * H * W;
                            for (std::size_t i = 0; i < H * W; ++i) {
                                const T xhat = (xc[i] - mu) * is;
                                gxc[i] += g * is * (gyc[i] - inv_m * sum_gy - inv_m * xhat * sum_gy_xhat);
                            }
                        }
                    } else {
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* gyc = gy.data() + (n * C + c) * H * W;
                            T* gxc = gx.data() + (n * C + c) * H * W;
                            for (std::size_t i = 0; i < H * W; ++i) gxc[i] += g * is * gyc[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- activation ------------------------------------------------------

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Act kind, T negative_slope) {
    Tensor<T> out = Tensor<T>::zeros(input.shape());
    const T* x = input.data().data();
    T* y = out.data().data();
    const std::size_t n = input.size();
    switch (kind) {
        case Act::kRelu:
            for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
            break;
        case Act::kLeakyRelu:
            for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : negative_slope * x[i];
            break;
        case Act::kSigmoid:
            for (std::size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
            break;
        case Act::kTanh:
            for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
            break;
    }
    check_finite(out, "activation");

    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>(out, [in_c, out_c, kind, negative_slope]() mutable {
            const std::vector<T>& gy = out_c.grad();
            const T* x = in_c.data().data();
            const T* y = out_c.data().data();
            std::vector<T>& gx = in_c.grad();
            const std::size_t n = in_c.size();
            switch (kind) {
                case Act::kRelu:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
                    break;
                case Act::kLeakyRelu:
                    for (std::size_t i = 0; i < n; ++i)
                        gx[i] += x[i] > T(0) ? gy[i] : negative_slope * gy[i];
                    break;
                case Act::kSigmoid:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
                    break;
                case Act::kTanh:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (T(1) - y[i] * y[i]);
                    break;
            }
        });
    }
    return out;
}

// ---- pooling ----------------------------------------------------------

template <typename T>
Tensor<T> pool(const Tensor<T>& input, PoolKind kind, int kernel, int stride) {
    if (input.rank() != 4) throw DimensionError("pool: expected NCHW input");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (kernel < 1 || stride < 1) throw ContractError("pool: kernel and stride must be >= 1");
    if (static_cast<std::size_t>(kernel) > H || static_cast<std::size_t>(kernel) > W)
        throw GeometryError("pool: kernel exceeds spatial extent");
    const std::size_t OH = (H - kernel) / stride + 1;
    const std::size_t OW = (W - kernel) / stride + 1;
    if (OH == 0 || OW == 0) throw GeometryError("pool: degenerate output geometry");

    Tensor<T> out = Tensor<T>::zeros({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (kind == PoolKind::kMax) argmax->assign(out.size(), 0);
    const T* x = input.data().data();
    T* y = out.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* xc = x + nc * H * W;
        T* yc = y + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                if (kind == PoolKind::kMax) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t bi = 0;
                    for (int kh = 0; kh < kernel; ++kh)
                        for (int kw = 0; kw < kernel; ++kw) {
                            const std::size_t idx = (oh * stride + kh) * W + ow * stride + kw;
                            if (xc[idx] > best) {
                                best = xc[idx];
                                bi = idx;
                            }
                        }
                    yc[oh * OW + ow] = best;
                    (*argmax)[nc * OH * OW + oh * OW + ow] = bi;
                } else {
                    T s = T(0);
                    for (int kh = 0; kh < kernel; ++kh)
                        for (int kw = 0; kw < kernel; ++kw)
                            s += xc[(oh * stride + kh) * W + ow * stride + kw];
                    yc[oh * OW + ow] = s / static_cast<T>(kernel * kernel);
                }
            }
    }

    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>(out, [in_c, out_c, argmax, kind, kernel, stride]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::size_t OH = out_c.dim(2), OW = out_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = in_c.grad();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                T* gxc = gx.data() + nc * H * W;
                const T* gyc = gy.data() + nc * OH * OW;
                for (std::size_t o = 0; o < OH * OW; ++o) {
                    if (kind == PoolKind::kMax) {
                        gxc[(*argmax)[nc * OH * OW + o]] += gyc[o];
                    } else {
                        const std::size_t oh = o / OW, ow = o % OW;
                        const T g = gyc[o] / static_cast<T>(kernel * kernel);
                        for (int kh = 0; kh < kernel; ++kh)
                            for (int kw = 0; kw < kernel; ++kw)
                                gxc[(oh * stride + kh) * W + ow * stride + kw] += g;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_pool(const Tensor<T>& input, PoolKind kind) {
    if (input.rank() != 4) throw DimensionError("global_pool: expected NCHW input");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor<T> out = Tensor<T>::zeros({N, C, 1, 1});
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (kind == PoolKind::kMax) argmax->assign(N * C, 0);
    const T* x = input.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* xc = x + nc * H * W;
        if (kind == PoolKind::kAvg) {
            T s = T(0);
            for (std::size_t i = 0; i < H * W; ++i) s += xc[i];
            out.data()[nc] = s / static_cast<T>(H * W);
        } else {
            T best = xc[0];
            std::size_t bi = 0;
            for (std::size_t i = 1; i < H * W; ++i)
                if (xc[i] > best) {
                    best = xc[i];
                    bi = i;
                }
            out.data()[nc] = best;
            (*argmax)[nc] = bi;
        }
    }

    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>(out, [in_c, out_c, argmax, kind]() mutable {
            const std::size_t HW = in_c.dim(2) * in_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = in_c.grad();
            for (std::size_t nc = 0; nc < out_c.size(); ++nc) {
                if (kind == PoolKind::kAvg) {
                    const T g = gy[nc] / static_cast<T>(HW);
                    for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
                } else {
                    gx[nc * HW + (*argmax)[nc]] += gy[nc];
                }
            }
        });
    }
    return out;
}

// ---- upsample / concat / narrow ----------------------------------------

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
    if (input.rank() != 4) throw DimensionError("upsample_nearest: expected NCHW input");
    if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t f = static_cast<std::size_t>(factor);
    Tensor<T> out = Tensor<T>::zeros({N, C, H * f, W * f});
    const T* x = input.data().data();
    T* y = out.data().data();
    const std::size_t OW = W * f;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* xc = x + nc * H * W;
        T* yc = y + nc * H * f * OW;
        for (std::size_t oh = 0; oh < H * f; ++oh) {
            const T* xrow = xc + (oh / f) * W;
            T* yrow = yc + oh * OW;
            for (std::size_t ow = 0; ow < OW; ++ow) yrow[ow] = xrow[ow / f];
        }
    }

    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>(out, [in_c, out_c, f]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::size_t OW = W * f;
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = in_c.grad();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                T* gxc = gx.data() + nc * H * W;
                const T* gyc = gy.data() + nc * H * f * OW;
                for (std::size_t oh = 0; oh < H * f; ++oh) {
                    T* gxrow = gxc + (oh / f) * W;
                    const T* gyrow = gyc + oh * OW;
                    for (std::size_t ow = 0; ow < OW; ++ow) gxrow[ow / f] += gyrow[ow];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
    if (inputs.empty()) throw ContractError("concat_channels: no inputs");
    const std::size_t N = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3);
    std::size_t Ctot = 0;
    bool needs = false;
    for (const auto& t : inputs) {
        if (t.rank() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
            throw DimensionError("concat_channels: non-channel dims differ");
        Ctot += t.dim(1);
        needs = needs || t.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({N, Ctot, H, W});
    T* y = out.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t coff = 0;
        for (const auto& t : inputs) {
            const std::size_t C = t.dim(1);
            const T* xc = t.data().data() + n * C * H * W;
            std::copy(xc, xc + C * H * W, y + (n * Ctot + coff) * H * W);
            coff += C;
        }
    }

    if (tape_on<T>() && needs) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> ins(inputs.begin(), inputs.end());
        Tensor<T> out_c = out;
        record<T>(out, [ins, out_c]() mutable {
            const std::size_t N = out_c.dim(0), Ctot = out_c.dim(1), H = out_c.dim(2), W = out_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            std::size_t coff = 0;
            for (auto& t : ins) {
                const std::size_t C = t.dim(1);
                if (t.requires_grad()) {
                    std::vector<T>& gx = t.grad();
                    for (std::size_t n = 0; n < N; ++n) {
                        const T* g = gy.data() + (n * Ctot + coff) * H * W;
                        T* dst = gx.data() + n * C * H * W;
                        for (std::size_t i = 0; i < C * H * W; ++i) dst[i] += g[i];
                    }
                }
                coff += C;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> narrow_channels(const Tensor<T>& input, std::size_t start, std::size_t count) {
    if (input.rank() != 4) throw DimensionError("narrow_channels: expected NCHW input");
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (start + count > C) throw DimensionError("narrow_channels: range out of bounds");
    Tensor<T> out = Tensor<T>::zeros({N, count, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = input.data().data() + (n * C + start) * H * W;
        T* dst = out.data().data() + n * count * H * W;
        std::copy(src, src + count * H * W, dst);
    }
    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>(out, [in_c, out_c, start, count]() mutable {
            const std::size_t N = in_c.dim(0), C = in_c.dim(1), H = in_c.dim(2), W = in_c.dim(3);
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = in_c.grad();
            for (std::size_t n = 0; n < N; ++n) {
                const T* g = gy.data() + n * count * H * W;
                T* dst = gx.data() + (n * C + start) * H * W;
                for (std::size_t i = 0; i < count * H * W; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

// ---- elementwise with broadcast -----------------------------------------

namespace {

// Right-aligned broadcast of b into a's shape. Returns per-element index map
// strides for b (0 where broadcast).
template <typename T>
std::vector<std::size_t> broadcast_strides(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() > as.size())
        throw DimensionError("elementwise: second operand rank exceeds first (" + shape_str(bs) +
                             " vs " + shape_str(as) + ")");
    const std::size_t off = as.size() - bs.size();
    std::vector<std::size_t> bdims(as.size(), 1);
    for (std::size_t i = 0; i < bs.size(); ++i) bdims[off + i] = bs[i];
    std::vector<std::size_t> strides(as.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = as.size(); i-- > 0;) {
        if (bdims[i] == as[i]) {
            strides[i] = acc;
            acc *= bdims[i];
        } else if (bdims[i] == 1) {
            strides[i] = 0;
        } else {
            throw DimensionError("elementwise: shapes not broadcastable: " + shape_str(as) +
                                 " vs " + shape_str(bs));
        }
    }
    return strides;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
    const bool same = a.shape() == b.shape();
    std::vector<std::size_t> bstr;
    if (!same) bstr = broadcast_strides(a, b);

    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.size();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* py = out.data().data();

    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case EwKind::kAdd: return x + y;
            case EwKind::kSub: return x - y;
            case EwKind::kMul: return x * y;
            case EwKind::kDiv: return x / y;
        }
        return T(0);
    };

    // Maps a linear index in a to the linear index in broadcast b.
    auto b_index = [&](std::size_t idx) {
        std::size_t bi = 0;
        const Shape& as = a.shape();
        for (std::size_t d = as.size(); d-- > 0;) {
            const std::size_t coord = idx % as[d];
            idx /= as[d];
            bi += coord * bstr[d];
        }
        return bi;
    };

    if (same) {
        for (std::size_t i = 0; i < n; ++i) py[i] = apply(pa[i], pb[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) py[i] = apply(pa[i], pb[b_index(i)]);
    }
    check_finite(out, "elementwise");

    if (tape_on<T>() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, b_c = b, out_c = out;
        auto bstr_c = std::make_shared<std::vector<std::size_t>>(std::move(bstr));
        record<T>(out, [a_c, b_c, out_c, bstr_c, kind, same]() mutable {
            const std::vector<T>& gy = out_c.grad();
            const std::size_t n = a_c.size();
            const T* pa = a_c.data().data();
            const T* pb = b_c.data().data();

            auto b_index = [&](std::size_t idx) {
                std::size_t bi = 0;
                const Shape& as = a_c.shape();
                for (std::size_t d = as.size(); d-- > 0;) {
                    const std::size_t coord = idx % as[d];
                    idx /= as[d];
                    bi += coord * (*bstr_c)[d];
                }
                return bi;
            };

            if (a_c.requires_grad()) {
                std::vector<T>& ga = a_c.grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = same ? i : b_index(i);
                    switch (kind) {
                        case EwKind::kAdd: ga[i] += gy[i]; break;
                        case EwKind::kSub: ga[i] += gy[i]; break;
                        case EwKind::kMul: ga[i] += gy[i] * pb[j]; break;
                        case EwKind::kDiv: ga[i] += gy[i] / pb[j]; break;
                    }
                }
            }
            if (b_c.requires_grad()) {
                std::vector<T>& gb = b_c.grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = same ? i : b_index(i);
                    switch (kind) {
                        case EwKind::kAdd: gb[j] += gy[i]; break;
                        case EwKind::kSub: gb[j] -= gy[i]; break;
                        case EwKind::kMul: gb[j] += gy[i] * pa[i]; break;
                        case EwKind::kDiv: gb[j] -= gy[i] * pa[i] / (pb[j] * pb[j]); break;
                    }
                }
            }
        });
    }
    return out;
}

// ---- affine / clamp ------------------------------------------------------

template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * scale + shift;
    if (tape_on<T>() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> x_c = x, out_c = out;
        record<T>(out, [x_c, out_c, scale]() mutable {
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = x_c.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * scale;
        });
    }
    return out;
}

template <typename T>
Tensor<T> ln(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x.data()[i] > T(0))) throw NumericError("ln: non-positive input");
        out.data()[i] = std::log(x.data()[i]);
    }
    if (tape_on<T>() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> x_c = x, out_c = out;
        record<T>(out, [x_c, out_c]() mutable {
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = x_c.grad();
            const T* xv = x_c.data().data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] / xv[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::min(hi, std::max(lo, x.data()[i]));
    if (tape_on<T>() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> x_c = x, out_c = out;
        record<T>(out, [x_c, out_c, lo, hi]() mutable {
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = x_c.grad();
            const T* xv = x_c.data().data();
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (xv[i] > lo && xv[i] < hi) gx[i] += gy[i];
        });
    }
    return out;
}

// ---- reduce ---------------------------------------------------------------

template <typename T>
Tensor<T> reduce(const Tensor<T>& input, ReduceKind kind, std::span<const std::size_t> axes,
                 bool keepdim) {
    const Shape& is = input.shape();
    for (std::size_t a : axes)
        if (a >= is.size()) throw DimensionError("reduce: axis out of range");

    if (axes.empty()) {
        // identity copy
        Tensor<T> out = Tensor<T>::from(is, input.data());
        if (tape_on<T>() && input.requires_grad()) {
            out.set_requires_grad(true);
            Tensor<T> in_c = input, out_c = out;
            record<T>(out, [in_c, out_c]() mutable { axpy(in_c.grad(), out_c.grad()); });
        }
        return out;
    }

    std::vector<bool> reduced(is.size(), false);
    for (std::size_t a : axes) reduced[a] = true;

    Shape os;
    for (std::size_t d = 0; d < is.size(); ++d) {
        if (reduced[d]) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(is[d]);
        }
    }
    if (os.empty()) os.push_back(1);

    // Output strides aligned to input dims (0 on reduced dims).
    std::vector<std::size_t> ostr(is.size(), 0);
    {
        std::size_t acc = 1;
        for (std::size_t d = is.size(); d-- > 0;) {
            if (!reduced[d]) {
                ostr[d] = acc;
                acc *= is[d];
            }
        }
    }

    const std::size_t out_n = [&] {
        std::size_t n = 1;
        for (std::size_t d = 0; d < is.size(); ++d)
            if (!reduced[d]) n *= is[d];
        return n;
    }();
    std::size_t group = input.size() / out_n;  // elements folded into each output

    Tensor<T> out = Tensor<T>::zeros(os);
    auto arg = std::make_shared<std::vector<std::size_t>>();
    const bool is_minmax = kind == ReduceKind::kMax || kind == ReduceKind::kMin;
    if (is_minmax) arg->assign(out_n, 0);

    std::vector<T>& ov = out.data();
    if (is_minmax) {
        std::vector<bool> seen(out_n, false);
        const T* x = input.data().data();
        for (std::size_t i = 0; i < input.size(); ++i) {
            std::size_t oi = 0, idx = i;
            for (std::size_t d = is.size(); d-- > 0;) {
                oi += (idx % is[d]) * ostr[d];
                idx /= is[d];
            }
            const bool better = !seen[oi] || (kind == ReduceKind::kMax ? x[i] > ov[oi] : x[i] < ov[oi]);
            if (better) {
                ov[oi] = x[i];
                (*arg)[oi] = i;
                seen[oi] = true;
            }
        }
    } else {
        const T* x = input.data().data();
        for (std::size_t i = 0; i < input.size(); ++i) {
            std::size_t oi = 0, idx = i;
            for (std::size_t d = is.size(); d-- > 0;) {
                oi += (idx % is[d]) * ostr[d];
                idx /= is[d];
            }
            ov[oi] += x[i];
        }
        if (kind == ReduceKind::kMean)
            for (T& v : ov) v /= static_cast<T>(group);
    }

    if (tape_on<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        auto ostr_c = std::make_shared<std::vector<std::size_t>>(std::move(ostr));
        record<T>(out, [in_c, out_c, ostr_c, arg, kind, group]() mutable {
            const std::vector<T>& gy = out_c.grad();
            std::vector<T>& gx = in_c.grad();
            const Shape& is = in_c.shape();
            if (kind == ReduceKind::kMax || kind == ReduceKind::kMin) {
                for (std::size_t oi = 0; oi < arg->size(); ++oi) gx[(*arg)[oi]] += gy[oi];
            } else {
                const T scale = kind == ReduceKind::kMean ? T(1) / static_cast<T>(group) : T(1);
                for (std::size_t i = 0; i < gx.size(); ++i) {
                    std::size_t oi = 0, idx = i;
                    for (std::size_t d = is.size(); d-- > 0;) {
                        oi += (idx % is[d]) * (*ostr_c)[d];
                        idx /= is[d];
                    }
                    gx[i] += gy[oi] * scale;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce(x, ReduceKind::kMean, std::span<const std::size_t>(axes), false);
}

// ---- NetworkParams / Adam --------------------------------------------------

template <typename T>
Tensor<T> NetworkParams<T>::add(const std::string& name, Tensor<T> tensor, bool trainable) {
    for (const auto& e : entries)
        if (e.name == name) throw ContractError("duplicate parameter name: " + name);
    tensor.set_requires_grad(trainable);
    entries.push_back({name, tensor, trainable});
    return tensor;
}

template <typename T>
Tensor<T>* NetworkParams<T>::find(const std::string& name) {
    for (auto& e : entries)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

template <typename T>
void NetworkParams<T>::zero_grads() {
    for (auto& e : entries)
        if (e.tensor.has_grad()) e.tensor.zero_grad();
}

template <typename T>
std::size_t NetworkParams<T>::value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.tensor.size();
    return n;
}

template <typename T>
std::size_t NetworkParams<T>::trainable_value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries)
        if (e.trainable) n += e.tensor.size();
    return n;
}

template <typename T>
void adam_step(NetworkParams<T>& params, AdamState<T>& state, const AdamHyper<T>& hyper,
               long step) {
    if (step < 1) throw ContractError("adam_step: step index must be >= 1");
    const T bc1 = T(1) - std::pow(hyper.beta1, static_cast<T>(step));
    const T bc2 = T(1) - std::pow(hyper.beta2, static_cast<T>(step));
    for (auto& e : params.entries) {
        if (!e.trainable || !e.tensor.has_grad()) continue;
        auto& slot = state.slots[e.name];
        if (slot.m.empty()) {
            slot.m.assign(e.tensor.size(), T(0));
            slot.v.assign(e.tensor.size(), T(0));
        }
        std::vector<T>& p = e.tensor.data();
        const std::vector<T>& g = e.tensor.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            slot.m[i] = hyper.beta1 * slot.m[i] + (T(1) - hyper.beta1) * g[i];
            slot.v[i] = hyper.beta2 * slot.v[i] + (T(1) - hyper.beta2) * g[i] * g[i];
            const T mhat = slot.m[i] / bc1;
            const T vhat = slot.v[i] / bc2;
            p[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

// ---- explicit instantiations ------------------------------------------------

#define HAAN_INSTANTIATE(T)                                                                        \
    template class Tensor<T>;                                                                      \
    template class Tape<T>;                                                                        \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);     \
    template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                        int, int);                                                 \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                  Tensor<T>&, Tensor<T>&, T, T, Mode);                             \
    template Tensor<T> activation(const Tensor<T>&, Act, T);                                       \
    template Tensor<T> pool(const Tensor<T>&, PoolKind, int, int);                                 \
    template Tensor<T> global_pool(const Tensor<T>&, PoolKind);                                    \
    template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                    \
    template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                \
    template Tensor<T> narrow_channels(const Tensor<T>&, std::size_t, std::size_t);                \
    template Tensor<T> elementwise(const Tensor<T>&, const Tensor<T>&, EwKind);                    \
    template Tensor<T> affine(const Tensor<T>&, T, T);                                             \
    template Tensor<T> ln(const Tensor<T>&);                                                       \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                              \
    template Tensor<T> reduce(const Tensor<T>&, ReduceKind, std::span<const std::size_t>, bool);   \
    template Tensor<T> mean_all(const Tensor<T>&);                                                 \
    template struct NetworkParams<T>;                                                              \
    template void adam_step(NetworkParams<T>&, AdamState<T>&, const AdamHyper<T>&, long);

HAAN_INSTANTIATE(float)
HAAN_INSTANTIATE(double)

#undef HAAN_INSTANTIATE

}  // namespace haan
