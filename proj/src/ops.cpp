#include "spo2/ops.hpp"

#include "spo2/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>

namespace spo2::tn {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

// Reductions with eight index-strided partial sums. The order depends only
// on n, never on the buffer address, so results do not vary between runs.
constexpr std::size_t kLanes = 8;

template <typename T, typename F>
T lane_sum(std::size_t n, F&& term) {
    T acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) {
            acc[l] += term(i + l);
        }
    }
    for (std::size_t l = 0; i < n; ++i, ++l) {
        acc[l] += term(i);
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    return lane_sum<T>(n, [a, b](std::size_t i) { return a[i] * b[i]; });
}

template <typename T>
T sum(const T* a, std::size_t n) {
    return lane_sum<T>(n, [a](std::size_t i) { return a[i]; });
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
    }
}

template <typename T>
std::vector<T>* parent_grad(Node<T>& node, std::size_t i) {
    Node<T>& p = *node.parents[i];
    if (!p.requires_grad) {
        return nullptr;
    }
    p.ensure_grad();
    return &p.grad;
}

struct ConvGeometry {
    std::size_t batch, in_c, in_h, in_w;
    std::size_t kh, kw;
    std::size_t out_h, out_w;
    Conv2dOptions opts;

    std::size_t patch() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, std::size_t kh, std::size_t kw,
                           Conv2dOptions opts, const char* what) {
    require_rank(x, 4, what);
    if (opts.stride_h == 0 || opts.stride_w == 0) {
        throw ShapeError(std::string(what) + ": stride must be positive");
    }
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kh, kw, 0, 0, opts};
    if (g.in_h + 2 * opts.pad_h < kh) {
        throw ShapeError(std::string(what) + ": kernel height " + std::to_string(kh) +
                         " exceeds padded input height " +
                         std::to_string(g.in_h + 2 * opts.pad_h));
    }
    if (g.in_w + 2 * opts.pad_w < kw) {
        throw ShapeError(std::string(what) + ": kernel width " + std::to_string(kw) +
                         " exceeds padded input width " +
                         std::to_string(g.in_w + 2 * opts.pad_w));
    }
    g.out_h = conv_out_size(g.in_h, kh, opts.stride_h, opts.pad_h);
    g.out_w = conv_out_size(g.in_w, kw, opts.stride_w, opts.pad_w);
    return g;
}

// Output columns [lo, hi) of tap column j read input column ow * stride + shift.
struct TapRange {
    long shift;
    std::size_t lo;
    std::size_t hi;
};

inline TapRange tap_range(std::size_t j, std::size_t in_w, std::size_t out_w, std::size_t stride,
                          std::size_t pad) {
    const long shift = static_cast<long>(j) - static_cast<long>(pad);
    const long sw = static_cast<long>(stride);
    const long lo = shift >= 0 ? 0 : (-shift + sw - 1) / sw;
    const long last = static_cast<long>(in_w) - 1 - shift;
    long hi = last < 0 ? 0 : last / sw + 1;
    hi = std::min(hi, static_cast<long>(out_w));
    return {shift, static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(hi, lo))};
}

// cols is (C*kh*kw) x (B*P), row-major.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t bp = g.batch * g.patch();
    const std::size_t sw = g.opts.stride_w;
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const TapRange r = tap_range(j, g.in_w, g.out_w, sw, g.opts.pad_w);
                T* row = cols + ((c * g.kh + i) * g.kw + j) * bp;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const T* plane = x + (b * g.in_c + c) * g.in_h * g.in_w;
                    T* dst = row + b * g.patch();
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.opts.stride_h + i) -
                                        static_cast<long>(g.opts.pad_h);
                        T* out = dst + oh * g.out_w;
                        if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
                            std::fill(out, out + g.out_w, T(0));
                            continue;
                        }
                        std::fill(out, out + r.lo, T(0));
                        std::fill(out + r.hi, out + g.out_w, T(0));
                        const T* src = plane + static_cast<std::size_t>(ih) * g.in_w +
                                       static_cast<std::size_t>(static_cast<long>(r.lo * sw) + r.shift);
                        if (sw == 1) {
                            std::copy(src, src + (r.hi - r.lo), out + r.lo);
                        } else {
                            for (std::size_t ow = r.lo; ow < r.hi; ++ow) {
                                out[ow] = src[(ow - r.lo) * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t bp = g.batch * g.patch();
    const std::size_t sw = g.opts.stride_w;
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const TapRange r = tap_range(j, g.in_w, g.out_w, sw, g.opts.pad_w);
                const T* row = cols + ((c * g.kh + i) * g.kw + j) * bp;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    T* plane = dx + (b * g.in_c + c) * g.in_h * g.in_w;
                    const T* src = row + b * g.patch();
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.opts.stride_h + i) -
                                        static_cast<long>(g.opts.pad_h);
                        if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
                            continue;
                        }
                        T* dst = plane + static_cast<std::size_t>(ih) * g.in_w +
                                 static_cast<std::size_t>(static_cast<long>(r.lo * sw) + r.shift);
                        const T* in = src + oh * g.out_w;
                        for (std::size_t ow = r.lo; ow < r.hi; ++ow) {
                            dst[(ow - r.lo) * sw] += in[ow];
                        }
                    }
                }
            }
        }
    }
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (auto* g = parent_grad(n, k)) {
                for (std::size_t i = 0; i < n.grad.size(); ++i) {
                    (*g)[i] += n.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] * factor;
    }
    return make_result<T>(x.shape(), std::move(out), {x}, [factor](Node<T>& n) {
        if (auto* g = parent_grad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                (*g)[i] += n.grad[i] * factor;
            }
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] > T(0) ? xv[i] : T(0);
    }
    return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& n) {
        if (auto* g = parent_grad(n, 0)) {
            const auto& xv = n.parents[0]->value;
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (xv[i] > T(0)) {
                    (*g)[i] += n.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    }
    return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& n) {
        if (auto* g = parent_grad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const T s = n.value[i];
                (*g)[i] += n.grad[i] * s * (T(1) - s);
            }
        }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opts) {
    require_rank(weight, 4, "conv2d weight");
    const ConvGeometry g = conv_geometry(x, weight.dim(2), weight.dim(3), opts, "conv2d");
    const std::size_t out_c = weight.dim(0);
    if (weight.dim(1) != g.in_c) {
        throw ShapeError("conv2d: weight in-channel axis " + std::to_string(weight.dim(1)) +
                         " does not match input channel axis " + std::to_string(g.in_c));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c)) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match out-channel axis " + std::to_string(out_c));
    }
    const std::size_t k = g.in_c * g.kh * g.kw;
    const std::size_t p = g.patch();
    const std::size_t in_plane = g.in_c * g.in_h * g.in_w;
    // One sample at a time keeps the column buffer cache resident.
    ConvGeometry one = g;
    one.batch = 1;

    std::vector<T> cols(k * p);
    std::vector<T> out(g.batch * out_c * p);
    const ConstMapMatrix<T> w(weight.values().data(), out_c, k);
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(x.values().data() + b * in_plane, one, cols.data());
        MapMatrix<T> dst(out.data() + b * out_c * p, out_c, p);
        dst.noalias() = w * ConstMapMatrix<T>(cols.data(), k, p);
        if (bias.defined()) {
            for (std::size_t o = 0; o < out_c; ++o) {
                dst.row(o).array() += bias.values()[o];
            }
        }
    }

    std::vector<Tensor<T>> parents{x, weight};
    if (bias.defined()) {
        parents.push_back(bias);
    }
    return make_result<T>(
        {g.batch, out_c, g.out_h, g.out_w}, std::move(out), std::move(parents),
        [g, one, out_c, k, p, in_plane](Node<T>& n) {
            const Node<T>& xn = *n.parents[0];
            const Node<T>& wn = *n.parents[1];
            auto* gw = parent_grad(n, 1);
            auto* gx = parent_grad(n, 0);
            auto* gb = n.parents.size() > 2 ? parent_grad(n, 2) : nullptr;
            const ConstMapMatrix<T> w(wn.value.data(), out_c, k);
            std::vector<T> cols(gw ? k * p : 0);
            RowMatrix<T> dcols(gx ? k : 0, gx ? p : 0);
            for (std::size_t b = 0; b < g.batch; ++b) {
                const ConstMapMatrix<T> dout(n.grad.data() + b * out_c * p, out_c, p);
                if (gw) {
                    im2col(xn.value.data() + b * in_plane, one, cols.data());
                    MapMatrix<T>(gw->data(), out_c, k).noalias() +=
                        dout * ConstMapMatrix<T>(cols.data(), k, p).transpose();
                }
                if (gx) {
                    dcols.noalias() = w.transpose() * dout;
                    col2im(dcols.data(), one, gx->data() + b * in_plane);
                }
                if (gb) {
                    for (std::size_t o = 0; o < out_c; ++o) {
                        (*gb)[o] += sum(dout.data() + o * p, p);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           Conv2dOptions opts) {
    require_rank(weight, 4, "depthwise_conv2d weight");
    const ConvGeometry g =
        conv_geometry(x, weight.dim(2), weight.dim(3), opts, "depthwise_conv2d");
    if (weight.dim(0) != g.in_c || weight.dim(1) != 1) {
        throw ShapeError("depthwise_conv2d: weight shape " + shape_str(weight.shape()) +
                         " does not match (C=" + std::to_string(g.in_c) + ", 1, kh, kw)");
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.in_c)) {
        throw ShapeError("depthwise_conv2d: bias shape " + shape_str(bias.shape()) +
                         " does not match channel axis " + std::to_string(g.in_c));
    }
    const std::size_t p = g.patch();
    const auto& xv = x.values();
    const auto& wv = weight.values();

    // Calls fn(out_row, in_first, w_idx, lo, hi) for every output row and
    // kernel tap; output column ow in [lo, hi) reads input in_first + (ow - lo) * stride_w.
    auto for_each_tap = [g](auto&& fn) {
        for (std::size_t b = 0; b < g.batch; ++b) {
            for (std::size_t c = 0; c < g.in_c; ++c) {
                const std::size_t plane = b * g.in_c + c;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    for (std::size_t i = 0; i < g.kh; ++i) {
                        const long ih = static_cast<long>(oh * g.opts.stride_h + i) -
                                        static_cast<long>(g.opts.pad_h);
                        if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
                            continue;
                        }
                        const std::size_t out_row = (plane * g.out_h + oh) * g.out_w;
                        const std::size_t in_row =
                            (plane * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
                        for (std::size_t j = 0; j < g.kw; ++j) {
                            const TapRange r =
                                tap_range(j, g.in_w, g.out_w, g.opts.stride_w, g.opts.pad_w);
                            if (r.lo >= r.hi) {
                                continue;
                            }
                            const std::size_t in_first = static_cast<std::size_t>(
                                static_cast<long>(in_row + r.lo * g.opts.stride_w) + r.shift);
                            fn(out_row, in_first, (c * g.kh + i) * g.kw + j, r.lo, r.hi);
                        }
                    }
                }
            }
        }
    };
    const std::size_t sw = g.opts.stride_w;

    std::vector<T> out(g.batch * g.in_c * p, T(0));
    for_each_tap([&](std::size_t orow, std::size_t first, std::size_t w, std::size_t lo,
                     std::size_t hi) {
        const T wt = wv[w];
        T* dst = out.data() + orow + lo;
        const T* src = xv.data() + first;
        const std::size_t len = hi - lo;
        if (sw == 1) {
            for (std::size_t k = 0; k < len; ++k) {
                dst[k] += wt * src[k];
            }
        } else {
            for (std::size_t k = 0; k < len; ++k) {
                dst[k] += wt * src[k * sw];
            }
        }
    });
    if (bias.defined()) {
        for (std::size_t b = 0; b < g.batch; ++b) {
            for (std::size_t c = 0; c < g.in_c; ++c) {
                T* dst = out.data() + (b * g.in_c + c) * p;
                for (std::size_t i = 0; i < p; ++i) {
                    dst[i] += bias.values()[c];
                }
            }
        }
    }

    std::vector<Tensor<T>> parents{x, weight};
    if (bias.defined()) {
        parents.push_back(bias);
    }
    return make_result<T>(
        {g.batch, g.in_c, g.out_h, g.out_w}, std::move(out), std::move(parents),
        [g, p, for_each_tap](Node<T>& n) {
            const auto& xv = n.parents[0]->value;
            const auto& wv = n.parents[1]->value;
            auto* gx = parent_grad(n, 0);
            auto* gw = parent_grad(n, 1);
            const std::size_t sw = g.opts.stride_w;
            if (gx || gw) {
                for_each_tap([&](std::size_t orow, std::size_t first, std::size_t w,
                                 std::size_t lo, std::size_t hi) {
                    const T* go = n.grad.data() + orow + lo;
                    const std::size_t len = hi - lo;
                    if (gx) {
                        const T wt = wv[w];
                        T* dst = gx->data() + first;
                        if (sw == 1) {
                            for (std::size_t k = 0; k < len; ++k) {
                                dst[k] += go[k] * wt;
                            }
                        } else {
                            for (std::size_t k = 0; k < len; ++k) {
                                dst[k * sw] += go[k] * wt;
                            }
                        }
                    }
                    if (gw) {
                        const T* src = xv.data() + first;
                        T acc = T(0);
                        if (sw == 1) {
                            acc = dot(go, src, len);
                        } else {
                            for (std::size_t k = 0; k < len; ++k) {
                                acc += go[k] * src[k * sw];
                            }
                        }
                        (*gw)[w] += acc;
                    }
                });
            }
            if (n.parents.size() > 2) {
                if (auto* gb = parent_grad(n, 2)) {
                    for (std::size_t b = 0; b < g.batch; ++b) {
                        for (std::size_t c = 0; c < g.in_c; ++c) {
                            (*gb)[c] += sum(n.grad.data() + (b * g.in_c + c) * p, p);
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, bool train) {
    require_rank(x, 4, "batchnorm2d");
    const std::size_t batch = x.dim(0);
    const std::size_t channels = x.dim(1);
    const std::size_t hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != channels || beta.numel() != channels ||
        state.running_mean.numel() != channels || state.running_var.numel() != channels) {
        throw ShapeError("batchnorm2d: parameters do not match channel axis " +
                         std::to_string(channels));
    }
    if (train && batch < 2) {
        throw BatchSizeError("batchnorm2d: train mode needs a batch of at least 2, got " +
                             std::to_string(batch));
    }
    const T count = static_cast<T>(batch * hw);
    const auto& xv = x.values();
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto inv_std = std::make_shared<std::vector<T>>(channels);
    std::vector<T> out(xv.size());

    for (std::size_t c = 0; c < channels; ++c) {
        T mean, var;
        if (train) {
            T total = T(0);
            for (std::size_t b = 0; b < batch; ++b) {
                total += sum(xv.data() + (b * channels + c) * hw, hw);
            }
            mean = total / count;
            T sq = T(0);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* src = xv.data() + (b * channels + c) * hw;
                sq += lane_sum<T>(hw, [src, mean](std::size_t i) {
                    const T d = src[i] - mean;
                    return d * d;
                });
            }
            var = sq / count;
            T& rm = state.running_mean.values()[c];
            T& rv = state.running_var.values()[c];
            rm = (T(1) - state.momentum) * rm + state.momentum * mean;
            rv = (T(1) - state.momentum) * rv + state.momentum * var;
        } else {
            mean = state.running_mean.values()[c];
            var = state.running_var.values()[c];
        }
        const T istd = T(1) / std::sqrt(var + state.eps);
        (*inv_std)[c] = istd;
        const T gm = gamma.values()[c];
        const T bt = beta.values()[c];
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T h = (xv[off + i] - mean) * istd;
                (*xhat)[off + i] = h;
                out[off + i] = gm * h + bt;
            }
        }
    }

    return make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xhat, inv_std, batch, channels, hw, count, train](Node<T>& n) {
            const auto& gv = n.parents[1]->value;
            auto* gx = parent_grad(n, 0);
            auto* gg = parent_grad(n, 1);
            auto* gb = parent_grad(n, 2);
            for (std::size_t c = 0; c < channels; ++c) {
                T sum_dy = T(0);
                T sum_dy_xhat = T(0);
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t off = (b * channels + c) * hw;
                    sum_dy += sum(n.grad.data() + off, hw);
                    sum_dy_xhat += dot(n.grad.data() + off, xhat->data() + off, hw);
                }
                if (gg) {
                    (*gg)[c] += sum_dy_xhat;
                }
                if (gb) {
                    (*gb)[c] += sum_dy;
                }
                if (!gx) {
                    continue;
                }
                const T k = gv[c] * (*inv_std)[c];
                const T mean_dy = train ? sum_dy / count : T(0);
                const T mean_dy_xhat = train ? sum_dy_xhat / count : T(0);
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t off = (b * channels + c) * hw;
                    T* dst = gx->data() + off;
                    const T* dy = n.grad.data() + off;
                    const T* h = xhat->data() + off;
                    for (std::size_t i = 0; i < hw; ++i) {
                        dst[i] += k * (dy[i] - mean_dy - h[i] * mean_dy_xhat);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank(x, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const std::size_t batch = x.dim(0);
    const std::size_t in_f = x.dim(1);
    const std::size_t out_f = weight.dim(0);
    if (weight.dim(1) != in_f) {
        throw ShapeError("linear: weight feature axis " + std::to_string(weight.dim(1)) +
                         " does not match input feature axis " + std::to_string(in_f));
    }
    if (bias.numel() != out_f) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) +
                         " does not match output axis " + std::to_string(out_f));
    }
    std::vector<T> out(batch * out_f);
    MapMatrix<T> y(out.data(), batch, out_f);
    y.noalias() = ConstMapMatrix<T>(x.values().data(), batch, in_f) *
                  ConstMapMatrix<T>(weight.values().data(), out_f, in_f).transpose();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < out_f; ++o) {
            y(b, o) += bias.values()[o];
        }
    }
    return make_result<T>({batch, out_f}, std::move(out), {x, weight, bias},
                          [batch, in_f, out_f](Node<T>& n) {
                              ConstMapMatrix<T> dy(n.grad.data(), batch, out_f);
                              if (auto* gx = parent_grad(n, 0)) {
                                  MapMatrix<T>(gx->data(), batch, in_f).noalias() +=
                                      dy * ConstMapMatrix<T>(n.parents[1]->value.data(), out_f,
                                                             in_f);
                              }
                              if (auto* gw = parent_grad(n, 1)) {
                                  MapMatrix<T>(gw->data(), out_f, in_f).noalias() +=
                                      dy.transpose() *
                                      ConstMapMatrix<T>(n.parents[0]->value.data(), batch, in_f);
                              }
                              if (auto* gb = parent_grad(n, 2)) {
                                  for (std::size_t b = 0; b < batch; ++b) {
                                      for (std::size_t o = 0; o < out_f; ++o) {
                                          (*gb)[o] += dy(b, o);
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> gap(const Tensor<T>& x) {
    require_rank(x, 4, "gap");
    const std::size_t bc = x.dim(0) * x.dim(1);
    const std::size_t hw = x.dim(2) * x.dim(3);
    std::vector<T> out(bc);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < bc; ++i) {
        out[i] = sum(xv.data() + i * hw, hw) / static_cast<T>(hw);
    }
    return make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {x}, [bc, hw](Node<T>& n) {
        if (auto* g = parent_grad(n, 0)) {
            for (std::size_t i = 0; i < bc; ++i) {
                const T v = n.grad[i] / static_cast<T>(hw);
                for (std::size_t j = 0; j < hw; ++j) {
                    (*g)[i * hw + j] += v;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || a.rank() != b.rank()) {
        throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    for (std::size_t i = 0; i < a.rank(); ++i) {
        if (i != 1 && a.dim(i) != b.dim(i)) {
            throw ShapeError("concat_channels: axis " + std::to_string(i) + " differs: " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
    }
    const std::size_t batch = a.dim(0);
    const std::size_t inner = a.numel() / (batch * a.dim(1));
    const std::size_t sa = a.dim(1) * inner;
    const std::size_t sb = b.dim(1) * inner;
    std::vector<T> out(a.numel() + b.numel());
    for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(a.values().data() + n * sa, sa, out.data() + n * (sa + sb));
        std::copy_n(b.values().data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
    }
    Shape shape = a.shape();
    shape[1] += b.dim(1);
    return make_result<T>(std::move(shape), std::move(out), {a, b},
                          [batch, sa, sb](Node<T>& n) {
                              if (auto* ga = parent_grad(n, 0)) {
                                  for (std::size_t i = 0; i < batch; ++i) {
                                      for (std::size_t j = 0; j < sa; ++j) {
                                          (*ga)[i * sa + j] += n.grad[i * (sa + sb) + j];
                                      }
                                  }
                              }
                              if (auto* gb = parent_grad(n, 1)) {
                                  for (std::size_t i = 0; i < batch; ++i) {
                                      for (std::size_t j = 0; j < sb; ++j) {
                                          (*gb)[i * sb + j] += n.grad[i * (sa + sb) + sa + j];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gate) {
    require_rank(x, 4, "channel_scale");
    require_rank(gate, 2, "channel_scale gate");
    if (gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(1)) {
        throw ShapeError("channel_scale: gate " + shape_str(gate.shape()) +
                         " does not match (B, C) of " + shape_str(x.shape()));
    }
    const std::size_t bc = gate.numel();
    const std::size_t hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < bc; ++i) {
        const T s = gate.values()[i];
        for (std::size_t j = 0; j < hw; ++j) {
            out[i * hw + j] = x.values()[i * hw + j] * s;
        }
    }
    return make_result<T>(x.shape(), std::move(out), {x, gate}, [bc, hw](Node<T>& n) {
        const auto& xv = n.parents[0]->value;
        const auto& gv = n.parents[1]->value;
        auto* gx = parent_grad(n, 0);
        auto* gg = parent_grad(n, 1);
        for (std::size_t i = 0; i < bc; ++i) {
            const T* go = n.grad.data() + i * hw;
            if (gx) {
                T* dst = gx->data() + i * hw;
                for (std::size_t j = 0; j < hw; ++j) {
                    dst[j] += go[j] * gv[i];
                }
            }
            if (gg) {
                (*gg)[i] += dot(go, xv.data() + i * hw, hw);
            }
        }
    });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.numel() != target.numel()) {
        throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    const std::size_t count = pred.numel();
    const T* pv = pred.values().data();
    const T* tv = target.values().data();
    const T sq = lane_sum<T>(count, [pv, tv](std::size_t i) {
        const T d = pv[i] - tv[i];
        return d * d;
    });
    return make_result<T>({1}, {sq / static_cast<T>(count)}, {pred, target},
                          [count](Node<T>& n) {
                              const auto& pv = n.parents[0]->value;
                              const auto& tv = n.parents[1]->value;
                              const T k = T(2) * n.grad[0] / static_cast<T>(count);
                              if (auto* gp = parent_grad(n, 0)) {
                                  for (std::size_t i = 0; i < count; ++i) {
                                      (*gp)[i] += k * (pv[i] - tv[i]);
                                  }
                              }
                              if (auto* gt = parent_grad(n, 1)) {
                                  for (std::size_t i = 0; i < count; ++i) {
                                      (*gt)[i] -= k * (pv[i] - tv[i]);
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> negcorr_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape() || pred.rank() == 0 || pred.rank() > 2) {
        throw ShapeError("negcorr_loss: expected matching (D) or (B, D) shapes, got " +
                         shape_str(pred.shape()) + " and " + shape_str(target.shape()));
    }
    const std::size_t len = pred.shape().back();
    if (len < 2) {
        throw LengthError("negcorr_loss: need at least 2 samples per window, got " +
                          std::to_string(len));
    }
    const std::size_t windows = pred.numel() / len;
    // Spread product below this is treated as zero variance.
    constexpr double kSpreadFloor = 1e-8;

    struct WindowStats {
        bool degenerate;
        T cov, sp, st;
    };
    auto stats = std::make_shared<std::vector<WindowStats>>(windows);
    T total = T(0);
    for (std::size_t w = 0; w < windows; ++w) {
        const T* p = pred.values().data() + w * len;
        const T* t = target.values().data() + w * len;
        T mp = T(0), mt = T(0);
        for (std::size_t i = 0; i < len; ++i) {
            mp += p[i];
            mt += t[i];
        }
        mp /= static_cast<T>(len);
        mt /= static_cast<T>(len);
        T cov = T(0), vp = T(0), vt = T(0);
        for (std::size_t i = 0; i < len; ++i) {
            const T a = p[i] - mp;
            const T b = t[i] - mt;
            cov += a * b;
            vp += a * a;
            vt += b * b;
        }
        const T sp = std::sqrt(vp);
        const T st = std::sqrt(vt);
        const bool degenerate = static_cast<double>(sp * st) <= kSpreadFloor;
        (*stats)[w] = {degenerate, cov, sp, st};
        const T r = degenerate ? T(0) : cov / (sp * st);
        total += T(1) - r;
    }
    return make_result<T>(
        {1}, {total / static_cast<T>(windows)}, {pred, target},
        [stats, windows, len](Node<T>& n) {
            auto* gp = parent_grad(n, 0);
            if (!gp) {
                return;
            }
            const T k = n.grad[0] / static_cast<T>(windows);
            for (std::size_t w = 0; w < windows; ++w) {
                const WindowStats& s = (*stats)[w];
                if (s.degenerate) {
                    continue;
                }
                const T* p = n.parents[0]->value.data() + w * len;
                const T* t = n.parents[1]->value.data() + w * len;
                T mp = T(0), mt = T(0);
                for (std::size_t i = 0; i < len; ++i) {
                    mp += p[i];
                    mt += t[i];
                }
                mp /= static_cast<T>(len);
                mt /= static_cast<T>(len);
                const T denom = s.sp * s.st;
                const T r = s.cov / denom;
                for (std::size_t i = 0; i < len; ++i) {
                    const T a = p[i] - mp;
                    const T b = t[i] - mt;
                    // dr/dp_i = b_i/(sp st) - r a_i/sp^2
                    const T dr = b / denom - r * a / (s.sp * s.sp);
                    (*gp)[w * len + i] -= k * dr;
                }
            }
        });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mmtm_gates(const Tensor<T>& a, const Tensor<T>& b,
                                           const MmtmParams<T>& params) {
    require_rank(a, 4, "mmtm_fuse a");
    require_rank(b, 4, "mmtm_fuse b");
    const std::size_t ca = a.dim(1);
    const std::size_t cb = b.dim(1);
    const std::size_t cz = mmtm_joint_dim(ca, cb);
    if (params.w_z.shape() != Shape{cz, ca + cb} || params.b_z.numel() != cz ||
        params.w_a.shape() != Shape{ca, cz} || params.b_a.numel() != ca ||
        params.w_b.shape() != Shape{cb, cz} || params.b_b.numel() != cb) {
        throw ShapeError("mmtm_fuse: parameters inconsistent with C_a=" + std::to_string(ca) +
                         ", C_b=" + std::to_string(cb) + ", C_z=" + std::to_string(cz));
    }
    const Tensor<T> squeezed = concat_channels(gap(a), gap(b));
    const Tensor<T> z = relu(linear(squeezed, params.w_z, params.b_z));
    Tensor<T> gate_a = scale(sigmoid(linear(z, params.w_a, params.b_a)), T(2));
    Tensor<T> gate_b = scale(sigmoid(linear(z, params.w_b, params.b_b)), T(2));
    return {std::move(gate_a), std::move(gate_b)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mmtm_fuse(const Tensor<T>& a, const Tensor<T>& b,
                                          const MmtmParams<T>& params) {
    auto [gate_a, gate_b] = mmtm_gates(a, b, params);
    return {channel_scale(a, gate_a), channel_scale(b, gate_b)};
}

#define SPO2_INSTANTIATE_OPS(T)                                                                \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> scale(const Tensor<T>&, T);                                             \
    template Tensor<T> relu(const Tensor<T>&);                                                 \
    template Tensor<T> sigmoid(const Tensor<T>&);                                              \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                              Conv2dOptions);                                                  \
    template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                        Conv2dOptions);                                        \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                   BatchNormState<T>&, bool);                                  \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> gap(const Tensor<T>&);                                                  \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                    \
    template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> negcorr_loss(const Tensor<T>&, const Tensor<T>&);                       \
    template std::pair<Tensor<T>, Tensor<T>> mmtm_gates(const Tensor<T>&, const Tensor<T>&,    \
                                                        const MmtmParams<T>&);                 \
    template std::pair<Tensor<T>, Tensor<T>> mmtm_fuse(const Tensor<T>&, const Tensor<T>&,     \
                                                       const MmtmParams<T>&);

SPO2_INSTANTIATE_OPS(float)
SPO2_INSTANTIATE_OPS(double)

#undef SPO2_INSTANTIATE_OPS

} // namespace spo2::tn
