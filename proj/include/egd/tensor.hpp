#pragma once

// Dense NCHW tensor engine with tape-based reverse-mode gradients.
// Storage and accumulation are double precision so central finite differences
// at step 1e-4 stay meaningful. All ops are deterministic: fixed iteration
// order, contiguous-chunk parallelism only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egd/common.hpp"

namespace egd {

using Shape4 = std::array<int, 4>;  // N, C, H, W

inline std::string shape_str(const Shape4& s) {
    return format_msg("(", s[0], ",", s[1], ",", s[2], ",", s[3], ")");
}

namespace detail {

struct TensorNode {
    Shape4 shape{0, 0, 0, 0};
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
};

}  // namespace detail

// Lightweight shared handle; copies alias the same storage (the convention of
// every autograd engine). Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    Tensor(int n, int c, int h, int w, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode>()) {
        if (n <= 0 || c <= 0 || h <= 0 || w <= 0)
            throw ParamError(format_msg("tensor extents must be positive, got ", shape_str({n, c, h, w})));
        node_->shape = {n, c, h, w};
        node_->data.assign(numel(), 0.0);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(const Shape4& s, bool requires_grad = false)
        : Tensor(s[0], s[1], s[2], s[3], requires_grad) {}

    static Tensor full(const Shape4& s, double value, bool requires_grad = false) {
        Tensor t(s, requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from_values(const Shape4& s, std::span<const double> values, bool requires_grad = false) {
        Tensor t(s, requires_grad);
        if (values.size() != t.data().size())
            throw ParamError(format_msg("value count ", values.size(), " does not match shape ", shape_str(s)));
        std::copy(values.begin(), values.end(), t.data().begin());
        return t;
    }

    static Tensor randn(const Shape4& s, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t(s, requires_grad);
        for (double& v : t.data()) v = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    int n() const { return node_->shape[0]; }
    int c() const { return node_->shape[1]; }
    int h() const { return node_->shape[2]; }
    int w() const { return node_->shape[3]; }

    std::int64_t numel() const {
        const auto& s = node_->shape;
        return static_cast<std::int64_t>(s[0]) * s[1] * s[2] * s[3];
    }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    double& at(int n, int c, int y, int x) { return node_->data[index(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return node_->data[index(n, c, y, x)]; }

    std::int64_t index(int n, int c, int y, int x) const {
        const auto& s = node_->shape;
        return ((static_cast<std::int64_t>(n) * s[1] + c) * s[2] + y) * s[3] + x;
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad() {
        ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const { return node_->grad; }

    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    Tensor clone() const {
        Tensor t(node_->shape, node_->requires_grad);
        t.data() = node_->data;
        return t;
    }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    std::uint64_t content_hash() const {
        return fnv1a64(node_->data.data(), node_->data.size() * sizeof(double));
    }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

inline void ensure_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v))
            throw ParamError(format_msg(op, ": non-finite value produced"));
    }
}

// ---------------------------------------------------------------------------
// Tape: records backward steps in forward order; backward() replays them in
// reverse once, then must be reset before reuse.
// ---------------------------------------------------------------------------

class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    // Registers a tensor whose grad participates in the recorded computation.
    void touch(const Tensor& t) { participants_.push_back(t); }

    void backward(Tensor& output, const Tensor& output_grad) {
        if (consumed_)
            throw ParamError("Tape::backward called twice without reset");
        if (output.shape() != output_grad.shape())
            throw ParamError(format_msg("output_grad shape ", shape_str(output_grad.shape()),
                                        " does not match output ", shape_str(output.shape())));
        for (auto& t : participants_) {
            t.ensure_grad();
            t.zero_grad();
        }
        output.ensure_grad();
        output.zero_grad();
        std::copy(output_grad.data().begin(), output_grad.data().end(), output.grad().begin());
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    void reset() {
        steps_.clear();
        participants_.clear();
        consumed_ = false;
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
    std::vector<Tensor> participants_;
    bool consumed_ = false;
};

namespace detail {

inline bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t && t->requires_grad()) return true;
    return false;
}

// Registers output + inputs and marks the output as grad-carrying so chained
// ops keep recording.
inline void tape_enroll(Tape* tape, Tensor& out, std::initializer_list<const Tensor*> ins) {
    out.set_requires_grad(true);
    tape->touch(out);
    for (const Tensor* t : ins)
        if (t) tape->touch(*t);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// GEMM kernels (row-major). ikj order so the inner loop streams contiguously.
// ---------------------------------------------------------------------------

namespace detail {

// C[MxN] += A[MxK] * B[KxN]
inline void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A, const double* B, double* C) {
    parallel_for(0, M, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            double* crow = C + i * N;
            const double* arow = A + i * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double a = arow[k];
                if (a == 0.0) continue;
                const double* brow = B + k * N;
                for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
            }
        }
    });
}

// C[MxK] += A[MxN] * B^T where B is [KxN]
inline void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const double* A, const double* B, double* C) {
    parallel_for(0, M, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const double* arow = A + i * N;
            double* crow = C + i * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const double* brow = B + k * N;
                double acc = 0.0;
                for (std::int64_t j = 0; j < N; ++j) acc += arow[j] * brow[j];
                crow[k] += acc;
            }
        }
    });
}

// C[KxN] += A^T * B where A is [MxK], B is [MxN]
inline void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const double* A, const double* B, double* C) {
    // K-partitioned so writes stay disjoint under parallelism.
    parallel_for(0, K, [&](std::int64_t k0, std::int64_t k1) {
        for (std::int64_t m = 0; m < M; ++m) {
            const double* arow = A + m * K;
            const double* brow = B + m * N;
            for (std::int64_t k = k0; k < k1; ++k) {
                const double a = arow[k];
                if (a == 0.0) continue;
                double* crow = C + k * N;
                for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvOpts {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

inline int conv_out_extent(int in, int k, int stride, int padding, int dilation) {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

namespace detail {

inline void check_conv_args(const Tensor& x, const Tensor& w, const ConvOpts& o) {
    if (o.stride < 1 || o.dilation < 1 || o.padding < 0 || o.groups < 1)
        throw ParamError(format_msg("conv2d: invalid geometry stride=", o.stride, " padding=", o.padding,
                                    " dilation=", o.dilation, " groups=", o.groups));
    const int in_c = x.c();
    const int out_c = w.n();
    if (in_c % o.groups != 0)
        throw ParamError(format_msg("conv2d: in_channels ", in_c, " not divisible by groups ", o.groups));
    if (out_c % o.groups != 0)
        throw ParamError(format_msg("conv2d: out_channels ", out_c, " not divisible by groups ", o.groups));
    if (w.c() != in_c / o.groups)
        throw ParamError(format_msg("conv2d: weight expects ", w.c(), " input channels per group, input has ",
                                    in_c, " channels with groups=", o.groups));
    if (x.h() + 2 * o.padding < o.dilation * (w.h() - 1) + 1 || x.w() + 2 * o.padding < o.dilation * (w.w() - 1) + 1)
        throw ParamError(format_msg("conv2d: padded input ", shape_str(x.shape()),
                                    " smaller than dilated kernel ", shape_str(w.shape())));
}

// cols layout: [C_in * kh * kw, Ho * Wo], channel-major rows.
inline void im2col(const Tensor& x, int n, int kh, int kw, const ConvOpts& o, int ho, int wo, double* cols) {
    const int H = x.h(), W = x.w(), C = x.c();
    const double* src = x.data().data() + x.index(n, 0, 0, 0);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* dst = cols + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) * out_plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * o.stride - o.padding + ky * o.dilation;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + wo, 0.0);
                        dst += wo;
                        continue;
                    }
                    const double* srow = src + c * plane + static_cast<std::int64_t>(iy) * W;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * o.stride - o.padding + kx * o.dilation;
                        *dst++ = (ix < 0 || ix >= W) ? 0.0 : srow[ix];
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const double* cols, int n, int C, int H, int W, int kh, int kw, const ConvOpts& o,
                         int ho, int wo, Tensor& gx) {
    double* dst = gx.grad().data() + gx.index(n, 0, 0, 0);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const double* src = cols + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) * out_plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * o.stride - o.padding + ky * o.dilation;
                    if (iy < 0 || iy >= H) {
                        src += wo;
                        continue;
                    }
                    double* drow = dst + c * plane + static_cast<std::int64_t>(iy) * W;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * o.stride - o.padding + kx * o.dilation;
                        if (ix >= 0 && ix < W) drow[ix] += src[ox];
                    }
                    src += wo;
                }
            }
        }
    }
}

// Direct depthwise path: groups == C_in == C_out.
inline void depthwise_forward(const Tensor& x, const Tensor& w, const ConvOpts& o, Tensor& out) {
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    const int kh = w.h(), kw = w.w();
    const int ho = out.h(), wo = out.w();
    parallel_for(0, static_cast<std::int64_t>(N) * C, [&](std::int64_t b0, std::int64_t b1) {
        for (std::int64_t b = b0; b < b1; ++b) {
            const int n = static_cast<int>(b / C), c = static_cast<int>(b % C);
            const double* src = x.data().data() + x.index(n, c, 0, 0);
            const double* ker = w.data().data() + w.index(c, 0, 0, 0);
            double* dst = out.data().data() + out.index(n, c, 0, 0);
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = 0.0;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * o.stride - o.padding + ky * o.dilation;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * o.stride - o.padding + kx * o.dilation;
                            if (ix < 0 || ix >= W) continue;
                            acc += ker[ky * kw + kx] * src[static_cast<std::int64_t>(iy) * W + ix];
                        }
                    }
                    *dst++ = acc;
                }
            }
        }
    });
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = {},
                     const ConvOpts& opts = {}, Tape* tape = nullptr) {
    detail::check_conv_args(x, weight, opts);
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    const int out_c = weight.n(), kh = weight.h(), kw = weight.w();
    if (bias && (bias->numel() != out_c))
        throw ParamError(format_msg("conv2d: bias length ", bias->numel(), " != out_channels ", out_c));
    const int ho = conv_out_extent(H, kh, opts.stride, opts.padding, opts.dilation);
    const int wo = conv_out_extent(W, kw, opts.stride, opts.padding, opts.dilation);
    Tensor out(N, out_c, ho, wo);

    const int g = opts.groups;
    const bool depthwise = (g == C && g == out_c);
    const std::int64_t out_plane = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t k_rows = static_cast<std::int64_t>(C) * kh * kw;
    const std::int64_t g_rows = k_rows / g;                 // rows per group in cols
    const std::int64_t g_out = out_c / g;                   // output channels per group

    if (depthwise) {
        detail::depthwise_forward(x, weight, opts, out);
    } else {
        std::vector<double> cols(k_rows * out_plane);
        for (int n = 0; n < N; ++n) {
            detail::im2col(x, n, kh, kw, opts, ho, wo, cols.data());
            for (int gi = 0; gi < g; ++gi) {
                detail::gemm_nn(g_out, g_rows, out_plane,
                                weight.data().data() + gi * g_out * g_rows,
                                cols.data() + gi * g_rows * out_plane,
                                out.data().data() + out.index(n, static_cast<int>(gi * g_out), 0, 0));
            }
        }
    }
    if (bias) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < out_c; ++c) {
                const double b = bias->data()[c];
                double* dst = out.data().data() + out.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < out_plane; ++i) dst[i] += b;
            }
    }
    ensure_finite(out, "conv2d");

    const Tensor* bptr = bias ? &*bias : nullptr;
    if (detail::wants_grad(tape, {&x, &weight, bptr})) {
        detail::tape_enroll(tape, out, {&x, &weight, bptr});
        Tensor xc = x, wc = weight, oc = out;
        std::optional<Tensor> bc = bias;
        ConvOpts o = opts;
        tape->record([xc, wc, oc, bc, o, ho, wo, kh, kw, g, g_rows, g_out, out_plane, k_rows]() mutable {
            const auto& go = oc.grad();
            std::vector<double> cols(k_rows * out_plane);
            std::vector<double> gcols(k_rows * out_plane);
            const bool need_x = xc.requires_grad();
            const bool need_w = wc.requires_grad();
            if (need_x) xc.ensure_grad();
            if (need_w) wc.ensure_grad();
            for (int n = 0; n < xc.n(); ++n) {
                if (need_w) detail::im2col(xc, n, kh, kw, o, ho, wo, cols.data());
                if (need_x) std::fill(gcols.begin(), gcols.end(), 0.0);
                for (int gi = 0; gi < g; ++gi) {
                    const double* go_g = go.data() + oc.index(n, static_cast<int>(gi * g_out), 0, 0);
                    if (need_w) {
                        detail::gemm_nt(g_out, out_plane, g_rows, go_g,
                                        cols.data() + gi * g_rows * out_plane,
                                        wc.grad().data() + gi * g_out * g_rows);
                    }
                    if (need_x) {
                        detail::gemm_tn(g_out, g_rows, out_plane,
                                        wc.data().data() + gi * g_out * g_rows, go_g,
                                        gcols.data() + gi * g_rows * out_plane);
                    }
                }
                if (need_x) detail::col2im_accum(gcols.data(), n, xc.c(), xc.h(), xc.w(), kh, kw, o, ho, wo, xc);
            }
            if (bc && bc->requires_grad()) {
                bc->ensure_grad();
                auto& gb = bc->grad();
                for (int n = 0; n < oc.n(); ++n)
                    for (int c = 0; c < oc.c(); ++c) {
                        const double* src = go.data() + oc.index(n, c, 0, 0);
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < out_plane; ++i) acc += src[i];
                        gb[c] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolKind { max, avg };

inline Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int padding, Tape* tape = nullptr) {
    if (k < 1) throw ParamError(format_msg("pool2d: kernel must be >= 1, got ", k));
    if (stride < 1) throw ParamError(format_msg("pool2d: stride must be >= 1, got ", stride));
    if (padding < 0 || padding >= k)
        throw ParamError(format_msg("pool2d: padding ", padding, " must satisfy 0 <= padding < k=", k));
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    const int ho = conv_out_extent(H, k, stride, padding, 1);
    const int wo = conv_out_extent(W, k, stride, padding, 1);
    Tensor out(N, C, ho, wo);
    const bool is_max = (kind == PoolKind::max);
    // argmax per output element, used by both determinism (first max wins)
    // and the backward route.
    std::shared_ptr<std::vector<std::int64_t>> argmax;
    if (is_max) argmax = std::make_shared<std::vector<std::int64_t>>(out.numel(), -1);

    std::int64_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.data().data() + x.index(n, c, 0, 0);
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, ++oi) {
                    if (is_max) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::int64_t best_idx = -1;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= W) continue;
                                const double v = src[static_cast<std::int64_t>(iy) * W + ix];
                                if (v > best) {
                                    best = v;
                                    best_idx = x.index(n, c, iy, ix);
                                }
                            }
                        }
                        out.data()[oi] = best;
                        (*argmax)[oi] = best_idx;
                    } else {
                        double acc = 0.0;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= W) continue;
                                acc += src[static_cast<std::int64_t>(iy) * W + ix];
                            }
                        }
                        out.data()[oi] = acc / (static_cast<double>(k) * k);
                    }
                }
        }
    ensure_finite(out, "pool2d");

    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        if (is_max) {
            tape->record([xc, oc, argmax]() mutable {
                xc.ensure_grad();
                const auto& go = oc.grad();
                for (std::int64_t i = 0; i < oc.numel(); ++i)
                    if ((*argmax)[i] >= 0) xc.grad()[(*argmax)[i]] += go[i];
            });
        } else {
            const int kk = k, st = stride, pd = padding;
            tape->record([xc, oc, kk, st, pd]() mutable {
                xc.ensure_grad();
                const auto& go = oc.grad();
                const double inv = 1.0 / (static_cast<double>(kk) * kk);
                std::int64_t oi = 0;
                for (int n = 0; n < oc.n(); ++n)
                    for (int c = 0; c < oc.c(); ++c)
                        for (int oy = 0; oy < oc.h(); ++oy)
                            for (int ox = 0; ox < oc.w(); ++ox, ++oi) {
                                const double gv = go[oi] * inv;
                                for (int ky = 0; ky < kk; ++ky) {
                                    const int iy = oy * st - pd + ky;
                                    if (iy < 0 || iy >= xc.h()) continue;
                                    for (int kx = 0; kx < kk; ++kx) {
                                        const int ix = ox * st - pd + kx;
                                        if (ix < 0 || ix >= xc.w()) continue;
                                        xc.grad()[xc.index(n, c, iy, ix)] += gv;
                                    }
                                }
                            }
            });
        }
    }
    return out;
}

inline Tensor adaptive_avg_pool(const Tensor& x, int out_h, int out_w, Tape* tape = nullptr) {
    if (out_h < 1 || out_w < 1)
        throw ParamError(format_msg("adaptive_avg_pool: output extents must be positive, got ", out_h, "x", out_w));
    if (out_h > x.h() || out_w > x.w())
        throw ParamError(format_msg("adaptive_avg_pool: output ", out_h, "x", out_w,
                                    " exceeds input ", x.h(), "x", x.w()));
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    Tensor out(N, C, out_h, out_w);
    auto win = [](int i, int in, int on, int& lo, int& hi) {
        lo = (i * in) / on;
        hi = ((i + 1) * in + on - 1) / on;  // ceil
    };
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < out_h; ++oy) {
                int y0, y1;
                win(oy, H, out_h, y0, y1);
                for (int ox = 0; ox < out_w; ++ox) {
                    int x0, x1;
                    win(ox, W, out_w, x0, x1);
                    double acc = 0.0;
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix) acc += x.at(n, c, iy, ix);
                    out.at(n, c, oy, ox) = acc / ((y1 - y0) * (x1 - x0));
                }
            }
    ensure_finite(out, "adaptive_avg_pool");

    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc, win]() mutable {
            xc.ensure_grad();
            for (int n = 0; n < oc.n(); ++n)
                for (int c = 0; c < oc.c(); ++c)
                    for (int oy = 0; oy < oc.h(); ++oy) {
                        int y0, y1;
                        win(oy, xc.h(), oc.h(), y0, y1);
                        for (int ox = 0; ox < oc.w(); ++ox) {
                            int x0, x1;
                            win(ox, xc.w(), oc.w(), x0, x1);
                            const double gv = oc.grad()[oc.index(n, c, oy, ox)] / ((y1 - y0) * (x1 - x0));
                            for (int iy = y0; iy < y1; ++iy)
                                for (int ix = x0; ix < x1; ++ix) xc.grad()[xc.index(n, c, iy, ix)] += gv;
                        }
                    }
        });
    }
    return out;
}

inline Tensor upsample_nearest(const Tensor& x, int scale, Tape* tape = nullptr) {
    if (scale < 1) throw ParamError(format_msg("upsample_nearest: scale must be >= 1, got ", scale));
    if (scale == 1) {
        Tensor out = x.clone();
        out.set_requires_grad(false);
        if (detail::wants_grad(tape, {&x})) {
            detail::tape_enroll(tape, out, {&x});
            Tensor xc = x, oc = out;
            tape->record([xc, oc]() mutable {
                xc.ensure_grad();
                for (std::int64_t i = 0; i < xc.numel(); ++i) xc.grad()[i] += oc.grad()[i];
            });
        }
        return out;
    }
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    Tensor out(N, C, H * scale, W * scale);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < H * scale; ++oy)
                for (int ox = 0; ox < W * scale; ++ox)
                    out.at(n, c, oy, ox) = x.at(n, c, oy / scale, ox / scale);

    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        const int s = scale;
        tape->record([xc, oc, s]() mutable {
            xc.ensure_grad();
            for (int n = 0; n < oc.n(); ++n)
                for (int c = 0; c < oc.c(); ++c)
                    for (int oy = 0; oy < oc.h(); ++oy)
                        for (int ox = 0; ox < oc.w(); ++ox)
                            xc.grad()[xc.index(n, c, oy / s, ox / s)] += oc.grad()[oc.index(n, c, oy, ox)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear_sample: coords is (N, 2, P, Q), channel 0 = y, channel 1 = x.
// Out-of-bounds samples use zero padding; gradient flows to both the image
// and the coordinates.
// ---------------------------------------------------------------------------

namespace detail {

inline double bilinear_one(const double* plane, int H, int W, double y, double x,
                           double* dy = nullptr, double* dx = nullptr) {
    if (dy) *dy = 0.0;
    if (dx) *dx = 0.0;
    if (y <= -1.0 || y >= H || x <= -1.0 || x >= W) return 0.0;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const int y1 = y0 + 1, x1 = x0 + 1;
    const double ly = y - y0, lx = x - x0;
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    auto v = [&](int yy, int xx) -> double {
        return (yy < 0 || yy >= H || xx < 0 || xx >= W) ? 0.0 : plane[static_cast<std::int64_t>(yy) * W + xx];
    };
    const double v00 = v(y0, x0), v01 = v(y0, x1), v10 = v(y1, x0), v11 = v(y1, x1);
    if (dy) *dy = -hx * v00 - lx * v01 + hx * v10 + lx * v11;
    if (dx) *dx = -hy * v00 + hy * v01 - ly * v10 + ly * v11;
    return hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
}

inline void bilinear_scatter(double* gplane, int H, int W, double y, double x, double g) {
    if (y <= -1.0 || y >= H || x <= -1.0 || x >= W) return;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const int y1 = y0 + 1, x1 = x0 + 1;
    const double ly = y - y0, lx = x - x0;
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    auto add = [&](int yy, int xx, double w) {
        if (yy >= 0 && yy < H && xx >= 0 && xx < W) gplane[static_cast<std::int64_t>(yy) * W + xx] += w * g;
    };
    add(y0, x0, hy * hx);
    add(y0, x1, hy * lx);
    add(y1, x0, ly * hx);
    add(y1, x1, ly * lx);
}

}  // namespace detail

inline Tensor bilinear_sample(const Tensor& x, const Tensor& coords, Tape* tape = nullptr) {
    if (coords.c() != 2)
        throw ParamError(format_msg("bilinear_sample: coords must have 2 channels (y, x), got ", coords.c()));
    if (coords.n() != x.n())
        throw ParamError(format_msg("bilinear_sample: batch mismatch ", x.n(), " vs ", coords.n()));
    for (double v : coords.data())
        if (!std::isfinite(v)) throw ParamError("bilinear_sample: non-finite coordinate");
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    const int P = coords.h(), Q = coords.w();
    Tensor out(N, C, P, Q);
    for (int n = 0; n < N; ++n) {
        const double* cy = coords.data().data() + coords.index(n, 0, 0, 0);
        const double* cx = coords.data().data() + coords.index(n, 1, 0, 0);
        for (int c = 0; c < C; ++c) {
            const double* plane = x.data().data() + x.index(n, c, 0, 0);
            double* dst = out.data().data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(P) * Q; ++i)
                dst[i] = detail::bilinear_one(plane, H, W, cy[i], cx[i]);
        }
    }
    ensure_finite(out, "bilinear_sample");

    if (detail::wants_grad(tape, {&x, &coords})) {
        detail::tape_enroll(tape, out, {&x, &coords});
        Tensor xc = x, cc = coords, oc = out;
        tape->record([xc, cc, oc]() mutable {
            const bool need_x = xc.requires_grad();
            const bool need_c = cc.requires_grad();
            if (need_x) xc.ensure_grad();
            if (need_c) cc.ensure_grad();
            const int H = xc.h(), W = xc.w(), P = oc.h(), Q = oc.w();
            for (int n = 0; n < oc.n(); ++n) {
                const double* cy = cc.data().data() + cc.index(n, 0, 0, 0);
                const double* cx = cc.data().data() + cc.index(n, 1, 0, 0);
                double* gy = need_c ? cc.grad().data() + cc.index(n, 0, 0, 0) : nullptr;
                double* gx = need_c ? cc.grad().data() + cc.index(n, 1, 0, 0) : nullptr;
                for (int c = 0; c < oc.c(); ++c) {
                    const double* plane = xc.data().data() + xc.index(n, c, 0, 0);
                    double* gplane = need_x ? xc.grad().data() + xc.index(n, c, 0, 0) : nullptr;
                    const double* go = oc.grad().data() + oc.index(n, c, 0, 0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(P) * Q; ++i) {
                        if (need_c) {
                            double dy, dx;
                            detail::bilinear_one(plane, H, W, cy[i], cx[i], &dy, &dx);
                            gy[i] += dy * go[i];
                            gx[i] += dx * go[i];
                        }
                        if (need_x) detail::bilinear_scatter(gplane, H, W, cy[i], cx[i], go[i]);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double sigmoid_scalar(double v) {
    if (v >= 0.0) {
        const double e = std::exp(-v);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x, Tape* tape = nullptr) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = sigmoid_scalar(x.data()[i]);
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            xc.ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i) {
                const double s = oc.data()[i];
                xc.grad()[i] += oc.grad()[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

inline Tensor silu(const Tensor& x, Tape* tape = nullptr) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = v * sigmoid_scalar(v);
    }
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            xc.ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i) {
                const double v = xc.data()[i];
                const double s = sigmoid_scalar(v);
                xc.grad()[i] += oc.grad()[i] * (s + v * s * (1.0 - s));
            }
        });
    }
    return out;
}

// Max-subtracted, sums to 1 along `axis` (0..3 over N,C,H,W).
inline Tensor softmax(const Tensor& x, int axis, Tape* tape = nullptr) {
    if (axis < 0 || axis > 3) throw ParamError(format_msg("softmax: axis must be in [0,3], got ", axis));
    const Shape4 s = x.shape();
    const int L = s[static_cast<std::size_t>(axis)];
    // strides for iteration: outer loops over the other three axes.
    const std::int64_t strides[4] = {static_cast<std::int64_t>(s[1]) * s[2] * s[3],
                                     static_cast<std::int64_t>(s[2]) * s[3], s[3], 1};
    const std::int64_t step = strides[axis];
    Tensor out(s);
    std::array<int, 3> other{};
    int oi = 0;
    for (int a = 0; a < 4; ++a)
        if (a != axis) other[oi++] = a;
    for (int i0 = 0; i0 < s[other[0]]; ++i0)
        for (int i1 = 0; i1 < s[other[1]]; ++i1)
            for (int i2 = 0; i2 < s[other[2]]; ++i2) {
                const std::int64_t base = i0 * strides[other[0]] + i1 * strides[other[1]] + i2 * strides[other[2]];
                double mx = -std::numeric_limits<double>::infinity();
                for (int l = 0; l < L; ++l) mx = std::max(mx, x.data()[base + l * step]);
                double sum = 0.0;
                for (int l = 0; l < L; ++l) {
                    const double e = std::exp(x.data()[base + l * step] - mx);
                    out.data()[base + l * step] = e;
                    sum += e;
                }
                for (int l = 0; l < L; ++l) out.data()[base + l * step] /= sum;
            }
    ensure_finite(out, "softmax");

    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        const int ax = axis;
        tape->record([xc, oc, ax]() mutable {
            xc.ensure_grad();
            const Shape4 s = xc.shape();
            const std::int64_t strides[4] = {static_cast<std::int64_t>(s[1]) * s[2] * s[3],
                                             static_cast<std::int64_t>(s[2]) * s[3], s[3], 1};
            const std::int64_t step = strides[ax];
            const int L = s[static_cast<std::size_t>(ax)];
            std::array<int, 3> other{};
            int oi = 0;
            for (int a = 0; a < 4; ++a)
                if (a != ax) other[oi++] = a;
            for (int i0 = 0; i0 < s[other[0]]; ++i0)
                for (int i1 = 0; i1 < s[other[1]]; ++i1)
                    for (int i2 = 0; i2 < s[other[2]]; ++i2) {
                        const std::int64_t base =
                            i0 * strides[other[0]] + i1 * strides[other[1]] + i2 * strides[other[2]];
                        double dot = 0.0;
                        for (int l = 0; l < L; ++l)
                            dot += oc.grad()[base + l * step] * oc.data()[base + l * step];
                        for (int l = 0; l < L; ++l) {
                            const double y = oc.data()[base + l * step];
                            xc.grad()[base + l * step] += y * (oc.grad()[base + l * step] - dot);
                        }
                    }
        });
    }
    return out;
}

enum class Act { none, sigmoid, silu };

inline Tensor activation(const Tensor& x, Act kind, Tape* tape = nullptr) {
    switch (kind) {
        case Act::none: return x;
        case Act::sigmoid: return sigmoid(x, tape);
        case Act::silu: return silu(x, tape);
    }
    throw ParamError("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Normalization. Per-channel parameters live in (1, C, 1, 1) tensors.
// ---------------------------------------------------------------------------

inline Tensor batchnorm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const Tensor& running_mean, const Tensor& running_var, double eps,
                              Tape* tape = nullptr) {
    const int C = x.c();
    for (const Tensor* p : {&gamma, &beta, &running_mean, &running_var})
        if (p->numel() != C)
            throw ParamError(format_msg("batchnorm_infer: parameter length ", p->numel(),
                                        " does not match channels ", C));
    for (double v : running_var.data())
        if (v < 0.0) throw ParamError("batchnorm_infer: running_var must be non-negative");
    Tensor out(x.shape());
    const std::int64_t plane = static_cast<std::int64_t>(x.h()) * x.w();
    std::vector<double> scale(C), shift(C);
    for (int c = 0; c < C; ++c) {
        scale[c] = gamma.data()[c] / std::sqrt(running_var.data()[c] + eps);
        shift[c] = beta.data()[c] - running_mean.data()[c] * scale[c];
    }
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.data().data() + x.index(n, c, 0, 0);
            double* dst = out.data().data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] * scale[c] + shift[c];
        }
    ensure_finite(out, "batchnorm_infer");

    if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
        detail::tape_enroll(tape, out, {&x, &gamma, &beta});
        Tensor xc = x, gc = gamma, bc = beta, mc = running_mean, vc = running_var, oc = out;
        const double e = eps;
        tape->record([xc, gc, bc, mc, vc, oc, e, plane]() mutable {
            const int C = xc.c();
            const bool need_x = xc.requires_grad();
            const bool need_g = gc.requires_grad();
            const bool need_b = bc.requires_grad();
            if (need_x) xc.ensure_grad();
            if (need_g) gc.ensure_grad();
            if (need_b) bc.ensure_grad();
            for (int n = 0; n < xc.n(); ++n)
                for (int c = 0; c < C; ++c) {
                    const double inv = 1.0 / std::sqrt(vc.data()[c] + e);
                    const double* src = xc.data().data() + xc.index(n, c, 0, 0);
                    const double* go = oc.grad().data() + oc.index(n, c, 0, 0);
                    double gsum = 0.0, gdot = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        gsum += go[i];
                        gdot += go[i] * (src[i] - mc.data()[c]) * inv;
                    }
                    if (need_x) {
                        double* gx = xc.grad().data() + xc.index(n, c, 0, 0);
                        const double k = gc.data()[c] * inv;
                        for (std::int64_t i = 0; i < plane; ++i) gx[i] += go[i] * k;
                    }
                    if (need_g) gc.grad()[c] += gdot;
                    if (need_b) bc.grad()[c] += gsum;
                }
        });
    }
    return out;
}

inline Tensor groupnorm(const Tensor& x, int num_groups, const Tensor& gamma, const Tensor& beta, double eps,
                        Tape* tape = nullptr) {
    const int C = x.c();
    if (num_groups < 1 || C % num_groups != 0)
        throw ParamError(format_msg("groupnorm: channels ", C, " not divisible by num_groups ", num_groups));
    if (gamma.numel() != C || beta.numel() != C)
        throw ParamError(format_msg("groupnorm: affine length mismatch, channels ", C));
    const int cg = C / num_groups;
    const std::int64_t plane = static_cast<std::int64_t>(x.h()) * x.w();
    const std::int64_t m = cg * plane;  // elements per (sample, group)
    Tensor out(x.shape());
    // saved statistics for backward
    auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.n()) * num_groups);
    auto invstds = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.n()) * num_groups);
    for (int n = 0; n < x.n(); ++n)
        for (int g = 0; g < num_groups; ++g) {
            const std::int64_t base = x.index(n, g * cg, 0, 0);
            const double* src = x.data().data() + base;
            double mean = 0.0;
            for (std::int64_t i = 0; i < m; ++i) mean += src[i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t i = 0; i < m; ++i) {
                const double d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*means)[static_cast<std::size_t>(n) * num_groups + g] = mean;
            (*invstds)[static_cast<std::size_t>(n) * num_groups + g] = inv;
            double* dst = out.data().data() + base;
            for (int cc = 0; cc < cg; ++cc) {
                const int c = g * cg + cc;
                const double ga = gamma.data()[c], be = beta.data()[c];
                for (std::int64_t i = 0; i < plane; ++i) {
                    const std::int64_t k = cc * plane + i;
                    dst[k] = (src[k] - mean) * inv * ga + be;
                }
            }
        }
    ensure_finite(out, "groupnorm");

    if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
        detail::tape_enroll(tape, out, {&x, &gamma, &beta});
        Tensor xc = x, gc = gamma, bc = beta, oc = out;
        const int ng = num_groups;
        tape->record([xc, gc, bc, oc, ng, means, invstds, plane]() mutable {
            const int C = xc.c(), cg = C / ng;
            const std::int64_t m = cg * plane;
            const bool need_x = xc.requires_grad();
            const bool need_g = gc.requires_grad();
            const bool need_b = bc.requires_grad();
            if (need_x) xc.ensure_grad();
            if (need_g) gc.ensure_grad();
            if (need_b) bc.ensure_grad();
            for (int n = 0; n < xc.n(); ++n)
                for (int g = 0; g < ng; ++g) {
                    const std::int64_t base = xc.index(n, g * cg, 0, 0);
                    const double mean = (*means)[static_cast<std::size_t>(n) * ng + g];
                    const double inv = (*invstds)[static_cast<std::size_t>(n) * ng + g];
                    const double* src = xc.data().data() + base;
                    const double* go = oc.grad().data() + base;
                    // accumulate dL/dxhat sums for the group
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int cc = 0; cc < cg; ++cc) {
                        const double ga = gc.data()[g * cg + cc];
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const std::int64_t k = cc * plane + i;
                            const double xhat = (src[k] - mean) * inv;
                            const double dxh = go[k] * ga;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                        }
                    }
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = g * cg + cc;
                        const double ga = gc.data()[c];
                        double gsum = 0.0, gdot = 0.0;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const std::int64_t k = cc * plane + i;
                            const double xhat = (src[k] - mean) * inv;
                            gsum += go[k];
                            gdot += go[k] * xhat;
                            if (need_x) {
                                const double dxh = go[k] * ga;
                                xc.grad()[base + k] +=
                                    inv * (dxh - (sum_dxhat + xhat * sum_dxhat_xhat) / static_cast<double>(m));
                            }
                        }
                        if (need_g) gc.grad()[c] += gdot;
                        if (need_b) bc.grad()[c] += gsum;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat / split
// ---------------------------------------------------------------------------

inline Tensor concat(std::span<const Tensor> inputs, int axis, Tape* tape = nullptr) {
    if (inputs.empty()) throw ParamError("concat: no inputs");
    if (axis < 0 || axis > 3) throw ParamError(format_msg("concat: axis must be in [0,3], got ", axis));
    Shape4 s = inputs[0].shape();
    int total = 0;
    for (const Tensor& t : inputs) {
        for (int a = 0; a < 4; ++a)
            if (a != axis && t.shape()[a] != s[a])
                throw ParamError(format_msg("concat: extent mismatch on axis ", a, ": ", shape_str(t.shape()),
                                            " vs ", shape_str(s)));
        total += t.shape()[axis];
    }
    s[static_cast<std::size_t>(axis)] = total;
    Tensor out(s);

    // copy slab-wise: outer = product of extents before axis, inner = after
    const Shape4& os = out.shape();
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= os[a];
    for (int a = axis + 1; a < 4; ++a) inner *= os[a];
    std::int64_t offset = 0;
    for (const Tensor& t : inputs) {
        const std::int64_t len = t.shape()[axis] * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(t.data().data() + o * len, len,
                        out.data().data() + o * total * inner + offset);
        offset += len;
    }

    bool any_grad = false;
    if (tape)
        for (const Tensor& t : inputs)
            if (t.requires_grad()) any_grad = true;
    if (any_grad) {
        out.set_requires_grad(true);
        tape->touch(out);
        std::vector<Tensor> ins(inputs.begin(), inputs.end());
        for (const Tensor& t : ins) tape->touch(t);
        Tensor oc = out;
        const int ax = axis;
        tape->record([ins, oc, ax]() mutable {
            const Shape4& os = oc.shape();
            std::int64_t outer = 1, inner = 1;
            for (int a = 0; a < ax; ++a) outer *= os[a];
            for (int a = ax + 1; a < 4; ++a) inner *= os[a];
            const std::int64_t total = os[ax] * inner;
            std::int64_t offset = 0;
            for (Tensor& t : ins) {
                const std::int64_t len = t.shape()[ax] * inner;
                if (t.requires_grad()) {
                    t.ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = oc.grad().data() + o * total + offset;
                        double* dst = t.grad().data() + o * len;
                        for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                }
                offset += len;
            }
        });
    }
    return out;
}

inline Tensor concat(std::initializer_list<Tensor> inputs, int axis, Tape* tape = nullptr) {
    std::vector<Tensor> v(inputs);
    return concat(std::span<const Tensor>(v), axis, tape);
}

inline std::vector<Tensor> split(const Tensor& x, std::span<const int> sizes, int axis, Tape* tape = nullptr) {
    if (axis < 0 || axis > 3) throw ParamError(format_msg("split: axis must be in [0,3], got ", axis));
    int total = 0;
    for (int v : sizes) {
        if (v <= 0) throw ParamError("split: sizes must be positive");
        total += v;
    }
    if (total != x.shape()[axis])
        throw ParamError(format_msg("split: sizes sum ", total, " != extent ", x.shape()[axis], " on axis ", axis));
    const Shape4& xs = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= xs[a];
    for (int a = axis + 1; a < 4; ++a) inner *= xs[a];

    std::vector<Tensor> parts;
    std::int64_t offset = 0;
    for (int v : sizes) {
        Shape4 s = xs;
        s[static_cast<std::size_t>(axis)] = v;
        Tensor part(s);
        const std::int64_t len = v * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(x.data().data() + o * static_cast<std::int64_t>(xs[axis]) * inner + offset, len,
                        part.data().data() + o * len);
        offset += len;

        if (detail::wants_grad(tape, {&x})) {
            detail::tape_enroll(tape, part, {&x});
            Tensor xc = x, pc = part;
            const std::int64_t off = offset - len;
            const int ax = axis;
            tape->record([xc, pc, off, ax]() mutable {
                xc.ensure_grad();
                const Shape4& xs = xc.shape();
                std::int64_t outer = 1, inner = 1;
                for (int a = 0; a < ax; ++a) outer *= xs[a];
                for (int a = ax + 1; a < 4; ++a) inner *= xs[a];
                const std::int64_t len = pc.shape()[ax] * inner;
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = pc.grad().data() + o * len;
                    double* dst = xc.grad().data() + o * static_cast<std::int64_t>(xs[ax]) * inner + off;
                    for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
                }
            });
        }
        parts.push_back(std::move(part));
    }
    return parts;
}

// ---------------------------------------------------------------------------
// matmul: rank-4 tensors interpreted as matrices (1, 1, rows, cols).
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    if (a.n() != 1 || a.c() != 1 || b.n() != 1 || b.c() != 1)
        throw ParamError("matmul: operands must be matrix views (1,1,rows,cols)");
    if (a.w() != b.h())
        throw ParamError(format_msg("matmul: inner dimensions disagree, ", a.w(), " vs ", b.h()));
    const int M = a.h(), K = a.w(), N = b.w();
    Tensor out(1, 1, M, N);
    detail::gemm_nn(M, K, N, a.data().data(), b.data().data(), out.data().data());
    ensure_finite(out, "matmul");

    if (detail::wants_grad(tape, {&a, &b})) {
        detail::tape_enroll(tape, out, {&a, &b});
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            const int M = ac.h(), K = ac.w(), N = bc.w();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                detail::gemm_nt(M, N, K, oc.grad().data(), bc.data().data(), ac.grad().data());
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                detail::gemm_tn(M, K, N, ac.data().data(), oc.grad().data(), bc.grad().data());
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops with NCHW broadcasting (each axis equal or 1).
// ---------------------------------------------------------------------------

namespace detail {

inline Shape4 broadcast_shape(const Shape4& a, const Shape4& b) {
    Shape4 out{};
    for (int i = 0; i < 4; ++i) {
        if (a[i] == b[i] || b[i] == 1)
            out[i] = a[i];
        else if (a[i] == 1)
            out[i] = b[i];
        else
            throw ParamError(format_msg("broadcast: incompatible shapes ", shape_str(a), " and ", shape_str(b)));
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
            throw ParamError(format_msg("broadcast: incompatible shapes ", shape_str(a), " and ", shape_str(b)));
    }
    return out;
}

template <typename Fwd>
inline void broadcast_apply(const Tensor& a, const Tensor& b, Tensor& out, Fwd f) {
    const Shape4& os = out.shape();
    const Shape4& as = a.shape();
    const Shape4& bs = b.shape();
    std::int64_t i = 0;
    for (int n = 0; n < os[0]; ++n)
        for (int c = 0; c < os[1]; ++c)
            for (int y = 0; y < os[2]; ++y)
                for (int x = 0; x < os[3]; ++x, ++i) {
                    const double av = a.at(as[0] == 1 ? 0 : n, as[1] == 1 ? 0 : c,
                                           as[2] == 1 ? 0 : y, as[3] == 1 ? 0 : x);
                    const double bv = b.at(bs[0] == 1 ? 0 : n, bs[1] == 1 ? 0 : c, bs[2] == 1 ? 0 : y,
                                           bs[3] == 1 ? 0 : x);
                    out.data()[i] = f(av, bv);
                }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    Shape4 os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor out(os);
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    } else {
        detail::broadcast_apply(a, b, out, [](double x, double y) { return x + y; });
    }
    if (detail::wants_grad(tape, {&a, &b})) {
        detail::tape_enroll(tape, out, {&a, &b});
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            const Shape4 os = oc.shape();
            for (Tensor* t : {&ac, &bc}) {
                if (!t->requires_grad()) continue;
                t->ensure_grad();
                const Shape4& ss = t->shape();
                std::int64_t i = 0;
                for (int n = 0; n < os[0]; ++n)
                    for (int c = 0; c < os[1]; ++c)
                        for (int y = 0; y < os[2]; ++y)
                            for (int x = 0; x < os[3]; ++x, ++i)
                                t->grad()[t->index(ss[0] == 1 ? 0 : n, ss[1] == 1 ? 0 : c,
                                                   ss[2] == 1 ? 0 : y, ss[3] == 1 ? 0 : x)] += oc.grad()[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    Shape4 os = detail::broadcast_shape(a.shape(), b.shape());
    Tensor out(os);
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    } else {
        detail::broadcast_apply(a, b, out, [](double x, double y) { return x * y; });
    }
    if (detail::wants_grad(tape, {&a, &b})) {
        detail::tape_enroll(tape, out, {&a, &b});
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            const Shape4 os = oc.shape();
            const Shape4& as = ac.shape();
            const Shape4& bs = bc.shape();
            const bool need_a = ac.requires_grad();
            const bool need_b = bc.requires_grad();
            if (need_a) ac.ensure_grad();
            if (need_b) bc.ensure_grad();
            std::int64_t i = 0;
            for (int n = 0; n < os[0]; ++n)
                for (int c = 0; c < os[1]; ++c)
                    for (int y = 0; y < os[2]; ++y)
                        for (int x = 0; x < os[3]; ++x, ++i) {
                            const std::int64_t ia = ac.index(as[0] == 1 ? 0 : n, as[1] == 1 ? 0 : c,
                                                             as[2] == 1 ? 0 : y, as[3] == 1 ? 0 : x);
                            const std::int64_t ib = bc.index(bs[0] == 1 ? 0 : n, bs[1] == 1 ? 0 : c,
                                                             bs[2] == 1 ? 0 : y, bs[3] == 1 ? 0 : x);
                            if (need_a) ac.grad()[ia] += oc.grad()[i] * bc.data()[ib];
                            if (need_b) bc.grad()[ib] += oc.grad()[i] * ac.data()[ia];
                        }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double s, Tape* tape = nullptr) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * s;
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc, s]() mutable {
            xc.ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i) xc.grad()[i] += oc.grad()[i] * s;
        });
    }
    return out;
}

// sum over one axis, keeping it as extent 1
inline Tensor reduce_sum(const Tensor& x, int axis, Tape* tape = nullptr) {
    if (axis < 0 || axis > 3) throw ParamError(format_msg("reduce_sum: axis must be in [0,3], got ", axis));
    Shape4 os = x.shape();
    os[static_cast<std::size_t>(axis)] = 1;
    Tensor out(os);
    const Shape4& xs = x.shape();
    std::int64_t i = 0;
    for (int n = 0; n < xs[0]; ++n)
        for (int c = 0; c < xs[1]; ++c)
            for (int y = 0; y < xs[2]; ++y)
                for (int x2 = 0; x2 < xs[3]; ++x2, ++i)
                    out.data()[out.index(axis == 0 ? 0 : n, axis == 1 ? 0 : c, axis == 2 ? 0 : y,
                                         axis == 3 ? 0 : x2)] += x.data()[i];
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        const int ax = axis;
        tape->record([xc, oc, ax]() mutable {
            xc.ensure_grad();
            const Shape4& xs = xc.shape();
            std::int64_t i = 0;
            for (int n = 0; n < xs[0]; ++n)
                for (int c = 0; c < xs[1]; ++c)
                    for (int y = 0; y < xs[2]; ++y)
                        for (int x2 = 0; x2 < xs[3]; ++x2, ++i)
                            xc.grad()[i] += oc.grad()[oc.index(ax == 0 ? 0 : n, ax == 1 ? 0 : c,
                                                               ax == 2 ? 0 : y, ax == 3 ? 0 : x2)];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, const Shape4& s, Tape* tape = nullptr) {
    const std::int64_t want = static_cast<std::int64_t>(s[0]) * s[1] * s[2] * s[3];
    if (want != x.numel())
        throw ParamError(format_msg("reshape: element count mismatch ", shape_str(x.shape()), " -> ", shape_str(s)));
    Tensor out(s);
    out.data() = x.data();
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            xc.ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i) xc.grad()[i] += oc.grad()[i];
        });
    }
    return out;
}

// swap the two spatial axes
inline Tensor transpose_hw(const Tensor& x, Tape* tape = nullptr) {
    Tensor out(x.n(), x.c(), x.w(), x.h());
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c)
            for (int y = 0; y < x.h(); ++y)
                for (int x2 = 0; x2 < x.w(); ++x2) out.at(n, c, x2, y) = x.at(n, c, y, x2);
    if (detail::wants_grad(tape, {&x})) {
        detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            xc.ensure_grad();
            for (int n = 0; n < xc.n(); ++n)
                for (int c = 0; c < xc.c(); ++c)
                    for (int y = 0; y < xc.h(); ++y)
                        for (int x2 = 0; x2 < xc.w(); ++x2)
                            xc.grad()[xc.index(n, c, y, x2)] += oc.grad()[oc.index(n, c, x2, y)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic (tape) gradients versus central differences of
// the summed output. The FD route never touches the backward code.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_input;  // max relative error per checked input
    bool passed(double tol) const { return max_rel_error < tol; }
};

// op: callable (inputs, tape) -> Tensor. inputs are the leaves to differentiate.
inline GradCheckReport grad_check(const std::function<Tensor(std::span<Tensor>, Tape*)>& op,
                                  std::span<Tensor> inputs, double step = 1e-4, double tolerance = 1e-3) {
    (void)tolerance;
    for (Tensor& t : inputs) t.set_requires_grad(true);

    auto loss = [&]() -> double {
        Tensor out = op(inputs, nullptr);
        double acc = 0.0;
        for (double v : out.data()) {
            if (!std::isfinite(v)) throw ParamError("grad_check: non-finite intermediate in forward");
            acc += v;
        }
        return acc;
    };

    Tape tape;
    Tensor out = op(inputs, &tape);
    Tensor ones = Tensor::full(out.shape(), 1.0);
    tape.backward(out, ones);

    GradCheckReport report;
    for (Tensor& t : inputs) {
        double worst = 0.0;
        t.ensure_grad();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double keep = t.data()[i];
            t.data()[i] = keep + step;
            const double up = loss();
            t.data()[i] = keep - step;
            const double down = loss();
            t.data()[i] = keep;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = t.grad()[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
        report.per_input.push_back(worst);
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    return report;
}

}  // namespace egd
