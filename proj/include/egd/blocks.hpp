#pragma once

// Architectural building blocks: ConvBNAct, GhostConv, GhostBottleneck,
// C3Ghost, EMA attention, SPPF, modulated deformable convolution, the
// DDetect head, and the RGB+IR fusion stem. Reference C2f/Bottleneck blocks
// are included for the comparison model.
//
// Every block owns its parameters as Tensors, reports a closed-form learnable
// parameter count and MAC count, and exposes collect() so weight I/O can walk
// the full named-tensor tree.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "egd/tensor.hpp"

namespace egd::blocks {

inline constexpr double kNormEps = 1e-5;

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool learnable;
};

namespace detail {

// Kaiming-uniform fan-in initialization for conv kernels.
inline Tensor kaiming_uniform(const Shape4& shape, Rng& rng, int fan_in) {
    Tensor t(shape);
    const double bound = std::sqrt(6.0 / fan_in);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ConvBNAct: conv (no bias) + inference-mode BN + activation.
// ---------------------------------------------------------------------------

struct ConvBNAct {
    Tensor weight;  // (c2, c1/groups, k, k)
    Tensor gamma, beta, running_mean, running_var;
    int c1 = 0, c2 = 0, k = 1, stride = 1, padding = 0, groups = 1;
    Act act = Act::silu;

    ConvBNAct() = default;

    ConvBNAct(Rng& rng, int c1_, int c2_, int k_, int s = 1, Act act_ = Act::silu, int groups_ = 1,
              int padding_ = -1)
        : c1(c1_), c2(c2_), k(k_), stride(s), padding(padding_ < 0 ? k_ / 2 : padding_), groups(groups_),
          act(act_) {
        if (c1 % groups != 0 || c2 % groups != 0)
            throw ParamError(format_msg("ConvBNAct: channels ", c1, "->", c2, " not divisible by groups ", groups));
        const int fan_in = (c1 / groups) * k * k;
        weight = detail::kaiming_uniform({c2, c1 / groups, k, k}, rng, fan_in);
        gamma = Tensor::full({1, c2, 1, 1}, 1.0);
        beta = Tensor::full({1, c2, 1, 1}, 0.0);
        running_mean = Tensor::full({1, c2, 1, 1}, 0.0);
        running_var = Tensor::full({1, c2, 1, 1}, 1.0);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        ConvOpts o{stride, padding, 1, groups};
        Tensor y = conv2d(x, weight, {}, o, tape);
        y = batchnorm_infer(y, gamma, beta, running_mean, running_var, kNormEps, tape);
        return activation(y, act, tape);
    }

    std::int64_t param_count() const {
        return static_cast<std::int64_t>(c2) * (c1 / groups) * k * k + 2LL * c2;
    }

    void out_hw(int h, int w, int& ho, int& wo) const {
        ho = conv_out_extent(h, k, stride, padding, 1);
        wo = conv_out_extent(w, k, stride, padding, 1);
    }

    std::int64_t macs(int h, int w) const {
        int ho, wo;
        out_hw(h, w, ho, wo);
        return static_cast<std::int64_t>(ho) * wo * c2 * (c1 / groups) * k * k;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bn.gamma", gamma, true});
        out.push_back({prefix + ".bn.beta", beta, true});
        out.push_back({prefix + ".bn.mean", running_mean, false});
        out.push_back({prefix + ".bn.var", running_var, false});
    }
};

// Plain convolution with bias, no norm, no activation (head outputs and the
// offset/mask predictors).
struct Conv2dBias {
    Tensor weight, bias;
    int c1 = 0, c2 = 0, k = 1, stride = 1, padding = 0;

    Conv2dBias() = default;

    Conv2dBias(Rng& rng, int c1_, int c2_, int k_, int s = 1, int padding_ = -1)
        : c1(c1_), c2(c2_), k(k_), stride(s), padding(padding_ < 0 ? k_ / 2 : padding_) {
        const int fan_in = c1 * k * k;
        weight = detail::kaiming_uniform({c2, c1, k, k}, rng, fan_in);
        bias = Tensor::full({1, c2, 1, 1}, 0.0);
    }

    static Conv2dBias zero_init(int c1_, int c2_, int k_, int s, int padding_, double bias_value) {
        Conv2dBias c;
        c.c1 = c1_;
        c.c2 = c2_;
        c.k = k_;
        c.stride = s;
        c.padding = padding_ < 0 ? k_ / 2 : padding_;
        c.weight = Tensor::full({c2_, c1_, k_, k_}, 0.0);
        c.bias = Tensor::full({1, c2_, 1, 1}, bias_value);
        return c;
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        ConvOpts o{stride, padding, 1, 1};
        return conv2d(x, weight, bias, o, tape);
    }

    std::int64_t param_count() const { return static_cast<std::int64_t>(c2) * c1 * k * k + c2; }

    std::int64_t macs(int h, int w) const {
        const int ho = conv_out_extent(h, k, stride, padding, 1);
        const int wo = conv_out_extent(w, k, stride, padding, 1);
        return static_cast<std::int64_t>(ho) * wo * c2 * c1 * k * k;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
};

// ---------------------------------------------------------------------------
// GhostConv: primary conv producing c2/2 channels, cheap depthwise 5x5
// producing the other half from the first, concatenated.
// ---------------------------------------------------------------------------

struct GhostConv {
    ConvBNAct primary, cheap;
    int c1 = 0, c2 = 0;

    GhostConv() = default;

    GhostConv(Rng& rng, int c1_, int c2_, int k, int s = 1, Act act = Act::silu) : c1(c1_), c2(c2_) {
        if (c2 % 2 != 0) throw ParamError(format_msg("GhostConv: out channels must be even, got ", c2));
        const int half = c2 / 2;
        primary = ConvBNAct(rng, c1, half, k, s, act);
        cheap = ConvBNAct(rng, half, half, 5, 1, act, half);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor p = primary.forward(x, tape);
        Tensor q = cheap.forward(p, tape);
        return concat({p, q}, 1, tape);
    }

    std::int64_t param_count() const { return primary.param_count() + cheap.param_count(); }

    void out_hw(int h, int w, int& ho, int& wo) const { primary.out_hw(h, w, ho, wo); }

    std::int64_t macs(int h, int w) const {
        int ho, wo;
        primary.out_hw(h, w, ho, wo);
        return primary.macs(h, w) + cheap.macs(ho, wo);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        primary.collect(prefix + ".primary", out);
        cheap.collect(prefix + ".cheap", out);
    }
};

// ---------------------------------------------------------------------------
// GhostBottleneck: ghost -> (stride-2 depthwise) -> ghost, with residual.
// ---------------------------------------------------------------------------

struct GhostBottleneck {
    GhostConv ghost1, ghost2;
    ConvBNAct dw;                 // main-path depthwise, only when s=2
    ConvBNAct short_dw, short_pw; // projection shortcut when not identity
    int c1 = 0, c2 = 0, k = 3, stride = 1;
    bool identity_shortcut = true;

    GhostBottleneck() = default;

    GhostBottleneck(Rng& rng, int c1_, int c2_, int k_ = 3, int s = 1) : c1(c1_), c2(c2_), k(k_), stride(s) {
        if (s != 1 && s != 2)
            throw ParamError(format_msg("GhostBottleneck: stride must be 1 or 2, got ", s));
        const int mid = c2 / 2;
        ghost1 = GhostConv(rng, c1, mid, 1, 1);
        if (s == 2) dw = ConvBNAct(rng, mid, mid, k, 2, Act::none, mid);
        ghost2 = GhostConv(rng, mid, c2, 1, 1, Act::none);
        identity_shortcut = (s == 1 && c1 == c2);
        if (!identity_shortcut) {
            short_dw = ConvBNAct(rng, c1, c1, k, s, Act::none, c1);
            short_pw = ConvBNAct(rng, c1, c2, 1, 1, Act::none);
        }
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor y = ghost1.forward(x, tape);
        if (stride == 2) y = dw.forward(y, tape);
        y = ghost2.forward(y, tape);
        Tensor sc = identity_shortcut ? x : short_pw.forward(short_dw.forward(x, tape), tape);
        return add(y, sc, tape);
    }

    std::int64_t param_count() const {
        std::int64_t p = ghost1.param_count() + ghost2.param_count();
        if (stride == 2) p += dw.param_count();
        if (!identity_shortcut) p += short_dw.param_count() + short_pw.param_count();
        return p;
    }

    void out_hw(int h, int w, int& ho, int& wo) const {
        if (stride == 2) {
            ghost1.out_hw(h, w, ho, wo);
            dw.out_hw(ho, wo, ho, wo);
        } else {
            ho = h;
            wo = w;
        }
    }

    std::int64_t macs(int h, int w) const {
        std::int64_t m = ghost1.macs(h, w);
        int mh = h, mw = w;
        if (stride == 2) {
            m += dw.macs(h, w);
            dw.out_hw(h, w, mh, mw);
        }
        m += ghost2.macs(mh, mw);
        if (!identity_shortcut) m += short_dw.macs(h, w) + short_pw.macs(mh, mw);
        return m;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        ghost1.collect(prefix + ".ghost1", out);
        if (stride == 2) dw.collect(prefix + ".dw", out);
        ghost2.collect(prefix + ".ghost2", out);
        if (!identity_shortcut) {
            short_dw.collect(prefix + ".shortcut.dw", out);
            short_pw.collect(prefix + ".shortcut.pw", out);
        }
    }
};

// ---------------------------------------------------------------------------
// C3Ghost: two 1x1 branches, n ghost bottlenecks on branch A, 1x1 fuse.
// ---------------------------------------------------------------------------

struct C3Ghost {
    ConvBNAct cv1, cv2, cv3;
    std::vector<GhostBottleneck> m;
    int c1 = 0, c2 = 0, n = 1;

    C3Ghost() = default;

    C3Ghost(Rng& rng, int c1_, int c2_, int n_ = 1, bool /*shortcut*/ = true) : c1(c1_), c2(c2_), n(n_) {
        if (n < 1) throw ParamError(format_msg("C3Ghost: repeats must be >= 1, got ", n));
        if (c2 % 2 != 0) throw ParamError(format_msg("C3Ghost: out channels must be even, got ", c2));
        const int half = c2 / 2;
        cv1 = ConvBNAct(rng, c1, half, 1);
        cv2 = ConvBNAct(rng, c1, half, 1);
        for (int i = 0; i < n; ++i) m.emplace_back(rng, half, half, 3, 1);
        cv3 = ConvBNAct(rng, c2, c2, 1);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor a = cv1.forward(x, tape);
        for (const auto& gb : m) a = gb.forward(a, tape);
        Tensor b = cv2.forward(x, tape);
        return cv3.forward(concat({a, b}, 1, tape), tape);
    }

    std::int64_t param_count() const {
        std::int64_t p = cv1.param_count() + cv2.param_count() + cv3.param_count();
        for (const auto& gb : m) p += gb.param_count();
        return p;
    }

    std::int64_t macs(int h, int w) const {
        std::int64_t total = cv1.macs(h, w) + cv2.macs(h, w) + cv3.macs(h, w);
        for (const auto& gb : m) total += gb.macs(h, w);
        return total;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        cv1.collect(prefix + ".cv1", out);
        cv2.collect(prefix + ".cv2", out);
        for (std::size_t i = 0; i < m.size(); ++i) m[i].collect(prefix + ".m" + std::to_string(i), out);
        cv3.collect(prefix + ".cv3", out);
    }
};

// ---------------------------------------------------------------------------
// Reference blocks for the comparison model: standard Bottleneck and C2f.
// ---------------------------------------------------------------------------

struct Bottleneck {
    ConvBNAct cv1, cv2;
    bool shortcut = true;
    int c1 = 0, c2 = 0;

    Bottleneck() = default;

    Bottleneck(Rng& rng, int c1_, int c2_, bool shortcut_ = true) : shortcut(shortcut_), c1(c1_), c2(c2_) {
        cv1 = ConvBNAct(rng, c1, c2, 3);
        cv2 = ConvBNAct(rng, c2, c2, 3);
        shortcut = shortcut_ && c1 == c2;
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor y = cv2.forward(cv1.forward(x, tape), tape);
        return shortcut ? add(y, x, tape) : y;
    }

    std::int64_t param_count() const { return cv1.param_count() + cv2.param_count(); }
    std::int64_t macs(int h, int w) const { return cv1.macs(h, w) + cv2.macs(h, w); }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        cv1.collect(prefix + ".cv1", out);
        cv2.collect(prefix + ".cv2", out);
    }
};

struct C2f {
    ConvBNAct cv1, cv2;
    std::vector<Bottleneck> m;
    int c1 = 0, c2 = 0, n = 1, half = 0;

    C2f() = default;

    C2f(Rng& rng, int c1_, int c2_, int n_ = 1, bool shortcut = true) : c1(c1_), c2(c2_), n(n_), half(c2_ / 2) {
        if (c2 % 2 != 0) throw ParamError(format_msg("C2f: out channels must be even, got ", c2));
        cv1 = ConvBNAct(rng, c1, c2, 1);
        for (int i = 0; i < n; ++i) m.emplace_back(rng, half, half, shortcut);
        cv2 = ConvBNAct(rng, (2 + n) * half, c2, 1);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor y = cv1.forward(x, tape);
        const int sizes[2] = {half, half};
        auto parts = split(y, std::span<const int>(sizes, 2), 1, tape);
        std::vector<Tensor> ys{parts[0], parts[1]};
        for (const auto& b : m) ys.push_back(b.forward(ys.back(), tape));
        return cv2.forward(concat(std::span<const Tensor>(ys), 1, tape), tape);
    }

    std::int64_t param_count() const {
        std::int64_t p = cv1.param_count() + cv2.param_count();
        for (const auto& b : m) p += b.param_count();
        return p;
    }

    std::int64_t macs(int h, int w) const {
        std::int64_t total = cv1.macs(h, w) + cv2.macs(h, w);
        for (const auto& b : m) total += b.macs(h, w);
        return total;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        cv1.collect(prefix + ".cv1", out);
        for (std::size_t i = 0; i < m.size(); ++i) m[i].collect(prefix + ".m" + std::to_string(i), out);
        cv2.collect(prefix + ".cv2", out);
    }
};

// ---------------------------------------------------------------------------
// EMA attention. Works on a regrouped (N*g, C/g, H, W) view; output shape
// equals input shape.
// ---------------------------------------------------------------------------

struct Ema {
    ConvBNAct conv1x1, conv3x3;
    Tensor gn_gamma, gn_beta;
    int channels = 0, factor = 8;

    Ema() = default;

    Ema(Rng& rng, int channels_, int factor_ = 8) : channels(channels_), factor(factor_) {
        if (factor < 1 || channels % factor != 0)
            throw ParamError(format_msg("Ema: channels ", channels, " not divisible by factor ", factor));
        const int cg = channels / factor;
        conv1x1 = ConvBNAct(rng, cg, cg, 1, 1, Act::none);
        conv3x3 = ConvBNAct(rng, cg, cg, 3, 1, Act::none);
        gn_gamma = Tensor::full({1, cg, 1, 1}, 1.0);
        gn_beta = Tensor::full({1, cg, 1, 1}, 0.0);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        if (x.c() != channels)
            throw ParamError(format_msg("Ema: expected ", channels, " channels, got ", x.c()));
        const int N = x.n(), H = x.h(), W = x.w();
        const int cg = channels / factor;
        Tensor g = reshape(x, {N * factor, cg, H, W}, tape);

        // directional descriptors along H and W
        Tensor xh = adaptive_avg_pool(g, H, 1, tape);                      // (Ng, cg, H, 1)
        Tensor xw = transpose_hw(adaptive_avg_pool(g, 1, W, tape), tape);  // (Ng, cg, W, 1)
        Tensor hw = conv1x1.forward(concat({xh, xw}, 2, tape), tape);
        const int sizes[2] = {H, W};
        auto parts = split(hw, std::span<const int>(sizes, 2), 2, tape);
        Tensor gate_h = sigmoid(parts[0], tape);                       // (Ng, cg, H, 1)
        Tensor gate_w = sigmoid(transpose_hw(parts[1], tape), tape);   // (Ng, cg, 1, W)

        Tensor x1 = mul(mul(g, gate_h, tape), gate_w, tape);
        x1 = groupnorm(x1, cg, gn_gamma, gn_beta, kNormEps, tape);
        Tensor x2 = conv3x3.forward(g, tape);

        // cross-spatial interaction: channel-softmax descriptors weight the
        // other branch's map, summed over channels
        Tensor a1 = softmax(adaptive_avg_pool(x1, 1, 1, tape), 1, tape);  // (Ng, cg, 1, 1)
        Tensor a2 = softmax(adaptive_avg_pool(x2, 1, 1, tape), 1, tape);
        Tensor y1 = reduce_sum(mul(x2, a1, tape), 1, tape);  // (Ng, 1, H, W)
        Tensor y2 = reduce_sum(mul(x1, a2, tape), 1, tape);
        Tensor gate = sigmoid(add(y1, y2, tape), tape);

        Tensor out = mul(g, gate, tape);
        return reshape(out, x.shape(), tape);
    }

    std::int64_t param_count() const {
        const int cg = channels / factor;
        return conv1x1.param_count() + conv3x3.param_count() + 2LL * cg;
    }

    std::int64_t macs(int h, int w) const {
        // conv work on the regrouped view, times the g batch multiplier
        return factor * (conv1x1.macs(h + w, 1) + conv3x3.macs(h, w));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        conv1x1.collect(prefix + ".conv1x1", out);
        conv3x3.collect(prefix + ".conv3x3", out);
        out.push_back({prefix + ".gn.gamma", gn_gamma, true});
        out.push_back({prefix + ".gn.beta", gn_beta, true});
    }
};

// ---------------------------------------------------------------------------
// SPPF: 1x1 squeeze, three chained max-pools, concat, 1x1 expand.
// ---------------------------------------------------------------------------

struct Sppf {
    ConvBNAct cv1, cv2;
    int c1 = 0, c2 = 0, k = 5;

    Sppf() = default;

    Sppf(Rng& rng, int c1_, int c2_, int k_ = 5) : c1(c1_), c2(c2_), k(k_) {
        if (k % 2 == 0) throw ParamError(format_msg("Sppf: pooling kernel must be odd, got ", k));
        cv1 = ConvBNAct(rng, c1, c1 / 2, 1);
        cv2 = ConvBNAct(rng, 2 * c1, c2, 1);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor y0 = cv1.forward(x, tape);
        Tensor y1 = pool2d(y0, PoolKind::max, k, 1, k / 2, tape);
        Tensor y2 = pool2d(y1, PoolKind::max, k, 1, k / 2, tape);
        Tensor y3 = pool2d(y2, PoolKind::max, k, 1, k / 2, tape);
        return cv2.forward(concat({y0, y1, y2, y3}, 1, tape), tape);
    }

    std::int64_t param_count() const { return cv1.param_count() + cv2.param_count(); }
    std::int64_t macs(int h, int w) const { return cv1.macs(h, w) + cv2.macs(h, w); }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        cv1.collect(prefix + ".cv1", out);
        cv2.collect(prefix + ".cv2", out);
    }
};

// ---------------------------------------------------------------------------
// Modulated deformable convolution, composed from differentiable primitives:
// offsets and masks are predicted by plain convs, each kernel tap is gathered
// with bilinear_sample, modulated, and the gathered stack is contracted by a
// 1x1 convolution with a re-ordered view of the kernel.
// ---------------------------------------------------------------------------

namespace detail {

// (outC, C, k, k) -> (outC, k*k*C, 1, 1), column index = tap*C + in_channel
inline Tensor tap_major_weight(const Tensor& w, Tape* tape) {
    const int oc = w.n(), C = w.c(), k = w.h();
    Tensor out(oc, k * k * C, 1, 1);
    for (int o = 0; o < oc; ++o)
        for (int ic = 0; ic < C; ++ic)
            for (int t = 0; t < k * k; ++t)
                out.data()[out.index(o, t * C + ic, 0, 0)] = w.at(o, ic, t / k, t % k);
    if (tape && w.requires_grad()) {
        out.set_requires_grad(true);
        tape->touch(out);
        tape->touch(w);
        Tensor wc = w, oc_ = out;
        tape->record([wc, oc_]() mutable {
            wc.ensure_grad();
            const int on = wc.n(), C = wc.c(), k = wc.h();
            for (int o = 0; o < on; ++o)
                for (int ic = 0; ic < C; ++ic)
                    for (int t = 0; t < k * k; ++t)
                        wc.grad()[wc.index(o, ic, t / k, t % k)] +=
                            oc_.grad()[oc_.index(o, t * C + ic, 0, 0)];
        });
    }
    return out;
}

}  // namespace detail

struct DeformConv {
    Tensor weight;            // (c2, c1, k, k)
    Conv2dBias offset_conv;   // -> 2*k*k channels, (dy, dx) per tap
    Conv2dBias mask_conv;     // -> k*k channels, passed through sigmoid
    int c1 = 0, c2 = 0, k = 3, stride = 1, padding = 1;

    DeformConv() = default;

    DeformConv(Rng& rng, int c1_, int c2_, int k_ = 3, int s = 1, int padding_ = -1, double mask_bias = 25.0)
        : c1(c1_), c2(c2_), k(k_), stride(s), padding(padding_ < 0 ? k_ / 2 : padding_) {
        const int fan_in = c1 * k * k;
        weight = detail::kaiming_uniform({c2, c1, k, k}, rng, fan_in);
        // offsets start at zero and the mask sigmoid starts at ~1, so the
        // layer behaves as a standard convolution until trained otherwise
        offset_conv = Conv2dBias::zero_init(c1, 2 * k * k, k, stride, padding, 0.0);
        mask_conv = Conv2dBias::zero_init(c1, k * k, k, stride, padding, mask_bias);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        if (x.c() != c1) throw ConfigError(format_msg("DeformConv: expected ", c1, " channels, got ", x.c()));
        Tensor off = offset_conv.forward(x, tape);
        Tensor msk = sigmoid(mask_conv.forward(x, tape), tape);
        if (off.c() != 2 * k * k || msk.c() != k * k)
            throw ConfigError(format_msg("DeformConv: predictor channels ", off.c(), "/", msk.c(),
                                         " do not match taps for k=", k));
        const int N = x.n(), Ho = off.h(), Wo = off.w();

        std::vector<int> pair_sizes(static_cast<std::size_t>(k) * k, 2);
        auto off_taps = split(off, std::span<const int>(pair_sizes), 1, tape);
        std::vector<int> one_sizes(static_cast<std::size_t>(k) * k, 1);
        auto msk_taps = split(msk, std::span<const int>(one_sizes), 1, tape);

        std::vector<Tensor> gathered;
        gathered.reserve(static_cast<std::size_t>(k) * k);
        for (int t = 0; t < k * k; ++t) {
            const int ky = t / k, kx = t % k;
            Tensor base(N, 2, Ho, Wo);
            for (int n = 0; n < N; ++n)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        base.at(n, 0, oy, ox) = oy * stride - padding + ky;
                        base.at(n, 1, oy, ox) = ox * stride - padding + kx;
                    }
            Tensor coords = add(off_taps[static_cast<std::size_t>(t)], base, tape);
            Tensor sampled = bilinear_sample(x, coords, tape);
            gathered.push_back(mul(sampled, msk_taps[static_cast<std::size_t>(t)], tape));
        }
        Tensor stack = concat(std::span<const Tensor>(gathered), 1, tape);
        Tensor w_view = detail::tap_major_weight(weight, tape);
        return conv2d(stack, w_view, {}, {1, 0, 1, 1}, tape);
    }

    std::int64_t param_count() const {
        return static_cast<std::int64_t>(c2) * c1 * k * k + offset_conv.param_count() +
               mask_conv.param_count();
    }

    void out_hw(int h, int w, int& ho, int& wo) const {
        ho = conv_out_extent(h, k, stride, padding, 1);
        wo = conv_out_extent(w, k, stride, padding, 1);
    }

    std::int64_t macs(int h, int w) const {
        int ho, wo;
        out_hw(h, w, ho, wo);
        const std::int64_t out_px = static_cast<std::int64_t>(ho) * wo;
        const std::int64_t main = out_px * c2 * c1 * k * k;
        const std::int64_t sampling = 8LL * out_px * k * k * c1;  // 4 corner mults + weight mults
        return main + sampling + offset_conv.macs(h, w) + mask_conv.macs(h, w);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        out.push_back({prefix + ".weight", weight, true});
        offset_conv.collect(prefix + ".offset", out);
        mask_conv.collect(prefix + ".mask", out);
    }
};

// DeformConv + BN + SiLU, mirroring ConvBNAct.
struct DeformConvBNAct {
    DeformConv conv;
    Tensor gamma, beta, running_mean, running_var;
    Act act = Act::silu;

    DeformConvBNAct() = default;

    DeformConvBNAct(Rng& rng, int c1, int c2, int k = 3, int s = 1, Act act_ = Act::silu)
        : conv(rng, c1, c2, k, s), act(act_) {
        gamma = Tensor::full({1, c2, 1, 1}, 1.0);
        beta = Tensor::full({1, c2, 1, 1}, 0.0);
        running_mean = Tensor::full({1, c2, 1, 1}, 0.0);
        running_var = Tensor::full({1, c2, 1, 1}, 1.0);
    }

    Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
        Tensor y = conv.forward(x, tape);
        y = batchnorm_infer(y, gamma, beta, running_mean, running_var, kNormEps, tape);
        return activation(y, act, tape);
    }

    std::int64_t param_count() const { return conv.param_count() + 2LL * conv.c2; }
    std::int64_t macs(int h, int w) const { return conv.macs(h, w); }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        conv.collect(prefix + ".conv", out);
        out.push_back({prefix + ".bn.gamma", gamma, true});
        out.push_back({prefix + ".bn.beta", beta, true});
        out.push_back({prefix + ".bn.mean", running_mean, false});
        out.push_back({prefix + ".bn.var", running_var, false});
    }
};

// ---------------------------------------------------------------------------
// DDetect head: per scale, a box branch (ending in 4*reg_max channels) and a
// class branch (ending in num_classes channels), each led by a deformable
// 3x3. The standard-head variant swaps the deformable conv for ConvBNAct.
// ---------------------------------------------------------------------------

struct DetectHead {
    struct Branch {
        bool deformable = true;
        DeformConvBNAct dcv;
        ConvBNAct cv_first;  // used when deformable == false
        ConvBNAct cv_mid;
        Conv2dBias out;

        Tensor forward(const Tensor& x, Tape* tape) const {
            Tensor y = deformable ? dcv.forward(x, tape) : cv_first.forward(x, tape);
            y = cv_mid.forward(y, tape);
            return out.forward(y, tape);
        }
        std::int64_t param_count() const {
            return (deformable ? dcv.param_count() : cv_first.param_count()) + cv_mid.param_count() +
                   out.param_count();
        }
        std::int64_t macs(int h, int w) const {
            return (deformable ? dcv.macs(h, w) : cv_first.macs(h, w)) + cv_mid.macs(h, w) + out.macs(h, w);
        }
        void collect(const std::string& prefix, std::vector<NamedTensor>& o) const {
            if (deformable)
                dcv.collect(prefix + ".dconv", o);
            else
                cv_first.collect(prefix + ".conv", o);
            cv_mid.collect(prefix + ".mid", o);
            out.collect(prefix + ".out", o);
        }
    };

    std::vector<Branch> box_branch, cls_branch;  // one per scale
    std::vector<int> ch;
    int num_classes = 2, reg_max = 16;
    bool deformable = true;

    DetectHead() = default;

    DetectHead(Rng& rng, const std::vector<int>& ch_, int num_classes_, int reg_max_ = 16,
               bool deformable_ = true)
        : ch(ch_), num_classes(num_classes_), reg_max(reg_max_), deformable(deformable_) {
        if (ch.size() != 3)
            throw ConfigError(format_msg("DetectHead: expected a 3-scale pyramid, got ", ch.size()));
        const int c_box = std::max({16, ch[0] / 4, 4 * reg_max});
        const int c_cls = std::max(ch[0], std::min(num_classes, 100));
        for (int s = 0; s < 3; ++s) {
            Branch bb, cb;
            bb.deformable = cb.deformable = deformable;
            if (deformable) {
                bb.dcv = DeformConvBNAct(rng, ch[static_cast<std::size_t>(s)], c_box, 3);
                cb.dcv = DeformConvBNAct(rng, ch[static_cast<std::size_t>(s)], c_cls, 3);
            } else {
                bb.cv_first = ConvBNAct(rng, ch[static_cast<std::size_t>(s)], c_box, 3);
                cb.cv_first = ConvBNAct(rng, ch[static_cast<std::size_t>(s)], c_cls, 3);
            }
            bb.cv_mid = ConvBNAct(rng, c_box, c_box, 3);
            bb.out = Conv2dBias(rng, c_box, 4 * reg_max, 1);
            cb.cv_mid = ConvBNAct(rng, c_cls, c_cls, 3);
            cb.out = Conv2dBias(rng, c_cls, num_classes, 1);
            box_branch.push_back(std::move(bb));
            cls_branch.push_back(std::move(cb));
        }
    }

    // Per scale: concat(box, cls) -> (N, 4*reg_max + num_classes, H, W)
    std::vector<Tensor> forward(std::span<const Tensor> pyramid, Tape* tape = nullptr) const {
        if (pyramid.size() != 3)
            throw ConfigError(format_msg("DetectHead: expected 3 feature maps, got ", pyramid.size()));
        std::vector<Tensor> outs;
        for (int s = 0; s < 3; ++s) {
            const Tensor& x = pyramid[static_cast<std::size_t>(s)];
            if (x.c() != ch[static_cast<std::size_t>(s)])
                throw ConfigError(format_msg("DetectHead: scale ", s, " expects ", ch[static_cast<std::size_t>(s)],
                                             " channels, got ", x.c()));
            Tensor box = box_branch[static_cast<std::size_t>(s)].forward(x, tape);
            Tensor cls = cls_branch[static_cast<std::size_t>(s)].forward(x, tape);
            outs.push_back(concat({box, cls}, 1, tape));
        }
        return outs;
    }

    std::int64_t param_count() const {
        std::int64_t p = 0;
        for (const auto& b : box_branch) p += b.param_count();
        for (const auto& b : cls_branch) p += b.param_count();
        return p;
    }

    std::int64_t macs(const std::array<std::pair<int, int>, 3>& hw) const {
        std::int64_t m = 0;
        for (int s = 0; s < 3; ++s) {
            m += box_branch[static_cast<std::size_t>(s)].macs(hw[static_cast<std::size_t>(s)].first,
                                                              hw[static_cast<std::size_t>(s)].second);
            m += cls_branch[static_cast<std::size_t>(s)].macs(hw[static_cast<std::size_t>(s)].first,
                                                              hw[static_cast<std::size_t>(s)].second);
        }
        return m;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        for (int s = 0; s < 3; ++s) {
            box_branch[static_cast<std::size_t>(s)].collect(prefix + ".box" + std::to_string(s), out);
            cls_branch[static_cast<std::size_t>(s)].collect(prefix + ".cls" + std::to_string(s), out);
        }
    }
};

// ---------------------------------------------------------------------------
// Fusion stem: channel-stack RGB + IR, then a stride-2 ghost conv.
// ---------------------------------------------------------------------------

struct FusionStem {
    GhostConv ghost;
    int out_channels = 16;

    FusionStem() = default;

    FusionStem(Rng& rng, int out_channels_ = 16) : ghost(rng, 4, out_channels_, 3, 2),
                                                   out_channels(out_channels_) {}

    Tensor forward(const Tensor& rgb, const Tensor& ir, Tape* tape = nullptr) const {
        if (rgb.c() != 3 || ir.c() != 1)
            throw ParamError(format_msg("FusionStem: need 3+1 channels, got ", rgb.c(), "+", ir.c()));
        if (rgb.h() != ir.h() || rgb.w() != ir.w() || rgb.n() != ir.n())
            throw ParamError(format_msg("FusionStem: rgb ", shape_str(rgb.shape()), " and ir ",
                                        shape_str(ir.shape()), " are not aligned"));
        return ghost.forward(concat({rgb, ir}, 1, tape), tape);
    }

    std::int64_t param_count() const { return ghost.param_count(); }
    std::int64_t macs(int h, int w) const { return ghost.macs(h, w); }

    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
        ghost.collect(prefix + ".ghost", out);
    }
};

}  // namespace egd::blocks
