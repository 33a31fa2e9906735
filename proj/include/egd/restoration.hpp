#pragma once

// Image restoration and augmentation: adaptive median, Richardson-Lucy
// deconvolution, unsharp masking, IR min-max normalization, bilinear resize,
// and the seed-deterministic augmentation family. Every filter returns values
// clamped to [0,1].

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "egd/boxes.hpp"
#include "egd/image.hpp"

namespace egd::restore {

using img::Image;

// ---------------------------------------------------------------------------
// Border rules: mirrored indices (edge not repeated) for blur/deconvolution,
// edge replication for the median.
// ---------------------------------------------------------------------------

namespace detail {

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

inline int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Point-spread function: odd square kernel, non-negative, normalized to 1.
// ---------------------------------------------------------------------------

struct Psf {
    int size = 1;
    std::vector<double> values;  // row-major size x size

    static Psf delta(int size = 3) {
        check_size(size);
        Psf p;
        p.size = size;
        p.values.assign(static_cast<std::size_t>(size) * size, 0.0);
        p.values[static_cast<std::size_t>(size / 2) * size + size / 2] = 1.0;
        return p;
    }

    static Psf box(int size = 3) {
        check_size(size);
        Psf p;
        p.size = size;
        p.values.assign(static_cast<std::size_t>(size) * size,
                        1.0 / (static_cast<double>(size) * size));
        return p;
    }

    double at(int ky, int kx) const { return values[static_cast<std::size_t>(ky) * size + kx]; }

    void validate() const {
        check_size(size);
        if (values.size() != static_cast<std::size_t>(size) * size)
            throw ParamError(format_msg("Psf: ", values.size(), " entries for size ", size));
        double sum = 0.0;
        for (double v : values) {
            if (v < 0.0) throw ParamError("Psf: entries must be non-negative");
            sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-6)
            throw ParamError(format_msg("Psf: entries must sum to 1, got ", sum));
    }

private:
    static void check_size(int size) {
        if (size < 1 || size % 2 == 0)
            throw ParamError(format_msg("Psf: size must be odd and positive, got ", size));
    }
};

namespace detail {

// 2-D correlation with mirrored borders; flip=true applies the adjoint
// (convolution with the flipped kernel).
inline Image correlate_reflect(const Image& src, const Psf& psf, bool flip) {
    const int r = psf.size / 2;
    Image out(src.width, src.height, src.channels);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                double acc = 0.0;
                for (int ky = 0; ky < psf.size; ++ky)
                    for (int kx = 0; kx < psf.size; ++kx) {
                        const double w = flip ? psf.at(psf.size - 1 - ky, psf.size - 1 - kx) : psf.at(ky, kx);
                        const int sy = reflect_index(y + ky - r, src.height);
                        const int sx = reflect_index(x + kx - r, src.width);
                        acc += w * src.at(c, sy, sx);
                    }
                out.at(c, y, x) = acc;
            }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

inline Image adaptive_median(const Image& src, int window = 3, double variance_threshold = 1e-3) {
    if (window < 1 || window % 2 == 0)
        throw ParamError(format_msg("adaptive_median: window must be odd, got ", window));
    if (variance_threshold < 0.0)
        throw ParamError(format_msg("adaptive_median: threshold must be >= 0, got ", variance_threshold));
    const int r = window / 2;
    Image out = src;
    std::vector<double> patch(static_cast<std::size_t>(window) * window);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                std::size_t n = 0;
                double sum = 0.0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const double v = src.at(c, detail::clamp_index(y + dy, src.height),
                                                detail::clamp_index(x + dx, src.width));
                        patch[n++] = v;
                        sum += v;
                    }
                const double mean = sum / static_cast<double>(n);
                double var = 0.0;
                for (std::size_t i = 0; i < n; ++i) var += (patch[i] - mean) * (patch[i] - mean);
                var /= static_cast<double>(n);
                if (var > variance_threshold) {
                    std::nth_element(patch.begin(), patch.begin() + static_cast<std::ptrdiff_t>(n / 2),
                                     patch.begin() + static_cast<std::ptrdiff_t>(n));
                    out.at(c, y, x) = patch[n / 2];
                }
            }
    img::clamp01(out);
    return out;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0.0) throw ParamError(format_msg("gaussian kernel: sigma must be > 0, got ", sigma));
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

inline Image gaussian_blur(const Image& src, double sigma) {
    const std::vector<double> k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    Image mid(src.width, src.height, src.channels);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<std::size_t>(i + r)] *
                           src.at(c, y, detail::reflect_index(x + i, src.width));
                mid.at(c, y, x) = acc;
            }
    Image out(src.width, src.height, src.channels);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<std::size_t>(i + r)] *
                           mid.at(c, detail::reflect_index(y + i, src.height), x);
                out.at(c, y, x) = acc;
            }
    img::clamp01(out);
    return out;
}

inline Image unsharp_mask(const Image& src, double sigma = 1.0, double amount = 1.5,
                          double threshold = 0.01) {
    if (amount < 0.0) throw ParamError(format_msg("unsharp_mask: amount must be >= 0, got ", amount));
    if (threshold < 0.0) throw ParamError(format_msg("unsharp_mask: threshold must be >= 0, got ", threshold));
    const Image blurred = gaussian_blur(src, sigma);
    Image out = src;
    for (std::size_t i = 0; i < src.data.size(); ++i) {
        const double mask = src.data[i] - blurred.data[i];
        if (std::fabs(mask) > threshold) out.data[i] = src.data[i] + amount * mask;
    }
    img::clamp01(out);
    return out;
}

inline Image richardson_lucy(const Image& src, const Psf& psf, int iterations = 10) {
    psf.validate();
    if (iterations < 1)
        throw ParamError(format_msg("richardson_lucy: iterations must be >= 1, got ", iterations));
    constexpr double kEps = 1e-12;
    Image u = src;
    Image ratio(src.width, src.height, src.channels);
    for (int it = 0; it < iterations; ++it) {
        const Image conv = detail::correlate_reflect(u, psf, false);
        for (std::size_t i = 0; i < u.data.size(); ++i) ratio.data[i] = src.data[i] / (conv.data[i] + kEps);
        const Image corr = detail::correlate_reflect(ratio, psf, true);
        for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] *= corr.data[i];
    }
    img::clamp01(u);
    return u;
}

inline Image normalize_ir(const Image& src) {
    if (src.channels != 1)
        throw ParamError(format_msg("normalize_ir: expected 1 channel, got ", src.channels));
    double lo = src.data[0], hi = src.data[0];
    for (double v : src.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Image out = src;
    if (hi - lo <= 0.0) {
        std::fill(out.data.begin(), out.data.end(), 0.0);  // constant image rule
        return out;
    }
    for (double& v : out.data) v = (v - lo) / (hi - lo);
    img::clamp01(out);
    return out;
}

inline Image resize_bilinear(const Image& src, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1)
        throw ParamError(format_msg("resize_bilinear: target must be positive, got ", out_w, "x", out_h));
    Image out(out_w, out_h, src.channels);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                // half-pixel centers (align_corners = false)
                const double fy = (y + 0.5) * sy - 0.5;
                const double fx = (x + 0.5) * sx - 0.5;
                const int y0 = static_cast<int>(std::floor(fy));
                const int x0 = static_cast<int>(std::floor(fx));
                const double wy = fy - y0, wx = fx - x0;
                const int y0c = detail::clamp_index(y0, src.height), y1c = detail::clamp_index(y0 + 1, src.height);
                const int x0c = detail::clamp_index(x0, src.width), x1c = detail::clamp_index(x0 + 1, src.width);
                out.at(c, y, x) = (1 - wy) * ((1 - wx) * src.at(c, y0c, x0c) + wx * src.at(c, y0c, x1c)) +
                                  wy * ((1 - wx) * src.at(c, y1c, x0c) + wx * src.at(c, y1c, x1c));
            }
    img::clamp01(out);
    return out;
}

// ---------------------------------------------------------------------------
// Augmentations. All randomness comes from explicit seeds; labels stay
// normalized and clipped to [0,1].
// ---------------------------------------------------------------------------

struct Sample {
    Image image;
    std::vector<LabelRecord> labels;
};

inline Sample hflip(const Sample& in) {
    Sample out;
    out.image = Image(in.image.width, in.image.height, in.image.channels);
    for (int c = 0; c < in.image.channels; ++c)
        for (int y = 0; y < in.image.height; ++y)
            for (int x = 0; x < in.image.width; ++x)
                out.image.at(c, y, x) = in.image.at(c, y, in.image.width - 1 - x);
    out.labels = in.labels;
    for (auto& l : out.labels) l.box.cx = 1.0 - l.box.cx;
    return out;
}

inline Sample rotate(const Sample& in, double degrees) {
    const double rad = degrees * std::acos(-1.0) / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cx0 = in.image.width / 2.0, cy0 = in.image.height / 2.0;
    Sample out;
    out.image = Image(in.image.width, in.image.height, in.image.channels);
    for (int c = 0; c < in.image.channels; ++c)
        for (int y = 0; y < in.image.height; ++y)
            for (int x = 0; x < in.image.width; ++x) {
                // inverse map the destination center back into the source
                const double dx = (x + 0.5) - cx0, dy = (y + 0.5) - cy0;
                const double sx = cs * dx + sn * dy + cx0 - 0.5;
                const double sy = -sn * dx + cs * dy + cy0 - 0.5;
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const double wx = sx - x0, wy = sy - y0;
                double acc = 0.0;
                for (int oy = 0; oy <= 1; ++oy)
                    for (int ox = 0; ox <= 1; ++ox) {
                        const int yy = y0 + oy, xx = x0 + ox;
                        if (yy < 0 || yy >= in.image.height || xx < 0 || xx >= in.image.width) continue;
                        acc += (oy ? wy : 1 - wy) * (ox ? wx : 1 - wx) * in.image.at(c, yy, xx);
                    }
                out.image.at(c, y, x) = acc;
            }
    img::clamp01(out.image);

    const double w = in.image.width, h = in.image.height;
    for (const auto& l : in.labels) {
        // rotate the box corners forward, refit an axis-aligned box
        const double px[4] = {l.box.x1() * w, l.box.x2() * w, l.box.x2() * w, l.box.x1() * w};
        const double py[4] = {l.box.y1() * h, l.box.y1() * h, l.box.y2() * h, l.box.y2() * h};
        double nx1 = 1e30, ny1 = 1e30, nx2 = -1e30, ny2 = -1e30;
        for (int i = 0; i < 4; ++i) {
            const double dx = px[i] - cx0, dy = py[i] - cy0;
            const double rx = cs * dx - sn * dy + cx0;
            const double ry = sn * dx + cs * dy + cy0;
            nx1 = std::min(nx1, rx);
            nx2 = std::max(nx2, rx);
            ny1 = std::min(ny1, ry);
            ny2 = std::max(ny2, ry);
        }
        const double cx1 = std::clamp(nx1 / w, 0.0, 1.0), cx2 = std::clamp(nx2 / w, 0.0, 1.0);
        const double cy1 = std::clamp(ny1 / h, 0.0, 1.0), cy2 = std::clamp(ny2 / h, 0.0, 1.0);
        const double area = (cx2 - cx1) * (cy2 - cy1);
        if (area < 0.1 * l.box.area()) continue;  // mostly rotated out of frame
        LabelRecord nl = l;
        nl.box = {(cx1 + cx2) / 2.0, (cy1 + cy2) / 2.0, cx2 - cx1, cy2 - cy1};
        out.labels.push_back(nl);
    }
    return out;
}

inline Sample add_gaussian_noise(const Sample& in, double sigma, Rng& rng) {
    if (sigma < 0.0) throw ParamError(format_msg("noise: sigma must be >= 0, got ", sigma));
    Sample out = in;
    for (double& v : out.image.data) v += sigma * rng.normal();
    img::clamp01(out.image);
    return out;
}

inline Sample brightness_contrast(const Sample& in, double brightness, double contrast) {
    Sample out = in;
    for (double& v : out.image.data) v = (v - 0.5) * (1.0 + contrast) + 0.5 + brightness;
    img::clamp01(out.image);
    return out;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    const double d = mx - mn;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.0 : 0.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace detail

// Hue shift is absolute (fraction of the hue circle); saturation/value are
// relative scalings. Single-channel images only scale value.
inline Sample hsv_jitter(const Sample& in, double dh, double ds, double dv) {
    Sample out = in;
    if (in.image.channels == 1) {
        for (double& v : out.image.data) v *= 1.0 + dv;
        img::clamp01(out.image);
        return out;
    }
    for (int y = 0; y < in.image.height; ++y)
        for (int x = 0; x < in.image.width; ++x) {
            double h, s, v;
            detail::rgb_to_hsv(in.image.at(0, y, x), in.image.at(1, y, x), in.image.at(2, y, x), h, s, v);
            h += dh;
            s = std::clamp(s * (1.0 + ds), 0.0, 1.0);
            v = std::clamp(v * (1.0 + dv), 0.0, 1.0);
            detail::hsv_to_rgb(h, s, v, out.image.at(0, y, x), out.image.at(1, y, x), out.image.at(2, y, x));
        }
    img::clamp01(out.image);
    return out;
}

inline Sample mixup(const Sample& a, const Sample& b, double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw ParamError(format_msg("mixup: lambda must be in [0,1], got ", lambda));
    Sample partner = b;
    if (!partner.image.same_geometry(a.image))
        partner.image = resize_bilinear(partner.image, a.image.width, a.image.height);
    if (partner.image.channels != a.image.channels)
        throw ParamError(format_msg("mixup: channel mismatch ", a.image.channels, " vs ",
                                    partner.image.channels));
    Sample out;
    out.image = Image(a.image.width, a.image.height, a.image.channels);
    for (std::size_t i = 0; i < out.image.data.size(); ++i)
        out.image.data[i] = lambda * a.image.data[i] + (1.0 - lambda) * partner.image.data[i];
    img::clamp01(out.image);
    out.labels = a.labels;  // union rule: both label sets survive the blend
    out.labels.insert(out.labels.end(), partner.labels.begin(), partner.labels.end());
    return out;
}

// Four samples tiled into one canvas split at (split_x, split_y), both in
// (0,1); each tile is a full resized copy of its source, labels mapped along.
inline Sample mosaic(const Sample tiles[4], int canvas_w, int canvas_h, double split_x, double split_y) {
    if (split_x <= 0.0 || split_x >= 1.0 || split_y <= 0.0 || split_y >= 1.0)
        throw ParamError(format_msg("mosaic: split must be inside (0,1), got ", split_x, ",", split_y));
    const int sx = std::clamp(static_cast<int>(split_x * canvas_w), 1, canvas_w - 1);
    const int sy = std::clamp(static_cast<int>(split_y * canvas_h), 1, canvas_h - 1);
    Sample out;
    out.image = Image(canvas_w, canvas_h, tiles[0].image.channels);
    const int x0s[4] = {0, sx, 0, sx};
    const int y0s[4] = {0, 0, sy, sy};
    const int ws[4] = {sx, canvas_w - sx, sx, canvas_w - sx};
    const int hs[4] = {sy, sy, canvas_h - sy, canvas_h - sy};
    for (int t = 0; t < 4; ++t) {
        if (tiles[t].image.channels != out.image.channels)
            throw ParamError(format_msg("mosaic: tile ", t, " channel mismatch"));
        const Image scaled = resize_bilinear(tiles[t].image, ws[t], hs[t]);
        for (int c = 0; c < out.image.channels; ++c)
            for (int y = 0; y < hs[t]; ++y)
                for (int x = 0; x < ws[t]; ++x) out.image.at(c, y0s[t] + y, x0s[t] + x) = scaled.at(c, y, x);
        for (const auto& l : tiles[t].labels) {
            LabelRecord nl = l;
            nl.box.cx = (x0s[t] + l.box.cx * ws[t]) / canvas_w;
            nl.box.cy = (y0s[t] + l.box.cy * hs[t]) / canvas_h;
            nl.box.w = l.box.w * ws[t] / canvas_w;
            nl.box.h = l.box.h * hs[t] / canvas_h;
            out.labels.push_back(nl);
        }
    }
    return out;
}

// Draws Beta(a,b) via Johnk's method; the augmentation default a=b=0.2.
inline double beta_sample(Rng& rng, double a, double b) {
    if (a <= 0.0 || b <= 0.0) throw ParamError(format_msg("beta_sample: shape must be > 0, got ", a, ",", b));
    for (int tries = 0; tries < 1024; ++tries) {
        const double x = std::pow(rng.uniform(), 1.0 / a);
        const double y = std::pow(rng.uniform(), 1.0 / b);
        if (x + y <= 1.0 && x + y > 0.0) return x / (x + y);
    }
    return 0.5;
}

enum class AugmentOp { hflip, rotate, noise, brightness_contrast, hsv, mixup, mosaic };

struct AugmentPolicy {
    std::vector<AugmentOp> ops;
    double hflip_prob = 0.5;
    double rotate_max_deg = 15.0;
    double noise_sigma_lo = 0.01, noise_sigma_hi = 0.05;
    double brightness_contrast_range = 0.2;
    double hsv_range = 0.1;
    double mixup_alpha = 0.2;
    double mosaic_prob = 0.5;
};

inline Sample augment(const Sample& in, const AugmentPolicy& policy, std::uint64_t seed,
                      std::span<const Sample> partners = {}) {
    Rng rng(seed);
    Sample cur = in;
    for (AugmentOp op : policy.ops) {
        switch (op) {
            case AugmentOp::hflip:
                if (rng.uniform() < policy.hflip_prob) cur = hflip(cur);
                break;
            case AugmentOp::rotate:
                cur = rotate(cur, rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg));
                break;
            case AugmentOp::noise:
                cur = add_gaussian_noise(cur, rng.uniform(policy.noise_sigma_lo, policy.noise_sigma_hi), rng);
                break;
            case AugmentOp::brightness_contrast:
                cur = brightness_contrast(cur,
                                          rng.uniform(-policy.brightness_contrast_range,
                                                      policy.brightness_contrast_range),
                                          rng.uniform(-policy.brightness_contrast_range,
                                                      policy.brightness_contrast_range));
                break;
            case AugmentOp::hsv:
                cur = hsv_jitter(cur, rng.uniform(-policy.hsv_range, policy.hsv_range),
                                 rng.uniform(-policy.hsv_range, policy.hsv_range),
                                 rng.uniform(-policy.hsv_range, policy.hsv_range));
                break;
            case AugmentOp::mixup: {
                if (partners.empty()) throw ConfigError("augment: mixup requires a non-empty partner set");
                const Sample& partner = partners[rng.below(partners.size())];
                cur = mixup(cur, partner, beta_sample(rng, policy.mixup_alpha, policy.mixup_alpha));
                break;
            }
            case AugmentOp::mosaic: {
                if (rng.uniform() >= policy.mosaic_prob) break;
                if (partners.size() < 3)
                    throw ConfigError("augment: mosaic requires at least 3 partners");
                Sample tiles[4] = {cur, partners[rng.below(partners.size())],
                                   partners[rng.below(partners.size())],
                                   partners[rng.below(partners.size())]};
                cur = mosaic(tiles, cur.image.width, cur.image.height, rng.uniform(0.25, 0.75),
                             rng.uniform(0.25, 0.75));
                break;
            }
        }
    }
    std::vector<LabelRecord> clipped;
    for (const auto& l : cur.labels) {
        const double x1 = std::clamp(l.box.x1(), 0.0, 1.0), x2 = std::clamp(l.box.x2(), 0.0, 1.0);
        const double y1 = std::clamp(l.box.y1(), 0.0, 1.0), y2 = std::clamp(l.box.y2(), 0.0, 1.0);
        if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) continue;
        LabelRecord nl = l;
        nl.box = {(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1};
        clipped.push_back(nl);
    }
    cur.labels = std::move(clipped);
    return cur;
}

// ---------------------------------------------------------------------------
// Restoration chain used by the CLI: named filters applied in order.
// ---------------------------------------------------------------------------

struct ChainOpts {
    int median_window = 3;
    double median_threshold = 1e-3;
    double unsharp_sigma = 1.0;
    double unsharp_amount = 1.5;
    double unsharp_threshold = 0.01;
    int rl_iterations = 10;
    Psf psf = Psf::box(3);
};

inline Image apply_chain(const Image& src, std::span<const std::string> chain, const ChainOpts& opts) {
    Image cur = src;
    for (const std::string& step : chain) {
        if (step == "median")
            cur = adaptive_median(cur, opts.median_window, opts.median_threshold);
        else if (step == "rl")
            cur = richardson_lucy(cur, opts.psf, opts.rl_iterations);
        else if (step == "unsharp")
            cur = unsharp_mask(cur, opts.unsharp_sigma, opts.unsharp_amount, opts.unsharp_threshold);
        else if (step == "normalize")
            cur = normalize_ir(cur);
        else
            throw ParamError(format_msg("restoration chain: unknown filter '", step, "'"));
    }
    return cur;
}

}  // namespace egd::restore
