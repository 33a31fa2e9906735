#pragma once

// Planar CHW image with real values in [0,1] per channel, plus conversions
// to the tensor engine. File I/O lives in image_io.hpp.

#include <algorithm>
#include <vector>

#include "egd/common.hpp"
#include "egd/tensor.hpp"

namespace egd::img {

struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;  // planar: channel-major, then rows

    Image() = default;

    Image(int w, int h, int c, double fill = 0.0) : width(w), height(h), channels(c) {
        if (w < 1 || h < 1 || (c != 1 && c != 3))
            throw ParamError(format_msg("Image: invalid geometry ", w, "x", h, "x", c));
        data.assign(static_cast<std::size_t>(w) * h * c, fill);
    }

    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height + y) * width + x;
    }
    double& at(int c, int y, int x) { return data[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data[index(c, y, x)]; }

    bool same_geometry(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64(&width, sizeof(width));
        h = fnv1a64(&height, sizeof(height), h);
        h = fnv1a64(&channels, sizeof(channels), h);
        return fnv1a64(data.data(), data.size() * sizeof(double), h);
    }
};

inline void clamp01(Image& img) {
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

inline Tensor to_tensor(const Image& img) {
    Tensor t(1, img.channels, img.height, img.width);
    std::copy(img.data.begin(), img.data.end(), t.data().begin());
    return t;
}

inline Image from_tensor(const Tensor& t) {
    if (t.n() != 1 || (t.c() != 1 && t.c() != 3))
        throw ParamError(format_msg("from_tensor: expected 1x{1|3}xHxW, got ", shape_str(t.shape())));
    Image img(t.w(), t.h(), t.c());
    std::copy(t.data().begin(), t.data().end(), img.data.begin());
    return img;
}

}  // namespace egd::img
