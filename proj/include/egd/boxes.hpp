#pragma once

// Shared geometry types: normalized center-format boxes, ground-truth label
// records, and decoded detections.

#include <algorithm>
#include <string>

namespace egd {

struct BoxCxcywh {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

    double area() const { return (w > 0.0 && h > 0.0) ? w * h : 0.0; }
    double x1() const { return cx - w / 2.0; }
    double y1() const { return cy - h / 2.0; }
    double x2() const { return cx + w / 2.0; }
    double y2() const { return cy + h / 2.0; }
};

struct LabelRecord {
    int class_id = 0;
    BoxCxcywh box;
};

struct Detection {
    int class_id = 0;
    double confidence = 0.0;
    BoxCxcywh box;
};

inline double box_iou(const BoxCxcywh& a, const BoxCxcywh& b) {
    const double ix1 = std::max(a.x1(), b.x1());
    const double iy1 = std::max(a.y1(), b.y1());
    const double ix2 = std::min(a.x2(), b.x2());
    const double iy2 = std::min(a.y2(), b.y2());
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace egd
