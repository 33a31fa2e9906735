#pragma once

// Detection losses and evaluation metrics: IoU/CIoU (with an exact forward-mode
// gradient), stable BCE and focal losses, greedy prediction/ground-truth
// matching, 101-point interpolated AP, and a small wall-clock benchmark.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "egd/boxes.hpp"
#include "egd/common.hpp"

namespace egd::metrics {

// ---------------------------------------------------------------------------
// IoU and CIoU
// ---------------------------------------------------------------------------

inline void require_valid_box(const BoxCxcywh& b, const char* who) {
    if (!(b.w > 0.0) || !(b.h > 0.0))
        throw ParamError(format_msg(who, ": box needs positive width and height, got ", b.w, " x ", b.h));
}

inline double iou(const BoxCxcywh& a, const BoxCxcywh& b) {
    require_valid_box(a, "iou");
    require_valid_box(b, "iou");
    return box_iou(a, b);
}

namespace detail {

// Forward-mode dual number carrying partials for the four predicted box
// parameters (cx, cy, w, h).
struct Dual {
    double v = 0.0;
    std::array<double, 4> d{0.0, 0.0, 0.0, 0.0};
    Dual() = default;
    Dual(double val) : v(val) {}
    static Dual seeded(double val, int slot) {
        Dual x(val);
        x.d[static_cast<std::size_t>(slot)] = 1.0;
        return x;
    }
};

inline Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
}
inline Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
}
inline Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
inline Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
}

inline double vmax(double a, double b) { return a >= b ? a : b; }
inline double vmin(double a, double b) { return a <= b ? a : b; }
inline Dual vmax(const Dual& a, const Dual& b) { return a.v >= b.v ? a : b; }
inline Dual vmin(const Dual& a, const Dual& b) { return a.v <= b.v ? a : b; }
inline double vatan(double a) { return std::atan(a); }
inline Dual vatan(const Dual& a) {
    Dual r(std::atan(a.v));
    const double chain = 1.0 / (1.0 + a.v * a.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * chain;
    return r;
}

// Complete-IoU loss: 1 - IoU + center distance over enclosing diagonal plus
// the aspect-ratio term. Differentiated through every factor, alpha included.
template <typename T>
T ciou_core(const T& pcx, const T& pcy, const T& pw, const T& ph, const BoxCxcywh& g) {
    const T half(0.5);
    const T px1 = pcx - pw * half, px2 = pcx + pw * half;
    const T py1 = pcy - ph * half, py2 = pcy + ph * half;
    const double gx1 = g.x1(), gx2 = g.x2(), gy1 = g.y1(), gy2 = g.y2();

    const T iw = vmax(vmin(px2, T(gx2)) - vmax(px1, T(gx1)), T(0.0));
    const T ih = vmax(vmin(py2, T(gy2)) - vmax(py1, T(gy1)), T(0.0));
    const T inter = iw * ih;
    // areas from the same corner differences, so a perfect match cancels exactly
    const T uni = (px2 - px1) * (py2 - py1) + T((gx2 - gx1) * (gy2 - gy1)) - inter;
    const T iou_t = inter / uni;

    const T cw = vmax(px2, T(gx2)) - vmin(px1, T(gx1));
    const T ch = vmax(py2, T(gy2)) - vmin(py1, T(gy1));
    const T c2 = cw * cw + ch * ch;
    const T rho2 = (pcx - T(g.cx)) * (pcx - T(g.cx)) + (pcy - T(g.cy)) * (pcy - T(g.cy));

    const double kPi = 3.14159265358979323846;
    const T ar = vatan(T(g.w / g.h)) - vatan(pw / ph);
    const T v = T(4.0 / (kPi * kPi)) * ar * ar;
    const T alpha = v / (T(1.0) - iou_t + v + T(1e-9));

    return T(1.0) - iou_t + rho2 / c2 + alpha * v;
}

}  // namespace detail

inline double ciou_loss(const BoxCxcywh& pred, const BoxCxcywh& gt) {
    require_valid_box(pred, "ciou_loss");
    require_valid_box(gt, "ciou_loss");
    return detail::ciou_core<double>(pred.cx, pred.cy, pred.w, pred.h, gt);
}

struct CiouGrad {
    double value = 0.0;
    std::array<double, 4> grad{0.0, 0.0, 0.0, 0.0};  // d loss / d (cx, cy, w, h)
};

inline CiouGrad ciou_loss_grad(const BoxCxcywh& pred, const BoxCxcywh& gt) {
    require_valid_box(pred, "ciou_loss_grad");
    require_valid_box(gt, "ciou_loss_grad");
    using detail::Dual;
    const Dual out = detail::ciou_core<Dual>(Dual::seeded(pred.cx, 0), Dual::seeded(pred.cy, 1),
                                             Dual::seeded(pred.w, 2), Dual::seeded(pred.h, 3), gt);
    return {out.v, out.d};
}

// ---------------------------------------------------------------------------
// Classification losses on logits
// ---------------------------------------------------------------------------

// numerically stable binary cross-entropy: max(x,0) - x*t + log1p(exp(-|x|))
inline double bce_loss(double logit, double target) {
    if (target < 0.0 || target > 1.0)
        throw ParamError(format_msg("bce_loss: target must be inside [0,1], got ", target));
    return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

inline double focal_loss(double logit, double target, double gamma = 2.0) {
    if (gamma < 0.0) throw ParamError(format_msg("focal_loss: gamma must be >= 0, got ", gamma));
    const double p = 1.0 / (1.0 + std::exp(-logit));
    const double p_t = target * p + (1.0 - target) * (1.0 - p);
    return std::pow(1.0 - p_t, gamma) * bce_loss(logit, target);
}

// confidence -> clamped logit, the inverse of the decode-side sigmoid
inline double logit_clamped(double p, double bound = 15.0) {
    if (p <= 0.0) return -bound;
    if (p >= 1.0) return bound;
    return std::clamp(std::log(p) - std::log1p(-p), -bound, bound);
}

// ---------------------------------------------------------------------------
// Greedy matching: confidence-descending, highest IoU wins, each ground truth
// claimed at most once, equal IoU resolved toward the lower ground-truth index.
// ---------------------------------------------------------------------------

inline std::vector<int> match_detections(std::span<const Detection> preds,
                                         std::span<const LabelRecord> gts, double iou_threshold) {
    if (iou_threshold < 0.0 || iou_threshold > 1.0)
        throw ParamError(format_msg("match_detections: IoU threshold must be inside [0,1], got ",
                                    iou_threshold));
    std::vector<std::size_t> order(preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].confidence > preds[b].confidence;
    });

    std::vector<int> match(preds.size(), -1);
    std::vector<char> claimed(gts.size(), 0);
    for (std::size_t oi : order) {
        const Detection& p = preds[oi];
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (claimed[g] || gts[g].class_id != p.class_id) continue;
            const double v = box_iou(p.box, gts[g].box);
            if (v < iou_threshold || v <= 0.0) continue;  // must actually overlap
            if (v > best_iou) {  // strict: equal IoU keeps the lower index
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) {
            match[oi] = best;
            claimed[static_cast<std::size_t>(best)] = 1;
        }
    }
    return match;
}

// ---------------------------------------------------------------------------
// Composite detection loss over one image
// ---------------------------------------------------------------------------

struct DetectionLoss {
    double box_term = 0.0;
    double class_term = 0.0;
    double total = 0.0;
    int matched = 0;
    int unmatched_gts = 0;
};

inline DetectionLoss detection_loss(std::span<const Detection> preds,
                                    std::span<const LabelRecord> gts, double lambda_box,
                                    double iou_threshold = 0.5) {
    if (lambda_box < 0.0)
        throw ParamError(format_msg("detection_loss: lambda_box must be >= 0, got ", lambda_box));
    const std::vector<int> match = match_detections(preds, gts, iou_threshold);

    DetectionLoss out;
    double box_sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (match[i] < 0) continue;
        box_sum += ciou_loss(preds[i].box, gts[static_cast<std::size_t>(match[i])].box);
        ++out.matched;
    }
    out.unmatched_gts = static_cast<int>(gts.size()) - out.matched;
    // every missed ground truth costs the worst-case CIoU of 2
    const int box_n = out.matched + out.unmatched_gts;
    if (box_n > 0) out.box_term = (box_sum + 2.0 * out.unmatched_gts) / box_n;

    if (!preds.empty()) {
        double cls_sum = 0.0;
        for (std::size_t i = 0; i < preds.size(); ++i)
            cls_sum += bce_loss(logit_clamped(preds[i].confidence), match[i] >= 0 ? 1.0 : 0.0);
        out.class_term = cls_sum / static_cast<double>(preds.size());
    }
    out.total = lambda_box * out.box_term + out.class_term;
    return out;
}

// ---------------------------------------------------------------------------
// Precision / recall / F1
// ---------------------------------------------------------------------------

struct Prf {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline Prf precision_recall_f1(int tp, int fp, int fn) {
    if (tp < 0 || fp < 0 || fn < 0) throw ParamError("precision_recall_f1: counts must be >= 0");
    Prf r;
    if (tp + fp > 0) r.precision = static_cast<double>(tp) / (tp + fp);
    if (tp + fn > 0) r.recall = static_cast<double>(tp) / (tp + fn);
    if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

// ---------------------------------------------------------------------------
// Average precision, 101-point interpolation, pooled over images
// ---------------------------------------------------------------------------

struct EvalPrediction {
    int image_id = 0;
    int class_id = 0;
    double confidence = 0.0;
    BoxCxcywh box;
};

struct EvalGroundTruth {
    int image_id = 0;
    int class_id = 0;
    BoxCxcywh box;
};

namespace detail {

struct PooledMarks {
    std::vector<char> tp;  // confidence-descending true-positive flags
    int num_gt = 0;
};

// Match per image at the given threshold, then pool the marks in a
// deterministic order: confidence desc, image id asc, input index asc.
inline PooledMarks pooled_marks(std::span<const EvalPrediction> preds,
                                std::span<const EvalGroundTruth> gts, int class_id,
                                double iou_threshold) {
    std::map<int, std::vector<std::size_t>> preds_by_image, gts_by_image;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].class_id == class_id) preds_by_image[preds[i].image_id].push_back(i);
    PooledMarks out;
    for (std::size_t i = 0; i < gts.size(); ++i)
        if (gts[i].class_id == class_id) {
            gts_by_image[gts[i].image_id].push_back(i);
            ++out.num_gt;
        }

    struct Row {
        double conf;
        int image_id;
        std::size_t index;
        char tp;
    };
    std::vector<Row> rows;
    for (const auto& [image_id, pidx] : preds_by_image) {
        std::vector<Detection> dets;
        std::vector<LabelRecord> labels;
        for (std::size_t i : pidx) dets.push_back({0, preds[i].confidence, preds[i].box});
        auto git = gts_by_image.find(image_id);
        if (git != gts_by_image.end())
            for (std::size_t i : git->second) labels.push_back({0, gts[i].box});
        const std::vector<int> match = match_detections(dets, labels, iou_threshold);
        for (std::size_t k = 0; k < pidx.size(); ++k)
            rows.push_back({dets[k].confidence, image_id, pidx[k], match[k] >= 0});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        return a.index < b.index;
    });
    for (const Row& r : rows) out.tp.push_back(r.tp);
    return out;
}

}  // namespace detail

// Returns nothing when the class has no ground truth (excluded from means).
inline std::optional<double> average_precision(std::span<const EvalPrediction> preds,
                                               std::span<const EvalGroundTruth> gts, int class_id,
                                               double iou_threshold) {
    const detail::PooledMarks marks = detail::pooled_marks(preds, gts, class_id, iou_threshold);
    if (marks.num_gt == 0) return std::nullopt;

    const std::size_t n = marks.tp.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        tp += marks.tp[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / marks.num_gt;
    }
    // precision envelope: best precision at or beyond each point
    std::vector<double> envelope(n);
    for (std::size_t i = n; i-- > 0;)
        envelope[i] = i + 1 < n ? std::max(precision[i], envelope[i + 1]) : precision[i];

    double sum = 0.0;
    for (int g = 0; g <= 100; ++g) {
        const double r = g / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += envelope[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

// ---------------------------------------------------------------------------
// Full evaluation report
// ---------------------------------------------------------------------------

struct ClassEval {
    int class_id = 0;
    std::string name;
    int tp = 0, fp = 0, fn = 0;
    Prf prf;
    double ap50 = 0.0;
    bool has_gt = false;
};

struct EvalReport {
    std::vector<ClassEval> classes;
    double map50 = 0.0;
    double map50_95 = 0.0;

    std::string to_text() const {
        std::string s = "# evaluation (IoU 0.50 for P/R/F1)\n";
        char buf[192];
        for (const auto& c : classes) {
            std::snprintf(buf, sizeof(buf),
                          "%-8s tp %-5d fp %-5d fn %-5d P %.4f R %.4f F1 %.4f AP50 %s\n",
                          c.name.c_str(), c.tp, c.fp, c.fn, c.prf.precision, c.prf.recall, c.prf.f1,
                          c.has_gt ? std::to_string(c.ap50).c_str() : "n/a");
            s += buf;
        }
        std::snprintf(buf, sizeof(buf), "mAP@50 %.6f\nmAP@50-95 %.6f\n", map50, map50_95);
        s += buf;
        return s;
    }

    std::string to_csv() const {
        std::string s = "class,name,tp,fp,fn,precision,recall,f1,ap50\n";
        char buf[192];
        for (const auto& c : classes) {
            std::snprintf(buf, sizeof(buf), "%d,%s,%d,%d,%d,%.6f,%.6f,%.6f,%.6f\n", c.class_id,
                          c.name.c_str(), c.tp, c.fp, c.fn, c.prf.precision, c.prf.recall, c.prf.f1,
                          c.has_gt ? c.ap50 : 0.0);
            s += buf;
        }
        char tail[96];
        std::snprintf(tail, sizeof(tail), "map50,,,,,,,,%.6f\nmap50_95,,,,,,,,%.6f\n", map50, map50_95);
        return s + tail;
    }
};

inline std::string class_display_name(int class_id) {
    if (class_id == 0) return "bird";
    if (class_id == 1) return "drone";
    return format_msg("class", class_id);
}

inline EvalReport evaluate_detections(std::span<const EvalPrediction> preds,
                                      std::span<const EvalGroundTruth> gts, int num_classes,
                                      double iou_threshold = 0.5) {
    if (num_classes < 1)
        throw ParamError(format_msg("evaluate_detections: need at least one class, got ", num_classes));
    EvalReport rep;
    double map50_sum = 0.0;
    int classes_with_gt = 0;
    for (int c = 0; c < num_classes; ++c) {
        ClassEval ce;
        ce.class_id = c;
        ce.name = class_display_name(c);
        const detail::PooledMarks marks = detail::pooled_marks(preds, gts, c, iou_threshold);
        for (char m : marks.tp) (m ? ce.tp : ce.fp) += 1;
        ce.fn = marks.num_gt - ce.tp;
        ce.prf = precision_recall_f1(ce.tp, ce.fp, ce.fn);
        if (const std::optional<double> ap = average_precision(preds, gts, c, 0.5)) {
            ce.ap50 = *ap;
            ce.has_gt = true;
            map50_sum += *ap;
            ++classes_with_gt;
        }
        rep.classes.push_back(std::move(ce));
    }
    if (classes_with_gt > 0) {
        rep.map50 = map50_sum / classes_with_gt;
        double all = 0.0;
        for (int t = 50; t <= 95; t += 5) {
            double thr_sum = 0.0;
            for (int c = 0; c < num_classes; ++c)
                if (const std::optional<double> ap = average_precision(preds, gts, c, t / 100.0))
                    thr_sum += *ap;
            all += thr_sum / classes_with_gt;
        }
        rep.map50_95 = all / 10.0;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Prediction wire format: "image_id class_id confidence cx cy w h"
// Ground truth drops the confidence column.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ss >> tok) fields.push_back(tok);
    return fields;
}

inline double parse_double(const std::string& tok, const std::string& file, int line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError(file, line, format_msg("non-numeric token '", tok, "'"));
    }
}

inline int parse_int(const std::string& tok, const std::string& file, int line, const char* what) {
    const double v = parse_double(tok, file, line);
    if (v != std::floor(v) || v < 0.0)
        throw ParseError(file, line, format_msg(what, " must be a non-negative integer, got '", tok, "'"));
    return static_cast<int>(v);
}

}  // namespace detail

inline std::string format_prediction(const EvalPrediction& p) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d %d %.6f %.6f %.6f %.6f %.6f", p.image_id, p.class_id,
                  p.confidence, p.box.cx, p.box.cy, p.box.w, p.box.h);
    return buf;
}

inline std::vector<EvalPrediction> parse_predictions(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError(format_msg(path.string(), ": cannot open prediction file"));
    std::vector<EvalPrediction> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const std::vector<std::string> t = detail::split_fields(line);
        if (t.empty()) continue;
        if (t.size() != 7)
            throw ParseError(path.string(), line_no, format_msg("expected 7 fields, got ", t.size()));
        EvalPrediction p;
        p.image_id = detail::parse_int(t[0], path.string(), line_no, "image id");
        p.class_id = detail::parse_int(t[1], path.string(), line_no, "class id");
        p.confidence = detail::parse_double(t[2], path.string(), line_no);
        if (p.confidence < 0.0 || p.confidence > 1.0)
            throw ParseError(path.string(), line_no,
                             format_msg("confidence must be inside [0,1], got ", t[2]));
        p.box = {detail::parse_double(t[3], path.string(), line_no),
                 detail::parse_double(t[4], path.string(), line_no),
                 detail::parse_double(t[5], path.string(), line_no),
                 detail::parse_double(t[6], path.string(), line_no)};
        if (!(p.box.w > 0.0) || !(p.box.h > 0.0))
            throw ParseError(path.string(), line_no, "box needs positive width and height");
        out.push_back(p);
    }
    return out;
}

inline std::vector<EvalGroundTruth> parse_ground_truth(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError(format_msg(path.string(), ": cannot open ground-truth file"));
    std::vector<EvalGroundTruth> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const std::vector<std::string> t = detail::split_fields(line);
        if (t.empty()) continue;
        if (t.size() != 6)
            throw ParseError(path.string(), line_no, format_msg("expected 6 fields, got ", t.size()));
        EvalGroundTruth g;
        g.image_id = detail::parse_int(t[0], path.string(), line_no, "image id");
        g.class_id = detail::parse_int(t[1], path.string(), line_no, "class id");
        g.box = {detail::parse_double(t[2], path.string(), line_no),
                 detail::parse_double(t[3], path.string(), line_no),
                 detail::parse_double(t[4], path.string(), line_no),
                 detail::parse_double(t[5], path.string(), line_no)};
        if (!(g.box.w > 0.0) || !(g.box.h > 0.0))
            throw ParseError(path.string(), line_no, "box needs positive width and height");
        out.push_back(g);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Wall-clock benchmark
// ---------------------------------------------------------------------------

struct BenchResult {
    double mean_ms = 0.0;
    double fps = 0.0;
    double cv = 0.0;  // stddev / mean over the timed iterations
    int iterations = 0;
    std::string hardware;
};

inline std::string hardware_summary() {
    std::string model = "unknown cpu";
    std::ifstream f("/proc/cpuinfo");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("model name", 0) == 0) {
            const std::size_t colon = line.find(':');
            if (colon != std::string::npos) {
                model = line.substr(colon + 1);
                const std::size_t start = model.find_first_not_of(" \t");
                model = start == std::string::npos ? "unknown cpu" : model.substr(start);
            }
            break;
        }
    }
    return format_msg(model, " (", std::thread::hardware_concurrency(), " hardware threads)");
}

template <typename F>
BenchResult fps_benchmark(F&& fn, int warmup, int iterations) {
    if (warmup < 1) throw ParamError(format_msg("fps_benchmark: need at least 1 warmup run, got ", warmup));
    if (iterations < 5)
        throw ParamError(format_msg("fps_benchmark: need at least 5 timed runs, got ", iterations));
    using clock = std::chrono::steady_clock;
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> ms;
    ms.reserve(static_cast<std::size_t>(iterations));
    for (int i = 0; i < iterations; ++i) {
        const auto t0 = clock::now();
        fn();
        const auto t1 = clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    BenchResult r;
    r.iterations = iterations;
    double sum = 0.0;
    for (double v : ms) sum += v;
    r.mean_ms = sum / iterations;
    double var = 0.0;
    for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
    var /= iterations;
    r.cv = r.mean_ms > 0.0 ? std::sqrt(var) / r.mean_ms : 0.0;
    r.fps = r.mean_ms > 0.0 ? 1000.0 / r.mean_ms : 0.0;
    r.hardware = hardware_summary();
    return r;
}

}  // namespace egd::metrics
