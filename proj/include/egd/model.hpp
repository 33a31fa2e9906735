#pragma once

// Assembles the detector variants (rgb / ir / fusion, plus the unmodified
// reference model) into an explicit layer graph, and provides forward
// execution, parameter/MAC accounting, YOLO-style decoding with NMS, and
// bit-exact weight files.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "egd/blocks.hpp"
#include "egd/boxes.hpp"
#include "egd/tensor.hpp"

namespace egd::model {

enum class Modality { rgb, ir, fusion };
enum class HeadKind { standard, ddetect };
enum class EmaPlacement { after_c3ghost, before_c3ghost };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::rgb: return "rgb";
        case Modality::ir: return "ir";
        case Modality::fusion: return "fusion";
    }
    return "?";
}

struct VariantConfig {
    Modality modality = Modality::fusion;
    bool baseline = false;  // unmodified reference model: std conv + C2f, no attention
    int num_classes = 2;
    int reg_max = 16;
    HeadKind head = HeadKind::ddetect;
    EmaPlacement ema_placement = EmaPlacement::after_c3ghost;
    double width_multiple = 0.25;  // informational; the nano widths below are fixed
    double depth_multiple = 0.33;
    int ema_factor = 8;

    int in_channels() const {
        switch (modality) {
            case Modality::rgb: return 3;
            case Modality::ir: return 1;
            case Modality::fusion: return 4;
        }
        return 0;
    }

    void validate() const {
        if (num_classes < 1) throw ConfigError(format_msg("config: num_classes must be >= 1, got ", num_classes));
        if (reg_max < 2) throw ConfigError(format_msg("config: reg_max must be >= 2, got ", reg_max));
        if (baseline && head == HeadKind::ddetect)
            throw ConfigError("config: the baseline model uses the standard head");
    }
};

// ---------------------------------------------------------------------------
// Layer graph
// ---------------------------------------------------------------------------

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor forward(std::span<const Tensor> ins, Tape* tape) const = 0;
    virtual std::int64_t param_count() const = 0;  // closed-form arithmetic
    virtual std::int64_t macs(const std::vector<Shape4>& in_shapes) const = 0;
    virtual Shape4 out_shape(const std::vector<Shape4>& in_shapes) const = 0;
    virtual void collect(const std::string& prefix, std::vector<blocks::NamedTensor>& out) const = 0;
    virtual std::string kind() const = 0;
};

namespace detail {

template <typename B>
concept HasOutHw = requires(const B& b, int h, int w, int& ho, int& wo) { b.out_hw(h, w, ho, wo); };

template <typename B>
struct BlockLayer final : Layer {
    B block;
    std::string kind_;
    int out_c;

    BlockLayer(B b, std::string kind, int out_channels)
        : block(std::move(b)), kind_(std::move(kind)), out_c(out_channels) {}

    Tensor forward(std::span<const Tensor> ins, Tape* tape) const override {
        return block.forward(ins[0], tape);
    }
    std::int64_t param_count() const override { return block.param_count(); }
    std::int64_t macs(const std::vector<Shape4>& in) const override {
        return block.macs(in[0][2], in[0][3]);
    }
    Shape4 out_shape(const std::vector<Shape4>& in) const override {
        int ho = in[0][2], wo = in[0][3];
        if constexpr (HasOutHw<B>) block.out_hw(in[0][2], in[0][3], ho, wo);
        return {in[0][0], out_c, ho, wo};
    }
    void collect(const std::string& prefix, std::vector<blocks::NamedTensor>& out) const override {
        block.collect(prefix, out);
    }
    std::string kind() const override { return kind_; }
};

struct UpsampleLayer final : Layer {
    int scale;
    explicit UpsampleLayer(int s) : scale(s) {}
    Tensor forward(std::span<const Tensor> ins, Tape* tape) const override {
        return upsample_nearest(ins[0], scale, tape);
    }
    std::int64_t param_count() const override { return 0; }
    std::int64_t macs(const std::vector<Shape4>&) const override { return 0; }
    Shape4 out_shape(const std::vector<Shape4>& in) const override {
        return {in[0][0], in[0][1], in[0][2] * scale, in[0][3] * scale};
    }
    void collect(const std::string&, std::vector<blocks::NamedTensor>&) const override {}
    std::string kind() const override { return "upsample"; }
};

struct ConcatLayer final : Layer {
    Tensor forward(std::span<const Tensor> ins, Tape* tape) const override { return concat(ins, 1, tape); }
    std::int64_t param_count() const override { return 0; }
    std::int64_t macs(const std::vector<Shape4>&) const override { return 0; }
    Shape4 out_shape(const std::vector<Shape4>& in) const override {
        Shape4 s = in[0];
        for (std::size_t i = 1; i < in.size(); ++i) s[1] += in[i][1];
        return s;
    }
    void collect(const std::string&, std::vector<blocks::NamedTensor>&) const override {}
    std::string kind() const override { return "concat"; }
};

struct HeadScaleLayer final : Layer {
    blocks::DetectHead::Branch box, cls;
    int out_c;

    HeadScaleLayer(blocks::DetectHead::Branch b, blocks::DetectHead::Branch c, int out_channels)
        : box(std::move(b)), cls(std::move(c)), out_c(out_channels) {}

    Tensor forward(std::span<const Tensor> ins, Tape* tape) const override {
        Tensor b = box.forward(ins[0], tape);
        Tensor c = cls.forward(ins[0], tape);
        return concat({b, c}, 1, tape);
    }
    std::int64_t param_count() const override { return box.param_count() + cls.param_count(); }
    std::int64_t macs(const std::vector<Shape4>& in) const override {
        return box.macs(in[0][2], in[0][3]) + cls.macs(in[0][2], in[0][3]);
    }
    Shape4 out_shape(const std::vector<Shape4>& in) const override {
        return {in[0][0], out_c, in[0][2], in[0][3]};
    }
    void collect(const std::string& prefix, std::vector<blocks::NamedTensor>& out) const override {
        box.collect(prefix + ".box", out);
        cls.collect(prefix + ".cls", out);
    }
    std::string kind() const override { return "head"; }
};

}  // namespace detail

struct GraphNode {
    std::string name;
    std::unique_ptr<Layer> layer;
    std::vector<int> inputs;  // producer node indices; -1 = the graph input
};

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

struct CostRow {
    std::string name;
    std::string kind;
    Shape4 out_shape{0, 0, 0, 0};
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

struct CostReport {
    std::vector<CostRow> rows;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;

    std::int64_t total_flops() const { return 2 * total_macs; }

    std::string to_text() const {
        std::string s = "# cost report (FLOPs counted as 2 x MACs; conv and sampling arithmetic only)\n";
        s += format_msg("# layers: ", rows.size(), "\n");
        char line[256];
        std::snprintf(line, sizeof(line), "%-24s %-10s %-20s %14s %16s\n", "name", "kind", "out_shape", "params",
                      "macs");
        s += line;
        for (const auto& r : rows) {
            std::snprintf(line, sizeof(line), "%-24s %-10s %-20s %14lld %16lld\n", r.name.c_str(),
                          r.kind.c_str(), shape_str(r.out_shape).c_str(), static_cast<long long>(r.params),
                          static_cast<long long>(r.macs));
            s += line;
        }
        std::snprintf(line, sizeof(line), "%-24s %-10s %-20s %14lld %16lld\n", "TOTAL", "", "",
                      static_cast<long long>(total_params), static_cast<long long>(total_macs));
        s += line;
        s += format_msg("# total params: ", total_params, "\n");
        s += format_msg("# total MACs:   ", total_macs, "\n");
        s += format_msg("# total FLOPs:  ", total_flops(), " (2 x MACs)\n");
        return s;
    }

    std::string to_csv() const {
        std::string s = "name,kind,out_n,out_c,out_h,out_w,params,macs\n";
        for (const auto& r : rows)
            s += format_msg(r.name, ",", r.kind, ",", r.out_shape[0], ",", r.out_shape[1], ",", r.out_shape[2],
                            ",", r.out_shape[3], ",", r.params, ",", r.macs, "\n");
        s += format_msg("TOTAL,,,,,,", total_params, ",", total_macs, "\n");
        return s;
    }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class Model {
public:
    VariantConfig cfg;
    std::vector<GraphNode> nodes;
    std::vector<int> head_nodes;       // indices of the 3 per-scale head nodes
    std::array<int, 3> strides{8, 16, 32};

    std::vector<Tensor> forward(const Tensor& input, Tape* tape = nullptr) const {
        if (input.c() != cfg.in_channels())
            throw ConfigError(format_msg("forward: ", modality_name(cfg.modality), " model expects ",
                                         cfg.in_channels(), " input channels, got ", input.c()));
        std::vector<Tensor> outs(nodes.size());
        std::vector<Tensor> ins;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            ins.clear();
            for (int src : nodes[i].inputs) ins.push_back(src < 0 ? input : outs[static_cast<std::size_t>(src)]);
            try {
                outs[i] = nodes[i].layer->forward(std::span<const Tensor>(ins), tape);
            } catch (const std::exception& e) {
                throw ConfigError(format_msg("forward at layer '", nodes[i].name, "': ", e.what()));
            }
        }
        std::vector<Tensor> maps;
        for (int h : head_nodes) maps.push_back(outs[static_cast<std::size_t>(h)]);
        return maps;
    }

    // All named tensors in graph order.
    std::vector<blocks::NamedTensor> collect() const {
        std::vector<blocks::NamedTensor> named;
        for (const auto& n : nodes) n.layer->collect(n.name, named);
        return named;
    }

    // Closed-form learnable parameter total.
    std::int64_t param_count() const {
        std::int64_t p = 0;
        for (const auto& n : nodes) p += n.layer->param_count();
        return p;
    }

    // Independent route: exhaustive enumeration of collected tensors.
    std::int64_t param_count_enumerated() const {
        std::int64_t p = 0;
        for (const auto& nt : collect())
            if (nt.learnable) p += nt.tensor.numel();
        return p;
    }

    CostReport cost_report(const Shape4& input_shape) const {
        CostReport rep;
        std::vector<Shape4> shapes(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            std::vector<Shape4> in_shapes;
            for (int src : nodes[i].inputs)
                in_shapes.push_back(src < 0 ? input_shape : shapes[static_cast<std::size_t>(src)]);
            shapes[i] = nodes[i].layer->out_shape(in_shapes);
            CostRow row;
            row.name = nodes[i].name;
            row.kind = nodes[i].layer->kind();
            row.out_shape = shapes[i];
            // params by exhaustive tensor enumeration
            std::vector<blocks::NamedTensor> named;
            nodes[i].layer->collect(nodes[i].name, named);
            for (const auto& nt : named)
                if (nt.learnable) row.params += nt.tensor.numel();
            row.macs = nodes[i].layer->macs(in_shapes) * input_shape[0];
            rep.rows.push_back(std::move(row));
            rep.total_params += rep.rows.back().params;
            rep.total_macs += rep.rows.back().macs;
        }
        return rep;
    }

    std::uint64_t weights_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& nt : collect())
            h = fnv1a64(nt.tensor.data().data(), nt.tensor.data().size() * sizeof(double), h);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Builder. Nano scaling: widths 16/32/64/128/256, stage repeats 1/2/2/1.
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<blocks::DetectHead::Branch, blocks::DetectHead::Branch> make_head_scale(
    Rng& rng, int ch, int c_box, int c_cls, int num_classes, int reg_max, bool deformable) {
    blocks::DetectHead::Branch box, cls;
    box.deformable = cls.deformable = deformable;
    if (deformable) {
        box.dcv = blocks::DeformConvBNAct(rng, ch, c_box, 3);
        cls.dcv = blocks::DeformConvBNAct(rng, ch, c_cls, 3);
    } else {
        box.cv_first = blocks::ConvBNAct(rng, ch, c_box, 3);
        cls.cv_first = blocks::ConvBNAct(rng, ch, c_cls, 3);
    }
    box.cv_mid = blocks::ConvBNAct(rng, c_box, c_box, 3);
    box.out = blocks::Conv2dBias(rng, c_box, 4 * reg_max, 1);
    cls.cv_mid = blocks::ConvBNAct(rng, c_cls, c_cls, 3);
    cls.out = blocks::Conv2dBias(rng, c_cls, num_classes, 1);
    return {std::move(box), std::move(cls)};
}

}  // namespace detail

inline Model build_model(const VariantConfig& cfg, std::uint64_t seed = 1) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);

    const bool egd = !cfg.baseline;
    const int w0 = 16, w1 = 32, w2 = 64, w3 = 128, w4 = 256;
    const std::array<int, 4> stage_width{w1, w2, w3, w4};
    const std::array<int, 4> stage_repeat{1, 2, 2, 1};

    auto add = [&](std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs) -> int {
        m.nodes.push_back({std::move(name), std::move(layer), std::move(inputs)});
        return static_cast<int>(m.nodes.size() - 1);
    };
    auto ghost_or_conv = [&](int c1, int c2, int k, int s) -> std::unique_ptr<Layer> {
        if (egd)
            return std::make_unique<detail::BlockLayer<blocks::GhostConv>>(blocks::GhostConv(rng, c1, c2, k, s),
                                                                           "ghost_conv", c2);
        return std::make_unique<detail::BlockLayer<blocks::ConvBNAct>>(blocks::ConvBNAct(rng, c1, c2, k, s),
                                                                       "conv", c2);
    };
    auto stage_block = [&](int c1, int c2, int n, bool neck) -> std::unique_ptr<Layer> {
        if (egd)
            return std::make_unique<detail::BlockLayer<blocks::C3Ghost>>(blocks::C3Ghost(rng, c1, c2, n),
                                                                         "c3ghost", c2);
        return std::make_unique<detail::BlockLayer<blocks::C2f>>(blocks::C2f(rng, c1, c2, n, !neck), "c2f", c2);
    };
    auto ema_layer = [&](int c) {
        return std::make_unique<detail::BlockLayer<blocks::Ema>>(blocks::Ema(rng, c, cfg.ema_factor), "ema", c);
    };
    // c3 stage with the configured attention placement (EGD only)
    auto add_stage = [&](const std::string& name, int from, int c1, int c2, int n, bool neck) -> int {
        int idx = from;
        if (egd && cfg.ema_placement == EmaPlacement::before_c3ghost)
            idx = add(name + ".ema", ema_layer(c1), {idx});
        idx = add(name, stage_block(c1, c2, n, neck), {idx});
        if (egd && cfg.ema_placement == EmaPlacement::after_c3ghost)
            idx = add(name + ".ema", ema_layer(c2), {idx});
        return idx;
    };

    // backbone
    int x = add("backbone.stem", ghost_or_conv(cfg.in_channels(), w0, 3, 2), {-1});
    std::array<int, 4> taps{};  // post-stage outputs; taps[1]=P3, taps[2]=P4, taps[3]=P5(pre-sppf)
    int width = w0;
    for (int s = 0; s < 4; ++s) {
        const std::string tag = std::to_string(s + 1);
        x = add("backbone.down" + tag, ghost_or_conv(width, stage_width[static_cast<std::size_t>(s)], 3, 2), {x});
        width = stage_width[static_cast<std::size_t>(s)];
        x = add_stage("backbone.c3_" + tag, x, width, width, stage_repeat[static_cast<std::size_t>(s)], false);
        taps[static_cast<std::size_t>(s)] = x;
    }
    x = add("backbone.sppf", std::make_unique<detail::BlockLayer<blocks::Sppf>>(blocks::Sppf(rng, w4, w4, 5),
                                                                                "sppf", w4), {x});
    if (egd) x = add("backbone.sppf.ema", ema_layer(w4), {x});
    const int p5 = x;

    // neck (PANet): top-down then bottom-up
    int up1 = add("neck.up1", std::make_unique<detail::UpsampleLayer>(2), {p5});
    int cat1 = add("neck.cat1", std::make_unique<detail::ConcatLayer>(), {up1, taps[2]});
    int n1 = add_stage("neck.c3_td1", cat1, w4 + w3, w3, 1, true);

    int up2 = add("neck.up2", std::make_unique<detail::UpsampleLayer>(2), {n1});
    int cat2 = add("neck.cat2", std::make_unique<detail::ConcatLayer>(), {up2, taps[1]});
    int p3_out = add_stage("neck.c3_td2", cat2, w3 + w2, w2, 1, true);

    int d1 = add("neck.down1", ghost_or_conv(w2, w2, 3, 2), {p3_out});
    int cat3 = add("neck.cat3", std::make_unique<detail::ConcatLayer>(), {d1, n1});
    int p4_out = add_stage("neck.c3_bu1", cat3, w2 + w3, w3, 1, true);

    int d2 = add("neck.down2", ghost_or_conv(w3, w3, 3, 2), {p4_out});
    int cat4 = add("neck.cat4", std::make_unique<detail::ConcatLayer>(), {d2, p5});
    int p5_out = add_stage("neck.c3_bu2", cat4, w3 + w4, w4, 1, true);

    // head
    const std::array<int, 3> head_in{p3_out, p4_out, p5_out};
    const std::array<int, 3> head_ch{w2, w3, w4};
    const int c_box = std::max({16, head_ch[0] / 4, 4 * cfg.reg_max});
    const int c_cls = std::max(head_ch[0], std::min(cfg.num_classes, 100));
    const bool deformable = (cfg.head == HeadKind::ddetect);
    const int out_c = 4 * cfg.reg_max + cfg.num_classes;
    for (int s = 0; s < 3; ++s) {
        auto [box, cls] = detail::make_head_scale(rng, head_ch[static_cast<std::size_t>(s)], c_box, c_cls,
                                                  cfg.num_classes, cfg.reg_max, deformable);
        int h = add("head.p" + std::to_string(s + 3),
                    std::make_unique<detail::HeadScaleLayer>(std::move(box), std::move(cls), out_c),
                    {head_in[static_cast<std::size_t>(s)]});
        m.head_nodes.push_back(h);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Decoding: DFL expectation + sigmoid class scores + class-wise greedy NMS.
// ---------------------------------------------------------------------------

struct DecodeOpts {
    double conf_threshold = 0.25;
    double nms_iou = 0.45;
    int pre_nms_per_class = 3000;
    int max_detections = 300;
};

inline std::vector<Detection> decode_predictions(std::span<const Tensor> maps, int num_classes, int reg_max,
                                                 std::span<const int> strides, const DecodeOpts& opts) {
    if (opts.conf_threshold < 0.0 || opts.conf_threshold > 1.0)
        throw ParamError(format_msg("decode: conf_threshold must be in [0,1], got ", opts.conf_threshold));
    if (opts.nms_iou < 0.0 || opts.nms_iou > 1.0)
        throw ParamError(format_msg("decode: nms_iou must be in [0,1], got ", opts.nms_iou));
    if (maps.size() != strides.size())
        throw ConfigError(format_msg("decode: ", maps.size(), " maps vs ", strides.size(), " strides"));
    if (maps.empty()) return {};
    const int want_c = 4 * reg_max + num_classes;
    const double img_w = static_cast<double>(maps[0].w()) * strides[0];
    const double img_h = static_cast<double>(maps[0].h()) * strides[0];

    std::vector<Detection> cands;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        const Tensor& map = maps[s];
        if (map.n() != 1)
            throw ParamError(format_msg("decode: expected batch 1 maps, got batch ", map.n()));
        if (map.c() != want_c)
            throw ConfigError(format_msg("decode: map ", s, " has ", map.c(), " channels, expected ", want_c));
        const double stride = static_cast<double>(strides[s]);
        if (static_cast<double>(map.w()) * stride != img_w || static_cast<double>(map.h()) * stride != img_h)
            throw ConfigError(format_msg("decode: map ", s, " spatial size disagrees with stride ", strides[s]));
        for (int i = 0; i < map.h(); ++i)
            for (int j = 0; j < map.w(); ++j) {
                // DFL expectation per side (l, t, r, b), in cell units
                double ltrb[4];
                for (int side = 0; side < 4; ++side) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int bin = 0; bin < reg_max; ++bin)
                        mx = std::max(mx, map.at(0, side * reg_max + bin, i, j));
                    double denom = 0.0, num = 0.0;
                    for (int bin = 0; bin < reg_max; ++bin) {
                        const double e = std::exp(map.at(0, side * reg_max + bin, i, j) - mx);
                        denom += e;
                        num += e * bin;
                    }
                    ltrb[side] = num / denom;
                }
                const double ax = (j + 0.5), ay = (i + 0.5);
                double x1 = (ax - ltrb[0]) * stride, y1 = (ay - ltrb[1]) * stride;
                double x2 = (ax + ltrb[2]) * stride, y2 = (ay + ltrb[3]) * stride;
                x1 = std::clamp(x1, 0.0, img_w);
                x2 = std::clamp(x2, 0.0, img_w);
                y1 = std::clamp(y1, 0.0, img_h);
                y2 = std::clamp(y2, 0.0, img_h);
                if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) continue;
                BoxCxcywh box{(x1 + x2) / 2.0 / img_w, (y1 + y2) / 2.0 / img_h, (x2 - x1) / img_w,
                              (y2 - y1) / img_h};
                for (int c = 0; c < num_classes; ++c) {
                    const double score = sigmoid_scalar(map.at(0, 4 * reg_max + c, i, j));
                    if (score > opts.conf_threshold) cands.push_back({c, score, box});
                }
            }
    }

    // class-wise greedy NMS; ties broken by earlier candidate index
    std::vector<Detection> kept;
    for (int c = 0; c < num_classes; ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < cands.size(); ++i)
            if (cands[i].class_id == c) idx.push_back(i);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return cands[a].confidence > cands[b].confidence; });
        if (static_cast<int>(idx.size()) > opts.pre_nms_per_class)
            idx.resize(static_cast<std::size_t>(opts.pre_nms_per_class));
        std::vector<std::size_t> survivors;
        for (std::size_t i : idx) {
            bool suppressed = false;
            for (std::size_t k : survivors)
                if (box_iou(cands[i].box, cands[k].box) > opts.nms_iou) {
                    suppressed = true;
                    break;
                }
            if (!suppressed) survivors.push_back(i);
        }
        for (std::size_t i : survivors) kept.push_back(cands[i]);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    if (static_cast<int>(kept.size()) > opts.max_detections)
        kept.resize(static_cast<std::size_t>(opts.max_detections));
    return kept;
}

// ---------------------------------------------------------------------------
// Weight file: magic "EGDW", u32 version, u32 tensor count; per tensor a
// u16 name length + name, u8 rank, rank x u32 extents, then float32
// little-endian row-major values.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kWeightFileVersion = 1;

namespace detail {

inline void put_u16(std::string& b, std::uint16_t v) {
    b.push_back(static_cast<char>(v & 0xff));
    b.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(b, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw FormatError(format_msg(path, ": truncated weight file at byte ", pos, " (need ", n, " more)"));
    }
    std::uint16_t u16() {
        need(2);
        auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos]) |
                                            (static_cast<unsigned char>(buf[pos + 1]) << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

}  // namespace detail

inline void save_weights(const Model& m, const std::filesystem::path& path) {
    std::string buf = "EGDW";
    auto named = m.collect();
    detail::put_u32(buf, kWeightFileVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(named.size()));
    for (const auto& nt : named) {
        if (nt.name.size() > 0xffff)
            throw FormatError(format_msg("save_weights: tensor name too long: ", nt.name));
        detail::put_u16(buf, static_cast<std::uint16_t>(nt.name.size()));
        buf += nt.name;
        buf.push_back(4);  // rank
        for (int e : nt.tensor.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(e));
        for (double v : nt.tensor.data()) detail::put_f32(buf, static_cast<float>(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(format_msg("save_weights: cannot open ", path.string(), " for writing"));
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError(format_msg("save_weights: short write to ", path.string()));
}

inline void load_weights(Model& m, const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(format_msg("load_weights: cannot open ", path.string()));
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string pstr = path.string();
    detail::Reader r{buf, 0, pstr};

    if (r.bytes(4) != "EGDW") throw FormatError(format_msg(pstr, ": bad magic, not a weight file"));
    const std::uint32_t version = r.u32();
    if (version != kWeightFileVersion)
        throw FormatError(format_msg(pstr, ": unsupported weight file version ", version));
    const std::uint32_t count = r.u32();

    struct Entry {
        Shape4 shape;
        std::vector<float> values;
    };
    std::map<std::string, Entry> entries;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint16_t name_len = r.u16();
        std::string name = r.bytes(name_len);
        const std::uint8_t rank = r.u8();
        if (rank != 4)
            throw FormatError(format_msg(pstr, ": tensor '", name, "' has rank ", int(rank), ", expected 4"));
        Entry e;
        std::int64_t n = 1;
        for (int i = 0; i < 4; ++i) {
            e.shape[static_cast<std::size_t>(i)] = static_cast<int>(r.u32());
            n *= e.shape[static_cast<std::size_t>(i)];
        }
        if (n <= 0) throw FormatError(format_msg(pstr, ": tensor '", name, "' has invalid shape"));
        e.values.resize(static_cast<std::size_t>(n));
        for (auto& v : e.values) v = r.f32();
        if (!entries.emplace(std::move(name), std::move(e)).second)
            throw FormatError(format_msg(pstr, ": duplicate tensor name in file"));
    }

    // validate fully before mutating the graph
    auto named = m.collect();
    for (const auto& nt : named) {
        auto it = entries.find(nt.name);
        if (it == entries.end())
            throw FormatError(format_msg(pstr, ": missing tensor '", nt.name, "'"));
        if (it->second.shape != nt.tensor.shape())
            throw FormatError(format_msg(pstr, ": shape mismatch for '", nt.name, "': file has ",
                                         shape_str(it->second.shape), ", graph needs ",
                                         shape_str(nt.tensor.shape())));
    }
    if (entries.size() != named.size()) {
        for (const auto& [name, e] : entries) {
            bool known = false;
            for (const auto& nt : named)
                if (nt.name == name) known = true;
            if (!known) throw FormatError(format_msg(pstr, ": unexpected tensor '", name, "' in file"));
        }
    }
    for (auto& nt : named) {
        const auto& vals = entries[nt.name].values;
        for (std::size_t i = 0; i < vals.size(); ++i)
            nt.tensor.data()[i] = static_cast<double>(vals[i]);
    }
}

}  // namespace egd::model
