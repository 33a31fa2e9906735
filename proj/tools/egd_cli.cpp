// Command-line front end. Subcommands: restore, prepare, analyze, forward,
// evaluate, gradcheck, bench. Exit codes: 0 success, 1 domain failure
// (bad data, failed check), 2 usage error (unknown flag, invalid value).
//
// Every run that owns an output directory writes a report.txt there opening
// with a reproducibility stanza (version, command, fully resolved options);
// commands without one print the stanza to stdout. Reports carry no
// timestamps, so identical inputs and seeds reproduce identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "egd/blocks.hpp"
#include "egd/common.hpp"
#include "egd/dataset.hpp"
#include "egd/image.hpp"
#include "egd/image_io.hpp"
#include "egd/metrics.hpp"
#include "egd/model.hpp"
#include "egd/restoration.hpp"
#include "egd/tensor.hpp"

namespace fs = std::filesystem;

namespace {

using egd::Rng;
using egd::Tape;
using egd::Tensor;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

using ConfigKv = std::vector<std::pair<std::string, std::string>>;

std::string run_stanza(const std::string& command, const ConfigKv& kv) {
    std::string s = "# run config\n";
    s += egd::format_msg("version: ", egd::kVersion, "\n");
    s += egd::format_msg("command: ", command, "\n");
    for (const auto& [k, v] : kv) s += egd::format_msg(k, ": ", v, "\n");
    return s;
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw egd::IoError(egd::format_msg("cannot write ", path.string()));
    out << content;
    if (!out) throw egd::IoError(egd::format_msg("short write to ", path.string()));
}

std::vector<std::string> split_csv(const std::string& spec) {
    std::vector<std::string> items;
    std::string tok;
    std::istringstream ss(spec);
    while (std::getline(ss, tok, ',')) {
        const auto b = tok.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = tok.find_last_not_of(" \t");
        items.push_back(tok.substr(b, e - b + 1));
    }
    return items;
}

egd::model::Modality parse_modality(const std::string& name) {
    if (name == "rgb") return egd::model::Modality::rgb;
    if (name == "ir") return egd::model::Modality::ir;
    if (name == "fusion") return egd::model::Modality::fusion;
    throw egd::ConfigError(egd::format_msg("unknown modality '", name, "'"));
}

// Validators that reject bad flag values at parse time (usage error, exit 2).
const CLI::Validator kOddWindow(
    [](std::string& s) -> std::string {
        int v = 0;
        try {
            std::size_t pos = 0;
            v = std::stoi(s, &pos);
            if (pos != s.size()) return "not an integer: " + s;
        } catch (const std::exception&) {
            return "not an integer: " + s;
        }
        if (v < 1 || v % 2 == 0) return "window must be an odd positive integer, got " + s;
        return {};
    },
    "ODD");

const CLI::Validator kImageSize(
    [](std::string& s) -> std::string {
        int v = 0;
        try {
            std::size_t pos = 0;
            v = std::stoi(s, &pos);
            if (pos != s.size()) return "not an integer: " + s;
        } catch (const std::exception&) {
            return "not an integer: " + s;
        }
        if (v < 32 || v % 32 != 0) return "image size must be a positive multiple of 32, got " + s;
        return {};
    },
    "SIZE32");

const CLI::Validator kChainSpec(
    [](std::string& s) -> std::string {
        for (const std::string& op : split_csv(s))
            if (op != "median" && op != "rl" && op != "unsharp" && op != "normalize")
                return "unknown restoration op '" + op + "' (expected median, rl, unsharp, normalize)";
        return {};
    },
    "CHAIN");

// ---------------------------------------------------------------------------
// restore: run a restoration chain over one image or a directory of images.
// ---------------------------------------------------------------------------

struct RestoreArgs {
    std::string input;
    std::string out;
    std::string chain;
    int median_window = 3;
    double median_threshold = 1e-3;
    double unsharp_sigma = 1.0;
    double unsharp_amount = 1.5;
    double unsharp_threshold = 0.01;
    int rl_iterations = 10;
    std::string psf = "box";
    int psf_size = 3;
};

std::vector<fs::path> collect_images(const fs::path& input) {
    if (fs::is_regular_file(input)) return {input};
    if (!fs::is_directory(input))
        throw egd::IoError(egd::format_msg("input not found: ", input.string()));
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(input))
        if (entry.is_regular_file() && egd::dataset::is_image_file(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    if (files.empty()) throw egd::PipelineError(egd::format_msg("no images under ", input.string()));
    return files;
}

int run_restore(const RestoreArgs& a) {
    const std::vector<std::string> chain = split_csv(a.chain);
    egd::restore::ChainOpts opts;
    opts.median_window = a.median_window;
    opts.median_threshold = a.median_threshold;
    opts.unsharp_sigma = a.unsharp_sigma;
    opts.unsharp_amount = a.unsharp_amount;
    opts.unsharp_threshold = a.unsharp_threshold;
    opts.rl_iterations = a.rl_iterations;
    opts.psf = a.psf == "delta" ? egd::restore::Psf::delta(a.psf_size) : egd::restore::Psf::box(a.psf_size);

    const std::vector<fs::path> files = collect_images(a.input);
    fs::create_directories(a.out);
    if (fs::exists(a.input) && fs::is_directory(a.input) && fs::equivalent(a.input, a.out))
        throw egd::ParamError("output directory must differ from the input directory");

    // Per-file parallelism; slot-indexed results keep the report ordering
    // independent of scheduling.
    std::vector<std::string> status(files.size());
    std::vector<char> failed(files.size(), 0);
    egd::parallel_for(0, static_cast<std::int64_t>(files.size()), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const fs::path& src = files[static_cast<std::size_t>(i)];
            const fs::path dst = fs::path(a.out) / src.filename();
            try {
                if (chain.empty()) {
                    // Pass-through preserves the original bytes exactly.
                    fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
                    status[static_cast<std::size_t>(i)] = "copied";
                } else {
                    const egd::img::Image im = egd::img::read_image(src);
                    egd::img::write_image(egd::restore::apply_chain(im, chain, opts), dst);
                    status[static_cast<std::size_t>(i)] = "restored";
                }
            } catch (const std::exception& e) {
                status[static_cast<std::size_t>(i)] = egd::format_msg("failed: ", e.what());
                failed[static_cast<std::size_t>(i)] = 1;
            }
        }
    });
    const auto n_failed = std::count(failed.begin(), failed.end(), 1);

    std::string report = run_stanza("restore", {{"in", fs::absolute(a.input).string()},
                                                {"out", fs::absolute(a.out).string()},
                                                {"chain", a.chain.empty() ? "(none)" : a.chain},
                                                {"median_window", std::to_string(a.median_window)},
                                                {"median_threshold", fmt_double(a.median_threshold)},
                                                {"unsharp_sigma", fmt_double(a.unsharp_sigma)},
                                                {"unsharp_amount", fmt_double(a.unsharp_amount)},
                                                {"unsharp_threshold", fmt_double(a.unsharp_threshold)},
                                                {"rl_iterations", std::to_string(a.rl_iterations)},
                                                {"psf", a.psf},
                                                {"psf_size", std::to_string(a.psf_size)}});
    report += egd::format_msg("\nfiles: ", files.size(), "\nfailed: ", n_failed, "\n\n");
    for (std::size_t i = 0; i < files.size(); ++i)
        report += egd::format_msg(files[i].filename().string(), ": ", status[i], "\n");
    write_text_file(fs::path(a.out) / "report.txt", report);

    std::cout << "processed " << files.size() << " file(s), " << n_failed << " failed\n";
    if (n_failed > 0) {
        for (std::size_t i = 0; i < files.size(); ++i)
            if (failed[i]) std::cerr << "error: " << files[i].string() << ": " << status[i] << "\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// prepare: pair RGB/IR trees, stratify, split, emit manifests, verify.
// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::string rgb;
    std::string ir;
    std::string out;
    double ratio = 0.9;
    std::uint64_t seed = 1;
};

int run_prepare(const PrepareArgs& a) {
    const egd::dataset::PipelineResult r = egd::dataset::run_pipeline(a.rgb, a.ir, a.ratio, a.seed);
    egd::dataset::emit_manifests(r.split, a.out);
    const egd::dataset::IntegrityReport integrity = egd::dataset::verify_integrity(a.out);
    const egd::dataset::DistributionReport dist =
        egd::dataset::distribution_report(r.pairs, r.records, r.thresholds, r.strata, r.split);

    std::string report = run_stanza("prepare", {{"rgb", fs::absolute(a.rgb).string()},
                                                {"ir", fs::absolute(a.ir).string()},
                                                {"out", fs::absolute(a.out).string()},
                                                {"ratio", fmt_double(a.ratio)},
                                                {"seed", std::to_string(a.seed)}});
    report += egd::format_msg("\npairs: ", r.pairs.size(), "\ntrain: ", r.split.train.size(),
                              "\nval: ", r.split.val.size(), "\nlabel clamp warnings: ", r.clamp_warnings, "\n\n");
    report += "## integrity\n" + integrity.to_text() + "\n## distribution\n" + dist.to_text();
    const fs::path report_path = fs::path(a.out) / "report.txt";
    write_text_file(report_path, report);

    std::cout << "prepared " << r.pairs.size() << " pair(s): " << r.split.train.size() << " train, "
              << r.split.val.size() << " val\nreport: " << report_path.string() << "\n";
    if (!integrity.ok()) {
        std::cerr << "error: integrity verification failed, see " << report_path.string() << "\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// verify: re-check an emitted manifest directory (existence, pairing, labels).
// ---------------------------------------------------------------------------

struct VerifyArgs {
    std::string manifests;
    std::string out;
};

int run_verify(const VerifyArgs& a) {
    const egd::dataset::IntegrityReport integrity = egd::dataset::verify_integrity(a.manifests);
    const std::string stanza = run_stanza("verify", {{"manifests", fs::absolute(a.manifests).string()}});
    const std::string text = stanza + "\n" + integrity.to_text();
    std::cout << text;
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_text_file(fs::path(a.out) / "report.txt", text);
    }
    if (!integrity.ok()) {
        std::cerr << "error: integrity verification failed\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// analyze: side-by-side cost report, ghost variant vs standard baseline.
// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::string modality = "fusion";
    int imgsz = 640;
    std::string out;
};

int run_analyze(const AnalyzeArgs& a) {
    egd::model::VariantConfig ghost_cfg;
    ghost_cfg.modality = parse_modality(a.modality);
    egd::model::VariantConfig base_cfg = ghost_cfg;
    base_cfg.baseline = true;
    base_cfg.head = egd::model::HeadKind::standard;

    const egd::model::Model ghost = egd::model::build_model(ghost_cfg, 1);
    const egd::model::Model base = egd::model::build_model(base_cfg, 1);
    const egd::Shape4 in{1, ghost_cfg.in_channels(), a.imgsz, a.imgsz};
    const egd::model::CostReport gr = ghost.cost_report(in);
    const egd::model::CostReport br = base.cost_report(in);

    // Cross-check the table against the parameter store before printing.
    auto column_sums_ok = [](const egd::model::CostReport& rep, const egd::model::Model& m) {
        std::int64_t params = 0, macs = 0;
        for (const auto& row : rep.rows) {
            params += row.params;
            macs += row.macs;
        }
        return params == rep.total_params && macs == rep.total_macs && rep.total_params == m.param_count() &&
               m.param_count() == m.param_count_enumerated();
    };
    const bool sums_ok = column_sums_ok(gr, ghost) && column_sums_ok(br, base);

    std::string text = run_stanza("analyze", {{"modality", a.modality},
                                              {"imgsz", std::to_string(a.imgsz)},
                                              {"stem input channels", std::to_string(ghost_cfg.in_channels())}});
    text += "\n## ghost variant\n" + gr.to_text();
    text += "\n## baseline variant\n" + br.to_text();

    // Per-stage comparison over rows present in both variants under the same
    // name (the attention layers have no baseline counterpart).
    text += "\n## stage comparison (params, ghost vs standard)\n";
    for (const auto& grow : gr.rows) {
        const auto bit = std::find_if(br.rows.begin(), br.rows.end(),
                                      [&](const auto& brow) { return brow.name == grow.name; });
        if (bit == br.rows.end() || bit->params == 0 || bit->params == grow.params) continue;
        const double cut = 100.0 * (1.0 - static_cast<double>(grow.params) / static_cast<double>(bit->params));
        char line[160];
        std::snprintf(line, sizeof(line), "%-16s %-10s %8lld vs %8lld  %+6.1f%% reduction\n", grow.name.c_str(),
                      grow.kind.c_str(), static_cast<long long>(grow.params), static_cast<long long>(bit->params),
                      cut);
        text += line;
    }

    const double param_cut =
        100.0 * (1.0 - static_cast<double>(gr.total_params) / static_cast<double>(br.total_params));
    const double mac_cut = 100.0 * (1.0 - static_cast<double>(gr.total_macs) / static_cast<double>(br.total_macs));
    char totals[256];
    std::snprintf(totals, sizeof(totals),
                  "\n## totals\nparams: %lld vs %lld (%.1f%% smaller)\nMACs:   %lld vs %lld (%.1f%% smaller)\n",
                  static_cast<long long>(gr.total_params), static_cast<long long>(br.total_params), param_cut,
                  static_cast<long long>(gr.total_macs), static_cast<long long>(br.total_macs), mac_cut);
    text += totals;
    text += "reference design point: ~3.5M params, ~8.5 GFLOPs at 640x640 (full-width model; this build uses "
            "nano scaling)\n";
    text += egd::format_msg("column sums: ", sums_ok ? "PASS" : "FAIL", "\n");

    std::cout << text;
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_text_file(fs::path(a.out) / "analysis.txt", text);
        write_text_file(fs::path(a.out) / "cost_ghost.csv", gr.to_csv());
        write_text_file(fs::path(a.out) / "cost_baseline.csv", br.to_csv());
    }
    if (!sums_ok) {
        std::cerr << "error: cost table columns disagree with the parameter store\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// forward: one inference pass over an image (pair), decoded predictions.
// ---------------------------------------------------------------------------

struct ForwardArgs {
    std::string modality = "fusion";
    std::string rgb;
    std::string ir;
    std::string weights;
    std::string out;
    std::uint64_t seed = 1;
    int imgsz = 640;
    double conf = 0.25;
    double nms_iou = 0.45;
    bool baseline = false;
    bool save_weights = false;
};

Tensor load_input_tensor(const ForwardArgs& a, egd::model::Modality m) {
    auto load_resized = [&](const std::string& path) {
        return egd::restore::resize_bilinear(egd::img::read_image(path), a.imgsz, a.imgsz);
    };
    auto to_single_channel = [](const egd::img::Image& im) {
        if (im.channels == 1) return im;
        egd::img::Image mono(im.width, im.height, 1);
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) {
                double sum = 0.0;
                for (int c = 0; c < im.channels; ++c) sum += im.at(c, y, x);
                mono.at(0, y, x) = sum / im.channels;
            }
        return mono;
    };
    auto to_three_channel = [](const egd::img::Image& im) {
        if (im.channels == 3) return im;
        egd::img::Image rgb(im.width, im.height, 3);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < im.height; ++y)
                for (int x = 0; x < im.width; ++x) rgb.at(c, y, x) = im.at(0, y, x);
        return rgb;
    };

    switch (m) {
        case egd::model::Modality::rgb: {
            if (a.rgb.empty()) throw egd::ConfigError("rgb modality needs --rgb");
            return egd::img::to_tensor(to_three_channel(load_resized(a.rgb)));
        }
        case egd::model::Modality::ir: {
            if (a.ir.empty()) throw egd::ConfigError("ir modality needs --ir");
            return egd::img::to_tensor(to_single_channel(load_resized(a.ir)));
        }
        case egd::model::Modality::fusion: {
            if (a.rgb.empty()) throw egd::ConfigError("fusion modality needs --rgb");
            if (a.ir.empty())
                throw egd::ConfigError(egd::format_msg("fusion modality needs --ir (no IR partner for ",
                                                       a.rgb.empty() ? "input" : a.rgb, ")"));
            const Tensor rgb = egd::img::to_tensor(to_three_channel(load_resized(a.rgb)));
            const Tensor ir = egd::img::to_tensor(to_single_channel(load_resized(a.ir)));
            return egd::concat({rgb, ir}, 1);
        }
    }
    throw egd::ConfigError("unreachable modality");
}

int run_forward(const ForwardArgs& a) {
    egd::model::VariantConfig cfg;
    cfg.modality = parse_modality(a.modality);
    if (a.baseline) {
        cfg.baseline = true;
        cfg.head = egd::model::HeadKind::standard;
    }

    const Tensor input = load_input_tensor(a, cfg.modality);
    egd::model::Model model = egd::model::build_model(cfg, a.seed);
    std::string weight_source = egd::format_msg("random init (seed ", a.seed, ")");
    if (!a.weights.empty()) {
        egd::model::load_weights(model, a.weights);
        weight_source = fs::absolute(a.weights).string();
    }

    const std::vector<Tensor> maps = model.forward(input);
    egd::model::DecodeOpts dopts;
    dopts.conf_threshold = a.conf;
    dopts.nms_iou = a.nms_iou;
    const std::vector<egd::Detection> dets =
        egd::model::decode_predictions(maps, cfg.num_classes, cfg.reg_max, model.strides, dopts);

    std::string pred_text;
    for (const auto& d : dets)
        pred_text +=
            egd::metrics::format_prediction(egd::metrics::EvalPrediction{0, d.class_id, d.confidence, d.box}) +
            "\n";

    fs::create_directories(a.out);
    const fs::path pred_path = fs::path(a.out) / "predictions.txt";
    write_text_file(pred_path, pred_text);
    const std::string pred_hash = egd::hash_hex(egd::fnv1a64(pred_text));
    if (a.save_weights) egd::model::save_weights(model, fs::path(a.out) / "weights.bin");

    ConfigKv kv{{"modality", a.modality},
                {"baseline", a.baseline ? "true" : "false"},
                {"imgsz", std::to_string(a.imgsz)},
                {"conf", fmt_double(a.conf)},
                {"nms_iou", fmt_double(a.nms_iou)},
                {"seed", std::to_string(a.seed)},
                {"weights", weight_source}};
    if (!a.rgb.empty()) kv.emplace_back("rgb", fs::absolute(a.rgb).string());
    if (!a.ir.empty()) kv.emplace_back("ir", fs::absolute(a.ir).string());
    kv.emplace_back("out", fs::absolute(a.out).string());

    std::string report = run_stanza("forward", kv);
    report += egd::format_msg("\npredictions: ", dets.size(), "\npredictions_hash: ", pred_hash, "\n");
    write_text_file(fs::path(a.out) / "report.txt", report);

    std::cout << "predictions: " << dets.size() << "\npredictions_hash: " << pred_hash << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate: score a prediction file against ground truth.
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string predictions;
    std::string ground_truth;
    std::string out;
    int num_classes = 2;
    double iou = 0.5;
};

int run_evaluate(const EvaluateArgs& a) {
    const std::vector<egd::metrics::EvalPrediction> preds = egd::metrics::parse_predictions(a.predictions);
    const std::vector<egd::metrics::EvalGroundTruth> gts = egd::metrics::parse_ground_truth(a.ground_truth);
    const egd::metrics::EvalReport rep = egd::metrics::evaluate_detections(preds, gts, a.num_classes, a.iou);

    const std::string stanza = run_stanza("evaluate", {{"pred", fs::absolute(a.predictions).string()},
                                                       {"gt", fs::absolute(a.ground_truth).string()},
                                                       {"classes", std::to_string(a.num_classes)},
                                                       {"iou", fmt_double(a.iou)}});
    const std::string text = rep.to_text();
    if (a.out.empty()) {
        std::cout << stanza << "\n" << text;
    } else {
        fs::create_directories(a.out);
        write_text_file(fs::path(a.out) / "report.txt", stanza + "\n" + text);
        write_text_file(fs::path(a.out) / "report.csv", rep.to_csv());
        std::cout << text;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck: finite-difference sweep over every op and block.
// ---------------------------------------------------------------------------

// Deliberately wrong backward (gradient 3x instead of 2x), enabled by
// --inject-fault to prove the checker catches real violations.
Tensor faulty_square(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    if (egd::detail::wants_grad(tape, {&x})) {
        egd::detail::tape_enroll(tape, out, {&x});
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            xc.ensure_grad();
            for (std::int64_t i = 0; i < xc.numel(); ++i) xc.grad()[i] += oc.grad()[i] * 3.0 * xc.data()[i];
        });
    }
    return out;
}

struct GradcheckArgs {
    double tol = 1e-3;
    double step = 1e-4;
    std::uint64_t seed = 5;
    bool inject_fault = false;
    std::string out;
};

struct CheckEntry {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor(std::span<Tensor>, Tape*)> op;
};

std::vector<CheckEntry> build_check_entries(const GradcheckArgs& a) {
    std::vector<CheckEntry> entries;
    Rng data_rng(a.seed);
    auto leaf = [&](egd::Shape4 s) { return Tensor::randn(s, data_rng, 0.5); };
    auto add = [&](std::string name, std::vector<Tensor> inputs,
                   std::function<Tensor(std::span<Tensor>, Tape*)> op) {
        entries.push_back({std::move(name), std::move(inputs), std::move(op)});
    };

    // Elementwise and shape ops.
    add("add_broadcast", {leaf({1, 3, 4, 4}), leaf({1, 3, 1, 1})},
        [](std::span<Tensor> in, Tape* t) { return egd::add(in[0], in[1], t); });
    add("mul_broadcast", {leaf({1, 3, 4, 4}), leaf({1, 3, 1, 1})},
        [](std::span<Tensor> in, Tape* t) { return egd::mul(in[0], in[1], t); });
    add("scale", {leaf({1, 2, 4, 4})}, [](std::span<Tensor> in, Tape* t) { return egd::scale(in[0], 0.7, t); });
    add("matmul", {leaf({1, 1, 3, 4}), leaf({1, 1, 4, 2})},
        [](std::span<Tensor> in, Tape* t) { return egd::matmul(in[0], in[1], t); });
    add("reshape", {leaf({1, 3, 4, 2})},
        [](std::span<Tensor> in, Tape* t) { return egd::reshape(in[0], {1, 2, 4, 3}, t); });
    add("transpose_hw", {leaf({1, 2, 3, 5})},
        [](std::span<Tensor> in, Tape* t) { return egd::transpose_hw(in[0], t); });
    add("concat_c", {leaf({1, 2, 3, 3}), leaf({1, 3, 3, 3})},
        [](std::span<Tensor> in, Tape* t) { return egd::concat({in[0], in[1]}, 1, t); });
    add("split_swap_concat", {leaf({1, 4, 3, 3})}, [](std::span<Tensor> in, Tape* t) {
        const std::array<int, 2> sizes{1, 3};
        std::vector<Tensor> parts = egd::split(in[0], sizes, 1, t);
        return egd::concat({parts[1], parts[0]}, 1, t);
    });
    add("reduce_sum_w", {leaf({1, 2, 3, 5})},
        [](std::span<Tensor> in, Tape* t) { return egd::reduce_sum(in[0], 3, t); });

    // Activations.
    add("sigmoid", {leaf({1, 2, 4, 4})}, [](std::span<Tensor> in, Tape* t) { return egd::sigmoid(in[0], t); });
    add("silu", {leaf({1, 2, 4, 4})}, [](std::span<Tensor> in, Tape* t) { return egd::silu(in[0], t); });
    add("softmax_c", {leaf({1, 5, 2, 2})}, [](std::span<Tensor> in, Tape* t) { return egd::softmax(in[0], 1, t); });

    // Convolution and sampling.
    add("conv2d", {leaf({1, 3, 6, 6}), leaf({4, 3, 3, 3}), leaf({1, 4, 1, 1})},
        [](std::span<Tensor> in, Tape* t) { return egd::conv2d(in[0], in[1], in[2], {1, 1, 1, 1}, t); });
    add("conv2d_strided", {leaf({1, 3, 7, 7}), leaf({4, 3, 3, 3})},
        [](std::span<Tensor> in, Tape* t) { return egd::conv2d(in[0], in[1], {}, {2, 1, 1, 1}, t); });
    add("conv2d_grouped", {leaf({1, 4, 5, 5}), leaf({6, 2, 3, 3})},
        [](std::span<Tensor> in, Tape* t) { return egd::conv2d(in[0], in[1], {}, {1, 1, 1, 2}, t); });
    add("conv2d_depthwise", {leaf({1, 4, 5, 5}), leaf({4, 1, 3, 3})},
        [](std::span<Tensor> in, Tape* t) { return egd::conv2d(in[0], in[1], {}, {1, 1, 1, 4}, t); });
    add("pool_max", {leaf({1, 2, 6, 6})},
        [](std::span<Tensor> in, Tape* t) { return egd::pool2d(in[0], egd::PoolKind::max, 3, 2, 1, t); });
    add("pool_avg", {leaf({1, 2, 6, 6})},
        [](std::span<Tensor> in, Tape* t) { return egd::pool2d(in[0], egd::PoolKind::avg, 3, 2, 1, t); });
    add("adaptive_avg_pool", {leaf({1, 2, 5, 5})},
        [](std::span<Tensor> in, Tape* t) { return egd::adaptive_avg_pool(in[0], 2, 2, t); });
    add("upsample_nearest", {leaf({1, 2, 3, 3})},
        [](std::span<Tensor> in, Tape* t) { return egd::upsample_nearest(in[0], 2, t); });
    {
        // Sample coordinates stay interior and clear of integer lattice kinks.
        Tensor coords(egd::Shape4{1, 2, 4, 3});
        Rng coord_rng(a.seed ^ 0x5bd1e995u);
        for (std::int64_t i = 0; i < coords.numel(); ++i)
            coords.data()[i] = 0.6 + 3.3 * coord_rng.uniform() + 0.07;
        add("bilinear_sample", {leaf({1, 2, 6, 6}), coords},
            [](std::span<Tensor> in, Tape* t) { return egd::bilinear_sample(in[0], in[1], t); });
    }
    {
        const Tensor gamma = Tensor::full({1, 3, 1, 1}, 1.2);
        const Tensor beta = Tensor::full({1, 3, 1, 1}, 0.1);
        const Tensor mean = Tensor::full({1, 3, 1, 1}, 0.05);
        const Tensor var = Tensor::full({1, 3, 1, 1}, 0.8);
        add("batchnorm_infer", {leaf({1, 3, 4, 4})}, [gamma, beta, mean, var](std::span<Tensor> in, Tape* t) {
            return egd::batchnorm_infer(in[0], gamma, beta, mean, var, 1e-5, t);
        });
        add("groupnorm", {leaf({1, 4, 3, 3}), leaf({1, 4, 1, 1}), leaf({1, 4, 1, 1})},
            [](std::span<Tensor> in, Tape* t) { return egd::groupnorm(in[0], 2, in[1], in[2], 1e-5, t); });
    }

    // Composite blocks; parameters are internal constants, the input is the leaf.
    auto add_block = [&](std::string name, egd::Shape4 in_shape, auto&& make_forward) {
        Rng block_rng(a.seed ^ egd::fnv1a64(name));
        add(std::move(name), {leaf(in_shape)}, make_forward(block_rng));
    };
    add_block("conv_bn_act", {1, 3, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::ConvBNAct>(r, 3, 8, 3, 2);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("ghost_conv", {1, 4, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::GhostConv>(r, 4, 8, 3);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("ghost_bottleneck", {1, 8, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::GhostBottleneck>(r, 8, 8, 3, 1);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("ghost_bottleneck_s2", {1, 8, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::GhostBottleneck>(r, 8, 12, 3, 2);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("c3ghost", {1, 8, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::C3Ghost>(r, 8, 8, 1);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("c2f", {1, 8, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::C2f>(r, 8, 8, 1, true);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("ema_attention", {1, 8, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::Ema>(r, 8, 4);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("sppf", {1, 8, 8, 8}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::Sppf>(r, 8, 8, 5);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("deform_conv", {1, 3, 6, 6}, [](Rng& r) {
        auto blk = std::make_shared<egd::blocks::DeformConvBNAct>(r, 3, 6, 3, 1);
        return [blk](std::span<Tensor> in, Tape* t) { return blk->forward(in[0], t); };
    });
    add_block("detect_branch", {1, 8, 6, 6}, [](Rng& r) {
        auto head = std::make_shared<egd::blocks::DetectHead>(r, std::vector<int>{8, 8, 8}, 2, 4, true);
        return [head](std::span<Tensor> in, Tape* t) { return head->box_branch[0].forward(in[0], t); };
    });
    {
        Rng stem_rng(a.seed ^ egd::fnv1a64(std::string("fusion_stem")));
        auto stem = std::make_shared<egd::blocks::FusionStem>(stem_rng, 16);
        add("fusion_stem", {leaf({1, 3, 8, 8}), leaf({1, 1, 8, 8})},
            [stem](std::span<Tensor> in, Tape* t) { return stem->forward(in[0], in[1], t); });
    }

    if (a.inject_fault)
        add("injected_fault", {leaf({1, 2, 3, 3})},
            [](std::span<Tensor> in, Tape* t) { return faulty_square(in[0], t); });
    return entries;
}

int run_gradcheck(const GradcheckArgs& a) {
    std::vector<CheckEntry> entries = build_check_entries(a);

    std::string text = run_stanza("gradcheck", {{"tol", fmt_double(a.tol)},
                                                {"step", fmt_double(a.step)},
                                                {"seed", std::to_string(a.seed)},
                                                {"inject_fault", a.inject_fault ? "true" : "false"}});
    text += "\n";
    std::string first_failure;
    double first_failure_err = 0.0;
    for (auto& e : entries) {
        const egd::GradCheckReport rep = egd::grad_check(e.op, e.inputs, a.step, a.tol);
        const bool ok = rep.passed(a.tol);
        char line[128];
        std::snprintf(line, sizeof(line), "%-20s max rel err %.3e  %s\n", e.name.c_str(), rep.max_rel_error,
                      ok ? "ok" : "FAIL");
        text += line;
        if (!ok && first_failure.empty()) {
            first_failure = e.name;
            first_failure_err = rep.max_rel_error;
        }
    }
    text += egd::format_msg("\nchecked: ", entries.size(), "\nresult: ", first_failure.empty() ? "ok" : "FAIL",
                            "\n");

    std::cout << text;
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_text_file(fs::path(a.out) / "report.txt", text);
    }
    if (!first_failure.empty()) {
        char msg[160];
        std::snprintf(msg, sizeof(msg), "error: gradient check failed at '%s' (max rel err %.3e, tol %g)\n",
                      first_failure.c_str(), first_failure_err, a.tol);
        std::cerr << msg;
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// bench: forward-pass throughput of a built model on synthetic input.
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string modality = "fusion";
    int imgsz = 64;
    int warmup = 2;
    int iters = 10;
    std::uint64_t seed = 1;
    bool baseline = false;
};

int run_bench(const BenchArgs& a) {
    egd::model::VariantConfig cfg;
    cfg.modality = parse_modality(a.modality);
    if (a.baseline) {
        cfg.baseline = true;
        cfg.head = egd::model::HeadKind::standard;
    }
    const egd::model::Model model = egd::model::build_model(cfg, a.seed);
    Rng in_rng(a.seed ^ 0x9e3779b97f4a7c15ULL);
    const Tensor input = Tensor::randn({1, cfg.in_channels(), a.imgsz, a.imgsz}, in_rng, 0.5);

    double sink = 0.0;
    const egd::metrics::BenchResult r = egd::metrics::fps_benchmark(
        [&] {
            const std::vector<Tensor> maps = model.forward(input);
            sink += maps[0].data()[0];
        },
        a.warmup, a.iters);

    std::cout << run_stanza("bench", {{"modality", a.modality},
                                      {"baseline", a.baseline ? "true" : "false"},
                                      {"imgsz", std::to_string(a.imgsz)},
                                      {"warmup", std::to_string(a.warmup)},
                                      {"iters", std::to_string(a.iters)},
                                      {"seed", std::to_string(a.seed)}});
    char buf[256];
    std::snprintf(buf, sizeof(buf), "\nmean: %.3f ms\nfps: %.2f\ncv: %.2f%%\niterations: %d\n", r.mean_ms, r.fps,
                  100.0 * r.cv, r.iterations);
    std::cout << buf << "hardware: " << r.hardware << "\n";
    if (!std::isfinite(sink)) std::cerr << "warning: non-finite activations during benchmark\n";
    return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Argument wiring
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"drone/bird detector toolkit: restoration, dataset prep, model analysis, inference"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from an INI/TOML file (command line overrides)");
    app.set_version_flag("--version", std::string(egd::kVersion));

    RestoreArgs restore_args;
    auto* restore = app.add_subcommand("restore", "apply a restoration chain to an image or directory");
    restore->add_option("--in", restore_args.input, "input image or directory")->required();
    restore->add_option("--out", restore_args.out, "output directory")->required();
    restore->add_option("--chain", restore_args.chain, "comma-separated ops: median,rl,unsharp,normalize")
        ->check(kChainSpec);
    restore->add_option("--median-window", restore_args.median_window, "median filter window")->check(kOddWindow);
    restore->add_option("--median-threshold", restore_args.median_threshold, "median replacement threshold")
        ->check(CLI::NonNegativeNumber);
    restore->add_option("--unsharp-sigma", restore_args.unsharp_sigma, "unsharp Gaussian sigma")
        ->check(CLI::PositiveNumber);
    restore->add_option("--unsharp-amount", restore_args.unsharp_amount, "unsharp gain")
        ->check(CLI::NonNegativeNumber);
    restore->add_option("--unsharp-threshold", restore_args.unsharp_threshold, "unsharp activation threshold")
        ->check(CLI::NonNegativeNumber);
    restore->add_option("--rl-iterations", restore_args.rl_iterations, "Richardson-Lucy iterations")
        ->check(CLI::PositiveNumber);
    restore->add_option("--psf", restore_args.psf, "point spread function for rl")
        ->check(CLI::IsMember({"box", "delta"}));
    restore->add_option("--psf-size", restore_args.psf_size, "psf kernel size")->check(kOddWindow);

    PrepareArgs prepare_args;
    auto* prepare = app.add_subcommand("prepare", "pair RGB/IR images, stratify, split, emit manifests");
    prepare->add_option("--rgb", prepare_args.rgb, "RGB image directory")->required();
    prepare->add_option("--ir", prepare_args.ir, "IR image directory")->required();
    prepare->add_option("--out", prepare_args.out, "output directory for manifests")->required();
    prepare->add_option("--ratio", prepare_args.ratio, "train fraction, exclusive (0,1)")
        ->check(CLI::Range(0.0, 1.0));
    prepare->add_option("--seed", prepare_args.seed, "split shuffle seed");

    VerifyArgs verify_args;
    auto* verify = app.add_subcommand("verify", "re-check an emitted manifest directory");
    verify->add_option("--manifests", verify_args.manifests, "directory holding the four manifests")->required();
    verify->add_option("--out", verify_args.out, "write report.txt here");

    AnalyzeArgs analyze_args;
    auto* analyze = app.add_subcommand("analyze", "cost report: ghost variant vs standard baseline");
    analyze->add_option("--modality", analyze_args.modality, "rgb, ir, or fusion")
        ->check(CLI::IsMember({"rgb", "ir", "fusion"}));
    analyze->add_option("--imgsz", analyze_args.imgsz, "input resolution")->check(kImageSize);
    analyze->add_option("--out", analyze_args.out, "also write analysis.txt and cost CSVs here");

    ForwardArgs forward_args;
    auto* forward = app.add_subcommand("forward", "run one inference pass and decode predictions");
    forward->add_option("--modality", forward_args.modality, "rgb, ir, or fusion")
        ->check(CLI::IsMember({"rgb", "ir", "fusion"}));
    forward->add_option("--rgb", forward_args.rgb, "RGB input image");
    forward->add_option("--ir", forward_args.ir, "IR input image");
    forward->add_option("--weights", forward_args.weights, "weight file (random init when absent)");
    forward->add_option("--out", forward_args.out, "output directory")->required();
    forward->add_option("--seed", forward_args.seed, "init seed when no weights given");
    forward->add_option("--imgsz", forward_args.imgsz, "input resolution")->check(kImageSize);
    forward->add_option("--conf", forward_args.conf, "confidence threshold")->check(CLI::Range(0.0, 1.0));
    forward->add_option("--nms-iou", forward_args.nms_iou, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
    forward->add_flag("--baseline", forward_args.baseline, "use the standard baseline variant");
    forward->add_flag("--save-weights", forward_args.save_weights, "also write weights.bin to the output dir");

    EvaluateArgs evaluate_args;
    auto* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
    evaluate->add_option("--pred", evaluate_args.predictions, "prediction file")->required();
    evaluate->add_option("--gt", evaluate_args.ground_truth, "ground-truth file")->required();
    evaluate->add_option("--classes", evaluate_args.num_classes, "number of classes")
        ->check(CLI::PositiveNumber);
    evaluate->add_option("--iou", evaluate_args.iou, "matching IoU threshold")->check(CLI::Range(0.0, 1.0));
    evaluate->add_option("--out", evaluate_args.out, "write report.txt and report.csv here");

    GradcheckArgs gradcheck_args;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient sweep over ops and blocks");
    gradcheck->add_option("--tol", gradcheck_args.tol, "max relative error tolerance")
        ->check(CLI::PositiveNumber);
    gradcheck->add_option("--step", gradcheck_args.step, "finite-difference step")->check(CLI::PositiveNumber);
    gradcheck->add_option("--seed", gradcheck_args.seed, "input sampling seed");
    gradcheck->add_flag("--inject-fault", gradcheck_args.inject_fault,
                        "add an op with a deliberately wrong backward");
    gradcheck->add_option("--out", gradcheck_args.out, "write report.txt here");

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "forward-pass throughput benchmark");
    bench->add_option("--modality", bench_args.modality, "rgb, ir, or fusion")
        ->check(CLI::IsMember({"rgb", "ir", "fusion"}));
    bench->add_option("--imgsz", bench_args.imgsz, "input resolution")->check(kImageSize);
    bench->add_option("--warmup", bench_args.warmup, "warmup runs")->check(CLI::PositiveNumber);
    bench->add_option("--iters", bench_args.iters, "timed runs")->check(CLI::PositiveNumber);
    bench->add_option("--seed", bench_args.seed, "init seed");
    bench->add_flag("--baseline", bench_args.baseline, "use the standard baseline variant");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (restore->parsed()) return run_restore(restore_args);
        if (prepare->parsed()) return run_prepare(prepare_args);
        if (verify->parsed()) return run_verify(verify_args);
        if (analyze->parsed()) return run_analyze(analyze_args);
        if (forward->parsed()) return run_forward(forward_args);
        if (evaluate->parsed()) return run_evaluate(evaluate_args);
        if (gradcheck->parsed()) return run_gradcheck(gradcheck_args);
        if (bench->parsed()) return run_bench(bench_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 2;
}
