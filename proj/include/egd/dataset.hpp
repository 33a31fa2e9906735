#pragma once

// Dataset pipeline: RGB/IR pairing, YOLO label parsing, global size
// quintiles, the stratified 90/10 split, manifest emission, integrity
// verification, and distribution reporting.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "egd/boxes.hpp"
#include "egd/common.hpp"

namespace egd::dataset {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

struct ImagePair {
    std::string rgb_path, ir_path;
    std::string rgb_label_path, ir_label_path;
    int pair_index = 0;
};

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// Label file convention: sibling of the image, same stem, ".txt".
inline std::string label_path_for(const fs::path& image_path) {
    fs::path p = image_path;
    p.replace_extension(".txt");
    return p.string();
}

inline std::vector<std::string> list_images_sorted(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError(format_msg(dir.string(), ": not a readable directory"));
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && is_image_file(entry.path()))
            names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());  // plain byte order
    if (names.empty()) throw PipelineError(format_msg(dir.string(), ": no image files found"));
    return names;
}

inline std::vector<ImagePair> pair_modalities(const fs::path& rgb_dir, const fs::path& ir_dir) {
    const std::vector<std::string> rgb = list_images_sorted(rgb_dir);
    const std::vector<std::string> ir = list_images_sorted(ir_dir);
    const std::size_t n = std::min(rgb.size(), ir.size());
    std::vector<ImagePair> pairs;
    pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ImagePair p;
        p.rgb_path = (rgb_dir / rgb[i]).string();
        p.ir_path = (ir_dir / ir[i]).string();
        p.rgb_label_path = label_path_for(p.rgb_path);
        p.ir_label_path = label_path_for(p.ir_path);
        p.pair_index = static_cast<int>(i);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Label parsing: "class cx cy w h" per line, blank lines ignored, values
// clamped into [0,1] with a warning count.
// ---------------------------------------------------------------------------

struct ParsedLabels {
    std::vector<LabelRecord> records;
    int clamp_warnings = 0;
};

inline ParsedLabels parse_labels(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError(format_msg(path.string(), ": cannot open label file"));
    ParsedLabels out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        std::istringstream ss(line);
        std::vector<std::string> tokens;
        std::string tok;
        while (ss >> tok) tokens.push_back(tok);
        if (tokens.empty()) continue;
        if (tokens.size() != 5)
            throw ParseError(path.string(), line_no,
                             format_msg("expected 5 fields, got ", tokens.size()));
        double vals[5];
        for (int i = 0; i < 5; ++i) {
            try {
                std::size_t used = 0;
                vals[i] = std::stod(tokens[static_cast<std::size_t>(i)], &used);
                if (used != tokens[static_cast<std::size_t>(i)].size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw ParseError(path.string(), line_no,
                                 format_msg("non-numeric token '", tokens[static_cast<std::size_t>(i)], "'"));
            }
        }
        if (vals[0] != 0.0 && vals[0] != 1.0)
            throw ParseError(path.string(), line_no,
                             format_msg("class id must be 0 (bird) or 1 (drone), got ", tokens[0]));
        double cx = vals[1], cy = vals[2], w = vals[3], h = vals[4];
        bool clamped = false;
        for (double* v : {&cx, &cy, &w, &h}) {
            const double c = std::clamp(*v, 0.0, 1.0);
            if (c != *v) clamped = true;
            *v = c;
        }
        // clip the box into the frame; untouched boxes keep their exact values
        const double x1r = cx - w / 2.0, x2r = cx + w / 2.0;
        const double y1r = cy - h / 2.0, y2r = cy + h / 2.0;
        const double x1 = std::clamp(x1r, 0.0, 1.0), x2 = std::clamp(x2r, 0.0, 1.0);
        const double y1 = std::clamp(y1r, 0.0, 1.0), y2 = std::clamp(y2r, 0.0, 1.0);
        if (x1 != x1r || x2 != x2r || y1 != y1r || y2 != y2r) {
            clamped = true;
            w = x2 - x1;
            h = y2 - y1;
            cx = (x1 + x2) / 2.0;
            cy = (y1 + y2) / 2.0;
        }
        if (w <= 0.0 || h <= 0.0)
            throw ParseError(path.string(), line_no, "box has no area after clamping");
        if (clamped) ++out.clamp_warnings;
        out.records.push_back({static_cast<int>(vals[0]), {cx, cy, w, h}});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Size quintiles over pooled areas (both modalities).
// ---------------------------------------------------------------------------

struct SizeThresholds {
    double p5 = 0.0, p20 = 0.0, p40 = 0.0, p60 = 0.0;
    double min_area = 0.0, max_area = 0.0;
};

enum class SizeCategory { very_small, small, medium, large, very_large };

inline const char* size_category_name(SizeCategory c) {
    switch (c) {
        case SizeCategory::very_small: return "very_small";
        case SizeCategory::small: return "small";
        case SizeCategory::medium: return "medium";
        case SizeCategory::large: return "large";
        case SizeCategory::very_large: return "very_large";
    }
    return "?";
}

// linear interpolation between order statistics (rank = p/100 * (n-1))
inline double percentile(std::span<const double> sorted, double p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double rank = p / 100.0 * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline SizeThresholds compute_size_thresholds(std::span<const double> areas) {
    if (areas.empty()) throw PipelineError("size thresholds: no labeled objects in the corpus");
    std::vector<double> sorted(areas.begin(), areas.end());
    std::sort(sorted.begin(), sorted.end());
    SizeThresholds t;
    t.p5 = percentile(sorted, 5.0);
    t.p20 = percentile(sorted, 20.0);
    t.p40 = percentile(sorted, 40.0);
    t.p60 = percentile(sorted, 60.0);
    t.min_area = sorted.front();
    t.max_area = sorted.back();
    return t;
}

// half-open intervals [lo, hi); boundary values land in the higher bucket
inline SizeCategory categorize(double area, const SizeThresholds& t) {
    if (area < t.p5) return SizeCategory::very_small;
    if (area < t.p20) return SizeCategory::small;
    if (area < t.p40) return SizeCategory::medium;
    if (area < t.p60) return SizeCategory::large;
    return SizeCategory::very_large;
}

// ---------------------------------------------------------------------------
// Strata and the 90/10 split
// ---------------------------------------------------------------------------

// Pair stratum: dominant class over the pooled objects (tie goes to drone),
// crossed with the size category of the largest object. No objects -> "empty".
inline std::string stratum_key(std::span<const LabelRecord> pooled, const SizeThresholds& t) {
    if (pooled.empty()) return "empty";
    int birds = 0, drones = 0;
    double largest = 0.0;
    for (const auto& l : pooled) {
        (l.class_id == 0 ? birds : drones) += 1;
        largest = std::max(largest, l.box.area());
    }
    const char* cls = drones >= birds ? "drone" : "bird";
    return format_msg(cls, "/", size_category_name(categorize(largest, t)));
}

struct SplitManifest {
    std::vector<ImagePair> train, val;
};

inline SplitManifest stratified_split(const std::vector<ImagePair>& pairs,
                                      const std::vector<std::string>& strata, double ratio,
                                      std::uint64_t seed) {
    if (ratio <= 0.0 || ratio >= 1.0)
        throw ParamError(format_msg("stratified_split: ratio must be inside (0,1), got ", ratio));
    if (strata.size() != pairs.size())
        throw ParamError(format_msg("stratified_split: ", strata.size(), " strata for ", pairs.size(),
                                    " pairs"));
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < pairs.size(); ++i) groups[strata[i]].push_back(i);

    std::vector<std::size_t> train_idx, val_idx;
    for (auto& [key, members] : groups) {
        Rng rng(seed ^ fnv1a64(key));
        rng.shuffle(members);
        const std::size_t n_train =
            static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(members.size())));
        for (std::size_t i = 0; i < members.size(); ++i)
            (i < n_train ? train_idx : val_idx).push_back(members[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());

    SplitManifest m;
    for (std::size_t i : train_idx) m.train.push_back(pairs[i]);
    for (std::size_t i : val_idx) m.val.push_back(pairs[i]);
    return m;
}

// ---------------------------------------------------------------------------
// Manifest emission and read-back
// ---------------------------------------------------------------------------

struct EmitPaths {
    fs::path rgb_train, rgb_val, ir_train, ir_val, config;
};

inline void write_path_list(const fs::path& file, const std::vector<ImagePair>& pairs, bool rgb) {
    std::ofstream f(file, std::ios::trunc);
    if (!f) throw IoError(format_msg(file.string(), ": cannot write manifest"));
    for (const auto& p : pairs) f << fs::absolute(rgb ? p.rgb_path : p.ir_path).string() << "\n";
    if (!f) throw IoError(format_msg(file.string(), ": short write"));
}

inline EmitPaths emit_manifests(const SplitManifest& split, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    EmitPaths paths{out_dir / "rgb_train.txt", out_dir / "rgb_val.txt", out_dir / "ir_train.txt",
                    out_dir / "ir_val.txt", out_dir / "dataset.yaml"};
    write_path_list(paths.rgb_train, split.train, true);
    write_path_list(paths.rgb_val, split.val, true);
    write_path_list(paths.ir_train, split.train, false);
    write_path_list(paths.ir_val, split.val, false);

    std::ofstream cfg(paths.config, std::ios::trunc);
    if (!cfg) throw IoError(format_msg(paths.config.string(), ": cannot write dataset config"));
    cfg << "nc: 2\n"
        << "names: [bird, drone]\n"
        << "rgb_train: " << fs::absolute(paths.rgb_train).string() << "\n"
        << "rgb_val: " << fs::absolute(paths.rgb_val).string() << "\n"
        << "ir_train: " << fs::absolute(paths.ir_train).string() << "\n"
        << "ir_val: " << fs::absolute(paths.ir_val).string() << "\n";
    if (!cfg) throw IoError(format_msg(paths.config.string(), ": short write"));
    return paths;
}

inline std::vector<std::string> read_manifest(const fs::path& file) {
    std::ifstream f(file);
    if (!f) throw IoError(format_msg(file.string(), ": cannot open manifest"));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

// ---------------------------------------------------------------------------
// Integrity verification over emitted manifests
// ---------------------------------------------------------------------------

struct IntegrityReport {
    int files_checked = 0;
    int pairs_checked = 0;
    int pairing_failures = 0;
    int label_failures = 0;
    std::vector<std::string> failures;

    bool ok() const { return pairing_failures == 0 && label_failures == 0; }

    std::string to_text() const {
        std::string s = format_msg("integrity: ", files_checked, " files, ", pairs_checked, " pairs\n");
        if (ok()) {
            s += "existence: 100%\npairing: 100%\nlabels: 100%\n";
        } else {
            s += format_msg("pairing failures: ", pairing_failures, "\nlabel failures: ", label_failures,
                            "\n");
            for (const auto& f : failures) s += "  " + f + "\n";
        }
        return s;
    }
};

inline void verify_split(const fs::path& rgb_manifest, const fs::path& ir_manifest, IntegrityReport& rep) {
    const std::vector<std::string> rgb = read_manifest(rgb_manifest);
    const std::vector<std::string> ir = read_manifest(ir_manifest);
    const std::size_t n = std::max(rgb.size(), ir.size());
    for (std::size_t i = 0; i < n; ++i) {
        ++rep.pairs_checked;
        const std::string rgb_path = i < rgb.size() ? rgb[i] : "(absent)";
        const std::string ir_path = i < ir.size() ? ir[i] : "(absent)";
        const bool rgb_ok = i < rgb.size() && fs::exists(rgb[i]);
        const bool ir_ok = i < ir.size() && fs::exists(ir[i]);
        rep.files_checked += 2;
        if (!rgb_ok || !ir_ok) {
            ++rep.pairing_failures;
            rep.failures.push_back(format_msg("pair ", i, ": ", rgb_path, " <-> ", ir_path, " (missing ",
                                              !rgb_ok ? "rgb" : "ir", ")"));
            continue;
        }
        for (const std::string& img : {rgb[i], ir[i]}) {
            const std::string lbl = label_path_for(img);
            ++rep.files_checked;
            try {
                parse_labels(lbl);
            } catch (const std::exception& e) {
                ++rep.label_failures;
                rep.failures.push_back(e.what());
            }
        }
    }
}

inline IntegrityReport verify_integrity(const fs::path& out_dir) {
    IntegrityReport rep;
    verify_split(out_dir / "rgb_train.txt", out_dir / "ir_train.txt", rep);
    verify_split(out_dir / "rgb_val.txt", out_dir / "ir_val.txt", rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Distribution report
// ---------------------------------------------------------------------------

struct PairRecords {
    std::vector<LabelRecord> rgb, ir;
};

struct DistributionReport {
    std::int64_t rgb_bird = 0, rgb_drone = 0, ir_bird = 0, ir_drone = 0;
    std::map<std::string, std::int64_t> size_counts;            // pooled objects per category
    std::map<std::string, std::pair<int, int>> stratum_counts;  // stratum -> (train, val) pairs

    double bird_per_drone() const {
        const std::int64_t birds = rgb_bird + ir_bird, drones = rgb_drone + ir_drone;
        return drones > 0 ? static_cast<double>(birds) / static_cast<double>(drones) : 0.0;
    }

    std::string to_text() const {
        std::string s = "# class counts\n";
        s += format_msg("rgb: bird ", rgb_bird, ", drone ", rgb_drone, "\n");
        s += format_msg("ir:  bird ", ir_bird, ", drone ", ir_drone, "\n");
        char ratio[64];
        std::snprintf(ratio, sizeof(ratio), "drone:bird = 1:%.2f\n", bird_per_drone());
        s += ratio;
        s += "# object size categories (pooled)\n";
        for (const auto& [name, count] : size_counts) s += format_msg(name, ": ", count, "\n");
        s += "# strata (train/val pairs)\n";
        for (const auto& [name, tv] : stratum_counts)
            s += format_msg(name, ": ", tv.first, "/", tv.second, "\n");
        return s;
    }

    std::string to_csv() const {
        std::string s = "kind,key,value\n";
        s += format_msg("class,rgb_bird,", rgb_bird, "\n");
        s += format_msg("class,rgb_drone,", rgb_drone, "\n");
        s += format_msg("class,ir_bird,", ir_bird, "\n");
        s += format_msg("class,ir_drone,", ir_drone, "\n");
        for (const auto& [name, count] : size_counts) s += format_msg("size,", name, ",", count, "\n");
        for (const auto& [name, tv] : stratum_counts)
            s += format_msg("stratum_train,", name, ",", tv.first, "\n") +
                 format_msg("stratum_val,", name, ",", tv.second, "\n");
        return s;
    }
};

inline DistributionReport distribution_report(const std::vector<ImagePair>& pairs,
                                              const std::vector<PairRecords>& records,
                                              const SizeThresholds& thresholds,
                                              const std::vector<std::string>& strata,
                                              const SplitManifest& split) {
    if (records.size() != pairs.size() || strata.size() != pairs.size())
        throw ParamError("distribution_report: pairs, records, and strata must align");
    DistributionReport rep;
    for (const auto& pr : records) {
        for (const auto& l : pr.rgb) (l.class_id == 0 ? rep.rgb_bird : rep.rgb_drone) += 1;
        for (const auto& l : pr.ir) (l.class_id == 0 ? rep.ir_bird : rep.ir_drone) += 1;
        for (const auto* side : {&pr.rgb, &pr.ir})
            for (const auto& l : *side)
                rep.size_counts[size_category_name(categorize(l.box.area(), thresholds))] += 1;
    }
    std::set<int> train_ids;
    for (const auto& p : split.train) train_ids.insert(p.pair_index);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto& tv = rep.stratum_counts[strata[i]];
        (train_ids.count(pairs[i].pair_index) ? tv.first : tv.second) += 1;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Full pipeline: pair -> parse -> thresholds -> strata -> split
// ---------------------------------------------------------------------------

struct PipelineResult {
    std::vector<ImagePair> pairs;
    std::vector<PairRecords> records;
    SizeThresholds thresholds;
    std::vector<std::string> strata;
    SplitManifest split;
    int clamp_warnings = 0;
};

inline PipelineResult run_pipeline(const fs::path& rgb_dir, const fs::path& ir_dir, double ratio,
                                   std::uint64_t seed) {
    PipelineResult r;
    r.pairs = pair_modalities(rgb_dir, ir_dir);
    std::vector<double> areas;
    for (const auto& p : r.pairs) {
        PairRecords pr;
        ParsedLabels rgb = parse_labels(p.rgb_label_path);
        ParsedLabels ir = parse_labels(p.ir_label_path);
        r.clamp_warnings += rgb.clamp_warnings + ir.clamp_warnings;
        pr.rgb = std::move(rgb.records);
        pr.ir = std::move(ir.records);
        for (const auto* side : {&pr.rgb, &pr.ir})
            for (const auto& l : *side) areas.push_back(l.box.area());
        r.records.push_back(std::move(pr));
    }
    if (!areas.empty()) r.thresholds = compute_size_thresholds(areas);
    for (const auto& pr : r.records) {
        std::vector<LabelRecord> pooled = pr.rgb;
        pooled.insert(pooled.end(), pr.ir.begin(), pr.ir.end());
        r.strata.push_back(stratum_key(pooled, r.thresholds));
    }
    r.split = stratified_split(r.pairs, r.strata, ratio, seed);
    return r;
}

}  // namespace egd::dataset
