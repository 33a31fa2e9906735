// End-to-end tests for the command-line binary: exit-code contract, output
// files, determinism across identical runs. The binary path comes from the
// build system via EGD_CLI_PATH.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "egd/common.hpp"
#include "egd/image.hpp"
#include "egd/image_io.hpp"

namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    TmpDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("egd_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    out << content;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path base = fs::temp_directory_path() /
                          ("egd_cli_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    const fs::path out_file = base.string() + ".out", err_file = base.string() + ".err";
    const std::string cmd =
        std::string(EGD_CLI_PATH) + " " + args + " >" + out_file.string() + " 2>" + err_file.string();
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = read_file(out_file);
    r.err = read_file(err_file);
    std::error_code ec;
    fs::remove(out_file, ec);
    fs::remove(err_file, ec);
    return r;
}

// Paired RGB/IR corpus with deterministic noise and a label cycle of
// two objects / one object / empty.
void make_corpus(const fs::path& root, int pairs, std::uint64_t seed) {
    fs::create_directories(root / "rgb");
    fs::create_directories(root / "ir");
    egd::Rng rng(seed);
    for (int i = 0; i < pairs; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame%03d", i);
        egd::img::Image rgb(24, 16, 3), ir(24, 16, 1);
        for (double& v : rgb.data) v = rng.uniform();
        for (double& v : ir.data) v = rng.uniform();
        egd::img::write_image(rgb, root / "rgb" / (std::string(name) + ".png"));
        egd::img::write_image(ir, root / "ir" / (std::string(name) + ".png"));
        std::string labels;
        if (i % 3 == 0)
            labels = "0 0.3 0.4 0.1 0.2\n1 0.62 0.5 0.2 0.12\n";
        else if (i % 3 == 1)
            labels = "1 0.5 0.5 0.4 0.3\n";
        write_file(root / "rgb" / (std::string(name) + ".txt"), labels);
        write_file(root / "ir" / (std::string(name) + ".txt"), labels);
    }
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("--version").out == std::string(egd::kVersion) + "\n");
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
    CHECK(run_cli("bench --no-such-flag").code == 2);
    CHECK(run_cli("restore --out somewhere").code == 2);  // missing required --in
    CHECK(run_cli("bench --imgsz 33").code == 2);
    CHECK(run_cli("bench --imgsz 0").code == 2);
    CHECK(run_cli("bench --modality sonar").code == 2);
    CHECK(run_cli("restore --in x --out y --chain median,sharpen").code == 2);
    CHECK(run_cli("restore --in x --out y --median-window 4").code == 2);
    CHECK(run_cli("restore --in x --out y --rl-iterations 0").code == 2);
    CHECK(run_cli("forward --out o --conf 1.5").code == 2);
    CHECK(run_cli("prepare --rgb a --ir b --out c --ratio 2.0").code == 2);
    CHECK(run_cli("gradcheck --tol -1").code == 2);
}

TEST_CASE("restore passes bytes through on an empty chain", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 3, 41);
    const fs::path out = tmp.path / "restored";

    const RunResult r = run_cli("restore --in " + (tmp.path / "rgb").string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame%03d.png", i);
        CHECK(read_file(tmp.path / "rgb" / name) == read_file(out / name));
    }
    const std::string report = read_file(out / "report.txt");
    CHECK(report.find("# run config") != std::string::npos);
    CHECK(report.find("command: restore") != std::string::npos);
    CHECK(report.find("frame000.png: copied") != std::string::npos);
}

TEST_CASE("restore applies a chain and keeps going past bad files", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 3, 43);
    write_file(tmp.path / "rgb" / "broken.png", "not a png");
    const fs::path out = tmp.path / "restored";

    const RunResult r =
        run_cli("restore --in " + (tmp.path / "rgb").string() + " --out " + out.string() + " --chain median,unsharp");
    CHECK(r.code == 1);
    CHECK(r.err.find("broken.png") != std::string::npos);
    for (int i = 0; i < 3; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame%03d.png", i);
        CHECK(fs::exists(out / name));
        CHECK(read_file(tmp.path / "rgb" / name) != read_file(out / name));
    }
    const std::string report = read_file(out / "report.txt");
    CHECK(report.find("failed: 1") != std::string::npos);
    CHECK(report.find("frame000.png: restored") != std::string::npos);

    // A single good file restores cleanly and reproducibly.
    const fs::path single = tmp.path / "single";
    const fs::path single2 = tmp.path / "single2";
    REQUIRE(run_cli("restore --in " + (tmp.path / "rgb" / "frame000.png").string() + " --out " + single.string() +
                    " --chain median,rl,unsharp --rl-iterations 2")
                .code == 0);
    REQUIRE(run_cli("restore --in " + (tmp.path / "rgb" / "frame000.png").string() + " --out " + single2.string() +
                    " --chain median,rl,unsharp --rl-iterations 2")
                .code == 0);
    CHECK(read_file(single / "frame000.png") == read_file(single2 / "frame000.png"));
}

TEST_CASE("prepare emits exactly six files and is deterministic", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 12, 47);
    const fs::path out1 = tmp.path / "out1", out2 = tmp.path / "out2";
    const std::string common = "prepare --rgb " + (tmp.path / "rgb").string() + " --ir " +
                               (tmp.path / "ir").string() + " --ratio 0.75 --seed 9 --out ";

    const RunResult r1 = run_cli(common + out1.string());
    REQUIRE(r1.code == 0);
    CHECK(r1.out.find("report:") != std::string::npos);

    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(out1)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    CHECK(names == std::vector<std::string>{"dataset.yaml", "ir_train.txt", "ir_val.txt", "report.txt",
                                            "rgb_train.txt", "rgb_val.txt"});

    const std::string report = read_file(out1 / "report.txt");
    CHECK(report.find("version: ") != std::string::npos);
    CHECK(report.find("seed: 9") != std::string::npos);
    CHECK(report.find("pairing: 100%") != std::string::npos);
    CHECK(report.find("drone:bird = 1:") != std::string::npos);

    // Manifests list source paths only, so they match across output dirs;
    // dataset.yaml and report.txt embed their own directory.
    REQUIRE(run_cli(common + out2.string()).code == 0);
    for (const auto& n : {"rgb_train.txt", "rgb_val.txt", "ir_train.txt", "ir_val.txt"})
        CHECK(read_file(out1 / n) == read_file(out2 / n));

    // Re-running into the same directory reproduces every byte.
    std::map<std::string, std::string> before;
    for (const auto& n : names) before[n] = read_file(out1 / n);
    REQUIRE(run_cli(common + out1.string()).code == 0);
    for (const auto& n : names) CHECK(before[n] == read_file(out1 / n));

    // Same split re-verified from the emitted manifests.
    CHECK(run_cli("verify --manifests " + out1.string()).code == 0);
}

TEST_CASE("prepare and verify fail loudly on broken corpora", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 6, 53);
    write_file(tmp.path / "ir" / "frame001.txt", "1 0.5 0.5\n");

    const fs::path out = tmp.path / "out";
    const RunResult bad = run_cli("prepare --rgb " + (tmp.path / "rgb").string() + " --ir " +
                                  (tmp.path / "ir").string() + " --out " + out.string());
    CHECK(bad.code == 1);
    CHECK(bad.err.find("frame001.txt:1") != std::string::npos);

    // Fix the label, prepare, then break a pair and re-verify.
    write_file(tmp.path / "ir" / "frame001.txt", "1 0.5 0.5 0.4 0.3\n");
    REQUIRE(run_cli("prepare --rgb " + (tmp.path / "rgb").string() + " --ir " + (tmp.path / "ir").string() +
                    " --out " + out.string())
                .code == 0);
    fs::remove(tmp.path / "ir" / "frame002.png");
    const RunResult broken = run_cli("verify --manifests " + out.string());
    CHECK(broken.code == 1);
    CHECK(broken.out.find("pairing failures: 1") != std::string::npos);
    CHECK(broken.out.find("frame002.png") != std::string::npos);
    CHECK(broken.out.find("missing ir") != std::string::npos);
}

TEST_CASE("forward decodes reproducibly and respects conf", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 1, 59);
    const std::string rgb = (tmp.path / "rgb" / "frame000.png").string();
    const std::string ir = (tmp.path / "ir" / "frame000.png").string();
    const fs::path o1 = tmp.path / "o1", o2 = tmp.path / "o2", o3 = tmp.path / "o3", o4 = tmp.path / "o4";
    const std::string common =
        "forward --modality fusion --rgb " + rgb + " --ir " + ir + " --imgsz 64 --seed 11 --out ";

    const RunResult r1 = run_cli(common + o1.string());
    REQUIRE(r1.code == 0);
    const RunResult r2 = run_cli(common + o2.string());
    REQUIRE(r2.code == 0);
    CHECK(read_file(o1 / "predictions.txt") == read_file(o2 / "predictions.txt"));
    CHECK(r1.out == r2.out);
    CHECK(r1.out.find("predictions_hash: ") != std::string::npos);
    CHECK(read_file(o1 / "report.txt").find("seed: 11") != std::string::npos);

    // conf 1.0 keeps nothing but still succeeds.
    const RunResult strict = run_cli(common + o3.string() + " --conf 1.0");
    CHECK(strict.code == 0);
    CHECK(read_file(o3 / "predictions.txt").empty());
    CHECK(strict.out.find("predictions: 0") != std::string::npos);

    // Missing IR partner in fusion mode is a domain failure.
    const RunResult noir = run_cli("forward --modality fusion --rgb " + rgb + " --imgsz 64 --out " + o4.string());
    CHECK(noir.code == 1);
    CHECK(noir.err.find("--ir") != std::string::npos);
}

TEST_CASE("forward round-trips weights and rejects mismatched files", "[cli]") {
    TmpDir tmp;
    make_corpus(tmp.path, 1, 61);
    const std::string rgb = (tmp.path / "rgb" / "frame000.png").string();
    const std::string ir = (tmp.path / "ir" / "frame000.png").string();
    const fs::path o1 = tmp.path / "o1", o2 = tmp.path / "o2", o3 = tmp.path / "o3";

    REQUIRE(run_cli("forward --modality fusion --rgb " + rgb + " --ir " + ir + " --imgsz 64 --seed 21 --out " +
                    o1.string() + " --save-weights")
                .code == 0);
    REQUIRE(fs::exists(o1 / "weights.bin"));

    const RunResult reload = run_cli("forward --modality fusion --rgb " + rgb + " --ir " + ir +
                                     " --imgsz 64 --weights " + (o1 / "weights.bin").string() + " --out " +
                                     o2.string());
    REQUIRE(reload.code == 0);
    CHECK(read_file(o1 / "predictions.txt") == read_file(o2 / "predictions.txt"));
    CHECK(read_file(o2 / "report.txt").find("weights.bin") != std::string::npos);

    const RunResult mismatch = run_cli("forward --modality rgb --rgb " + rgb + " --imgsz 64 --weights " +
                                       (o1 / "weights.bin").string() + " --out " + o3.string());
    CHECK(mismatch.code == 1);
    CHECK(mismatch.err.find("backbone.stem") != std::string::npos);
}

TEST_CASE("evaluate scores files and reports parse errors with line numbers", "[cli]") {
    TmpDir tmp;
    write_file(tmp.path / "pred.txt",
               "0 0 0.900000 0.300000 0.400000 0.100000 0.200000\n"
               "0 1 0.800000 0.700000 0.600000 0.200000 0.100000\n");
    write_file(tmp.path / "gt.txt",
               "0 0 0.300000 0.400000 0.100000 0.200000\n"
               "0 1 0.100000 0.100000 0.050000 0.050000\n");

    const fs::path out = tmp.path / "eval";
    const RunResult r = run_cli("evaluate --pred " + (tmp.path / "pred.txt").string() + " --gt " +
                                (tmp.path / "gt.txt").string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("bird") != std::string::npos);
    CHECK(r.out.find("mAP@50") != std::string::npos);
    CHECK(read_file(out / "report.txt").find("command: evaluate") != std::string::npos);
    CHECK(read_file(out / "report.csv").find("class,name,tp,fp,fn") != std::string::npos);

    write_file(tmp.path / "pred.txt", "0 0 0.9 0.3 0.4 0.1 0.2\nhalf a line\n");
    const RunResult bad = run_cli("evaluate --pred " + (tmp.path / "pred.txt").string() + " --gt " +
                                  (tmp.path / "gt.txt").string());
    CHECK(bad.code == 1);
    CHECK(bad.err.find("pred.txt:2") != std::string::npos);
}

TEST_CASE("gradcheck passes clean and catches an injected fault", "[cli]") {
    TmpDir tmp;
    const RunResult ok = run_cli("gradcheck --seed 5 --out " + (tmp.path / "gc").string());
    REQUIRE(ok.code == 0);
    CHECK(ok.out.find("result: ok") != std::string::npos);
    CHECK(ok.out.find("conv2d") != std::string::npos);
    CHECK(ok.out.find("c3ghost") != std::string::npos);
    CHECK(ok.out.find("fusion_stem") != std::string::npos);
    CHECK(read_file(tmp.path / "gc" / "report.txt") == ok.out);

    const RunResult bad = run_cli("gradcheck --seed 5 --inject-fault");
    CHECK(bad.code == 1);
    CHECK(bad.out.find("injected_fault") != std::string::npos);
    CHECK(bad.err.find("injected_fault") != std::string::npos);
    CHECK(bad.err.find("max rel err") != std::string::npos);
}

TEST_CASE("analyze prints both variants and passes its column check", "[cli]") {
    TmpDir tmp;
    const RunResult r = run_cli("analyze --modality fusion --imgsz 64 --out " + (tmp.path / "an").string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("stem input channels: 4") != std::string::npos);
    CHECK(r.out.find("## ghost variant") != std::string::npos);
    CHECK(r.out.find("## baseline variant") != std::string::npos);
    CHECK(r.out.find("c3ghost") != std::string::npos);
    CHECK(r.out.find("column sums: PASS") != std::string::npos);
    CHECK(fs::exists(tmp.path / "an" / "analysis.txt"));
    CHECK(read_file(tmp.path / "an" / "cost_ghost.csv").find("name,kind") != std::string::npos);
    CHECK(read_file(tmp.path / "an" / "cost_baseline.csv").find("TOTAL") != std::string::npos);

    const RunResult rgb = run_cli("analyze --modality rgb --imgsz 64");
    REQUIRE(rgb.code == 0);
    CHECK(rgb.out.find("stem input channels: 3") != std::string::npos);
}

TEST_CASE("bench reports throughput statistics", "[cli]") {
    const RunResult r = run_cli("bench --modality ir --imgsz 32 --warmup 1 --iters 5");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("command: bench") != std::string::npos);
    CHECK(r.out.find("mean: ") != std::string::npos);
    CHECK(r.out.find("fps: ") != std::string::npos);
    CHECK(r.out.find("cv: ") != std::string::npos);
    CHECK(r.out.find("hardware: ") != std::string::npos);
}

TEST_CASE("config files feed options with flags taking precedence", "[cli]") {
    TmpDir tmp;
    write_file(tmp.path / "run.ini", "[bench]\nmodality=ir\nimgsz=32\nwarmup=1\niters=5\n");

    const RunResult from_file = run_cli("--config " + (tmp.path / "run.ini").string() + " bench");
    REQUIRE(from_file.code == 0);
    CHECK(from_file.out.find("modality: ir") != std::string::npos);
    CHECK(from_file.out.find("imgsz: 32") != std::string::npos);

    const RunResult overridden = run_cli("--config " + (tmp.path / "run.ini").string() + " bench --imgsz 64");
    REQUIRE(overridden.code == 0);
    CHECK(overridden.out.find("imgsz: 64") != std::string::npos);
}
