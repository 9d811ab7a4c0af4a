#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tokenseg/volume.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = TOKENSEG_CLI_PATH;

int run(const std::string& args) {
    int rc = std::system((kCli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("tokenseg_cli_" + std::to_string(::getpid()) +
                                            "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& p) const { return (path / p).string(); }
    static inline int counter = 0;
};

// small but real: 2-level encoder over 12^3 phantoms
const std::string kTinyOverrides =
    " --set levels=2 --set channels=4,8 --set layout=24,6 --set n_tokens=30"
    " --set token_width=8 --set k=10 --set codebook_size=16 --set max_epochs=2";

void make_data(const TempDir& t, const std::string& name, int count, int seed) {
    REQUIRE(run("phantom --out " + (t / name) + " --count " + std::to_string(count) +
                " --dim 12 --seed " + std::to_string(seed)) == 0);
}

}  // namespace

TEST_CASE("phantom writes count pairs plus index, deterministically") {
    TempDir t;
    CHECK(run("phantom --out " + (t / "d") + " --count 4 --dim 8 --seed 7") == 0);
    int tsv3 = 0;
    for (const auto& e : fs::directory_iterator(t / "d"))
        if (e.path().extension() == ".tsv3") ++tsv3;
    CHECK(tsv3 == 8);
    CHECK(fs::exists(fs::path(t / "d") / "index.txt"));
    CHECK(fs::exists(fs::path(t / "d") / "manifest.txt"));

    CHECK(run("phantom --out " + (t / "d2") + " --count 4 --dim 8 --seed 7") == 0);
    for (int i = 0; i < 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "vol_%03d.tsv3", i);
        CHECK(slurp(fs::path(t / "d") / name) == slurp(fs::path(t / "d2") / name));
    }
}

TEST_CASE("phantom usage errors exit with code 2") {
    TempDir t;
    CHECK(run("phantom --out " + (t / "x") + " --count 0") == 2);
    CHECK(run("phantom --count 4") == 2);  // missing required --out
    CHECK(run("phantom --out " + (t / "y") + " --dim banana") == 2);
}

TEST_CASE("train writes all four artifacts and echoes defaults into the manifest") {
    TempDir t;
    // 16^3 hosts the default 400-token layout, so defaults stay intact
    REQUIRE(run("phantom --out " + (t / "data") + " --count 2 --dim 16 --seed 3") == 0);
    REQUIRE(run("train --data " + (t / "data") + " --out " + (t / "run") +
                " --set max_epochs=1 --seed 5") == 0);
    for (const char* f : {"best.ckpt", "final.ckpt", "runlog.csv", "manifest.txt"})
        CHECK(fs::exists(fs::path(t / "run") / f));
    std::string manifest = slurp(fs::path(t / "run") / "manifest.txt");
    CHECK(manifest.find("n_tokens = 400") != std::string::npos);
    CHECK(manifest.find("k = 100") != std::string::npos);
    CHECK(manifest.find("levels = 4") != std::string::npos);
    CHECK(manifest.find("theta = 0.5") != std::string::npos);
}

TEST_CASE("train exits 2 on missing data or bad config") {
    TempDir t;
    CHECK(run("train --data " + (t / "nowhere") + " --out " + (t / "run")) == 2);
    make_data(t, "data", 1, 1);
    // the bad value goes last: later --set overrides win
    CHECK(run("train --data " + (t / "data") + " --out " + (t / "run") + kTinyOverrides +
              " --set k=0") == 2);
}

TEST_CASE("infer: dims match input, theta 1 empties the mask, tokens csv has K rows") {
    TempDir t;
    make_data(t, "data", 2, 11);
    REQUIRE(run("train --data " + (t / "data") + " --out " + (t / "run") + kTinyOverrides +
                " --seed 4") == 0);
    std::string ckpt = t / "run/best.ckpt";
    REQUIRE(run("infer --ckpt " + ckpt + " --in " + (t / "data/vol_000.tsv3") + " --out " +
                (t / "pred.tsv3") + " --emit-tokens " + (t / "tokens.csv")) == 0);

    tokenseg::MaskVolume pred = tokenseg::load_mask(t / "pred.tsv3");
    tokenseg::Volume3D in = tokenseg::load_volume(t / "data/vol_000.tsv3");
    CHECK(pred.dims == in.dims);

    std::string csv = slurp(t / "tokens.csv");
    int rows = -1;  // discount the header
    for (char c : csv)
        if (c == '\n') ++rows;
    CHECK(rows == 10);  // k from the checkpoint config

    REQUIRE(run("infer --ckpt " + ckpt + " --in " + (t / "data/vol_000.tsv3") + " --out " +
                (t / "empty.tsv3") + " --theta 1.0") == 0);
    tokenseg::MaskVolume empty = tokenseg::load_mask(t / "empty.tsv3");
    std::size_t on = 0;
    for (auto b : empty.labels) on += b;
    CHECK(double(on) < 0.01 * double(empty.labels.size()));
}

TEST_CASE("eval report: all keys present, aggregate equals the per-case mean") {
    TempDir t;
    make_data(t, "data", 2, 13);
    REQUIRE(run("train --data " + (t / "data") + " --out " + (t / "run") + kTinyOverrides +
                " --seed 6") == 0);
    REQUIRE(run("eval --ckpt " + (t / "run/best.ckpt") + " --data " + (t / "data") +
                " --out " + (t / "report.txt")) == 0);
    std::string report = slurp(t / "report.txt");
    for (const char* key : {"dice", "iou", "hd95", "sensitivity", "precision",
                            "codebook_utilization", "boundary_token_ratio",
                            "compression_ratio"})
        CHECK(report.find(std::string("aggregate.") + key + "=") != std::string::npos);

    // recompute one aggregate from the per-case lines
    auto value_of = [&](const std::string& key) {
        auto pos = report.find(key + "=");
        REQUIRE(pos != std::string::npos);
        return std::stod(report.substr(pos + key.size() + 1));
    };
    double mean = (value_of("case0.compression_ratio") +
                   value_of("case1.compression_ratio")) / 2.0;
    CHECK(value_of("aggregate.compression_ratio") == doctest::Approx(mean).epsilon(1e-9));
}

TEST_CASE("ablate: tokens sweep emits one row per value; bad strategy exits 2") {
    TempDir t;
    make_data(t, "data", 2, 17);
    CHECK(run("ablate --axis strategy --values random,psychic --data " + (t / "data") +
              " --out " + (t / "s.csv") + kTinyOverrides) == 2);
    CHECK(run("ablate --axis nonsense --values 1,2 --data " + (t / "data") + " --out " +
              (t / "n.csv") + kTinyOverrides) == 2);

    REQUIRE(run("ablate --axis tokens --values 4,8,12 --data " + (t / "data") + " --out " +
                (t / "k.csv") + kTinyOverrides + " --seed 9") == 0);
    std::string csv = slurp(t / "k.csv");
    CHECK(csv.rfind("value,dice,iou,hd95,time_ms,util,boundary_ratio\n", 0) == 0);
    int rows = -1;
    for (char c : csv)
        if (c == '\n') ++rows;
    CHECK(rows == 3);
}

TEST_CASE("rerun with the same seed reproduces checkpoints byte-for-byte") {
    TempDir t;
    make_data(t, "data", 2, 19);
    REQUIRE(run("train --data " + (t / "data") + " --out " + (t / "r1") + kTinyOverrides +
                " --seed 21") == 0);
    REQUIRE(run("train --data " + (t / "data") + " --out " + (t / "r2") + kTinyOverrides +
                " --seed 21") == 0);
    CHECK(slurp(t / "r1/best.ckpt") == slurp(t / "r2/best.ckpt"));
    CHECK(slurp(t / "r1/final.ckpt") == slurp(t / "r2/final.ckpt"));
}
