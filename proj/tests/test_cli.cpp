#include "doctest.h"

#include "duv/cli.hpp"
#include "duv/config.hpp"
#include "duv/image.hpp"
#include "support.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace duv;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "duv");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    return run_cli(static_cast<int>(args.size()), argv.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream in{p, std::ios::binary};
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("duv_cli_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

const std::string kConfig = testing::source_path("configs/pch2.conf");

std::vector<std::string> small_simulate(const std::string& out) {
    return {"simulate", kConfig,  "-o", out, "--set", "detector.width_px=161", "--set", "detector.height_px=121",
            "--source-points", "24", "--angles", "6", "--velocities", "12", "--kick-nodes", "24"};
}

// Gaussian stripes every `spacing` columns starting at `first`.
Image stripes(std::size_t w, std::size_t h, double first, double spacing, int count) {
    Image img{w, h, 1.0};
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            double v = 1e-6;
            for (int k = 0; k < count; ++k) {
                const double d = static_cast<double>(c) - (first + k * spacing);
                v += std::exp(-0.5 * d * d / 4.0);
            }
            img(c, r) = v;
        }
    return img;
}

} // namespace

TEST_CASE("parse errors exit with code 2") {
    CHECK(run({}) == 2);
    CHECK(run({"simulate"}) == 2);
    CHECK(run({"simulate", kConfig, "-o", "x", "--bogus"}) == 2);
    CHECK(run({"frobnicate"}) == 2);
    CHECK(run({"dump-config", "/nonexistent/x.conf"}) == 2);
    CHECK(run({"dump-config", kConfig, "--set", "detector.center_y=5 furlong"}) == 2);
    CHECK(run({"--version"}) == 0);
}

TEST_CASE("unreadable inputs exit with code 3") {
    TempDir tmp{"data"};
    CHECK(run({"preprocess", "/nonexistent/raw.pgm", "-o", tmp / "p"}) == 3);
    write_csv(tmp / "a.csv", Image{10, 8, 1.0, 1.0});
    write_csv(tmp / "b.csv", Image{12, 8, 1.0, 1.0});
    CHECK(run({"compare", tmp / "a.csv", tmp / "b.csv"}) == 3);
}

TEST_CASE("numerical failures exit with code 4") {
    TempDir tmp{"num"};
    auto args = small_simulate(tmp / "far");
    args.insert(args.end(), {"--set", "detector.center_y=0.05"});
    CHECK(run(args) == 4);
    CHECK_FALSE(fs::exists(tmp / "far.csv"));
}

TEST_CASE("simulate writes image, CSV and manifest") {
    TempDir tmp{"sim"};
    const auto log = tmp / "log.jsonl";
    auto args = small_simulate(tmp / "out/run");
    args.insert(args.begin(), {"--log-json", log});
    REQUIRE(run(args) == 0);
    for (const char* ext : {".pgm", ".csv", ".manifest.json"}) CHECK(fs::exists(tmp / ("out/run" + std::string{ext})));

    const auto img = read_csv(tmp / "out/run.csv");
    CHECK(img.width() == 161);
    CHECK(img.height() == 121);
    CHECK(img.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(read_pgm(tmp / "out/run.pgm").width() == 161);

    const auto m = nlohmann::json::parse(slurp(tmp / "out/run.manifest.json"));
    CHECK(m["command"] == "simulate");
    CHECK(m["config"] == kConfig);
    CHECK(m["outputs"].size() == 3);
    CHECK(m["quadrature"]["source_points"] == 24);
    CHECK(m["quadrature"]["velocities"] == 12);
    CHECK(m["tool_version"].is_string());
    CHECK(m["wall_time_s"].get<double>() >= 0.0);

    std::istringstream lines{slurp(log)};
    std::vector<std::string> events;
    for (std::string line; std::getline(lines, line);) events.push_back(nlohmann::json::parse(line)["event"]);
    REQUIRE_FALSE(events.empty());
    CHECK(events.front() == "start");
}

TEST_CASE("simulate CSV is identical across worker counts") {
    TempDir tmp{"det"};
    std::string first;
    for (const char* threads : {"1", "3"}) {
        auto args = small_simulate(tmp / threads);
        args.insert(args.end(), {"--threads", threads});
        REQUIRE(run(args) == 0);
        const auto csv = slurp(tmp / (std::string{threads} + ".csv"));
        if (first.empty()) first = csv;
        else CHECK(csv == first);
    }
}

TEST_CASE("dump-config output parses back to the same config") {
    TempDir tmp{"dump"};
    REQUIRE(run({"dump-config", kConfig, "--set", "grating.power=0.5 W", "-o", tmp / "si.conf"}) == 0);
    const auto cfg = load_config(tmp / "si.conf");
    CHECK(cfg.grating.power == 0.5);
    CHECK(dump_config(cfg) == slurp(tmp / "si.conf"));
    CHECK(cfg.molecule.mass == testing::load("pch2").molecule.mass);
}

TEST_CASE("dump-kicks lists a normalised distribution") {
    TempDir tmp{"kicks"};
    REQUIRE(run({"dump-kicks", kConfig, "--velocity", "150 mps", "-o", tmp / "k.csv"}) == 0);
    std::istringstream in{slurp(tmp / "k.csv")};
    std::string line;
    std::getline(in, line);
    CHECK(line == "j,f,probability");
    double total = 0.0;
    int rows = 0;
    while (std::getline(in, line)) {
        const auto c = line.rfind(',');
        const double p = std::stod(line.substr(c + 1));
        CHECK(p >= 0.0);
        total += p;
        ++rows;
    }
    CHECK(rows > 10);
    CHECK(total <= 1.0 + 1e-12);
    CHECK(total > 0.0);
}

TEST_CASE("lower trace sums the bottom rows") {
    Image img{3, 6, 1.0};
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 3; ++c) img(c, r) = static_cast<double>(r + 1);
    const auto t = lower_trace(img, 0.5);
    REQUIRE(t.size() == 3);
    CHECK(t[0] == 4.0 + 5.0 + 6.0);
    CHECK(lower_trace(img, 1.0)[2] == 21.0);
    CHECK_THROWS(lower_trace(img, 0.0));
    CHECK_THROWS(lower_trace(img, 1.5));
}

TEST_CASE("peak table numbers orders from the central peak") {
    const auto img = stripes(240, 4, 40.0, 40.0, 5);  // peaks at 40, 80, ..., 200
    const auto trace = lower_trace(img, 1.0);
    for (double spacing : {0.0, 40.0}) {
        const auto peaks = peak_table(trace, spacing);
        REQUIRE(peaks.size() >= 5);
        double mass = 0.0;
        for (const auto& p : peaks) mass += p.mass;
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
        for (const auto& p : peaks) {
            if (p.mass < 0.1) continue;
            const double nearest = 40.0 * std::round(p.center_px / 40.0);
            CHECK(std::abs(p.center_px - nearest) < 0.5);
            CHECK(p.width_px == doctest::Approx(2.0).epsilon(0.05));
        }
    }
    const auto peaks = peak_table(trace);
    int zero = 0;
    for (const auto& p : peaks) zero += p.order == 0;
    CHECK(zero == 1);
}

TEST_CASE("compare reports zero RSS for identical images and tracks a shift") {
    TempDir tmp{"cmp"};
    write_csv(tmp / "a.csv", stripes(240, 30, 40.0, 40.0, 5));
    write_csv(tmp / "b.csv", stripes(240, 30, 43.0, 40.0, 5));

    const auto same = compare_images(read_csv(tmp / "a.csv"), read_csv(tmp / "a.csv"));
    CHECK(same.rss == 0.0);
    REQUIRE(same.peaks_a.size() == same.peaks_b.size());

    const auto shifted = compare_images(read_csv(tmp / "a.csv"), read_csv(tmp / "b.csv"), 2.0 / 3.0, 40.0);
    CHECK(shifted.rss > 0.0);
    double moved = 0.0, total = 0.0;
    for (std::size_t k = 0; k < shifted.peaks_a.size() && k < shifted.peaks_b.size(); ++k) {
        moved += shifted.peaks_a[k].mass * (shifted.peaks_b[k].center_px - shifted.peaks_a[k].center_px);
        total += shifted.peaks_a[k].mass;
    }
    CHECK(moved / total == doctest::Approx(3.0).epsilon(0.1));

    REQUIRE(run({"compare", tmp / "a.csv", tmp / "a.csv", "-o", tmp / "r.txt"}) == 0);
    const auto text = slurp(tmp / "r.txt");
    CHECK(text.rfind("rss = 0\n", 0) == 0);
    CHECK(text.find("[peaks_a]") != std::string::npos);
    CHECK(text.find("[peaks_b]") != std::string::npos);
}
