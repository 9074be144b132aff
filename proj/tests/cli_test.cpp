#include "layervec/image_io.hpp"
#include "layervec/rasterizer.hpp"
#include "layervec/svgio.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

using namespace layervec;
namespace fs = std::filesystem;

namespace {

const fs::path kData = LAYERVEC_TEST_DATA;
const fs::path kShapes = kData / "three_shapes";

struct Scratch {
    fs::path dir = fs::temp_directory_path() / ("layervec_cli_" + std::to_string(::getpid()));
    Scratch() { fs::create_directories(dir); }
    ~Scratch() { fs::remove_all(dir); }
};

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

int run(const std::string& args, const fs::path& log) {
    const std::string line = q(LAYERVEC_CLI) + " " + args + " > " + q(log) + " 2>&1";
    const int status = std::system(line.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

} // namespace

TEST_CASE("exit codes") {
    Scratch s;
    const fs::path log = s.dir / "log";
    CHECK(run("render --svg " + q(kShapes / "scene.svg") + " --out " + q(s.dir / "a.png"), log) == 0);
    CHECK(run("render --svg " + q(kShapes / "scene.svg") + " --out x.png --bogus", log) == 64);
    CHECK(slurp(log).find("Usage") != std::string::npos);
    CHECK(run("", log) == 64);

    CHECK(run("vectorize --image " + q(kShapes / "image.png") + " --masks " + q(s.dir / "none") + " --out " +
                  q(s.dir / "v.svg"),
              log) == 2);
    CHECK(slurp(log).find((s.dir / "none").string()) != std::string::npos);

    write(s.dir / "bad.svg", "<svg width='4' height='4'><path d='M 0 0 C'/></svg>");
    CHECK(run("render --svg " + q(s.dir / "bad.svg") + " --out " + q(s.dir / "b.png"), log) == 2);

    write(s.dir / "ops.json", R"([{"op":"translate","id":"nope","dx":1,"dy":0}])");
    CHECK(run("edit --svg " + q(kShapes / "scene.svg") + " --ops " + q(s.dir / "ops.json") + " --out " +
                  q(s.dir / "e.svg"),
              log) == 2);
    CHECK(slurp(log).find("edit 0") != std::string::npos);

    CHECK(run("flow sample --checkpoint x --svg " + q(kShapes / "scene.svg") + " --steps 0 --out " +
                  q(s.dir / "s.png"),
              log) == 64);
    CHECK(run("flow train --data " + q(kData / "flow_toy") + " --out " + q(s.dir / "ck.json") +
                  " --stage1-epochs 2 --stage2-epochs 0 --lr 1e200",
              log) == 3);
}

TEST_CASE("render size and fidelity") {
    Scratch s;
    const fs::path log = s.dir / "log";
    REQUIRE(run("render --svg " + q(kShapes / "scene.svg") + " --out " + q(s.dir / "512.png") + " --size 512", log) == 0);
    REQUIRE(run("render --svg " + q(kShapes / "scene.svg") + " --out " + q(s.dir / "256.png") + " --size 256", log) == 0);
    const RasterImage a = read_png(s.dir / "512.png"), b = read_png(s.dir / "256.png");
    CHECK(b.width * 2 == a.width);
    CHECK(b.height * 2 == a.height);

    // file render equals the in-memory render of the parsed document
    REQUIRE(run("render --svg " + q(kShapes / "scene.svg") + " --out " + q(s.dir / "n.png") + " --threads 1", log) == 0);
    raster::RenderParams p;
    p.threads = 1;
    const RasterImage mem = raster::render(svg::parse_svg(slurp(kShapes / "scene.svg")), p);
    const RasterImage file = read_png(s.dir / "n.png");
    REQUIRE(file.data.size() == mem.data.size());
    for (std::size_t i = 0; i < mem.data.size(); ++i)
        REQUIRE(file.data[i] == to_byte(mem.data[i]) / 255.0);
}

TEST_CASE("roundtrip artifacts") {
    Scratch s;
    const fs::path log = s.dir / "log";
    const std::string base = "roundtrip --svg " + q(kShapes / "scene.svg") + " --masks " + q(kShapes / "masks");

    SUBCASE("empty script reproduces the re-render") {
        write(s.dir / "empty.json", "[]");
        REQUIRE(run(base + " --ops " + q(s.dir / "empty.json") + " --out-dir " + q(s.dir / "rt"), log) == 0);
        for (const char* f : {"rendered.png", "vectorized.svg", "edited.svg", "edited.png", "metrics.csv"})
            CHECK(fs::exists(s.dir / "rt" / f));
        CHECK(slurp(s.dir / "rt" / "edited.svg") == slurp(s.dir / "rt" / "vectorized.svg"));
        raster::RenderParams p;
        const RasterImage rerender = raster::render(svg::parse_svg(slurp(s.dir / "rt" / "vectorized.svg")), p);
        const RasterImage edited = read_png(s.dir / "rt" / "edited.png");
        for (std::size_t i = 0; i < edited.data.size(); ++i)
            REQUIRE(edited.data[i] == to_byte(rerender.data[i]) / 255.0);
        const std::string metrics = slurp(s.dir / "rt" / "metrics.csv");
        CHECK(metrics.rfind("format_version,psnr_db", 0) == 0);
        const double psnr_db = std::stod(metrics.substr(metrics.find('\n') + 3));
        CHECK(psnr_db >= 15.0);
    }
    SUBCASE("recolor changes only the edited region's neighbourhood") {
        write(s.dir / "rc.json", R"([{"op":"recolor","id":"m1_1","fill":"#ffcc00"}])");
        REQUIRE(run(base + " --ops " + q(s.dir / "rc.json") + " --out-dir " + q(s.dir / "rt"), log) == 0);
        const VectorDocument doc = svg::parse_svg(slurp(s.dir / "rt" / "vectorized.svg"));
        raster::RenderParams p;
        const RasterImage cov = raster::region_coverage(doc, *find_region(doc, "m1_1"), p, {doc.width, doc.height});
        const RasterImage before = raster::render(doc, p);
        const RasterImage after = read_png(s.dir / "rt" / "edited.png");
        const int r = static_cast<int>(std::ceil(4 * p.soft_bandwidth));
        int changed_inside = 0;
        for (int y = 0; y < doc.height; ++y)
            for (int x = 0; x < doc.width; ++x) {
                bool near = false;
                for (int dy = -r; dy <= r && !near; ++dy)
                    for (int dx = -r; dx <= r && !near; ++dx)
                        near = x + dx >= 0 && y + dy >= 0 && x + dx < doc.width && y + dy < doc.height &&
                               cov.at(x + dx, y + dy) > 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double d = std::abs(after.at(x, y, c) - to_byte(before.at(x, y, c)) / 255.0);
                    if (!near)
                        REQUIRE(d == 0.0);
                    else if (d > 0.0)
                        ++changed_inside;
                }
            }
        CHECK(changed_inside > 0);
        CHECK(slurp(s.dir / "rt" / "metrics.csv").find(",2,0,1,0,0,0\n") != std::string::npos);
    }
}

TEST_CASE("flow make-toy, train and sample") {
    Scratch s;
    const fs::path log = s.dir / "log";
    REQUIRE(run("flow make-toy --out-dir " + q(s.dir / "toy") + " --count 12 --seed 4", log) == 0);
    CHECK(fs::exists(s.dir / "toy" / "item_011.svg"));
    REQUIRE(run("flow train --data " + q(s.dir / "toy") + " --holdout 4 --out " + q(s.dir / "ck.json") +
                    " --loss-csv " + q(s.dir / "loss.csv") + " --stage1-epochs 20 --stage2-epochs 2 --seed 4",
                log) == 0);
    std::istringstream csv(slurp(s.dir / "loss.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "format_version,stage,epoch,fm,kl,cov,total");
    std::vector<double> fm;
    while (std::getline(csv, line)) {
        std::vector<std::string> cols;
        std::stringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');)
            cols.push_back(c);
        REQUIRE(cols.size() == 7);
        if (cols[1] == "1")
            fm.push_back(std::stod(cols[3]));
    }
    REQUIRE(fm.size() == 20);
    // downward trend: last quarter below first quarter
    double first = 0, last = 0;
    for (int i = 0; i < 5; ++i) {
        first += fm[static_cast<std::size_t>(i)];
        last += fm[static_cast<std::size_t>(15 + i)];
    }
    CHECK(last < first);

    const std::string sample = "flow sample --checkpoint " + q(s.dir / "ck.json") + " --svg " +
                               q(s.dir / "toy" / "item_000.svg") + " --steps 5 --seed 9 --latent ";
    REQUIRE(run(sample + q(s.dir / "a.json") + " --out " + q(s.dir / "a.png"), log) == 0);
    REQUIRE(run(sample + q(s.dir / "b.json") + " --out " + q(s.dir / "b.png"), log) == 0);
    CHECK(slurp(s.dir / "a.json") == slurp(s.dir / "b.json"));
    CHECK(slurp(s.dir / "a.png") == slurp(s.dir / "b.png"));
}

TEST_CASE("edit --shallow leaves descendants in place") {
    Scratch s;
    const fs::path log = s.dir / "log";
    write(s.dir / "nested.svg", R"(<svg width="16" height="16"><g data-role="root">
<g id="p" data-layer="1"><path d="M 0 0 H 12 V 12 H 0 Z" fill="#ff0000"/>
<g id="c" data-layer="2"><path d="M 2 2 H 6 V 6 H 2 Z" fill="#0000ff"/></g></g></g></svg>)");
    write(s.dir / "ops.json", R"([{"op":"translate","id":"p","dx":3,"dy":0}])");
    const std::string base = "edit --svg " + q(s.dir / "nested.svg") + " --ops " + q(s.dir / "ops.json") + " --out ";
    REQUIRE(run(base + q(s.dir / "deep.svg"), log) == 0);
    REQUIRE(run(base + q(s.dir / "shallow.svg") + " --shallow", log) == 0);
    const VectorDocument src = svg::parse_svg(slurp(s.dir / "nested.svg"));
    const VectorDocument deep = svg::parse_svg(slurp(s.dir / "deep.svg"));
    const VectorDocument shallow = svg::parse_svg(slurp(s.dir / "shallow.svg"));
    const RegionNode& c0 = *find_region(src, "c");
    for (std::size_t i = 0; i < c0.point_count(); ++i) {
        // output is quantized to 3 decimals
        CHECK(std::abs(find_region(deep, "c")->point(i).x - (c0.point(i).x + 3)) <= 1e-3);
        CHECK(std::abs(find_region(shallow, "c")->point(i).x - c0.point(i).x) <= 1e-3);
        CHECK(std::abs(find_region(shallow, "p")->point(0).x - (find_region(src, "p")->point(0).x + 3)) <= 1e-3);
    }
}
