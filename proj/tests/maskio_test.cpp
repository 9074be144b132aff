#include "layervec/error.hpp"
#include "layervec/image_io.hpp"
#include "layervec/maskio.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

using namespace layervec;
using namespace layervec::maskio;
namespace fs = std::filesystem;
using namespace layervec::testing;

namespace {

RawMaskStack stack_of(int w, int h, std::vector<std::vector<BinaryMask>> levels) {
    RawMaskStack s{w, h, {}};
    int t = 1;
    for (auto& masks : levels)
        s.levels.push_back({t++, std::move(masks), {}});
    return s;
}

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("layervec_maskio_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Partition of the canvas into rectangles by k random vertical cuts and
// horizontal cuts per column strip.
std::vector<BinaryMask> random_partition(std::mt19937& rng, int w, int h, int cols) {
    std::vector<int> cuts{0, w};
    for (int i = 1; i < cols; ++i)
        cuts.push_back(1 + static_cast<int>(rng() % static_cast<unsigned>(w - 1)));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    std::vector<BinaryMask> out;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const int y = static_cast<int>(rng() % static_cast<unsigned>(h));
        out.push_back(rect_mask(w, h, cuts[i], 0, cuts[i + 1], y));
        out.push_back(rect_mask(w, h, cuts[i], y, cuts[i + 1], h));
    }
    return out;
}

std::size_t coverage(const MaskHierarchy& h) {
    BinaryMask u(h.width, h.height);
    for (const auto& layer : h.layers)
        for (const auto& m : layer.masks)
            for (std::size_t i = 0; i < u.data.size(); ++i)
                u.data[i] |= m.raster.data[i];
    return u.count();
}

} // namespace

TEST_CASE("load_mask_stack") {
    TempDir dir;
    SUBCASE("one level, one full mask") {
        RawMaskStack s = stack_of(8, 6, {{BinaryMask(8, 6, 1)}});
        save_mask_stack(s, dir.path);
        const RawMaskStack back = load_mask_stack(dir.path);
        REQUIRE(back.levels.size() == 1);
        REQUIRE(back.levels[0].masks.size() == 1);
        CHECK(back.levels[0].masks[0].count() == 48);
    }
    SUBCASE("level sizes preserved and levels sorted") {
        RawMaskStack s{8, 8, {}};
        s.levels.push_back({5, {rect_mask(8, 8, 0, 0, 2, 2), rect_mask(8, 8, 2, 2, 4, 4), rect_mask(8, 8, 5, 5, 8, 8)}, {}});
        s.levels.push_back({2, {rect_mask(8, 8, 0, 0, 4, 8), rect_mask(8, 8, 4, 0, 8, 8)}, {}});
        save_mask_stack(s, dir.path);
        const RawMaskStack back = load_mask_stack(dir.path);
        REQUIRE(back.levels.size() == 2);
        CHECK(back.levels[0].t == 2);
        CHECK(back.levels[0].masks.size() == 2);
        CHECK(back.levels[1].masks.size() == 3);
        CHECK(back.levels[1].masks[2] == s.levels[0].masks[2]);
    }
    SUBCASE("threshold at 128") {
        RasterImage img(2, 1, 1);
        img.at(0, 0) = 127.0 / 255.0;
        img.at(1, 0) = 128.0 / 255.0;
        fs::create_directories(dir.path / "l");
        write_png(dir.path / "l/a.png", img);
        std::ofstream(dir.path / "manifest.json") << R"({"width":2,"height":1,"levels":[{"t":1,"masks":["l/a.png"]}]})";
        const auto back = load_mask_stack(dir.path);
        CHECK(back.levels[0].masks[0].at(0, 0) == 0);
        CHECK(back.levels[0].masks[0].at(1, 0) == 1);
    }
    SUBCASE("wrong-size mask names the file") {
        RawMaskStack s = stack_of(8, 8, {{BinaryMask(8, 8, 1)}});
        save_mask_stack(s, dir.path);
        write_mask_png(dir.path / "level_1/m_0.png", BinaryMask(7, 8, 1));
        try {
            load_mask_stack(dir.path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("m_0.png") != std::string::npos);
            CHECK(std::string(e.what()).find("dimension mismatch") != std::string::npos);
        }
    }
    SUBCASE("missing manifest and empty level") {
        CHECK_THROWS_AS(load_mask_stack(dir.path), FormatError);
        std::ofstream(dir.path / "manifest.json") << R"({"width":2,"height":1,"levels":[{"t":1,"masks":[]}]})";
        CHECK_THROWS_AS(load_mask_stack(dir.path), FormatError);
    }
}

TEST_CASE("assign_masks_to_layers examples") {
    SUBCASE("identical masks at two levels") {
        const BinaryMask m = rect_mask(10, 10, 2, 2, 8, 8);
        const MaskHierarchy h = assign_masks_to_layers(stack_of(10, 10, {{m}, {m}}), 0.9);
        REQUIRE(h.layers.size() == 2);
        CHECK(h.layers[0].masks.size() == 1);
        CHECK(h.layers[1].masks.empty());
    }
    SUBCASE("disjoint masks share a layer") {
        const MaskHierarchy h = assign_masks_to_layers(
            stack_of(10, 10, {{rect_mask(10, 10, 0, 0, 5, 10), rect_mask(10, 10, 5, 0, 10, 10)}}), 0.9);
        REQUIRE(h.layers.size() == 1);
        CHECK(h.layers[0].masks.size() == 2);
    }
    SUBCASE("half-covered mask depends on the threshold") {
        const BinaryMask a = rect_mask(10, 10, 0, 0, 10, 6); // 60 px, processed first
        const BinaryMask b = rect_mask(10, 10, 0, 3, 10, 9); // 60 px, 30 covered by a
        const BinaryMask b_small = rect_mask(10, 10, 0, 4, 10, 8); // 40 px, 20 covered
        for (const auto& [bm, name] : {std::pair{b, "equal area"}, std::pair{b_small, "smaller"}}) {
            CAPTURE(name);
            CHECK(assign_masks_to_layers(stack_of(10, 10, {{a, bm}}), 0.9).layers[0].masks.size() == 2);
            CHECK(assign_masks_to_layers(stack_of(10, 10, {{a, bm}}), 0.4).layers[0].masks.size() == 1);
        }
    }
    SUBCASE("child nested in a coarse mask survives") {
        const MaskHierarchy h = assign_masks_to_layers(
            stack_of(10, 10, {{rect_mask(10, 10, 0, 0, 10, 10)}, {rect_mask(10, 10, 2, 2, 5, 5)}}), 0.9);
        CHECK(h.layers[1].masks.size() == 1);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(assign_masks_to_layers(RawMaskStack{4, 4, {}}, 0.9), FormatError);
        CHECK_THROWS_AS(assign_masks_to_layers(stack_of(4, 4, {{BinaryMask(4, 4, 1)}}), 0.0), DomainError);
        CHECK_THROWS_AS(assign_masks_to_layers(stack_of(4, 4, {{BinaryMask(4, 4, 1)}}), 1.5), DomainError);
    }
}

TEST_CASE("link_parents examples") {
    const BinaryMask left = rect_mask(10, 10, 0, 0, 5, 10);
    const BinaryMask right = rect_mask(10, 10, 5, 0, 10, 10);
    SUBCASE("full containment") {
        auto h = link_parents(assign_masks_to_layers(stack_of(10, 10, {{left, right}, {rect_mask(10, 10, 6, 1, 9, 4)}})));
        CHECK(h.layers[1].masks[0].parent_id == mask_id(1, 1));
        CHECK(h.layers[0].masks[0].parent_id == std::nullopt);
    }
    SUBCASE("no overlap gives the synthetic root") {
        auto h = link_parents(
            assign_masks_to_layers(stack_of(10, 10, {{rect_mask(10, 10, 0, 0, 3, 3)}, {rect_mask(10, 10, 5, 5, 9, 9)}})));
        CHECK(h.layers[1].masks[0].parent_id == kSyntheticRoot);
    }
    SUBCASE("60/40 split") {
        const BinaryMask child = rect_mask(10, 10, 2, 0, 7, 2); // 6 px over left, 4 over right
        auto h = link_parents(assign_masks_to_layers(stack_of(10, 10, {{left, right}, {child}})), 0.5);
        CHECK(h.layers[1].masks[0].parent_id == mask_id(1, 0));
        auto strict = link_parents(assign_masks_to_layers(stack_of(10, 10, {{left, right}, {child}})), 0.7);
        CHECK(strict.layers[1].masks[0].parent_id == kSyntheticRoot);
    }
    SUBCASE("ties go to the lowest id") {
        const BinaryMask child = rect_mask(10, 10, 3, 0, 7, 1); // 2/2
        auto h = link_parents(assign_masks_to_layers(stack_of(10, 10, {{right, left}, {child}})), 0.5);
        CHECK(h.layers[1].masks[0].parent_id == mask_id(1, 0));
    }
}

TEST_CASE("validate_hierarchy examples") {
    const BinaryMask left = rect_mask(10, 10, 0, 0, 5, 10);
    const BinaryMask right = rect_mask(10, 10, 5, 0, 10, 10);
    auto h = link_parents(assign_masks_to_layers(stack_of(10, 10, {{left, right}, {rect_mask(10, 10, 1, 1, 4, 4)}})));
    CHECK(validate_hierarchy(h).empty());

    SUBCASE("orphan") {
        h.layers[1].masks[0].parent_id.reset();
        const auto report = validate_hierarchy(h);
        REQUIRE(report.size() == 1);
        CHECK(report[0].mask_id == h.layers[1].masks[0].id);
    }
    SUBCASE("intra-layer overlap") {
        Mask extra = h.layers[0].masks[0];
        extra.id = "extra";
        extra.raster = rect_mask(10, 10, 3, 0, 7, 10); // 40 px: 20 on each side
        h.layers[0].masks.push_back(extra);
        const auto report = validate_hierarchy(h);
        REQUIRE(report.size() == 2);
        for (const auto& v : report) {
            CHECK(v.mask_id == "extra");
            CHECK(v.message.find("0.5 of the smaller") != std::string::npos);
        }
    }
    SUBCASE("parent in the wrong layer or too weak") {
        h.layers[1].masks[0].parent_id = mask_id(1, 1);
        const auto report = validate_hierarchy(h);
        REQUIRE(report.size() == 1);
        CHECK(report[0].message.find("contains only 0") != std::string::npos);
    }
}

TEST_CASE("assignment and linking match the pixel-set oracle") {
    std::mt19937 rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        CAPTURE(trial);
        const RawMaskStack s = random_stack(rng, 12, 10);
        const double tau = (trial % 3 == 0) ? 0.9 : (trial % 3 == 1 ? 0.5 : 0.25);
        const MaskHierarchy h = link_parents(assign_masks_to_layers(s, tau), 0.5);
        const auto oracle = oracle_assign(s, tau);
        REQUIRE(h.layers.size() == oracle.size());
        for (std::size_t k = 0; k < oracle.size(); ++k) {
            REQUIRE(h.layers[k].masks.size() == oracle[k].size());
            for (std::size_t i = 0; i < oracle[k].size(); ++i) {
                CHECK(h.layers[k].masks[i].id == mask_id(oracle[k][i].level, oracle[k][i].index));
                if (k > 0)
                    CHECK(h.layers[k].masks[i].parent_id == oracle[k][i].parent);
            }
        }
    }
}

TEST_CASE("hierarchy properties") {
    std::mt19937 rng(5);
    SUBCASE("deterministic") {
        for (int trial = 0; trial < 20; ++trial) {
            const RawMaskStack s = random_stack(rng, 16, 16);
            const auto a = link_parents(assign_masks_to_layers(s, 0.7));
            const auto b = link_parents(assign_masks_to_layers(s, 0.7));
            REQUIRE(a.layers.size() == b.layers.size());
            for (std::size_t k = 0; k < a.layers.size(); ++k) {
                REQUIRE(a.layers[k].masks.size() == b.layers[k].masks.size());
                for (std::size_t i = 0; i < a.layers[k].masks.size(); ++i) {
                    CHECK(a.layers[k].masks[i].id == b.layers[k].masks[i].id);
                    CHECK(a.layers[k].masks[i].raster == b.layers[k].masks[i].raster);
                    CHECK(a.layers[k].masks[i].parent_id == b.layers[k].masks[i].parent_id);
                }
            }
        }
    }
    SUBCASE("parents live one layer up, so no cycles") {
        for (int trial = 0; trial < 50; ++trial) {
            const auto h = link_parents(assign_masks_to_layers(random_stack(rng, 16, 16), 0.8));
            for (std::size_t k = 0; k < h.layers.size(); ++k)
                for (const auto& m : h.layers[k].masks) {
                    if (k == 0) {
                        CHECK_FALSE(m.parent_id.has_value());
                        continue;
                    }
                    REQUIRE(m.parent_id.has_value());
                    if (*m.parent_id == kSyntheticRoot)
                        continue;
                    bool in_previous = false;
                    for (const auto& p : h.layers[k - 1].masks)
                        in_previous |= p.id == *m.parent_id;
                    CHECK(in_previous);
                }
        }
    }
    SUBCASE("coverage is monotone in tau for two-level partition stacks") {
        for (int trial = 0; trial < 50; ++trial) {
            RawMaskStack s{24, 16, {}};
            s.levels.push_back({1, random_partition(rng, 24, 16, 2), {}});
            s.levels.push_back({2, random_partition(rng, 24, 16, 5), {}});
            std::size_t prev = 0;
            for (double tau : {0.05, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0}) {
                const std::size_t c = coverage(assign_masks_to_layers(s, tau));
                CHECK(c >= prev);
                prev = c;
            }
        }
    }
}
