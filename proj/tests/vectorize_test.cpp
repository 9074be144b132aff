#include "layervec/error.hpp"
#include "layervec/vectorize.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace layervec;
using namespace layervec::vectorize;
using layervec::geometry::Point2;
using layervec::testing::make_region;
using layervec::testing::rect_path;

namespace {

BinaryMask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
    BinaryMask m(w, h);
    for (int y = std::max(0, y0); y < std::min(h, y1); ++y)
        for (int x = std::max(0, x0); x < std::min(w, x1); ++x)
            m.at(x, y) = 1;
    return m;
}

BinaryMask disc_mask(int w, int h, double cx, double cy, double r) {
    BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r)
                m.at(x, y) = 1;
    return m;
}

maskio::MaskHierarchy hierarchy(int w, int h, std::vector<std::vector<BinaryMask>> levels) {
    maskio::RawMaskStack s{w, h, {}};
    int t = 1;
    for (auto& l : levels)
        s.levels.push_back({t++, std::move(l), {}});
    return maskio::link_parents(maskio::assign_masks_to_layers(s, 0.9), 0.5);
}

// Translation applied to every point of a region.
void shift(RegionNode& r, Point2 d) {
    for (std::size_t i = 0; i < r.point_count(); ++i)
        r.point(i) += d;
}

raster::RenderParams params_1x() {
    raster::RenderParams p;
    p.supersample = 1;
    p.threads = 1;
    return p;
}

// Independent coverage of an axis-aligned rectangle: exact signed distance
// per sample, then the renormalised logistic.
double soft(double sd, double sigma) {
    const double x = sd / sigma;
    if (x >= 4.0)
        return 1.0;
    if (x <= -4.0)
        return 0.0;
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    return (sig(x) - sig(-4.0)) / (sig(4.0) - sig(-4.0));
}

double rect_sd(double px, double py, double x0, double y0, double x1, double y1) {
    const bool inside = px > x0 && px < x1 && py > y0 && py < y1;
    if (inside)
        return std::min({px - x0, x1 - px, py - y0, y1 - py});
    const double dx = std::max({x0 - px, 0.0, px - x1});
    const double dy = std::max({y0 - py, 0.0, py - y1});
    return -std::hypot(dx, dy);
}

} // namespace

TEST_CASE("recon_loss examples") {
    RasterImage a(3, 2, 3, 0.25);
    CHECK(recon_loss(a, a) == 0.0);
    CHECK(recon_loss(RasterImage(4, 4, 3, 0.0), RasterImage(4, 4, 3, 1.0)) == 1.0);
    RasterImage x(2, 2, 1, 0.0), y(2, 2, 1, 0.0);
    y.at(1, 1) = 0.5;
    CHECK(recon_loss(x, y) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK_THROWS_AS(recon_loss(x, a), FormatError);
}

TEST_CASE("fit_mask_outline") {
    OptimizeConfig cfg;
    SUBCASE("simple square: single fitted side") {
        const MaskOutline o = fit_mask_outline(rect_mask(32, 32, 8, 8, 24, 24), cfg);
        CHECK_FALSE(o.split);
        CHECK(o.subpaths.empty());
        CHECK(o.path.segment_count() <= 8);
        CHECK(geometry::polygon_area(geometry::flatten_path(o.path, 0.05)) == doctest::Approx(256.0).epsilon(0.02));
    }
    SUBCASE("complex outline is split, each side within the budget") {
        // comb: many teeth survive 2 px simplification
        BinaryMask m = rect_mask(96, 48, 4, 30, 92, 44);
        for (int t = 0; t < 10; ++t)
            for (int y = 6; y < 30; ++y)
                for (int x = 6 + 9 * t; x < 10 + 9 * t; ++x)
                    m.at(x, y) = 1;
        const MaskOutline o = fit_mask_outline(m, cfg);
        CHECK(o.split);
        CHECK(o.path.segment_count() <= 16);
        CHECK(o.path.segment_count() >= 2);
    }
    SUBCASE("holes and extra islands become subpaths") {
        BinaryMask m = rect_mask(40, 40, 2, 2, 30, 30);
        for (int y = 10; y < 20; ++y)
            for (int x = 10; x < 20; ++x)
                m.at(x, y) = 0;
        for (int y = 33; y < 38; ++y)
            for (int x = 33; x < 38; ++x)
                m.at(x, y) = 1;
        m.at(0, 39) = 1; // single pixel: below min_area
        const MaskOutline o = fit_mask_outline(m, cfg);
        CHECK(o.subpaths.size() == 2);
        RegionNode r = make_region("r", 1, o.path, {0, 0, 0});
        r.subpaths = o.subpaths;
        const RasterImage cov = raster::region_coverage(r, params_1x(), {40, 40});
        CHECK(cov.at(15, 15) < 0.01);
        CHECK(cov.at(5, 5) > 0.99);
        CHECK(cov.at(35, 35) > 0.99);
    }
    SUBCASE("empty mask") {
        CHECK_THROWS_AS(fit_mask_outline(BinaryMask(8, 8), cfg), DomainError);
    }
}

TEST_CASE("fitted sides never exceed the segment cap") {
    std::mt19937 rng(11);
    OptimizeConfig cfg;
    for (int trial = 0; trial < 25; ++trial) {
        BinaryMask m(48, 48);
        // union of random blobs
        for (int b = 0; b < 6; ++b) {
            const double cx = 8 + rng() % 32, cy = 8 + rng() % 32, r = 3 + rng() % 9;
            for (int y = 0; y < 48; ++y)
                for (int x = 0; x < 48; ++x)
                    if (std::hypot(x + 0.5 - cx, (y + 0.5 - cy) * (1 + 0.1 * b)) <= r)
                        m.at(x, y) = 1;
        }
        const MaskOutline o = fit_mask_outline(m, cfg);
        CHECK(o.path.segment_count() <= static_cast<std::size_t>(o.split ? 16 : 8));
        for (const auto& s : o.subpaths)
            CHECK(s.segment_count() <= 16);
    }
}

TEST_CASE("init_document examples") {
    SUBCASE("full-canvas mask over constant gray") {
        RasterImage img(16, 16, 3, 0.4);
        const auto h = hierarchy(16, 16, {{BinaryMask(16, 16, 1)}});
        const VectorDocument doc = init_document(img, h);
        REQUIRE(doc.roots.size() == 1);
        for (double c : doc.roots[0].fill)
            CHECK(std::abs(c - 0.4) <= 1.0 / 255.0);
        CHECK(check_document(doc).empty());
    }
    SUBCASE("background plus centred square") {
        RasterImage img(64, 64, 3, 1.0);
        const BinaryMask square = rect_mask(64, 64, 20, 20, 44, 44);
        for (int y = 20; y < 44; ++y)
            for (int x = 20; x < 44; ++x)
                for (int c = 0; c < 3; ++c)
                    img.at(x, y, c) = c == 0 ? 0.8 : 0.1;
        const auto h = hierarchy(64, 64, {{BinaryMask(64, 64, 1)}, {square}});
        const VectorDocument doc = init_document(img, h);
        REQUIRE(doc.roots.size() == 1);
        REQUIRE(doc.roots[0].children.size() == 1);
        const RegionNode& child = doc.roots[0].children[0];
        CHECK(child.layer == 2);
        CHECK(child.source_mask_id == h.layers[1].masks[0].id);
        CHECK(child.fill[0] == doctest::Approx(0.8));
        const RasterImage cov = raster::region_coverage(doc, child, params_1x(), {64, 64});
        CHECK(coverage_iou(cov, square) >= 0.85);
        CHECK(check_document(doc).empty());
    }
    SUBCASE("grayscale image is replicated") {
        RasterImage img(8, 8, 1, 0.25);
        const VectorDocument doc = init_document(img, hierarchy(8, 8, {{BinaryMask(8, 8, 1)}}));
        CHECK(doc.roots[0].fill == Color{0.25, 0.25, 0.25});
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(init_document(RasterImage(8, 8, 3), maskio::MaskHierarchy{8, 8, {}}), FormatError);
        CHECK_THROWS_AS(init_document(RasterImage(9, 8, 3), hierarchy(8, 8, {{BinaryMask(8, 8, 1)}})), FormatError);
    }
}

TEST_CASE("structure_loss examples") {
    const raster::RenderParams params = params_1x();
    SUBCASE("exact coverage and exact target give zero") {
        VectorDocument doc{16, 16, {make_region("a", 1, rect_path(-8, -8, 24, 24), {0.3, 0.6, 0.9})}};
        doc.roots[0].source_mask_id = "m1_0";
        const auto h = hierarchy(16, 16, {{BinaryMask(16, 16, 1)}});
        const RasterImage target = raster::render(doc, params);
        const StructureLoss s = structure_loss(doc, h, target, 1.0, params);
        CHECK(s.total == 0.0);
        CHECK(s.recon == 0.0);
    }
    SUBCASE("brute-force oracle for a shifted square, with and without gamma") {
        const int W = 24, H = 24;
        const BinaryMask mask = rect_mask(W, H, 8, 8, 16, 16);
        const auto h = hierarchy(W, H, {{mask}});
        VectorDocument doc{W, H, {make_region("a", 1, rect_path(10, 8, 18, 16), {0.2, 0.5, 0.7})}};
        doc.roots[0].source_mask_id = h.layers[0].masks[0].id;
        RasterImage target(W, H, 3);
        std::mt19937 rng(2);
        for (double& v : target.data)
            v = (rng() % 1000) / 999.0;
        for (int ss : {1, 2}) {
            raster::RenderParams p = params;
            p.supersample = ss;
            double mask_term = 0.0, recon = 0.0;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double cov = 0.0;
                    for (int j = 0; j < ss; ++j)
                        for (int i = 0; i < ss; ++i) {
                            const double px = x + (i + 0.5) / ss, py = y + (j + 0.5) / ss;
                            cov += soft(rect_sd(px, py, 10, 8, 18, 16), p.soft_bandwidth);
                        }
                    cov /= ss * ss;
                    mask_term += std::abs(cov - mask.at(x, y));
                    for (int c = 0; c < 3; ++c) {
                        double pix = 0.0;
                        for (int j = 0; j < ss; ++j)
                            for (int i = 0; i < ss; ++i) {
                                const double px = x + (i + 0.5) / ss, py = y + (j + 0.5) / ss;
                                const double a = soft(rect_sd(px, py, 10, 8, 18, 16), p.soft_bandwidth);
                                pix += a * doc.roots[0].fill[c] + (1 - a) * 1.0;
                            }
                        recon += std::abs(pix / (ss * ss) - target.at(x, y, c));
                    }
                }
            mask_term /= W * H;
            recon /= W * H * 3;
            const StructureLoss s1 = structure_loss(doc, h, target, 1.0, p);
            CHECK(std::abs(s1.total - (mask_term + recon)) <= 1e-9);
            CHECK(std::abs(s1.mask_per_layer[0] - mask_term) <= 1e-9);
            const StructureLoss s0 = structure_loss(doc, h, target, 0.0, p);
            CHECK(std::abs(s0.total - mask_term) <= 1e-9);
        }
    }
    SUBCASE("unlinked region") {
        VectorDocument doc{8, 8, {make_region("lonely", 1, rect_path(1, 1, 5, 5), {0, 0, 0})}};
        const auto h = hierarchy(8, 8, {{BinaryMask(8, 8, 1)}});
        try {
            structure_loss(doc, h, RasterImage(8, 8, 3), 1.0, params);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("lonely") != std::string::npos);
        }
    }
}

namespace {

struct ThreeShapes {
    maskio::MaskHierarchy h;
    RasterImage target;
    VectorDocument truth;
    VectorDocument start;
};

ThreeShapes three_shapes() {
    const int W = 64, H = 64;
    ThreeShapes s;
    const BinaryMask a = rect_mask(W, H, 6, 8, 28, 30);
    const BinaryMask b = disc_mask(W, H, 44, 20, 12);
    const BinaryMask c = rect_mask(W, H, 16, 40, 52, 58);
    s.h = hierarchy(W, H, {{a, b, c}});
    s.target = RasterImage(W, H, 3, 1.0);
    const Color colors[3] = {{0.9, 0.2, 0.1}, {0.1, 0.6, 0.2}, {0.2, 0.3, 0.9}};
    const BinaryMask* masks[3] = {&a, &b, &c};
    for (int k = 0; k < 3; ++k)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (masks[k]->at(x, y))
                    for (int ch = 0; ch < 3; ++ch)
                        s.target.at(x, y, ch) = colors[k][ch];
    s.truth = init_document(s.target, s.h);
    s.start = s.truth;
    const Point2 offsets[3] = {{3, 0}, {0, -3}, {-3, 0}};
    for (std::size_t i = 0; i < s.start.roots.size(); ++i)
        shift(s.start.roots[i], offsets[i]);
    return s;
}

} // namespace

TEST_CASE("optimize examples") {
    ThreeShapes s = three_shapes();
    OptimizeConfig cfg;
    cfg.render.threads = 1;
    SUBCASE("zero steps returns the document unchanged") {
        cfg.steps = 0;
        const OptimizeResult r = optimize(s.start, s.h, s.target, cfg);
        CHECK(r.doc == s.start);
        CHECK(r.trace.size() == 1);
    }
    SUBCASE("zero learning rate is the identity") {
        cfg.steps = 3;
        cfg.lr_points = 0.0;
        cfg.lr_color = 0.0;
        const OptimizeResult r = optimize(s.start, s.h, s.target, cfg);
        CHECK(r.doc == s.start);
        CHECK(r.trace[0] == r.trace[3]);
    }
    SUBCASE("stationary point") {
        // a full-canvas region whose mask and target match its own render
        VectorDocument doc{16, 16, {make_region("a", 1, rect_path(-8, -8, 24, 24), {0.3, 0.6, 0.9})}};
        const auto h = hierarchy(16, 16, {{BinaryMask(16, 16, 1)}});
        doc.roots[0].source_mask_id = h.layers[0].masks[0].id;
        const RasterImage target = raster::render(doc, cfg.render);
        cfg.steps = 5;
        const OptimizeResult r = optimize(doc, h, target, cfg);
        CHECK(std::abs(r.trace.back() - r.trace.front()) <= 1e-6);
    }
    SUBCASE("recovers a 3 px offset") {
        cfg.steps = 30;
        const OptimizeResult r = optimize(s.start, s.h, s.target, cfg);
        REQUIRE(r.trace.size() == 31);
        MESSAGE("structure loss " << r.trace.front() << " -> " << r.trace.back());
        CHECK(r.trace.back() <= 0.5 * r.trace.front());
        const auto pre = regions_preorder(r.doc);
        for (std::size_t i = 0; i < pre.size(); ++i) {
            const RasterImage cov = raster::region_coverage(r.doc, *pre[i], cfg.render, {64, 64});
            const double iou = coverage_iou(cov, s.h.layers[0].masks[i].raster);
            MESSAGE(pre[i]->id << " IoU " << iou);
            CHECK(iou >= 0.9);
        }
        // topology is untouched
        CHECK(node_count(r.doc) == node_count(s.start));
        for (const RegionNode* n : regions_preorder(r.doc)) {
            CHECK(n->point_count() == find_region(s.start, n->id)->point_count());
            CHECK(parent_of(r.doc, n->id) == parent_of(s.start, n->id));
            for (double c : n->fill) {
                CHECK(c >= 0.0);
                CHECK(c <= 1.0);
            }
        }
    }
    SUBCASE("non-finite target aborts with the step") {
        s.target.data[5] = std::numeric_limits<double>::quiet_NaN();
        cfg.steps = 2;
        try {
            optimize(s.start, s.h, s.target, cfg);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(e.step() == 0);
        }
    }
}

TEST_CASE("structure_loss is non-negative and zero only when every term is") {
    std::mt19937 rng(4);
    ThreeShapes s = three_shapes();
    for (int trial = 0; trial < 10; ++trial) {
        VectorDocument doc = s.truth;
        for (auto& r : doc.roots)
            shift(r, {static_cast<double>(rng() % 5) - 2.0, static_cast<double>(rng() % 5) - 2.0});
        const double gamma = (rng() % 3) * 0.5;
        const StructureLoss l = structure_loss(doc, s.h, s.target, gamma, params_1x());
        CHECK(l.total >= 0.0);
        CHECK(l.recon >= 0.0);
        for (double v : l.mask_per_layer)
            CHECK(v >= 0.0);
        CHECK((l.total == 0.0) == (l.mask_per_layer[0] == 0.0 && gamma * l.recon == 0.0));
    }
}
