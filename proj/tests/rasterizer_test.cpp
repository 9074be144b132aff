#include "layervec/error.hpp"
#include "layervec/parallel.hpp"
#include "layervec/rasterizer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <random>

using namespace layervec;
using namespace layervec::raster;
using layervec::geometry::Point2;
using layervec::testing::ellipse_path;
using layervec::testing::make_region;
using layervec::testing::rect_path;

namespace {

RenderParams crisp() {
    RenderParams p;
    p.supersample = 1;
    p.threads = 1;
    return p;
}

double dot_loss(const RasterImage& weights, const RasterImage& img) {
    double s = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i)
        s += weights.data[i] * img.data[i];
    return s;
}

struct GradAgreement {
    std::size_t checked = 0;
    std::size_t agreeing = 0;
};

GradAgreement compare(const std::vector<double>& analytic, const std::vector<double>& numeric, double rel) {
    GradAgreement g;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (std::abs(analytic[i]) <= 1e-6)
            continue;
        ++g.checked;
        if (std::abs(analytic[i] - numeric[i]) <= rel * std::abs(analytic[i]))
            ++g.agreeing;
    }
    return g;
}

} // namespace

TEST_CASE("soft_coverage profile") {
    CHECK(soft_coverage(0.0, 0.7) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(soft_coverage(2.8, 0.7) == 1.0);
    CHECK(soft_coverage(-2.8, 0.7) == 0.0);
    CHECK(soft_coverage(1.0, 0.7) + soft_coverage(-1.0, 0.7) == doctest::Approx(1.0));
}

TEST_CASE("region_coverage examples") {
    const RenderParams params = crisp();
    SUBCASE("deep interior is exactly one") {
        const RegionNode r = make_region("a", 1, rect_path(-10, -10, 42, 42), {0, 0, 0});
        const RasterImage cov = region_coverage(r, params, {32, 32});
        for (double v : cov.data)
            CHECK(v == 1.0);
    }
    SUBCASE("degenerate path covers nothing") {
        const RegionNode r = make_region("a", 1, geometry::BezierPath({{5, 5}, {5, 5}, {5, 5}}), {0, 0, 0});
        const RasterImage cov = region_coverage(r, params, {16, 16});
        for (double v : cov.data)
            CHECK(v == 0.0);
        const RegionNode flat = make_region("b", 1, rect_path(2, 2, 10, 2), {0, 0, 0});
        for (double v : region_coverage(flat, params, {16, 16}).data)
            CHECK(v <= 0.5);
    }
    SUBCASE("pixel centred on a straight edge is one half") {
        const RegionNode r = make_region("a", 1, rect_path(-20, -20, 5.5, 40), {0, 0, 0});
        const RasterImage cov = region_coverage(r, params, {16, 16});
        for (int y = 0; y < 16; ++y) {
            CHECK(cov.at(5, y) == doctest::Approx(0.5).epsilon(1e-6));
            CHECK(cov.at(0, y) == 1.0);
            CHECK(cov.at(15, y) == 0.0);
        }
    }
    SUBCASE("values stay in [0,1]") {
        std::mt19937_64 rng(1);
        const VectorDocument doc = layervec::testing::random_scene(rng, 32, 32, 5);
        for (const auto& r : doc.roots)
            for (double v : region_coverage(r, params, {32, 32}).data) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
    }
}

TEST_CASE("render examples") {
    RenderParams params;
    params.threads = 1;
    SUBCASE("single full-canvas region") {
        VectorDocument doc{16, 16, {make_region("a", 1, rect_path(-8, -8, 24, 24), {0.5, 0.5, 0.5})}};
        for (double v : render(doc, params).data)
            CHECK(v == 0.5);
    }
    SUBCASE("later region wins the overlap") {
        VectorDocument doc{32, 32,
                           {make_region("a", 1, rect_path(2, 2, 20, 20), {1, 0, 0}),
                            make_region("b", 1, rect_path(10, 10, 30, 30), {0, 0, 1})}};
        const RasterImage img = render(doc, params);
        CHECK(img.at(15, 15, 0) == 0.0);
        CHECK(img.at(15, 15, 2) == 1.0);
        CHECK(img.at(5, 5, 0) == 1.0);
        CHECK(img.at(0, 31, 1) == 1.0); // background white
    }
    SUBCASE("layer-major paint order") {
        RegionNode top = make_region("top", 2, rect_path(0, 0, 32, 32), {0, 1, 0});
        RegionNode under = make_region("under", 1, rect_path(-4, -4, 36, 36), {1, 0, 0});
        VectorDocument doc{32, 32, {}};
        RegionNode parent = make_region("p", 1, rect_path(40, 40, 50, 50), {0, 0, 0});
        parent.children.push_back(top);
        doc.roots = {parent, under};
        const RasterImage img = render(doc, params);
        CHECK(img.at(16, 16, 1) == 1.0);
    }
    SUBCASE("resolution consistency away from edges") {
        std::mt19937_64 rng(4);
        const VectorDocument doc = layervec::testing::random_scene(rng, 32, 32, 4);
        const RasterImage small = render(doc, params, {32, 32});
        const RasterImage large = downsample(render(doc, params, {64, 64}), 2);
        // pixels farther than 4σ+1 from every outline
        std::vector<char> near(32 * 32, 0);
        for (const auto& r : doc.roots) {
            const auto line = geometry::flatten_path(r.path, 0.05);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    for (std::size_t i = 0; i < line.points.size(); ++i)
                        if (geometry::point_segment_distance({x + 0.5, y + 0.5}, line.points[i],
                                                             line.points[(i + 1) % line.points.size()]) <
                            4 * params.soft_bandwidth + 1.0)
                            near[y * 32 + x] = 1;
        }
        int compared = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                if (near[y * 32 + x])
                    continue;
                ++compared;
                for (int c = 0; c < 3; ++c)
                    CHECK(std::abs(small.at(x, y, c) - large.at(x, y, c)) <= 2.0 / 255.0);
            }
        CHECK(compared > 50);
    }
}

TEST_CASE("render_region_stack") {
    const RenderParams params = crisp();
    RegionNode root = make_region("root", 1, rect_path(0, 0, 32, 32), {1, 1, 1});
    root.children.push_back(make_region("a", 2, ellipse_path({8, 8}, 5, 5), {1, 0, 0}));
    root.children.push_back(make_region("b", 2, ellipse_path({24, 8}, 5, 5), {0, 1, 0}));
    root.children.push_back(make_region("c", 2, ellipse_path({16, 24}, 5, 5), {0, 0, 1}));
    VectorDocument doc{32, 32, {root}};

    const auto single = render_region_stack(doc, 1, params, {32, 32});
    REQUIRE(single.size() == 1);
    CHECK(single[0].data == region_coverage(doc, doc.roots[0], params, {32, 32}).data);

    const auto three = render_region_stack(doc, 2, params, {32, 32});
    REQUIRE(three.size() == 3);
    for (std::size_t i = 0; i < three[0].data.size(); ++i)
        CHECK(three[0].data[i] + three[1].data[i] + three[2].data[i] <= 1.0 + 1e-9);

    // layer 2 is empty
    VectorDocument empty_middle{32, 32, {make_region("x", 1, rect_path(0, 0, 8, 8), {0, 0, 0}),
                                          make_region("y", 3, rect_path(8, 8, 16, 16), {0, 0, 0})}};
    CHECK(render_region_stack(empty_middle, 2, params, {32, 32}).empty());
    CHECK_THROWS_AS(render_region_stack(doc, 0, params, {32, 32}), DomainError);
    CHECK_THROWS_AS(render_region_stack(doc, 3, params, {32, 32}), DomainError);
}

TEST_CASE("backward examples") {
    const RenderParams params = crisp();
    SUBCASE("off-canvas region has zero gradient") {
        VectorDocument doc{16, 16,
                           {make_region("on", 1, rect_path(2, 2, 10, 10), {0.2, 0.3, 0.4}),
                            make_region("off", 1, rect_path(40, 40, 50, 50), {0.9, 0.1, 0.1})}};
        RasterImage ones(16, 16, 3, 1.0);
        const GradientSet g = backward(doc, params, {16, 16}, ones);
        for (Point2 p : g.regions[1].points)
            CHECK(p == Point2{});
        for (double c : g.regions[1].fill)
            CHECK(c == 0.0);
    }
    SUBCASE("full-canvas region: colour gradient equals pixel count") {
        VectorDocument doc{16, 12, {make_region("a", 1, rect_path(-10, -10, 30, 30), {0.5, 0.5, 0.5})}};
        RasterImage ones(16, 12, 3, 1.0);
        const GradientSet g = backward(doc, params, {16, 12}, ones);
        for (double c : g.regions[0].fill)
            CHECK(c == doctest::Approx(16.0 * 12.0));
        for (Point2 p : g.regions[0].points)
            CHECK(geometry::norm(p) < 1e-12);
    }
    SUBCASE("shape mismatch") {
        VectorDocument doc{16, 16, {make_region("a", 1, rect_path(2, 2, 8, 8), {0, 0, 0})}};
        CHECK_THROWS_AS(backward(doc, params, {16, 16}, RasterImage(8, 8, 3)), FormatError);
    }
}

TEST_CASE("backward agrees with central differences on random scenes") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (int ss : {1, 2}) {
        RenderParams params = crisp();
        params.supersample = ss;
        std::size_t checked = 0, agreeing = 0;
        for (int scene = 0; scene < 6; ++scene) {
            const VectorDocument doc = layervec::testing::random_scene(rng, 32, 32, 1 + scene % 5);
            RasterImage weights(32, 32, 3);
            for (double& w : weights.data)
                w = unit(rng);
            const GradientSet analytic = backward(doc, params, {32, 32}, weights);
            const GradientSet numeric = numeric_gradient(
                doc, params, {32, 32}, [&](const RasterImage& img) { return dot_loss(weights, img); }, 1e-3);
            const auto agree = compare(analytic.flatten(), numeric.flatten(), 1e-3);
            checked += agree.checked;
            agreeing += agree.agreeing;
        }
        MESSAGE("supersample " << ss << ": " << agreeing << "/" << checked << " parameters agree");
        CHECK(checked > 100);
        CHECK(static_cast<double>(agreeing) >= 0.95 * static_cast<double>(checked));
    }
}

TEST_CASE("numeric_gradient") {
    const RenderParams params = crisp();
    std::mt19937_64 rng(3);
    const VectorDocument doc = layervec::testing::random_scene(rng, 24, 24, 2);
    SUBCASE("zero loss") {
        const GradientSet g = numeric_gradient(doc, params, {24, 24}, [](const RasterImage&) { return 0.0; }, 1e-3);
        for (double v : g.flatten())
            CHECK(v == 0.0);
    }
    SUBCASE("central differences converge at second order") {
        // Fill colours enter the render linearly inside the interior and the
        // loss is a smooth function of them, so the O(h²) term is visible.
        auto loss = [](const RasterImage& img) {
            double s = 0.0;
            for (double v : img.data)
                s += std::sin(3.0 * v);
            return s;
        };
        const auto g1 = numeric_gradient(doc, params, {24, 24}, loss, 0.02).flatten();
        const auto g2 = numeric_gradient(doc, params, {24, 24}, loss, 0.01).flatten();
        const auto g3 = numeric_gradient(doc, params, {24, 24}, loss, 0.005).flatten();
        // fill entries are the last three of each region block
        const std::size_t block = g1.size() / 2;
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t i = (r + 1) * block - 3 + c;
                const double d12 = std::abs(g1[i] - g2[i]);
                const double d23 = std::abs(g2[i] - g3[i]);
                if (d12 > 1e-9)
                    CHECK(d23 / d12 == doctest::Approx(0.25).epsilon(0.05));
            }
    }
    CHECK_THROWS_AS(numeric_gradient(doc, params, {24, 24}, [](const RasterImage&) { return 0.0; }, 0.0), DomainError);
}

TEST_CASE("evaluate fuses recon and mask terms") {
    const RenderParams params = crisp();
    std::mt19937_64 rng(21);
    const VectorDocument doc = layervec::testing::random_scene(rng, 24, 24, 3);
    RasterImage target(24, 24, 3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (double& v : target.data)
        v = unit(rng);
    std::vector<BinaryMask> masks;
    for (int i = 0; i < 3; ++i) {
        BinaryMask m(24, 24);
        for (int y = 4 + i; y < 14 + i; ++y)
            for (int x = 3 * i; x < 12 + 3 * i; ++x)
                m.at(x, y) = 1;
        masks.push_back(m);
    }
    std::vector<const BinaryMask*> slots{&masks[0], nullptr, &masks[2]};
    StructureTerms terms{&target, 0.7, slots, 1.3};
    const Evaluation ev = evaluate(doc, params, {24, 24}, terms);

    // Brute-force values of both terms.
    const RasterImage img = render(doc, params);
    double recon = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i)
        recon += std::abs(img.data[i] - target.data[i]);
    recon /= static_cast<double>(img.data.size());
    CHECK(ev.recon == doctest::Approx(recon).epsilon(1e-12));
    for (std::size_t r : {0u, 2u}) {
        const RasterImage cov = region_coverage(doc, doc.roots[r], params, {24, 24});
        double m = 0.0;
        for (std::size_t i = 0; i < cov.data.size(); ++i)
            m += std::abs(cov.data[i] - masks[r].data[i]);
        CHECK(ev.mask_loss[r] == doctest::Approx(m / cov.data.size()).epsilon(1e-12));
    }
    CHECK(ev.mask_loss[1] == 0.0);

    auto total = [&](const VectorDocument& d) {
        const Evaluation e = evaluate(d, params, {24, 24}, terms);
        return 0.7 * e.recon + 1.3 * (e.mask_loss[0] + e.mask_loss[2]);
    };
    // finite differences of the fused objective on the fill parameters
    VectorDocument work = doc;
    auto theta = pack_parameters(doc);
    const auto analytic = ev.gradient.flatten();
    std::size_t agree = 0, checked = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        if (std::abs(analytic[i]) < 1e-6)
            continue;
        const double keep = theta[i];
        theta[i] = keep + 1e-4;
        unpack_parameters(work, theta);
        const double up = total(work);
        theta[i] = keep - 1e-4;
        unpack_parameters(work, theta);
        const double down = total(work);
        theta[i] = keep;
        ++checked;
        // L1 kinks make a few entries disagree; most must match.
        if (std::abs((up - down) / 2e-4 - analytic[i]) <= 1e-2 * std::abs(analytic[i]) + 1e-6)
            ++agree;
    }
    CHECK(checked > 20);
    CHECK(static_cast<double>(agree) >= 0.8 * static_cast<double>(checked));
}

TEST_CASE("render and backward are bitwise identical across thread counts") {
    std::mt19937_64 rng(8);
    const VectorDocument doc = layervec::testing::random_scene(rng, 96, 80, 5);
    RenderParams one;
    one.threads = 1;
    RenderParams four = one;
    four.threads = 4;
    CHECK(render(doc, one).data == render(doc, four).data);
    RasterImage w(96, 80, 3, 0.25);
    CHECK(backward(doc, one, {96, 80}, w).flatten() == backward(doc, four, {96, 80}, w).flatten());
}

TEST_CASE("render throughput: 500 regions at 512x512") {
    std::mt19937_64 rng(5);
    VectorDocument doc = layervec::testing::random_scene(rng, 512, 512, 500);
    // shrink each shape and scatter it; one offset per region
    for (auto& r : doc.roots) {
        const Point2 offset{static_cast<double>(rng() % 384) - 192, static_cast<double>(rng() % 384) - 192};
        for (auto& p : r.path.points())
            p = Point2{256, 256} + 0.25 * (p - Point2{256, 256}) + offset;
    }
    RenderParams params;
    params.supersample = 1;
    render(doc, params); // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    render(doc, params);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    MESSAGE("500-region 512x512 render: " << ms << " ms on " << resolve_threads(0) << " thread(s)");
    CHECK(ms < 100.0 * 4.0 / std::min(4, resolve_threads(0)));
}
