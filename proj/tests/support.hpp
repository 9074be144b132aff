#pragma once

#include "layervec/document.hpp"
#include "layervec/geometry.hpp"

#include <cmath>
#include <random>
#include <string>

namespace layervec::testing {

using geometry::Point2;

// Closed 4-segment approximation of an axis-aligned ellipse.
inline geometry::BezierPath ellipse_path(Point2 c, double rx, double ry) {
    const double k = 0.5522847498307936;
    return geometry::BezierPath({
        {c.x + rx, c.y}, {c.x + rx, c.y + k * ry}, {c.x + k * rx, c.y + ry},
        {c.x, c.y + ry}, {c.x - k * rx, c.y + ry}, {c.x - rx, c.y + k * ry},
        {c.x - rx, c.y}, {c.x - rx, c.y - k * ry}, {c.x - k * rx, c.y - ry},
        {c.x, c.y - ry}, {c.x + k * rx, c.y - ry}, {c.x + rx, c.y - k * ry},
    });
}

// Rectangle whose sides are straight cubics with inner points at thirds.
inline geometry::BezierPath rect_path(double x0, double y0, double x1, double y1) {
    const Point2 c[4] = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
    std::vector<Point2> pts;
    for (int i = 0; i < 4; ++i) {
        const Point2 a = c[i];
        const Point2 b = c[(i + 1) % 4];
        pts.push_back(a);
        pts.push_back(a + (1.0 / 3.0) * (b - a));
        pts.push_back(a + (2.0 / 3.0) * (b - a));
    }
    return geometry::BezierPath(std::move(pts));
}

inline RegionNode make_region(std::string id, int layer, geometry::BezierPath path, Color fill) {
    RegionNode r;
    r.id = std::move(id);
    r.layer = layer;
    r.path = std::move(path);
    r.fill = fill;
    return r;
}

} // namespace layervec::testing

namespace layervec::testing {

// Random scene of `regions` jittered ellipses/rectangles on a w×h canvas.
inline VectorDocument random_scene(std::mt19937_64& rng, int w, int h, int regions) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    VectorDocument doc;
    doc.width = w;
    doc.height = h;
    for (int i = 0; i < regions; ++i) {
        const Point2 c{w * (0.2 + 0.6 * unit(rng)), h * (0.2 + 0.6 * unit(rng))};
        const double rx = w * (0.1 + 0.25 * unit(rng));
        const double ry = h * (0.1 + 0.25 * unit(rng));
        geometry::BezierPath p = (i % 2 == 0) ? ellipse_path(c, rx, ry)
                                              : rect_path(c.x - rx, c.y - ry, c.x + rx, c.y + ry);
        for (auto& q : p.points())
            q += Point2{(unit(rng) - 0.5) * 3.0, (unit(rng) - 0.5) * 3.0};
        doc.roots.push_back(make_region("r" + std::to_string(i), 1, std::move(p),
                                        {unit(rng), unit(rng), unit(rng)}));
    }
    return doc;
}

// Random hierarchy: 1–4 roots, up to two nested levels, occasional holes.
inline RegionNode random_region(std::mt19937_64& rng, const std::string& id, int layer, int depth, int w) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Point2 c{w * (0.2 + 0.6 * u(rng)), w * (0.2 + 0.6 * u(rng))};
    const double r = w * (0.05 + 0.2 * u(rng));
    auto path = (u(rng) < 0.5) ? ellipse_path(c, r, 0.7 * r) : rect_path(c.x - r, c.y - r, c.x + r, c.y + 0.5 * r);
    for (auto& p : path.points())
        p += Point2{u(rng) - 0.5, u(rng) - 0.5};
    RegionNode n = make_region(id, layer, std::move(path), {u(rng), u(rng), u(rng)});
    if (u(rng) < 0.3)
        n.subpaths.push_back(ellipse_path(c, 0.3 * r, 0.2 * r));
    if (u(rng) < 0.5)
        n.source_mask_id = "m" + id;
    if (depth > 0) {
        const int kids = static_cast<int>(u(rng) * 3);
        for (int k = 0; k < kids; ++k)
            n.children.push_back(random_region(rng, id + "." + std::to_string(k), layer + 1, depth - 1, w));
    }
    return n;
}

inline VectorDocument random_document(std::mt19937_64& rng) {
    VectorDocument d;
    d.width = 64 + static_cast<int>(rng() % 448);
    d.height = 64 + static_cast<int>(rng() % 448);
    const int roots = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < roots; ++i)
        d.roots.push_back(random_region(rng, "r" + std::to_string(i), 1, 2, d.width));
    return d;
}

} // namespace layervec::testing
