#include "layervec/geometry.hpp"

#include "layervec/error.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>

namespace layervec::geometry {

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
    const Point2 ab = b - a;
    const double len2 = dot(ab, ab);
    if (len2 == 0.0)
        return distance(p, a);
    const double u = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
    return distance(p, a + u * ab);
}

std::array<double, 4> bernstein3(double t) {
    const double s = 1.0 - t;
    return {s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t};
}

BezierPath::BezierPath(std::vector<Point2> control_points) : points_(std::move(control_points)) {
    if (points_.size() % 3 != 0)
        throw FormatError("BezierPath: control point count must be a multiple of 3");
}

BezierPath BezierPath::from_segments(const std::vector<CubicBezier>& segments) {
    std::vector<Point2> pts;
    pts.reserve(segments.size() * 3);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        const CubicBezier& s = segments[i];
        const CubicBezier& next = segments[(i + 1) % segments.size()];
        if (distance(s.p3, next.p0) > 1e-9)
            throw FormatError("BezierPath: segment " + std::to_string(i) + " does not meet its successor");
        pts.insert(pts.end(), {s.p0, s.p1, s.p2});
    }
    return BezierPath(std::move(pts));
}

CubicBezier BezierPath::segment(std::size_t i) const {
    return {points_[point_index(i, 0)], points_[point_index(i, 1)], points_[point_index(i, 2)],
            points_[point_index(i, 3)]};
}

std::vector<CubicBezier> BezierPath::segments() const {
    std::vector<CubicBezier> out;
    out.reserve(segment_count());
    for (std::size_t i = 0; i < segment_count(); ++i)
        out.push_back(segment(i));
    return out;
}

Point2 eval_cubic_bezier(const CubicBezier& c, double t) {
    if (!(t >= 0.0 && t <= 1.0))
        throw DomainError("eval_cubic_bezier: t must lie in [0,1]");
    const auto b = bernstein3(t);
    return b[0] * c.p0 + b[1] * c.p1 + b[2] * c.p2 + b[3] * c.p3;
}

int flatten_steps(const CubicBezier& c, double tol) {
    const double d0 = norm(c.p0 - 2.0 * c.p1 + c.p2);
    const double d1 = norm(c.p1 - 2.0 * c.p2 + c.p3);
    const double bound = 0.75 * std::max(d0, d1);
    if (bound <= tol)
        return 1;
    const double n = std::ceil(std::sqrt(bound / tol));
    return static_cast<int>(std::min(n, 4096.0));
}

FlattenedPath flatten_path_with_origins(const BezierPath& path, double tol) {
    if (!(tol > 0.0))
        throw DomainError("flatten_path: tolerance must be positive");
    if (path.empty())
        throw DomainError("flatten_path: empty path");
    const auto& pts = path.points();
    if (std::all_of(pts.begin(), pts.end(), [&](Point2 p) { return p == pts.front(); }))
        throw DomainError("flatten_path: degenerate path (single point)");

    FlattenedPath out;
    out.line.closed = true;
    for (std::size_t s = 0; s < path.segment_count(); ++s) {
        const CubicBezier c = path.segment(s);
        const int n = flatten_steps(c, tol);
        for (int k = 0; k < n; ++k) {
            const double t = static_cast<double>(k) / n;
            const auto b = bernstein3(t);
            out.line.points.push_back(b[0] * c.p0 + b[1] * c.p1 + b[2] * c.p2 + b[3] * c.p3);
            out.origins.push_back({s, t});
        }
    }
    return out;
}

Polyline flatten_path(const BezierPath& path, double tol) {
    return flatten_path_with_origins(path, tol).line;
}

// --- boundary tracing ------------------------------------------------------

namespace {

// Directions of boundary edges: 0 = +x, 1 = +y, 2 = −x, 3 = −y.
constexpr int kDx[4] = {1, 0, -1, 0};
constexpr int kDy[4] = {0, 1, 0, -1};

struct BoundaryEdge {
    int x0, y0; // start corner
    int dir;
    std::int32_t pixel;
};

// Drops vertices where the direction does not change and rotates the loop
// to start at its smallest (y, x) corner.
Polyline compress_loop(const std::vector<Point2>& corners) {
    std::vector<Point2> kept;
    const std::size_t n = corners.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Point2 prev = corners[(i + n - 1) % n];
        const Point2 cur = corners[i];
        const Point2 next = corners[(i + 1) % n];
        if (cross(cur - prev, next - cur) != 0.0 || dot(cur - prev, next - cur) < 0.0)
            kept.push_back(cur);
    }
    auto first = std::min_element(kept.begin(), kept.end(), [](Point2 a, Point2 b) {
        return a.y < b.y || (a.y == b.y && a.x < b.x);
    });
    std::rotate(kept.begin(), first, kept.end());
    return Polyline{std::move(kept), true};
}

} // namespace

std::vector<TracedComponent> trace_mask_components(const BinaryMask& mask) {
    const int w = mask.width;
    const int h = mask.height;
    std::vector<std::int32_t> label(static_cast<std::size_t>(w) * h, -1);
    std::vector<TracedComponent> comps;

    std::vector<std::int32_t> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * w + x;
            if (!mask.data[idx] || label[idx] >= 0)
                continue;
            const auto id = static_cast<std::int32_t>(comps.size());
            comps.emplace_back();
            label[idx] = id;
            stack.push_back(static_cast<std::int32_t>(idx));
            while (!stack.empty()) {
                const std::int32_t p = stack.back();
                stack.pop_back();
                ++comps[id].pixel_count;
                const int px = p % w;
                const int py = p / w;
                for (int d = 0; d < 4; ++d) {
                    const int nx = px + kDx[d];
                    const int ny = py + kDy[d];
                    if (!mask.test(nx, ny))
                        continue;
                    const std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
                    if (label[nidx] < 0) {
                        label[nidx] = id;
                        stack.push_back(static_cast<std::int32_t>(nidx));
                    }
                }
            }
        }
    if (comps.empty())
        return comps;

    // Directed boundary edges keep the foreground on their right in y-down
    // coordinates; each corner has at most one outgoing edge per direction.
    const int vw = w + 1;
    std::vector<BoundaryEdge> edges;
    std::vector<std::int32_t> outgoing(static_cast<std::size_t>(vw) * (h + 1) * 4, -1);
    auto add_edge = [&](int x0, int y0, int dir, std::int32_t pixel) {
        outgoing[(static_cast<std::size_t>(y0) * vw + x0) * 4 + dir] = static_cast<std::int32_t>(edges.size());
        edges.push_back({x0, y0, dir, pixel});
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y))
                continue;
            const auto pix = static_cast<std::int32_t>(y * w + x);
            if (!mask.test(x, y - 1))
                add_edge(x, y, 0, pix);
            if (!mask.test(x + 1, y))
                add_edge(x + 1, y, 1, pix);
            if (!mask.test(x, y + 1))
                add_edge(x + 1, y + 1, 2, pix);
            if (!mask.test(x - 1, y))
                add_edge(x, y + 1, 3, pix);
        }

    std::vector<char> used(edges.size(), 0);
    std::vector<Point2> corners;
    for (std::size_t start = 0; start < edges.size(); ++start) {
        if (used[start])
            continue;
        corners.clear();
        std::size_t e = start;
        while (!used[e]) {
            used[e] = 1;
            const BoundaryEdge& cur = edges[e];
            corners.push_back({static_cast<double>(cur.x0), static_cast<double>(cur.y0)});
            const int ex = cur.x0 + kDx[cur.dir];
            const int ey = cur.y0 + kDy[cur.dir];
            const std::size_t base = (static_cast<std::size_t>(ey) * vw + ex) * 4;
            std::int32_t next = -1;
            // At a saddle two edges leave the corner; staying on the same
            // pixel keeps diagonal neighbours apart (4-connectivity).
            for (int d = 0; d < 4; ++d) {
                const std::int32_t cand = outgoing[base + d];
                if (cand < 0)
                    continue;
                if (next < 0 || edges[cand].pixel == cur.pixel)
                    next = cand;
            }
            if (next < 0)
                break; // unreachable for well-formed boundaries
            e = static_cast<std::size_t>(next);
        }
        Polyline loop = compress_loop(corners);
        TracedComponent& comp = comps[label[edges[start].pixel]];
        if (polygon_signed_area(loop.points) > 0.0)
            comp.outer = std::move(loop);
        else
            comp.holes.push_back(std::move(loop));
    }
    return comps;
}

std::vector<Polyline> trace_mask_boundary(const BinaryMask& mask) {
    std::vector<Polyline> out;
    for (auto& c : trace_mask_components(mask))
        out.push_back(std::move(c.outer));
    return out;
}

// --- simplification --------------------------------------------------------

namespace {

std::pair<std::size_t, std::size_t> farthest_pair(const std::vector<Point2>& pts, bool skip_adjacent) {
    const std::size_t n = pts.size();
    double best = -1.0;
    std::pair<std::size_t, std::size_t> arg{0, 0};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (skip_adjacent && (j == i + 1 || (i == 0 && j == n - 1)))
                continue;
            const double d = squared_distance(pts[i], pts[j]);
            if (d > best) {
                best = d;
                arg = {i, j};
            }
        }
    return arg;
}

// Marks kept indices of the chain idx[first..last] (inclusive) in `keep`.
void dp_mark(const std::vector<Point2>& pts, const std::vector<std::size_t>& idx, double eps,
             std::vector<char>& keep) {
    if (idx.size() < 2)
        return;
    std::vector<std::pair<std::size_t, std::size_t>> work{{0, idx.size() - 1}};
    keep[idx.front()] = 1;
    keep[idx.back()] = 1;
    while (!work.empty()) {
        const auto [lo, hi] = work.back();
        work.pop_back();
        if (hi <= lo + 1)
            continue;
        double worst = -1.0;
        std::size_t arg = lo;
        for (std::size_t k = lo + 1; k < hi; ++k) {
            const double d = point_segment_distance(pts[idx[k]], pts[idx[lo]], pts[idx[hi]]);
            if (d > worst) {
                worst = d;
                arg = k;
            }
        }
        if (worst > eps) {
            keep[idx[arg]] = 1;
            work.push_back({arg, hi});
            work.push_back({lo, arg});
        }
    }
}

} // namespace

Polyline douglas_peucker(const Polyline& line, double eps) {
    Polyline out{{}, line.closed};
    for (std::size_t i : douglas_peucker_indices(line, eps))
        out.points.push_back(line.points[i]);
    return out;
}

std::vector<std::size_t> douglas_peucker_indices(const Polyline& line, double eps) {
    if (eps < 0.0)
        throw DomainError("douglas_peucker: eps must be non-negative");
    const std::size_t n = line.points.size();
    if (n < 2)
        throw DomainError("douglas_peucker: need at least two points");
    std::vector<std::size_t> kept;
    if (n < 3) {
        for (std::size_t i = 0; i < n; ++i)
            kept.push_back(i);
        return kept;
    }

    std::vector<char> keep(n, 0);
    if (!line.closed) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i)
            idx[i] = i;
        dp_mark(line.points, idx, eps, keep);
    } else {
        const auto [a, b] = farthest_pair(line.points, false);
        std::vector<std::size_t> first, second;
        for (std::size_t i = a; i <= b; ++i)
            first.push_back(i);
        for (std::size_t i = b; i != a; i = (i + 1) % n)
            second.push_back(i);
        second.push_back(a);
        dp_mark(line.points, first, eps, keep);
        dp_mark(line.points, second, eps, keep);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (keep[i])
            kept.push_back(i);
    return kept;
}

std::pair<std::size_t, std::size_t> longest_diagonal(const Polyline& poly) {
    if (!poly.closed || poly.points.size() < 4)
        throw DomainError("split_at_longest_diagonal: need a closed polyline with at least 4 vertices");
    return farthest_pair(poly.points, true);
}

std::pair<Polyline, Polyline> split_at_longest_diagonal(const Polyline& poly) {
    const auto [i, j] = longest_diagonal(poly);
    const std::size_t n = poly.points.size();
    Polyline a{{}, false}, b{{}, false};
    for (std::size_t k = i; k <= j; ++k)
        a.points.push_back(poly.points[k]);
    for (std::size_t k = j; k != i; k = (k + 1) % n)
        b.points.push_back(poly.points[k]);
    b.points.push_back(poly.points[i]);
    return {std::move(a), std::move(b)};
}

// --- curve fitting ---------------------------------------------------------

namespace {

struct FitPiece {
    std::size_t first = 0;
    std::size_t last = 0;
    CubicBezier curve;
    double error = 0.0;
    std::size_t worst = 0;
};

Point2 eval_unchecked(const CubicBezier& c, double t) {
    const auto b = bernstein3(t);
    return b[0] * c.p0 + b[1] * c.p1 + b[2] * c.p2 + b[3] * c.p3;
}

Point2 derivative(const CubicBezier& c, double t) {
    const double s = 1.0 - t;
    return 3.0 * s * s * (c.p1 - c.p0) + 6.0 * s * t * (c.p2 - c.p1) + 3.0 * t * t * (c.p3 - c.p2);
}

Point2 second_derivative(const CubicBezier& c, double t) {
    return 6.0 * (1.0 - t) * (c.p2 - 2.0 * c.p1 + c.p0) + 6.0 * t * (c.p3 - 2.0 * c.p2 + c.p1);
}

CubicBezier solve_inner_points(const std::vector<Point2>& pts, std::size_t first, std::size_t last,
                               const std::vector<double>& u) {
    const Point2 p0 = pts[first];
    const Point2 p3 = pts[last];
    const Point2 t1 = p0 + (1.0 / 3.0) * (p3 - p0);
    const Point2 t2 = p0 + (2.0 / 3.0) * (p3 - p0);
    // Small ridge toward the chord thirds keeps the 2×2 system regular for
    // pieces with a single interior point.
    const double ridge = 1e-9;
    double a11 = ridge, a12 = 0.0, a22 = ridge;
    Point2 r1 = ridge * t1, r2 = ridge * t2;
    for (std::size_t k = first; k <= last; ++k) {
        const auto b = bernstein3(u[k - first]);
        const Point2 r = pts[k] - b[0] * p0 - b[3] * p3;
        a11 += b[1] * b[1];
        a12 += b[1] * b[2];
        a22 += b[2] * b[2];
        r1 += b[1] * r;
        r2 += b[2] * r;
    }
    const double det = a11 * a22 - a12 * a12;
    if (std::abs(det) < 1e-18)
        return {p0, t1, t2, p3};
    const Point2 p1 = (1.0 / det) * (a22 * r1 - a12 * r2);
    const Point2 p2 = (1.0 / det) * (a11 * r2 - a12 * r1);
    return {p0, p1, p2, p3};
}

void measure(const std::vector<Point2>& pts, FitPiece& piece, const std::vector<double>& u) {
    piece.error = 0.0;
    piece.worst = piece.first;
    for (std::size_t k = piece.first; k <= piece.last; ++k) {
        const double d = distance(eval_unchecked(piece.curve, u[k - piece.first]), pts[k]);
        if (d > piece.error) {
            piece.error = d;
            piece.worst = k;
        }
    }
}

FitPiece fit_piece(const std::vector<Point2>& pts, std::size_t first, std::size_t last) {
    FitPiece piece;
    piece.first = first;
    piece.last = last;
    const Point2 p0 = pts[first];
    const Point2 p3 = pts[last];
    const std::size_t n = last - first + 1;

    std::vector<double> u(n, 0.0);
    for (std::size_t k = 1; k < n; ++k)
        u[k] = u[k - 1] + distance(pts[first + k], pts[first + k - 1]);
    const double total = u.back();
    if (n == 2 || total == 0.0) {
        piece.curve = {p0, p0 + (1.0 / 3.0) * (p3 - p0), p0 + (2.0 / 3.0) * (p3 - p0), p3};
        for (std::size_t k = 0; k < n; ++k)
            u[k] = n == 1 ? 0.0 : static_cast<double>(k) / (n - 1);
        measure(pts, piece, u);
        return piece;
    }
    for (double& v : u)
        v /= total;

    piece.curve = solve_inner_points(pts, first, last, u);
    measure(pts, piece, u);
    for (int iter = 0; iter < 64 && piece.error > 1e-10; ++iter) {
        std::vector<double> nu = u;
        for (std::size_t k = 1; k + 1 < n; ++k) {
            const Point2 d = eval_unchecked(piece.curve, u[k]) - pts[first + k];
            const Point2 d1 = derivative(piece.curve, u[k]);
            const Point2 d2 = second_derivative(piece.curve, u[k]);
            const double denom = dot(d1, d1) + dot(d, d2);
            if (std::abs(denom) > 1e-12)
                nu[k] = std::clamp(u[k] - dot(d, d1) / denom, 0.0, 1.0);
        }
        FitPiece trial = piece;
        trial.curve = solve_inner_points(pts, first, last, nu);
        measure(pts, trial, nu);
        if (!(trial.error < piece.error * (1.0 - 1e-9)))
            break;
        piece = trial;
        u = std::move(nu);
    }
    return piece;
}

} // namespace

std::vector<CubicBezier> fit_bezier_chain(const Polyline& line, const FitOptions& opts) {
    if (opts.max_segments < 1 || opts.max_segments > 8)
        throw DomainError("fit_bezier_chain: max_segments must lie in [1,8]");
    std::vector<Point2> pts = line.points;
    if (pts.size() < 2)
        throw DomainError("fit_bezier_chain: need at least two points");
    if (std::all_of(pts.begin(), pts.end(), [&](Point2 p) { return p == pts.front(); }))
        throw DomainError("fit_bezier_chain: degenerate input (all points equal)");
    if (line.closed)
        pts.push_back(pts.front());

    std::vector<FitPiece> pieces{fit_piece(pts, 0, pts.size() - 1)};
    while (static_cast<int>(pieces.size()) < opts.max_segments) {
        std::size_t pick = pieces.size();
        for (std::size_t i = 0; i < pieces.size(); ++i) {
            const FitPiece& p = pieces[i];
            if (p.error <= opts.tolerance || p.last - p.first < 2)
                continue;
            if (pick == pieces.size() || p.error > pieces[pick].error)
                pick = i;
        }
        if (pick == pieces.size())
            break;
        const FitPiece old = pieces[pick];
        const std::size_t split = std::clamp(old.worst, old.first + 1, old.last - 1);
        pieces[pick] = fit_piece(pts, old.first, split);
        pieces.insert(pieces.begin() + static_cast<std::ptrdiff_t>(pick) + 1, fit_piece(pts, split, old.last));
    }

    std::vector<CubicBezier> out;
    out.reserve(pieces.size());
    for (const FitPiece& p : pieces)
        out.push_back(p.curve);
    return out;
}

double polygon_signed_area(const std::vector<Point2>& pts) {
    double s = 0.0;
    const std::size_t n = pts.size();
    for (std::size_t i = 0; i < n; ++i)
        s += cross(pts[i], pts[(i + 1) % n]);
    return 0.5 * s;
}

double polygon_area(const Polyline& poly) {
    if (!poly.closed)
        throw DomainError("polygon_area: polyline is open");
    return std::abs(polygon_signed_area(poly.points));
}

Box bounding_box(const std::vector<Point2>& pts) {
    Box b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (Point2 p : pts) {
        b.min_x = std::min(b.min_x, p.x);
        b.min_y = std::min(b.min_y, p.y);
        b.max_x = std::max(b.max_x, p.x);
        b.max_y = std::max(b.max_y, p.y);
    }
    return b;
}

} // namespace layervec::geometry
