#pragma once

#include "layervec/image.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace layervec::geometry {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    constexpr Point2& operator+=(Point2 o) { x += o.x; y += o.y; return *this; }
    constexpr Point2& operator-=(Point2 o) { x -= o.x; y -= o.y; return *this; }
    constexpr Point2& operator*=(double s) { x *= s; y *= s; return *this; }
    friend constexpr Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
    friend constexpr Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
    friend constexpr Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
    friend constexpr Point2 operator*(Point2 p, double s) { return {s * p.x, s * p.y}; }
    friend constexpr bool operator==(Point2, Point2) = default;
};

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline double distance(Point2 a, Point2 b) { return norm(a - b); }
inline double squared_distance(Point2 a, Point2 b) {
    const Point2 d = a - b;
    return d.x * d.x + d.y * d.y;
}
inline bool is_finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

// Distance from p to the closed segment [a, b].
double point_segment_distance(Point2 p, Point2 a, Point2 b);

struct CubicBezier {
    Point2 p0, p1, p2, p3;

    std::array<Point2, 4> points() const { return {p0, p1, p2, p3}; }
    friend bool operator==(const CubicBezier&, const CubicBezier&) = default;
};

// Bernstein weights of a cubic at t.
std::array<double, 4> bernstein3(double t);

// Closed chain of cubic segments stored as 3L shared control points:
// segment i uses points [3i, 3i+1, 3i+2, 3i+3 mod 3L], so C0 continuity and
// closure hold by construction.
class BezierPath {
public:
    BezierPath() = default;
    explicit BezierPath(std::vector<Point2> control_points);

    // Throws FormatError unless consecutive segments meet (1e-9) and the last
    // segment returns to the first start point.
    static BezierPath from_segments(const std::vector<CubicBezier>& segments);

    std::size_t segment_count() const { return points_.size() / 3; }
    bool empty() const { return points_.empty(); }
    CubicBezier segment(std::size_t i) const;
    std::vector<CubicBezier> segments() const;

    const std::vector<Point2>& points() const { return points_; }
    std::vector<Point2>& points() { return points_; }

    // Index of the control point used as P_k of segment i.
    std::size_t point_index(std::size_t segment, int k) const {
        return (3 * segment + static_cast<std::size_t>(k)) % points_.size();
    }

    friend bool operator==(const BezierPath&, const BezierPath&) = default;

private:
    std::vector<Point2> points_;
};

struct Polyline {
    std::vector<Point2> points;
    bool closed = false;

    std::size_t size() const { return points.size(); }
    friend bool operator==(const Polyline&, const Polyline&) = default;
};

// Σ_j C(3,j)(1−t)^{3−j} t^j P_j; throws DomainError for t outside [0,1].
Point2 eval_cubic_bezier(const CubicBezier& curve, double t);

// Number of uniform parameter steps that keep a cubic within `tol` of its
// chords. Uses |B − chord| ≤ ¾·max|Δ²P|/n².
int flatten_steps(const CubicBezier& curve, double tol);

// Where a flattened vertex came from: the curve segment and its parameter.
struct VertexOrigin {
    std::size_t segment = 0;
    double t = 0.0;
};

struct FlattenedPath {
    Polyline line;
    std::vector<VertexOrigin> origins; // parallel to line.points
};

// Closed polyline whose chordal deviation from the path is ≤ tol. Each
// segment is split into flatten_steps() uniform parameter steps. Throws
// DomainError when every control point coincides.
Polyline flatten_path(const BezierPath& path, double tol);
FlattenedPath flatten_path_with_origins(const BezierPath& path, double tol);

// One foreground component (4-connectivity) with its outer boundary and
// holes, vertices on pixel corners. Outer boundaries run with positive
// shoelace area in y-down image coordinates; holes run negative.
struct TracedComponent {
    Polyline outer;
    std::vector<Polyline> holes;
    std::size_t pixel_count = 0;
};

std::vector<TracedComponent> trace_mask_components(const BinaryMask& mask);

// Outer boundaries only, one per component, ordered by first pixel in
// row-major scan.
std::vector<Polyline> trace_mask_boundary(const BinaryMask& mask);

// Recursive Douglas-Peucker with segment distance. Closed input is anchored
// at its longest vertex pair (lowest index pair on ties) and both chains are
// simplified independently.
Polyline douglas_peucker(const Polyline& line, double eps);
// Indices of the vertices douglas_peucker keeps, ascending.
std::vector<std::size_t> douglas_peucker_indices(const Polyline& line, double eps);

// Non-adjacent vertex pair with maximum distance, smallest (i, j) on ties.
std::pair<std::size_t, std::size_t> longest_diagonal(const Polyline& poly);

// Splits a closed polyline (≥4 vertices) at its longest diagonal into the
// chains i..j and j..i (wrapping). Both chains include both endpoints.
std::pair<Polyline, Polyline> split_at_longest_diagonal(const Polyline& poly);

struct FitOptions {
    int max_segments = 8;
    double tolerance = 1.0; // max point error, canvas units
};

// Least-squares cubic chain with chord-length parameterization and
// Newton reparameterization, greedily split at the worst point until every
// piece is within tolerance or the segment budget is spent. Closed input is
// fitted as a loop from points[0] back to points[0].
std::vector<CubicBezier> fit_bezier_chain(const Polyline& line, const FitOptions& opts = {});

double polygon_signed_area(const std::vector<Point2>& pts);

// Absolute shoelace area. Throws DomainError for open polylines.
double polygon_area(const Polyline& poly);

struct Box {
    double min_x, min_y, max_x, max_y;
};
Box bounding_box(const std::vector<Point2>& pts);

} // namespace layervec::geometry
