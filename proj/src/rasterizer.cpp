#include "layervec/rasterizer.hpp"

#include "layervec/error.hpp"
#include "layervec/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace layervec::raster {

using geometry::Point2;

namespace {

constexpr double kCutoff = 4.0;

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

const double kLogisticLo = logistic(-kCutoff);
const double kLogisticScale = 1.0 / (logistic(kCutoff) - logistic(-kCutoff));

// dc/d(sd)
double soft_coverage_slope(double sd, double bandwidth) {
    const double x = sd / bandwidth;
    if (x >= kCutoff || x <= -kCutoff)
        return 0.0;
    const double s = logistic(x);
    return s * (1.0 - s) * kLogisticScale / bandwidth;
}

struct VertexWeights {
    std::array<std::uint32_t, 4> point;
    std::array<double, 4> weight;
};

// One region flattened into pixel coordinates of the output raster.
struct PreparedRegion {
    std::size_t preorder = 0;
    Color fill{};
    std::vector<Point2> verts;
    std::vector<VertexWeights> weights;
    std::vector<std::array<std::uint32_t, 2>> edges;
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0; // grown by the band
    // Even-odd crossings per sample row, rows [row0, row0 + row_start.size()-1).
    int row0 = 0;
    std::vector<std::uint32_t> row_start;
    std::vector<double> xs;
};

struct Geometry {
    int width = 0;
    int height = 0;
    int ss = 1;
    double band = 0.0;
    double scale_x = 1.0;
    double scale_y = 1.0;
};

PreparedRegion prepare(const RegionNode& node, std::size_t preorder, const Geometry& g,
                       const RenderParams& params) {
    PreparedRegion r;
    r.preorder = preorder;
    r.fill = node.fill;

    std::uint32_t offset = 0;
    auto add_loop = [&](const geometry::BezierPath& path) {
        const std::uint32_t base = offset;
        offset += static_cast<std::uint32_t>(path.points().size());
        if (path.empty())
            return;
        geometry::FlattenedPath flat;
        try {
            // Tolerance is specified in output pixels.
            geometry::BezierPath scaled(path.points());
            for (auto& p : scaled.points())
                p = {p.x * g.scale_x, p.y * g.scale_y};
            flat = geometry::flatten_path_with_origins(scaled, params.flatten_tolerance);
        } catch (const DomainError&) {
            return; // single-point path has no area
        }
        const auto first = static_cast<std::uint32_t>(r.verts.size());
        const std::size_t n = flat.line.points.size();
        for (std::size_t i = 0; i < n; ++i) {
            r.verts.push_back(flat.line.points[i]);
            const auto& o = flat.origins[i];
            const auto b = geometry::bernstein3(o.t);
            VertexWeights vw{};
            for (int k = 0; k < 4; ++k) {
                vw.point[k] = base + static_cast<std::uint32_t>(path.point_index(o.segment, k));
                vw.weight[k] = b[k];
            }
            r.weights.push_back(vw);
            r.edges.push_back({first + static_cast<std::uint32_t>(i),
                               first + static_cast<std::uint32_t>((i + 1) % n)});
        }
    };
    add_loop(node.path);
    for (const auto& s : node.subpaths)
        add_loop(s);
    if (r.verts.empty())
        return r;

    const auto box = geometry::bounding_box(r.verts);
    r.min_x = box.min_x - g.band;
    r.min_y = box.min_y - g.band;
    r.max_x = box.max_x + g.band;
    r.max_y = box.max_y + g.band;

    // Sample row R sits at y = (R + 0.5) / ss.
    const int total_rows = g.height * g.ss;
    const int rlo = std::max(0, static_cast<int>(std::ceil(box.min_y * g.ss - 0.5)));
    const int rhi = std::min(total_rows, static_cast<int>(std::ceil(box.max_y * g.ss - 0.5)));
    r.row0 = rlo;
    const int rows = std::max(0, rhi - rlo);
    std::vector<std::vector<double>> per_row(static_cast<std::size_t>(rows));
    for (const auto& e : r.edges) {
        const Point2 a = r.verts[e[0]];
        const Point2 b = r.verts[e[1]];
        if (a.y == b.y)
            continue;
        const double y0 = std::min(a.y, b.y);
        const double y1 = std::max(a.y, b.y);
        const int from = std::max(rlo, static_cast<int>(std::ceil(y0 * g.ss - 0.5)));
        const int to = std::min(rhi, static_cast<int>(std::ceil(y1 * g.ss - 0.5)));
        for (int row = from; row < to; ++row) {
            const double y = (row + 0.5) / g.ss;
            if (y < y0 || y >= y1)
                continue;
            per_row[static_cast<std::size_t>(row - rlo)].push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
    }
    r.row_start.resize(static_cast<std::size_t>(rows) + 1, 0);
    for (int i = 0; i < rows; ++i) {
        auto& v = per_row[static_cast<std::size_t>(i)];
        std::sort(v.begin(), v.end());
        r.row_start[static_cast<std::size_t>(i) + 1] = r.row_start[static_cast<std::size_t>(i)] + static_cast<std::uint32_t>(v.size());
        r.xs.insert(r.xs.end(), v.begin(), v.end());
    }
    return r;
}

struct Entry {
    std::uint32_t region;
    std::uint32_t edge_begin;
    std::uint32_t edge_end;
};

struct Scene {
    Geometry geo;
    int tile = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<PreparedRegion> regions; // paint order
    std::vector<std::vector<Entry>> entries;
    std::vector<std::vector<std::uint32_t>> tile_edges;
    std::size_t preorder_count = 0;
};

Scene build_scene(const std::vector<const RegionNode*>& paint, const std::vector<std::size_t>& preorder_index,
                  std::size_t preorder_count, const RenderParams& params, RenderSize size, double scale_x,
                  double scale_y) {
    if (size.width <= 0 || size.height <= 0)
        throw DomainError("render: output size must be positive");
    if (!(params.soft_bandwidth > 0.0))
        throw DomainError("render: soft_bandwidth must be positive");
    if (params.supersample < 1)
        throw DomainError("render: supersample must be at least 1");
    if (params.tile_size < 1)
        throw DomainError("render: tile_size must be at least 1");

    Scene s;
    s.geo = {size.width, size.height, params.supersample, kCutoff * params.soft_bandwidth, scale_x, scale_y};
    s.tile = params.tile_size;
    s.tiles_x = (size.width + s.tile - 1) / s.tile;
    s.tiles_y = (size.height + s.tile - 1) / s.tile;
    s.preorder_count = preorder_count;
    const std::size_t ntiles = static_cast<std::size_t>(s.tiles_x) * s.tiles_y;
    s.entries.resize(ntiles);
    s.tile_edges.resize(ntiles);

    s.regions.resize(paint.size());
    parallel_for(paint.size(), params.threads, [&](std::size_t i, int) {
        s.regions[i] = prepare(*paint[i], preorder_index[i], s.geo, params);
    });

    auto tile_range = [&](double lo, double hi, int tiles) {
        const int a = std::max(0, static_cast<int>(std::floor(lo / s.tile)));
        const int b = std::min(tiles - 1, static_cast<int>(std::floor(hi / s.tile)));
        return std::pair{a, b};
    };
    for (std::size_t ri = 0; ri < s.regions.size(); ++ri) {
        const PreparedRegion& r = s.regions[ri];
        if (r.verts.empty() || r.max_x < 0 || r.max_y < 0 || r.min_x > size.width || r.min_y > size.height)
            continue;
        const auto [tx0, tx1] = tile_range(r.min_x, r.max_x, s.tiles_x);
        const auto [ty0, ty1] = tile_range(r.min_y, r.max_y, s.tiles_y);
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx) {
                const std::size_t t = static_cast<std::size_t>(ty) * s.tiles_x + tx;
                const auto begin = static_cast<std::uint32_t>(s.tile_edges[t].size());
                s.entries[t].push_back({static_cast<std::uint32_t>(ri), begin, begin});
            }
        for (std::size_t e = 0; e < r.edges.size(); ++e) {
            const Point2 a = r.verts[r.edges[e][0]];
            const Point2 b = r.verts[r.edges[e][1]];
            const auto [ex0, ex1] = tile_range(std::min(a.x, b.x) - s.geo.band, std::max(a.x, b.x) + s.geo.band, s.tiles_x);
            const auto [ey0, ey1] = tile_range(std::min(a.y, b.y) - s.geo.band, std::max(a.y, b.y) + s.geo.band, s.tiles_y);
            for (int ty = std::max(ey0, ty0); ty <= std::min(ey1, ty1); ++ty)
                for (int tx = std::max(ex0, tx0); tx <= std::min(ex1, tx1); ++tx) {
                    const std::size_t t = static_cast<std::size_t>(ty) * s.tiles_x + tx;
                    s.tile_edges[t].push_back(static_cast<std::uint32_t>(e));
                    s.entries[t].back().edge_end = static_cast<std::uint32_t>(s.tile_edges[t].size());
                }
        }
    }
    return s;
}

Scene build_document_scene(const VectorDocument& doc, const RenderParams& params, RenderSize size) {
    const auto pre = regions_preorder(doc);
    const auto paint = paint_order(doc);
    std::vector<std::size_t> index(paint.size());
    for (std::size_t i = 0; i < paint.size(); ++i)
        index[i] = static_cast<std::size_t>(std::find(pre.begin(), pre.end(), paint[i]) - pre.begin());
    const double sx = doc.width > 0 ? static_cast<double>(size.width) / doc.width : 1.0;
    const double sy = doc.height > 0 ? static_cast<double>(size.height) / doc.height : 1.0;
    return build_scene(paint, index, pre.size(), params, size, sx, sy);
}

// Samples band-close to an edge carry the data needed for point gradients.
struct BandSample {
    std::uint32_t sample;
    std::uint32_t edge; // position within the entry's edge list
    double u;
    double gx, gy; // dc/dq at the closest point q
    double under[3];
};

struct EntryState {
    const Entry* entry = nullptr;
    std::uint32_t region;
    bool constant = false; // c ≡ 1 over the tile
    int c0 = 0, c1 = 0, r0 = 0, r1 = 0; // samples outside have c = 0
    std::vector<double> cov;
    std::vector<BandSample> band;
    std::vector<std::int8_t> mask_sign; // per pixel, when a mask is attached
};

struct TileOutput {
    struct EdgeGrad {
        std::uint32_t region;
        std::uint32_t edge;
        Point2 ga, gb;
    };
    std::vector<EdgeGrad> edges;
    std::vector<std::pair<std::uint32_t, Color>> fills;
    // region, Σ|C − m| over tile pixels, mask pixels inside the tile
    std::vector<std::tuple<std::uint32_t, double, std::size_t>> masks;
    double recon_sum = 0.0;
};

struct Adjoint {
    const RasterImage* grad_image = nullptr;
    const RasterImage* target = nullptr;
    double recon_weight = 1.0;
    std::vector<const BinaryMask*> masks; // indexed by paint order
    double mask_weight = 1.0;
};

struct Scratch {
    std::vector<double> color;     // samples × 3
    std::vector<double> best_d2;   // samples
    std::vector<std::int32_t> best_edge;
    std::vector<double> best_u;
    std::vector<double> adj;       // samples × 3
    std::vector<EntryState> states;
};

struct TileRect {
    int px0, py0, px1, py1;
    int sw() const { return px1 - px0; }
};

// Computes coverage of one region over every sample of the tile.
// Returns false when the region does not touch the tile.
bool cover_entry(const Scene& s, const Entry& entry, const TileRect& rect, Scratch& sc, EntryState& st,
                 bool want_band) {
    const PreparedRegion& r = s.regions[entry.region];
    const int ss = s.geo.ss;
    const int sw = rect.sw() * ss;
    const int sh = (rect.py1 - rect.py0) * ss;
    const std::size_t ns = static_cast<std::size_t>(sw) * sh;
    const double band2 = s.geo.band * s.geo.band;

    auto inside_row = [&](int global_row, auto&& visit) {
        // visit(local_col, inside) in increasing x
        const int local_row = global_row - r.row0;
        const double* xs = nullptr;
        std::size_t count = 0;
        if (local_row >= 0 && static_cast<std::size_t>(local_row) + 1 < r.row_start.size()) {
            xs = r.xs.data() + r.row_start[static_cast<std::size_t>(local_row)];
            count = r.row_start[static_cast<std::size_t>(local_row) + 1] - r.row_start[static_cast<std::size_t>(local_row)];
        }
        const int col0 = rect.px0 * ss;
        const double x0 = (col0 + st.c0 + 0.5) / ss;
        std::size_t k = static_cast<std::size_t>(std::lower_bound(xs, xs + count, x0) - xs);
        for (int c = st.c0; c < st.c1; ++c) {
            const double x = (col0 + c + 0.5) / ss;
            while (k < count && xs[k] < x)
                ++k;
            visit(c, (k & 1u) != 0);
        }
    };

    st.entry = &entry;
    st.region = entry.region;
    st.constant = false;
    st.band.clear();

    if (entry.edge_begin == entry.edge_end) {
        const int local_row = rect.py0 * ss - r.row0;
        if (local_row < 0 || static_cast<std::size_t>(local_row) + 1 >= r.row_start.size())
            return false;
        const double* xs = r.xs.data() + r.row_start[static_cast<std::size_t>(local_row)];
        const std::size_t count = r.row_start[static_cast<std::size_t>(local_row) + 1] - r.row_start[static_cast<std::size_t>(local_row)];
        const double x0 = (rect.px0 * ss + 0.5) / ss;
        if (((std::lower_bound(xs, xs + count, x0) - xs) & 1) == 0)
            return false;
        st.constant = true;
        if (want_band)
            st.cov.assign(ns, 1.0);
        return true;
    }

    st.c0 = std::clamp(static_cast<int>(std::floor(r.min_x * ss)) - rect.px0 * ss, 0, sw);
    st.c1 = std::clamp(static_cast<int>(std::ceil(r.max_x * ss)) + 1 - rect.px0 * ss, st.c0, sw);
    st.r0 = std::clamp(static_cast<int>(std::floor(r.min_y * ss)) - rect.py0 * ss, 0, sh);
    st.r1 = std::clamp(static_cast<int>(std::ceil(r.max_y * ss)) + 1 - rect.py0 * ss, st.r0, sh);
    sc.best_d2.resize(ns);
    sc.best_edge.resize(ns);
    sc.best_u.resize(ns);
    for (int rr = st.r0; rr < st.r1; ++rr) {
        const std::size_t base = static_cast<std::size_t>(rr) * sw;
        std::fill(sc.best_d2.begin() + base + st.c0, sc.best_d2.begin() + base + st.c1, band2);
        std::fill(sc.best_edge.begin() + base + st.c0, sc.best_edge.begin() + base + st.c1, -1);
    }
    const auto* edge_ids = s.tile_edges[static_cast<std::size_t>(rect.py0 / s.tile) * s.tiles_x + rect.px0 / s.tile].data();
    const int col0 = rect.px0 * ss;
    const int row0 = rect.py0 * ss;
    for (std::uint32_t k = entry.edge_begin; k < entry.edge_end; ++k) {
        const auto& e = r.edges[edge_ids[k]];
        const Point2 a = r.verts[e[0]];
        const Point2 b = r.verts[e[1]];
        const Point2 ab = b - a;
        const double len2 = geometry::dot(ab, ab);
        const double inv = len2 > 0.0 ? 1.0 / len2 : 0.0;
        const int c_lo = std::max(0, static_cast<int>(std::ceil((std::min(a.x, b.x) - s.geo.band) * ss - 0.5)) - col0);
        const int c_hi = std::min(sw - 1, static_cast<int>(std::floor((std::max(a.x, b.x) + s.geo.band) * ss - 0.5)) - col0);
        const int r_lo = std::max(0, static_cast<int>(std::ceil((std::min(a.y, b.y) - s.geo.band) * ss - 0.5)) - row0);
        const int r_hi = std::min(sh - 1, static_cast<int>(std::floor((std::max(a.y, b.y) + s.geo.band) * ss - 0.5)) - row0);
        for (int rr = r_lo; rr <= r_hi; ++rr) {
            const double py = (row0 + rr + 0.5) / ss;
            const std::size_t base = static_cast<std::size_t>(rr) * sw;
            for (int cc = c_lo; cc <= c_hi; ++cc) {
                const double px = (col0 + cc + 0.5) / ss;
                const double apx = px - a.x;
                const double apy = py - a.y;
                const double u = std::clamp((apx * ab.x + apy * ab.y) * inv, 0.0, 1.0);
                const double dx = apx - u * ab.x;
                const double dy = apy - u * ab.y;
                const double d2 = dx * dx + dy * dy;
                const std::size_t i = base + static_cast<std::size_t>(cc);
                if (d2 < sc.best_d2[i]) {
                    sc.best_d2[i] = d2;
                    sc.best_edge[i] = static_cast<std::int32_t>(k - entry.edge_begin);
                    sc.best_u[i] = u;
                }
            }
        }
    }

    if (want_band)
        st.cov.assign(ns, 0.0);
    else
        st.cov.resize(ns);
    const double sigma = s.geo.band / kCutoff;
    for (int rr = st.r0; rr < st.r1; ++rr) {
        const std::size_t base = static_cast<std::size_t>(rr) * sw;
        inside_row(row0 + rr, [&](int cc, bool inside) {
            const std::size_t i = base + static_cast<std::size_t>(cc);
            const std::int32_t ei = sc.best_edge[i];
            if (ei < 0) {
                st.cov[i] = inside ? 1.0 : 0.0;
                return;
            }
            const double d = std::sqrt(sc.best_d2[i]);
            const double sd = inside ? d : -d;
            st.cov[i] = soft_coverage(sd, sigma);
            if (!want_band)
                return;
            const double slope = soft_coverage_slope(sd, sigma);
            if (slope == 0.0 || d == 0.0)
                return;
            const auto& e = r.edges[edge_ids[entry.edge_begin + static_cast<std::uint32_t>(ei)]];
            const Point2 a = r.verts[e[0]];
            const Point2 b = r.verts[e[1]];
            const double u = sc.best_u[i];
            const Point2 q = a + u * (b - a);
            const Point2 p{(col0 + cc + 0.5) / ss, (row0 + rr + 0.5) / ss};
            // sd = ±|p − q|, so d(sd)/dq = ±(q − p)/d.
            const double k = (inside ? slope : -slope) / d;
            BandSample bs{};
            bs.sample = static_cast<std::uint32_t>(i);
            bs.edge = static_cast<std::uint32_t>(ei);
            bs.u = u;
            bs.gx = k * (q.x - p.x);
            bs.gy = k * (q.y - p.y);
            st.band.push_back(bs);
        });
    }
    return true;
}

TileRect tile_rect(const Scene& s, std::size_t t) {
    const int tx = static_cast<int>(t % static_cast<std::size_t>(s.tiles_x));
    const int ty = static_cast<int>(t / static_cast<std::size_t>(s.tiles_x));
    return {tx * s.tile, ty * s.tile, std::min(s.geo.width, (tx + 1) * s.tile), std::min(s.geo.height, (ty + 1) * s.tile)};
}

void resolve_pixels(const Scene& s, const TileRect& rect, const std::vector<double>& color, RasterImage& out,
                    int channels) {
    const int ss = s.geo.ss;
    const int sw = rect.sw() * ss;
    const double norm = 1.0 / (ss * ss);
    for (int py = rect.py0; py < rect.py1; ++py)
        for (int px = rect.px0; px < rect.px1; ++px) {
            double acc[3] = {0, 0, 0};
            for (int j = 0; j < ss; ++j)
                for (int i = 0; i < ss; ++i) {
                    const std::size_t smp = static_cast<std::size_t>((py - rect.py0) * ss + j) * sw + (px - rect.px0) * ss + i;
                    for (int c = 0; c < 3; ++c)
                        acc[c] += color[smp * 3 + c];
                }
            for (int c = 0; c < channels; ++c)
                out.at(px, py, c) = acc[c] * norm;
        }
}

RasterImage forward(const Scene& s, const Color& background, int channels, int threads) {
    RasterImage out(s.geo.width, s.geo.height, channels);
    const std::size_t ntiles = s.entries.size();
    std::vector<Scratch> scratch(static_cast<std::size_t>(resolve_threads(threads)));
    parallel_for(ntiles, threads, [&](std::size_t t, int worker) {
        Scratch& sc = scratch[static_cast<std::size_t>(worker)];
        const TileRect rect = tile_rect(s, t);
        const int ss = s.geo.ss;
        const std::size_t ns = static_cast<std::size_t>(rect.sw() * ss) * ((rect.py1 - rect.py0) * ss);
        sc.color.resize(ns * 3);
        for (std::size_t i = 0; i < ns; ++i)
            for (int c = 0; c < 3; ++c)
                sc.color[i * 3 + c] = background[c];
        if (sc.states.empty())
            sc.states.resize(1);
        EntryState& st = sc.states[0];
        for (const Entry& e : s.entries[t]) {
            if (!cover_entry(s, e, rect, sc, st, false))
                continue;
            const Color& f = s.regions[e.region].fill;
            if (st.constant) {
                for (std::size_t i = 0; i < ns; ++i)
                    for (int ch = 0; ch < 3; ++ch)
                        sc.color[i * 3 + ch] = f[ch];
                continue;
            }
            const std::size_t sw = static_cast<std::size_t>(rect.sw() * ss);
            for (int rr = st.r0; rr < st.r1; ++rr)
                for (std::size_t i = rr * sw + st.c0; i < rr * sw + st.c1; ++i) {
                    const double c = st.cov[i];
                    if (c == 0.0)
                        continue;
                    for (int ch = 0; ch < 3; ++ch)
                        sc.color[i * 3 + ch] = c * f[ch] + (1.0 - c) * sc.color[i * 3 + ch];
                }
        }
        resolve_pixels(s, rect, sc.color, out, channels);
    });
    return out;
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

Evaluation forward_backward(const Scene& s, const Color& background, const Adjoint& adj, int threads) {
    const int W = s.geo.width;
    const int H = s.geo.height;
    const int ss = s.geo.ss;
    const double pixels = static_cast<double>(W) * H;
    Evaluation ev;
    ev.image = RasterImage(W, H, 3);
    const std::size_t ntiles = s.entries.size();
    std::vector<TileOutput> outputs(ntiles);
    std::vector<Scratch> scratch(static_cast<std::size_t>(resolve_threads(threads)));

    parallel_for(ntiles, threads, [&](std::size_t t, int worker) {
        Scratch& sc = scratch[static_cast<std::size_t>(worker)];
        TileOutput& out = outputs[t];
        const TileRect rect = tile_rect(s, t);
        const int sw = rect.sw() * ss;
        const int tw = rect.sw();
        const std::size_t ns = static_cast<std::size_t>(sw) * ((rect.py1 - rect.py0) * ss);
        const double sample_norm = 1.0 / (ss * ss);

        sc.color.resize(ns * 3);
        for (std::size_t i = 0; i < ns; ++i)
            for (int c = 0; c < 3; ++c)
                sc.color[i * 3 + c] = background[c];
        const auto& entries = s.entries[t];
        if (sc.states.size() < entries.size())
            sc.states.resize(entries.size());

        std::size_t live = 0;
        for (const Entry& e : entries) {
            EntryState& st = sc.states[live];
            if (!cover_entry(s, e, rect, sc, st, true))
                continue;
            ++live;
            const Color& f = s.regions[e.region].fill;
            for (auto& b : st.band)
                for (int ch = 0; ch < 3; ++ch)
                    b.under[ch] = sc.color[b.sample * 3 + ch];
            for (std::size_t i = 0; i < ns; ++i) {
                const double c = st.cov[i];
                if (c == 0.0)
                    continue;
                for (int ch = 0; ch < 3; ++ch)
                    sc.color[i * 3 + ch] = c * f[ch] + (1.0 - c) * sc.color[i * 3 + ch];
            }
            const BinaryMask* mask = adj.masks.empty() ? nullptr : adj.masks[e.region];
            st.mask_sign.clear();
            if (mask) {
                st.mask_sign.resize(static_cast<std::size_t>(tw) * (rect.py1 - rect.py0));
                double abs_sum = 0.0;
                std::size_t mask_pixels = 0;
                for (int py = rect.py0; py < rect.py1; ++py)
                    for (int px = rect.px0; px < rect.px1; ++px) {
                        double cov = 0.0;
                        for (int j = 0; j < ss; ++j)
                            for (int i = 0; i < ss; ++i)
                                cov += st.cov[static_cast<std::size_t>((py - rect.py0) * ss + j) * sw + (px - rect.px0) * ss + i];
                        cov *= sample_norm;
                        const double m = mask->at(px, py) ? 1.0 : 0.0;
                        mask_pixels += mask->at(px, py) ? 1 : 0;
                        abs_sum += std::abs(cov - m);
                        st.mask_sign[static_cast<std::size_t>(py - rect.py0) * tw + (px - rect.px0)] =
                            static_cast<std::int8_t>(sign(cov - m));
                    }
                out.masks.emplace_back(e.region, abs_sum, mask_pixels);
            }
        }
        resolve_pixels(s, rect, sc.color, ev.image, 3);

        // Pixel adjoint, spread evenly over the pixel's samples.
        sc.adj.assign(ns * 3, 0.0);
        const double recon_scale = adj.recon_weight / (pixels * 3.0);
        for (int py = rect.py0; py < rect.py1; ++py)
            for (int px = rect.px0; px < rect.px1; ++px) {
                double g[3] = {0, 0, 0};
                for (int ch = 0; ch < 3; ++ch) {
                    if (adj.grad_image)
                        g[ch] = adj.grad_image->at(px, py, ch);
                    if (adj.target) {
                        const double diff = ev.image.at(px, py, ch) - adj.target->at(px, py, ch);
                        out.recon_sum += std::abs(diff);
                        g[ch] += recon_scale * sign(diff);
                    }
                }
                for (int j = 0; j < ss; ++j)
                    for (int i = 0; i < ss; ++i) {
                        const std::size_t smp = static_cast<std::size_t>((py - rect.py0) * ss + j) * sw + (px - rect.px0) * ss + i;
                        for (int ch = 0; ch < 3; ++ch)
                            sc.adj[smp * 3 + ch] = g[ch] * sample_norm;
                    }
            }

        const double mask_scale = adj.mask_weight / pixels * sample_norm;
        std::vector<Point2> edge_grad;
        for (std::size_t k = live; k-- > 0;) {
            const EntryState& st = sc.states[k];
            const Entry* entry = st.entry;
            const Color& f = s.regions[st.region].fill;
            edge_grad.assign(2 * static_cast<std::size_t>(entry->edge_end - entry->edge_begin), Point2{});
            for (const BandSample& b : st.band) {
                double dc = 0.0;
                for (int ch = 0; ch < 3; ++ch)
                    dc += sc.adj[b.sample * 3 + ch] * (f[ch] - b.under[ch]);
                if (!st.mask_sign.empty()) {
                    const int lr = static_cast<int>(b.sample) / sw;
                    const int lc = static_cast<int>(b.sample) % sw;
                    dc += mask_scale * st.mask_sign[static_cast<std::size_t>(lr / ss) * tw + lc / ss];
                }
                const Point2 gq{dc * b.gx, dc * b.gy};
                edge_grad[2 * b.edge] += (1.0 - b.u) * gq;
                edge_grad[2 * b.edge + 1] += b.u * gq;
            }
            Color gf{0, 0, 0};
            for (std::size_t i = 0; i < ns; ++i) {
                const double c = st.cov[i];
                if (c == 0.0)
                    continue;
                for (int ch = 0; ch < 3; ++ch) {
                    gf[ch] += sc.adj[i * 3 + ch] * c;
                    sc.adj[i * 3 + ch] *= (1.0 - c);
                }
            }
            out.fills.emplace_back(st.region, gf);
            const auto* edge_ids = s.tile_edges[t].data();
            for (std::uint32_t j = 0; j < entry->edge_end - entry->edge_begin; ++j) {
                const Point2 ga = edge_grad[2 * j];
                const Point2 gb = edge_grad[2 * j + 1];
                if (ga == Point2{} && gb == Point2{})
                    continue;
                out.edges.push_back({st.region, edge_ids[entry->edge_begin + j], ga, gb});
            }
        }
    });

    // Deterministic reduction in tile order.
    std::vector<std::vector<Point2>> vert_grad(s.regions.size());
    for (std::size_t i = 0; i < s.regions.size(); ++i)
        vert_grad[i].assign(s.regions[i].verts.size(), Point2{});
    std::vector<Color> fill_grad(s.regions.size(), Color{0, 0, 0});
    std::vector<double> mask_abs(s.regions.size(), 0.0);
    std::vector<std::size_t> mask_seen(s.regions.size(), 0);
    double recon = 0.0;
    for (const TileOutput& out : outputs) {
        for (const auto& e : out.edges) {
            const auto& edge = s.regions[e.region].edges[e.edge];
            vert_grad[e.region][edge[0]] += e.ga;
            vert_grad[e.region][edge[1]] += e.gb;
        }
        for (const auto& [r, g] : out.fills)
            for (int ch = 0; ch < 3; ++ch)
                fill_grad[r][ch] += g[ch];
        for (const auto& [r, sum, seen] : out.masks) {
            mask_abs[r] += sum;
            mask_seen[r] += seen;
        }
        recon += out.recon_sum;
    }

    ev.recon = adj.target ? recon / (pixels * 3.0) : 0.0;
    ev.mask_loss.assign(s.preorder_count, 0.0);
    ev.gradient.regions.resize(s.preorder_count);
    for (std::size_t i = 0; i < s.regions.size(); ++i) {
        const PreparedRegion& r = s.regions[i];
        RegionGradient& rg = ev.gradient.regions[r.preorder];
        std::size_t npoints = 0;
        for (const auto& w : r.weights)
            for (auto p : w.point)
                npoints = std::max<std::size_t>(npoints, p + 1);
        rg.points.assign(std::max(rg.points.size(), npoints), Point2{});
        for (std::size_t v = 0; v < r.verts.size(); ++v) {
            const Point2 g = vert_grad[i][v];
            for (int k = 0; k < 4; ++k) {
                Point2& dst = rg.points[r.weights[v].point[k]];
                dst.x += r.weights[v].weight[k] * g.x * s.geo.scale_x;
                dst.y += r.weights[v].weight[k] * g.y * s.geo.scale_y;
            }
        }
        rg.fill = fill_grad[i];
        if (!adj.masks.empty() && adj.masks[i]) {
            const std::size_t total = adj.masks[i]->count();
            ev.mask_loss[r.preorder] = (mask_abs[i] + static_cast<double>(total - mask_seen[i])) / pixels;
        }
    }
    return ev;
}

void size_gradient_like(const VectorDocument& doc, GradientSet& g) {
    const auto pre = regions_preorder(doc);
    g.regions.resize(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i)
        g.regions[i].points.resize(pre[i]->point_count(), Point2{});
}

} // namespace

std::vector<double> GradientSet::flatten() const {
    std::vector<double> out;
    for (const auto& r : regions) {
        for (const auto& p : r.points) {
            out.push_back(p.x);
            out.push_back(p.y);
        }
        out.insert(out.end(), r.fill.begin(), r.fill.end());
    }
    return out;
}

double soft_coverage(double sd, double bandwidth) {
    const double x = sd / bandwidth;
    if (x >= kCutoff)
        return 1.0;
    if (x <= -kCutoff)
        return 0.0;
    return std::clamp((logistic(x) - kLogisticLo) * kLogisticScale, 0.0, 1.0);
}

RasterImage region_coverage(const RegionNode& region, const RenderParams& params, RenderSize size) {
    RegionNode solo = region;
    solo.children.clear();
    solo.fill = {1.0, 1.0, 1.0};
    const Scene s = build_scene({&solo}, {0}, 1, params, size, 1.0, 1.0);
    return forward(s, Color{0.0, 0.0, 0.0}, 1, params.threads);
}

RasterImage region_coverage(const VectorDocument& doc, const RegionNode& region, const RenderParams& params,
                            RenderSize size) {
    RegionNode solo = region;
    solo.children.clear();
    solo.fill = {1.0, 1.0, 1.0};
    const double sx = doc.width > 0 ? static_cast<double>(size.width) / doc.width : 1.0;
    const double sy = doc.height > 0 ? static_cast<double>(size.height) / doc.height : 1.0;
    const Scene s = build_scene({&solo}, {0}, 1, params, size, sx, sy);
    return forward(s, Color{0.0, 0.0, 0.0}, 1, params.threads);
}

RasterImage render(const VectorDocument& doc, const RenderParams& params, RenderSize size) {
    const Scene s = build_document_scene(doc, params, size);
    return forward(s, params.background, 3, params.threads);
}

RasterImage render(const VectorDocument& doc, const RenderParams& params) {
    return render(doc, params, {doc.width, doc.height});
}

std::vector<RasterImage> render_region_stack(const VectorDocument& doc, int layer, const RenderParams& params,
                                             RenderSize size) {
    if (layer < 1 || layer > max_layer(doc))
        throw DomainError("render_region_stack: layer " + std::to_string(layer) + " out of range");
    std::vector<RasterImage> out;
    for (const RegionNode* r : regions_preorder(doc))
        if (r->layer == layer)
            out.push_back(region_coverage(doc, *r, params, size));
    return out;
}

GradientSet backward(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                     const RasterImage& grad_image) {
    if (grad_image.width != size.width || grad_image.height != size.height || grad_image.channels != 3)
        throw FormatError("backward: grad_image must be " + std::to_string(size.width) + "x" +
                          std::to_string(size.height) + "x3");
    const Scene s = build_document_scene(doc, params, size);
    Adjoint adj;
    adj.grad_image = &grad_image;
    Evaluation ev = forward_backward(s, params.background, adj, params.threads);
    size_gradient_like(doc, ev.gradient);
    return std::move(ev.gradient);
}

GradientSet numeric_gradient(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                             const std::function<double(const RasterImage&)>& loss, double h) {
    if (!(h > 0.0))
        throw DomainError("numeric_gradient: h must be positive");
    VectorDocument work = doc;
    std::vector<double> theta = pack_parameters(doc);
    std::vector<double> grad(theta.size(), 0.0);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double keep = theta[i];
        theta[i] = keep + h;
        unpack_parameters(work, theta);
        const double up = loss(render(work, params, size));
        theta[i] = keep - h;
        unpack_parameters(work, theta);
        const double down = loss(render(work, params, size));
        theta[i] = keep;
        grad[i] = (up - down) / (2.0 * h);
    }
    GradientSet out;
    size_gradient_like(doc, out);
    std::size_t k = 0;
    for (auto& r : out.regions) {
        for (auto& p : r.points) {
            p = {grad[k], grad[k + 1]};
            k += 2;
        }
        for (double& c : r.fill)
            c = grad[k++];
    }
    return out;
}

Evaluation evaluate(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                    const StructureTerms& terms) {
    const Scene s = build_document_scene(doc, params, size);
    Adjoint adj;
    adj.target = terms.target;
    adj.recon_weight = terms.recon_weight;
    adj.mask_weight = terms.mask_weight;
    if (terms.target && (terms.target->width != size.width || terms.target->height != size.height ||
                         terms.target->channels != 3))
        throw FormatError("evaluate: target must be an RGB image of the render size");
    if (!terms.masks.empty()) {
        if (terms.masks.size() != s.preorder_count)
            throw FormatError("evaluate: one mask slot per region expected");
        adj.masks.resize(s.regions.size(), nullptr);
        for (std::size_t i = 0; i < s.regions.size(); ++i) {
            const BinaryMask* m = terms.masks[s.regions[i].preorder];
            if (m && (m->width != size.width || m->height != size.height))
                throw FormatError("evaluate: mask size differs from render size");
            adj.masks[i] = m;
        }
    }
    Evaluation ev = forward_backward(s, params.background, adj, params.threads);
    size_gradient_like(doc, ev.gradient);
    return ev;
}

} // namespace layervec::raster
