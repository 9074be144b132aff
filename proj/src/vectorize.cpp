#include "layervec/vectorize.hpp"

#include "layervec/error.hpp"

#include <algorithm>
#include <cmath>

namespace layervec::vectorize {

using geometry::BezierPath;
using geometry::CubicBezier;
using geometry::Point2;
using geometry::Polyline;

namespace {

void append_segments(std::vector<Point2>& pts, const std::vector<CubicBezier>& segs) {
    for (const auto& c : segs) {
        pts.push_back(c.p0);
        pts.push_back(c.p1);
        pts.push_back(c.p2);
    }
}

geometry::FitOptions fit_options(const OptimizeConfig& cfg) {
    return {cfg.max_segments, cfg.fit_tolerance};
}

// Inserts points so that consecutive vertices are at most `spacing` apart.
Polyline densify(const Polyline& line, double spacing) {
    Polyline out{{}, line.closed};
    const std::size_t n = line.points.size();
    const std::size_t edges = line.closed ? n : n - 1;
    for (std::size_t i = 0; i < edges; ++i) {
        const Point2 a = line.points[i];
        const Point2 b = line.points[(i + 1) % n];
        const int k = std::max(1, static_cast<int>(std::ceil(geometry::distance(a, b) / spacing)));
        for (int j = 0; j < k; ++j)
            out.points.push_back(a + (static_cast<double>(j) / k) * (b - a));
    }
    if (!line.closed)
        out.points.push_back(line.points.back());
    return out;
}

// Traced loop → closed path. The simplified polygon decides whether the loop
// is split; the curves themselves are fitted to the traced vertices.
BezierPath fit_loop(const Polyline& loop, const OptimizeConfig& cfg, bool* was_split) {
    const auto kept = geometry::douglas_peucker_indices(loop, cfg.simplify_epsilon);
    std::vector<Point2> pts;
    if (static_cast<int>(kept.size()) <= cfg.max_vertices || kept.size() < 4) {
        append_segments(pts, geometry::fit_bezier_chain(densify(loop, 1.0), fit_options(cfg)));
        if (was_split)
            *was_split = false;
        return BezierPath(std::move(pts));
    }
    Polyline simple{{}, true};
    for (std::size_t i : kept)
        simple.points.push_back(loop.points[i]);
    const auto [a, b] = geometry::longest_diagonal(simple);
    const std::size_t ta = kept[a];
    const std::size_t tb = kept[b];
    const std::size_t n = loop.points.size();
    Polyline first{{}, false}, second{{}, false};
    for (std::size_t i = ta; i != tb; i = (i + 1) % n)
        first.points.push_back(loop.points[i]);
    first.points.push_back(loop.points[tb]);
    for (std::size_t i = tb; i != ta; i = (i + 1) % n)
        second.points.push_back(loop.points[i]);
    second.points.push_back(loop.points[ta]);
    append_segments(pts, geometry::fit_bezier_chain(densify(first, 1.0), fit_options(cfg)));
    append_segments(pts, geometry::fit_bezier_chain(densify(second, 1.0), fit_options(cfg)));
    if (was_split)
        *was_split = true;
    return BezierPath(std::move(pts));
}

RasterImage as_rgb(const RasterImage& img) {
    if (img.channels == 3)
        return img;
    if (img.channels != 1)
        throw FormatError("expected a 1- or 3-channel image, got " + std::to_string(img.channels));
    RasterImage out(img.width, img.height, 3);
    for (std::size_t i = 0; i < img.pixel_count(); ++i)
        for (int c = 0; c < 3; ++c)
            out.data[i * 3 + c] = img.data[i];
    return out;
}

Color masked_mean(const RasterImage& rgb, const BinaryMask& mask) {
    double acc[3] = {0, 0, 0};
    std::size_t n = 0;
    for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
        if (!mask.data[i])
            continue;
        ++n;
        for (int c = 0; c < 3; ++c)
            acc[c] += rgb.data[i * 3 + c];
    }
    if (n == 0) {
        for (std::size_t i = 0; i < rgb.pixel_count(); ++i)
            for (int c = 0; c < 3; ++c)
                acc[c] += rgb.data[i * 3 + c];
        n = std::max<std::size_t>(1, rgb.pixel_count());
    }
    Color out;
    for (int c = 0; c < 3; ++c)
        out[c] = std::clamp(acc[c] / static_cast<double>(n), 0.0, 1.0);
    return out;
}

// Mask pointers in region pre-order; throws for regions without a mask.
std::vector<const BinaryMask*> region_masks(const VectorDocument& doc, const maskio::MaskHierarchy& h) {
    std::vector<const BinaryMask*> out;
    for (const RegionNode* r : regions_preorder(doc)) {
        if (!r->source_mask_id)
            throw FormatError("region '" + r->id + "' has no source mask");
        const maskio::Mask* m = h.find(*r->source_mask_id);
        if (!m)
            throw FormatError("region '" + r->id + "' links to unknown mask '" + *r->source_mask_id + "'");
        if (m->raster.width != doc.width || m->raster.height != doc.height)
            throw FormatError("region '" + r->id + "': mask size differs from the canvas");
        out.push_back(&m->raster);
    }
    return out;
}

StructureLoss summarize(const VectorDocument& doc, const raster::Evaluation& ev, double gamma, bool with_recon) {
    StructureLoss s;
    s.mask_per_layer.assign(static_cast<std::size_t>(std::max(0, max_layer(doc))), 0.0);
    const auto pre = regions_preorder(doc);
    for (std::size_t i = 0; i < pre.size(); ++i)
        s.mask_per_layer[static_cast<std::size_t>(pre[i]->layer - 1)] += ev.mask_loss[i];
    s.recon = with_recon ? ev.recon : 0.0;
    for (double v : s.mask_per_layer)
        s.total += v;
    s.total += gamma * s.recon;
    return s;
}

void check_target(const VectorDocument& doc, const RasterImage& target) {
    if (target.width != doc.width || target.height != doc.height)
        throw FormatError("target is " + std::to_string(target.width) + "x" + std::to_string(target.height) +
                          ", document canvas is " + std::to_string(doc.width) + "x" + std::to_string(doc.height));
}

} // namespace

MaskOutline fit_mask_outline(const BinaryMask& mask, const OptimizeConfig& cfg) {
    auto comps = geometry::trace_mask_components(mask);
    if (comps.empty())
        throw DomainError("fit_mask_outline: empty mask");
    const auto largest = std::max_element(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
        return a.pixel_count < b.pixel_count;
    });
    MaskOutline out;
    out.path = fit_loop(largest->outer, cfg, &out.split);
    for (auto it = comps.begin(); it != comps.end(); ++it) {
        if (it != largest && static_cast<double>(it->pixel_count) >= cfg.min_area)
            out.subpaths.push_back(fit_loop(it->outer, cfg, nullptr));
        if (it != largest && static_cast<double>(it->pixel_count) < cfg.min_area)
            continue;
        for (const auto& hole : it->holes)
            if (std::abs(geometry::polygon_signed_area(hole.points)) >= cfg.min_area)
                out.subpaths.push_back(fit_loop(hole, cfg, nullptr));
    }
    return out;
}

VectorDocument init_document(const RasterImage& image, const maskio::MaskHierarchy& h, const OptimizeConfig& cfg) {
    if (h.layers.empty() || h.mask_count() == 0)
        throw FormatError("init_document: empty hierarchy");
    if (image.width != h.width || image.height != h.height)
        throw FormatError("init_document: image is " + std::to_string(image.width) + "x" +
                          std::to_string(image.height) + ", masks are " + std::to_string(h.width) + "x" +
                          std::to_string(h.height));
    const RasterImage rgb = as_rgb(image);

    VectorDocument doc;
    doc.width = h.width;
    doc.height = h.height;
    // Build layer by layer; node addresses are looked up by id after each
    // insertion because vectors may reallocate.
    for (std::size_t k = 0; k < h.layers.size(); ++k) {
        for (const auto& m : h.layers[k].masks) {
            RegionNode node;
            node.id = m.id;
            node.layer = static_cast<int>(k) + 1;
            MaskOutline outline = fit_mask_outline(m.raster, cfg);
            node.path = std::move(outline.path);
            node.subpaths = std::move(outline.subpaths);
            node.fill = masked_mean(rgb, m.raster);
            node.source_mask_id = m.id;
            RegionNode* parent = nullptr;
            if (m.parent_id && *m.parent_id != maskio::kSyntheticRoot)
                parent = find_region(doc, *m.parent_id);
            if (parent)
                parent->children.push_back(std::move(node));
            else
                doc.roots.push_back(std::move(node));
        }
    }
    return doc;
}

double recon_loss(const RasterImage& render, const RasterImage& target) {
    if (!render.same_shape(target))
        throw FormatError("recon_loss: shape mismatch");
    if (render.data.empty())
        return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < render.data.size(); ++i)
        s += std::abs(render.data[i] - target.data[i]);
    return s / static_cast<double>(render.data.size());
}

StructureLoss structure_loss(const VectorDocument& doc, const maskio::MaskHierarchy& h, const RasterImage& target,
                             double gamma, const raster::RenderParams& params) {
    if (gamma < 0.0)
        throw DomainError("structure_loss: gamma must be non-negative");
    check_target(doc, target);
    const auto masks = region_masks(doc, h);
    const RasterImage rgb = as_rgb(target);
    raster::StructureTerms terms{&rgb, gamma, masks, 1.0};
    const auto ev = raster::evaluate(doc, params, {doc.width, doc.height}, terms);
    return summarize(doc, ev, gamma, true);
}

OptimizeResult optimize(const VectorDocument& doc, const maskio::MaskHierarchy& h, const RasterImage& target,
                        const OptimizeConfig& cfg, const StepCallback& on_step) {
    if (cfg.steps < 0)
        throw DomainError("optimize: steps must be non-negative");
    if (cfg.gamma < 0.0)
        throw DomainError("optimize: gamma must be non-negative");
    check_target(doc, target);
    const auto masks = region_masks(doc, h);
    const RasterImage rgb = as_rgb(target);
    const raster::StructureTerms terms{&rgb, cfg.gamma, masks, 1.0};
    const raster::RenderSize size{doc.width, doc.height};

    OptimizeResult result{doc, {}};
    std::vector<double> theta = pack_parameters(doc);
    std::vector<double> lr(theta.size());
    {
        std::size_t i = 0;
        for (const RegionNode* r : regions_preorder(doc)) {
            for (std::size_t p = 0; p < 2 * r->point_count(); ++p)
                lr[i++] = cfg.lr_points;
            for (int c = 0; c < 3; ++c)
                lr[i++] = cfg.lr_color;
        }
    }
    std::vector<double> m(theta.size(), 0.0), v(theta.size(), 0.0);
    double b1t = 1.0, b2t = 1.0;

    for (int step = 0;; ++step) {
        const auto ev = raster::evaluate(result.doc, cfg.render, size, terms);
        const StructureLoss loss = summarize(result.doc, ev, cfg.gamma, true);
        if (!std::isfinite(loss.total))
            throw NumericError("optimize: non-finite loss", step);
        result.trace.push_back(loss.total);
        if (on_step)
            on_step(step, loss);
        if (step == cfg.steps)
            break;
        const std::vector<double> g = ev.gradient.flatten();
        for (double x : g)
            if (!std::isfinite(x))
                throw NumericError("optimize: non-finite gradient", step);
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / (1.0 - b1t);
            const double vh = v[i] / (1.0 - b2t);
            theta[i] -= lr[i] * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
        unpack_parameters(result.doc, theta);
        for (RegionNode* r : regions_preorder(result.doc))
            for (double& c : r->fill)
                c = std::clamp(c, 0.0, 1.0);
        theta = pack_parameters(result.doc);
    }
    return result;
}

double coverage_iou(const RasterImage& coverage, const BinaryMask& mask) {
    if (coverage.width != mask.width || coverage.height != mask.height)
        throw FormatError("coverage_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        const bool a = coverage.data[i * static_cast<std::size_t>(coverage.channels)] >= 0.5;
        const bool b = mask.data[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace layervec::vectorize
