#pragma once

#include "layervec/document.hpp"
#include "layervec/image.hpp"

#include <functional>
#include <span>
#include <vector>

namespace layervec::raster {

// Soft-coverage model: c = S(sd / soft_bandwidth) with sd the signed
// distance to the flattened outline (positive inside, even-odd rule) and S a
// logistic rescaled so that S(0) = 0.5 and S(±4) = 1/0. Pixels 4σ or more
// from every edge are therefore exactly 0 or 1.
struct RenderParams {
    double soft_bandwidth = 0.7; // σ_r, pixels
    int supersample = 2;         // samples per pixel per axis
    double flatten_tolerance = 0.25;
    Color background{1.0, 1.0, 1.0};
    int threads = 0; // 0 = hardware concurrency
    int tile_size = 16;
};

struct RenderSize {
    int width = 0;
    int height = 0;
};

// d/dθ for every region, indexed in document pre-order. `points` follows
// RegionNode::point() order, in document canvas units.
struct RegionGradient {
    std::vector<geometry::Point2> points;
    Color fill{0.0, 0.0, 0.0};
};

struct GradientSet {
    std::vector<RegionGradient> regions;

    // Same layout as pack_parameters().
    std::vector<double> flatten() const;
};

double soft_coverage(double signed_distance, double bandwidth);

// Per-pixel coverage of one region (1 channel). Coordinates are taken as
// pixel units of `size`.
RasterImage region_coverage(const RegionNode& region, const RenderParams& params, RenderSize size);

// Coverage of one region of `doc` rendered at `size` (canvas scaled to fit).
RasterImage region_coverage(const VectorDocument& doc, const RegionNode& region, const RenderParams& params,
                            RenderSize size);

// Painter's-order composite over the background: out = c·fill + (1−c)·under,
// opacity fixed at 1. Output is RGB at `size`.
RasterImage render(const VectorDocument& doc, const RenderParams& params, RenderSize size);
RasterImage render(const VectorDocument& doc, const RenderParams& params);

// Uncomposited coverages of every region on `layer`, in document order.
std::vector<RasterImage> render_region_stack(const VectorDocument& doc, int layer, const RenderParams& params,
                                             RenderSize size);

// Gradient of L = Σ grad_image ⊙ render(doc) with respect to every control
// point and fill colour.
GradientSet backward(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                     const RasterImage& grad_image);

// Central differences of loss(render(doc)) over every parameter.
GradientSet numeric_gradient(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                             const std::function<double(const RasterImage&)>& loss, double h);

// Fused forward + backward used by the optimizer. Evaluates, in one pass,
//   recon = mean |render − target|            (when `target` is set)
//   mask_r = mean |coverage_r − mask_r|       (for each region with a mask)
// and the gradient of  recon_weight·recon + mask_weight·Σ_r mask_r.
struct StructureTerms {
    const RasterImage* target = nullptr;
    double recon_weight = 1.0;
    // Indexed like regions_preorder(doc); null entries carry no mask term.
    std::span<const BinaryMask* const> masks;
    double mask_weight = 1.0;
};

struct Evaluation {
    RasterImage image;
    double recon = 0.0;
    std::vector<double> mask_loss; // per region, pre-order; 0 where no mask
    GradientSet gradient;
};

Evaluation evaluate(const VectorDocument& doc, const RenderParams& params, RenderSize size,
                    const StructureTerms& terms);

} // namespace layervec::raster
