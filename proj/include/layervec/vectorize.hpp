#pragma once

#include "layervec/document.hpp"
#include "layervec/maskio.hpp"
#include "layervec/rasterizer.hpp"

#include <functional>
#include <vector>

namespace layervec::vectorize {

struct OptimizeConfig {
    int steps = 30;
    double gamma = 1.0;
    double lr_points = 0.5; // px per step
    double lr_color = 0.02;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    raster::RenderParams render;

    // initialization
    double simplify_epsilon = 2.0; // px
    int max_vertices = 24;         // V_max: split trigger after simplification
    int max_segments = 8;          // per fitted side
    double fit_tolerance = 1.0;    // px
    double min_area = 4.0;         // px²; smaller extra components and holes are dropped
};

// Outline of one mask as a closed path plus even-odd subpaths.
struct MaskOutline {
    geometry::BezierPath path;
    std::vector<geometry::BezierPath> subpaths;
    bool split = false; // main outline was cut at its longest diagonal
};

MaskOutline fit_mask_outline(const BinaryMask& mask, const OptimizeConfig& cfg);

// One region per mask; regions nest like the parent links. Masks linked to
// the synthetic root become top-level nodes keeping their layer.
VectorDocument init_document(const RasterImage& image, const maskio::MaskHierarchy& h,
                             const OptimizeConfig& cfg = {});

double recon_loss(const RasterImage& render, const RasterImage& target);

struct StructureLoss {
    double total = 0.0;
    std::vector<double> mask_per_layer; // index k−1
    double recon = 0.0;                 // unweighted
};

StructureLoss structure_loss(const VectorDocument& doc, const maskio::MaskHierarchy& h, const RasterImage& target,
                             double gamma, const raster::RenderParams& params);

struct OptimizeResult {
    VectorDocument doc;
    std::vector<double> trace; // trace[0] before any step, trace[s] after step s
};

using StepCallback = std::function<void(int step, const StructureLoss&)>;

OptimizeResult optimize(const VectorDocument& doc, const maskio::MaskHierarchy& h, const RasterImage& target,
                        const OptimizeConfig& cfg, const StepCallback& on_step = {});

// IoU of (coverage ≥ 0.5) against the mask; 1 when both are empty.
double coverage_iou(const RasterImage& coverage, const BinaryMask& mask);

} // namespace layervec::vectorize
