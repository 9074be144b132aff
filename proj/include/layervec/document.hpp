#pragma once

#include "layervec/geometry.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace layervec {

using Color = std::array<double, 3>; // linear RGB in [0,1]

// One semantic region: a closed outline plus optional extra subpaths (holes
// and detached islands) filled under the even-odd rule, one solid colour,
// and the finer regions nested under it.
struct RegionNode {
    std::string id;
    int layer = 1;
    geometry::BezierPath path;
    std::vector<geometry::BezierPath> subpaths;
    Color fill{0.0, 0.0, 0.0};
    std::vector<RegionNode> children;
    std::optional<std::string> source_mask_id;

    // Control points of path followed by every subpath, in order.
    std::size_t point_count() const;
    geometry::Point2 point(std::size_t i) const;
    geometry::Point2& point(std::size_t i);

    friend bool operator==(const RegionNode&, const RegionNode&) = default;
};

struct VectorDocument {
    int width = 0;
    int height = 0;
    std::vector<RegionNode> roots;

    friend bool operator==(const VectorDocument&, const VectorDocument&) = default;
};

// Depth-first pre-order: the canonical "document order".
std::vector<const RegionNode*> regions_preorder(const VectorDocument& doc);
std::vector<RegionNode*> regions_preorder(VectorDocument& doc);

// Painter's order: layer-major, then document order within a layer.
std::vector<const RegionNode*> paint_order(const VectorDocument& doc);

std::size_t node_count(const VectorDocument& doc);
int max_layer(const VectorDocument& doc);

const RegionNode* find_region(const VectorDocument& doc, const std::string& id);
RegionNode* find_region(VectorDocument& doc, const std::string& id);

// Parent id of the node with `id`, or nullopt for roots / unknown ids.
std::optional<std::string> parent_of(const VectorDocument& doc, const std::string& id);

// Collects every violated document invariant (closure, unique ids,
// child layer = parent layer + 1, finite coordinates, fills in range).
std::vector<std::string> check_document(const VectorDocument& doc);

// Flat parameter view used by optimizers and finite-difference oracles:
// for each region in pre-order, x/y of every control point, then the fill.
std::size_t parameter_count(const VectorDocument& doc);
std::vector<double> pack_parameters(const VectorDocument& doc);
void unpack_parameters(VectorDocument& doc, const std::vector<double>& params);

} // namespace layervec
