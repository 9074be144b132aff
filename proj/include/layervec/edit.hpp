#pragma once

#include "layervec/document.hpp"
#include "layervec/error.hpp"
#include "layervec/image.hpp"
#include "layervec/rasterizer.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace layervec::edit {

using geometry::Point2;

enum class OpKind { translate, scale, rotate, recolor, insert, remove, reorder, set_points };

const char* kind_name(OpKind k);

// One element-level edit. Geometric ops act on the target and all of its
// descendants unless `shallow`; recolor and set_points touch the target only.
struct EditOp {
    OpKind kind = OpKind::translate;
    std::string target;              // region id; for insert the parent id ("" = top level)
    Point2 vector{};                 // translate offset or scale factors (sx, sy)
    double degrees = 0.0;            // rotate; positive turns +x toward +y
    std::optional<Point2> pivot;     // scale/rotate; default: bbox centre of the affected points
    Color color{};                   // recolor
    std::optional<RegionNode> region; // insert payload (with its subtree)
    int layer = 0;                   // insert; 0 = parent layer + 1
    int index = -1;                  // insert/reorder sibling position; -1 = last
    std::vector<Point2> points;      // set_points, in RegionNode::point() order
    bool shallow = false;

    friend bool operator==(const EditOp&, const EditOp&) = default;
};

EditOp translate(std::string id, Point2 offset, bool shallow = false);
EditOp scale(std::string id, Point2 factors, bool shallow = false);
EditOp rotate(std::string id, double degrees, bool shallow = false);
EditOp recolor(std::string id, Color c);
EditOp insert(std::string parent, RegionNode region, int index = -1);
EditOp remove(std::string id, bool shallow = false);
EditOp reorder(std::string id, int index);
EditOp set_points(std::string id, std::vector<Point2> points);

// Throws DomainError for unknown ids, zero or non-finite scale, id
// collisions, layer mismatches and point-count mismatches. Shallow remove
// lifts the children into the removed node's place.
VectorDocument apply_edit(const VectorDocument& doc, const EditOp& op);

class ScriptError : public Error {
public:
    ScriptError(std::size_t index, const std::string& what)
        : Error("edit " + std::to_string(index) + ": " + what), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// Left fold of apply_edit; the input is never modified, failures throw
// ScriptError carrying the failing op's index.
VectorDocument apply_edit_script(const VectorDocument& doc, const std::vector<EditOp>& ops);

// JSON array of op objects, e.g.
//   {"op":"translate","id":"a","dx":5,"dy":0,"shallow":true}
// Throws ScriptError (index of the bad entry) or FormatError for non-arrays.
std::vector<EditOp> parse_edit_script(std::string_view json_text);
std::string write_edit_script(const std::vector<EditOp>& ops);

// Ops turning `a` into `b`: structural changes become remove/insert,
// translations translate, other point changes set_points, then recolors and
// sibling reorders.
std::vector<EditOp> script_from_diff(const VectorDocument& a, const VectorDocument& b);

// x' = a·x + c·y + e, y' = b·x + d·y + f (SVG matrix order).
struct Affine {
    double a = 1, b = 0, c = 0, d = 1, e = 0, f = 0;

    Point2 operator()(Point2 p) const { return {a * p.x + c * p.y + e, b * p.x + d * p.y + f}; }
    double determinant() const { return a * d - b * c; }
    static Affine translation(Point2 t) { return {1, 0, 0, 1, t.x, t.y}; }
    static Affine scaling(double sx, double sy, Point2 pivot = {});
    static Affine rotation(double degrees, Point2 pivot = {});
};

// Overlay roots, transformed by `placement`, become regions at `layer`
// (1 ≤ layer ≤ max_layer(base) + 1). For layer > 1 they hang under
// `parent`, or when empty under the layer − 1 region whose bbox overlaps
// theirs most. Colliding ids get "_<n>" suffixes.
VectorDocument compose_documents(const VectorDocument& base, const VectorDocument& overlay, const Affine& placement,
                                 int layer, const std::string& parent = "");

// Region-granular mask mix: every region whose coverage centroid lies in
// `mask` is taken from `target`, every other one from `source`. A picked
// region hangs under its nearest picked ancestor from the same document;
// layers follow the resulting depth. Target ids clashing with picked source
// ids get "_<n>" suffixes. Canvas sizes and mask size must agree.
VectorDocument masked_splice(const VectorDocument& source, const VectorDocument& target, const BinaryMask& mask,
                             const raster::RenderParams& params = {});

// Coverage-weighted centroid of a region on its document canvas; falls back
// to the control-point mean when nothing is covered.
Point2 coverage_centroid(const VectorDocument& doc, const RegionNode& region, const raster::RenderParams& params);

} // namespace layervec::edit
