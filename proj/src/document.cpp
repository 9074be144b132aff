#include "layervec/document.hpp"

#include "layervec/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace layervec {

std::size_t RegionNode::point_count() const {
    std::size_t n = path.points().size();
    for (const auto& s : subpaths)
        n += s.points().size();
    return n;
}

geometry::Point2 RegionNode::point(std::size_t i) const {
    return const_cast<RegionNode*>(this)->point(i);
}

geometry::Point2& RegionNode::point(std::size_t i) {
    if (i < path.points().size())
        return path.points()[i];
    i -= path.points().size();
    for (auto& s : subpaths) {
        if (i < s.points().size())
            return s.points()[i];
        i -= s.points().size();
    }
    throw DomainError("RegionNode::point: index out of range");
}

namespace {

template <class Node, class Out>
void preorder_into(Node& node, Out& out) {
    out.push_back(&node);
    for (auto& c : node.children)
        preorder_into(c, out);
}

} // namespace

std::vector<const RegionNode*> regions_preorder(const VectorDocument& doc) {
    std::vector<const RegionNode*> out;
    for (const auto& r : doc.roots)
        preorder_into(r, out);
    return out;
}

std::vector<RegionNode*> regions_preorder(VectorDocument& doc) {
    std::vector<RegionNode*> out;
    for (auto& r : doc.roots)
        preorder_into(r, out);
    return out;
}

std::vector<const RegionNode*> paint_order(const VectorDocument& doc) {
    auto out = regions_preorder(doc);
    std::stable_sort(out.begin(), out.end(), [](const RegionNode* a, const RegionNode* b) { return a->layer < b->layer; });
    return out;
}

std::size_t node_count(const VectorDocument& doc) { return regions_preorder(doc).size(); }

int max_layer(const VectorDocument& doc) {
    int k = 0;
    for (const RegionNode* r : regions_preorder(doc))
        k = std::max(k, r->layer);
    return k;
}

const RegionNode* find_region(const VectorDocument& doc, const std::string& id) {
    for (const RegionNode* r : regions_preorder(doc))
        if (r->id == id)
            return r;
    return nullptr;
}

RegionNode* find_region(VectorDocument& doc, const std::string& id) {
    for (RegionNode* r : regions_preorder(doc))
        if (r->id == id)
            return r;
    return nullptr;
}

namespace {

bool find_parent(const RegionNode& node, const std::string& id, std::optional<std::string>& out) {
    for (const auto& c : node.children) {
        if (c.id == id) {
            out = node.id;
            return true;
        }
        if (find_parent(c, id, out))
            return true;
    }
    return false;
}

void check_node(const RegionNode& n, const RegionNode* parent, std::set<std::string>& ids,
                std::vector<std::string>& out) {
    if (!ids.insert(n.id).second)
        out.push_back("duplicate region id '" + n.id + "'");
    if (parent && n.layer != parent->layer + 1)
        out.push_back("region '" + n.id + "' has layer " + std::to_string(n.layer) + " under parent layer " +
                      std::to_string(parent->layer));
    if (n.path.segment_count() == 0)
        out.push_back("region '" + n.id + "' has an empty path");
    for (std::size_t i = 0; i < n.point_count(); ++i)
        if (!geometry::is_finite(n.point(i))) {
            out.push_back("region '" + n.id + "' has a non-finite control point");
            break;
        }
    for (double c : n.fill)
        if (!(c >= 0.0 && c <= 1.0)) {
            out.push_back("region '" + n.id + "' has a fill outside [0,1]");
            break;
        }
    for (const auto& c : n.children)
        check_node(c, &n, ids, out);
}

} // namespace

std::optional<std::string> parent_of(const VectorDocument& doc, const std::string& id) {
    std::optional<std::string> out;
    for (const auto& r : doc.roots)
        if (find_parent(r, id, out))
            break;
    return out;
}

std::vector<std::string> check_document(const VectorDocument& doc) {
    std::vector<std::string> out;
    std::set<std::string> ids;
    for (const auto& r : doc.roots)
        check_node(r, nullptr, ids, out);
    return out;
}

std::size_t parameter_count(const VectorDocument& doc) {
    std::size_t n = 0;
    for (const RegionNode* r : regions_preorder(doc))
        n += 2 * r->point_count() + 3;
    return n;
}

std::vector<double> pack_parameters(const VectorDocument& doc) {
    std::vector<double> out;
    out.reserve(parameter_count(doc));
    for (const RegionNode* r : regions_preorder(doc)) {
        for (std::size_t i = 0; i < r->point_count(); ++i) {
            out.push_back(r->point(i).x);
            out.push_back(r->point(i).y);
        }
        out.insert(out.end(), r->fill.begin(), r->fill.end());
    }
    return out;
}

void unpack_parameters(VectorDocument& doc, const std::vector<double>& params) {
    if (params.size() != parameter_count(doc))
        throw FormatError("unpack_parameters: parameter count mismatch");
    std::size_t k = 0;
    for (RegionNode* r : regions_preorder(doc)) {
        for (std::size_t i = 0; i < r->point_count(); ++i) {
            r->point(i) = {params[k], params[k + 1]};
            k += 2;
        }
        for (double& c : r->fill)
            c = params[k++];
    }
}

} // namespace layervec
