#include "layervec/edit.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>

namespace layervec::edit {

using nlohmann::json;

namespace {

struct Location {
    std::vector<RegionNode>* siblings = nullptr;
    std::size_t index = 0;
    RegionNode* parent = nullptr;

    RegionNode& node() const { return (*siblings)[index]; }
};

bool locate(std::vector<RegionNode>& list, RegionNode* parent, const std::string& id, Location& out) {
    for (std::size_t i = 0; i < list.size(); ++i) {
        if (list[i].id == id) {
            out = {&list, i, parent};
            return true;
        }
        if (locate(list[i].children, &list[i], id, out))
            return true;
    }
    return false;
}

Location require(VectorDocument& doc, const std::string& id) {
    Location loc;
    if (!locate(doc.roots, nullptr, id, loc))
        throw DomainError("unknown region id '" + id + "'");
    return loc;
}

void relayer(RegionNode& n, int layer) {
    n.layer = layer;
    for (auto& c : n.children)
        relayer(c, layer + 1);
}

void for_each_point(RegionNode& n, bool deep, const std::function<void(Point2&)>& fn) {
    for (std::size_t i = 0; i < n.point_count(); ++i)
        fn(n.point(i));
    if (deep)
        for (auto& c : n.children)
            for_each_point(c, true, fn);
}

void for_each_node(const RegionNode& n, const std::function<void(const RegionNode&)>& fn) {
    fn(n);
    for (const auto& c : n.children)
        for_each_node(c, fn);
}

Point2 bbox_center(RegionNode& n, bool deep) {
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
    for_each_point(n, deep, [&](Point2& p) {
        x0 = std::min(x0, p.x);
        y0 = std::min(y0, p.y);
        x1 = std::max(x1, p.x);
        y1 = std::max(y1, p.y);
    });
    if (x0 > x1)
        return {};
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1)};
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v))
        throw DomainError(std::string(what) + " must be finite");
}

std::set<std::string> ids_of(const VectorDocument& doc) {
    std::set<std::string> ids;
    for (const auto* r : regions_preorder(doc))
        ids.insert(r->id);
    return ids;
}

std::string fresh_id(const std::string& base, std::set<std::string>& used) {
    if (used.insert(base).second)
        return base;
    for (int n = 1;; ++n) {
        std::string candidate = base + "_" + std::to_string(n);
        if (used.insert(candidate).second)
            return candidate;
    }
}

void apply_affine(RegionNode& n, const Affine& m) {
    for_each_point(n, true, [&](Point2& p) { p = m(p); });
}

} // namespace

const char* kind_name(OpKind k) {
    switch (k) {
    case OpKind::translate: return "translate";
    case OpKind::scale: return "scale";
    case OpKind::rotate: return "rotate";
    case OpKind::recolor: return "recolor";
    case OpKind::insert: return "insert";
    case OpKind::remove: return "remove";
    case OpKind::reorder: return "reorder";
    case OpKind::set_points: return "set_points";
    }
    return "?";
}

EditOp translate(std::string id, Point2 offset, bool shallow) {
    EditOp op;
    op.kind = OpKind::translate;
    op.target = std::move(id);
    op.vector = offset;
    op.shallow = shallow;
    return op;
}

EditOp scale(std::string id, Point2 factors, bool shallow) {
    EditOp op;
    op.kind = OpKind::scale;
    op.target = std::move(id);
    op.vector = factors;
    op.shallow = shallow;
    return op;
}

EditOp rotate(std::string id, double degrees, bool shallow) {
    EditOp op;
    op.kind = OpKind::rotate;
    op.target = std::move(id);
    op.degrees = degrees;
    op.shallow = shallow;
    return op;
}

EditOp recolor(std::string id, Color c) {
    EditOp op;
    op.kind = OpKind::recolor;
    op.target = std::move(id);
    op.color = c;
    return op;
}

EditOp insert(std::string parent, RegionNode region, int index) {
    EditOp op;
    op.kind = OpKind::insert;
    op.target = std::move(parent);
    op.region = std::move(region);
    op.index = index;
    return op;
}

EditOp remove(std::string id, bool shallow) {
    EditOp op;
    op.kind = OpKind::remove;
    op.target = std::move(id);
    op.shallow = shallow;
    return op;
}

EditOp reorder(std::string id, int index) {
    EditOp op;
    op.kind = OpKind::reorder;
    op.target = std::move(id);
    op.index = index;
    return op;
}

EditOp set_points(std::string id, std::vector<Point2> points) {
    EditOp op;
    op.kind = OpKind::set_points;
    op.target = std::move(id);
    op.points = std::move(points);
    return op;
}

Affine Affine::scaling(double sx, double sy, Point2 pivot) {
    return {sx, 0, 0, sy, pivot.x * (1 - sx), pivot.y * (1 - sy)};
}

Affine Affine::rotation(double degrees, Point2 pivot) {
    const double r = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(r), s = std::sin(r);
    return {c, s, -s, c, pivot.x - c * pivot.x + s * pivot.y, pivot.y - s * pivot.x - c * pivot.y};
}

VectorDocument apply_edit(const VectorDocument& doc, const EditOp& op) {
    VectorDocument out = doc;
    switch (op.kind) {
    case OpKind::translate: {
        require_finite(op.vector.x, "translation");
        require_finite(op.vector.y, "translation");
        for_each_point(require(out, op.target).node(), !op.shallow, [&](Point2& p) { p += op.vector; });
        break;
    }
    case OpKind::scale:
    case OpKind::rotate: {
        RegionNode& n = require(out, op.target).node();
        const Point2 pivot = op.pivot.value_or(bbox_center(n, !op.shallow));
        require_finite(pivot.x, "pivot");
        require_finite(pivot.y, "pivot");
        Affine m;
        if (op.kind == OpKind::scale) {
            require_finite(op.vector.x, "scale factor");
            require_finite(op.vector.y, "scale factor");
            if (op.vector.x == 0.0 || op.vector.y == 0.0)
                throw DomainError("scale factor 0 is not invertible");
            m = Affine::scaling(op.vector.x, op.vector.y, pivot);
        } else {
            require_finite(op.degrees, "rotation angle");
            m = Affine::rotation(op.degrees, pivot);
        }
        for_each_point(n, !op.shallow, [&](Point2& p) { p = m(p); });
        break;
    }
    case OpKind::recolor: {
        for (double v : op.color)
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw DomainError("colour channels must lie in [0,1]");
        require(out, op.target).node().fill = op.color;
        break;
    }
    case OpKind::insert: {
        if (!op.region)
            throw DomainError("insert without a region");
        RegionNode r = *op.region;
        std::vector<RegionNode>* siblings = &out.roots;
        int layer = 1;
        if (!op.target.empty()) {
            RegionNode& parent = require(out, op.target).node();
            siblings = &parent.children;
            layer = parent.layer + 1;
        }
        if (op.layer != 0 && op.layer != layer)
            throw DomainError("insert at layer " + std::to_string(op.layer) + " under a parent requiring layer " +
                              std::to_string(layer));
        const auto existing = ids_of(out);
        for_each_node(r, [&](const RegionNode& n) {
            if (existing.count(n.id))
                throw DomainError("insert: id '" + n.id + "' already exists");
        });
        relayer(r, layer);
        const auto pos = (op.index < 0 || static_cast<std::size_t>(op.index) >= siblings->size())
                             ? siblings->size()
                             : static_cast<std::size_t>(op.index);
        siblings->insert(siblings->begin() + static_cast<std::ptrdiff_t>(pos), std::move(r));
        break;
    }
    case OpKind::remove: {
        const Location loc = require(out, op.target);
        RegionNode removed = std::move(loc.node());
        loc.siblings->erase(loc.siblings->begin() + static_cast<std::ptrdiff_t>(loc.index));
        if (op.shallow) {
            for (auto& c : removed.children)
                relayer(c, removed.layer);
            loc.siblings->insert(loc.siblings->begin() + static_cast<std::ptrdiff_t>(loc.index),
                                 std::make_move_iterator(removed.children.begin()),
                                 std::make_move_iterator(removed.children.end()));
        }
        break;
    }
    case OpKind::reorder: {
        const Location loc = require(out, op.target);
        const auto n = loc.siblings->size();
        if (op.index < -1 || op.index >= static_cast<int>(n))
            throw DomainError("reorder index " + std::to_string(op.index) + " out of range");
        const std::size_t to = op.index < 0 ? n - 1 : static_cast<std::size_t>(op.index);
        RegionNode moved = std::move(loc.node());
        loc.siblings->erase(loc.siblings->begin() + static_cast<std::ptrdiff_t>(loc.index));
        loc.siblings->insert(loc.siblings->begin() + static_cast<std::ptrdiff_t>(to), std::move(moved));
        break;
    }
    case OpKind::set_points: {
        RegionNode& n = require(out, op.target).node();
        if (op.points.size() != n.point_count())
            throw DomainError("set_points: expected " + std::to_string(n.point_count()) + " points, got " +
                              std::to_string(op.points.size()));
        for (std::size_t i = 0; i < op.points.size(); ++i) {
            if (!geometry::is_finite(op.points[i]))
                throw DomainError("set_points: non-finite point");
            n.point(i) = op.points[i];
        }
        break;
    }
    }
    if (const auto problems = check_document(out); !problems.empty())
        throw DomainError(std::string(kind_name(op.kind)) + ": " + problems.front());
    return out;
}

VectorDocument apply_edit_script(const VectorDocument& doc, const std::vector<EditOp>& ops) {
    VectorDocument cur = doc;
    for (std::size_t i = 0; i < ops.size(); ++i) {
        try {
            cur = apply_edit(cur, ops[i]);
        } catch (const Error& e) {
            throw ScriptError(i, e.what());
        }
    }
    return cur;
}

// ---------------------------------------------------------------- JSON

namespace {

json point_json(Point2 p) { return json::array({p.x, p.y}); }

json points_json(const std::vector<Point2>& pts) {
    json a = json::array();
    for (const auto& p : pts)
        a.push_back(point_json(p));
    return a;
}

json region_json(const RegionNode& r) {
    json j;
    j["id"] = r.id;
    j["layer"] = r.layer;
    j["fill"] = json::array({r.fill[0], r.fill[1], r.fill[2]});
    j["path"] = points_json(r.path.points());
    if (!r.subpaths.empty()) {
        j["subpaths"] = json::array();
        for (const auto& s : r.subpaths)
            j["subpaths"].push_back(points_json(s.points()));
    }
    if (r.source_mask_id)
        j["mask"] = *r.source_mask_id;
    if (!r.children.empty()) {
        j["children"] = json::array();
        for (const auto& c : r.children)
            j["children"].push_back(region_json(c));
    }
    return j;
}

double number(const json& j, const char* what) {
    if (!j.is_number())
        throw FormatError(std::string(what) + " must be a number");
    return j.get<double>();
}

Point2 parse_point(const json& j) {
    if (!j.is_array() || j.size() != 2)
        throw FormatError("a point must be [x, y]");
    return {number(j[0], "x"), number(j[1], "y")};
}

std::vector<Point2> parse_points(const json& j) {
    if (!j.is_array())
        throw FormatError("points must be an array");
    std::vector<Point2> pts;
    for (const auto& p : j)
        pts.push_back(parse_point(p));
    return pts;
}

geometry::BezierPath parse_path(const json& j) {
    auto pts = parse_points(j);
    if (pts.size() % 3 != 0 || pts.empty())
        throw FormatError("a closed path needs 3·L control points");
    return geometry::BezierPath(std::move(pts));
}

Color parse_color(const json& j) {
    if (j.is_array() && j.size() == 3)
        return {number(j[0], "red"), number(j[1], "green"), number(j[2], "blue")};
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s.size() == 7 && s[0] == '#') {
            Color c{};
            for (int k = 0; k < 3; ++k) {
                std::size_t used = 0;
                int v = 0;
                try {
                    v = std::stoi(s.substr(static_cast<std::size_t>(1 + 2 * k), 2), &used, 16);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used != 2)
                    throw FormatError("bad hex colour " + s);
                c[static_cast<std::size_t>(k)] = v / 255.0;
            }
            return c;
        }
    }
    throw FormatError("colour must be \"#rrggbb\" or [r, g, b]");
}

const json& field(const json& j, const char* key) {
    if (!j.contains(key))
        throw FormatError(std::string("missing field '") + key + "'");
    return j.at(key);
}

std::string string_field(const json& j, const char* key) {
    const json& v = field(j, key);
    if (!v.is_string())
        throw FormatError(std::string("field '") + key + "' must be a string");
    return v.get<std::string>();
}

int int_field(const json& j, const char* key, int fallback) {
    if (!j.contains(key))
        return fallback;
    const json& v = j.at(key);
    if (!v.is_number_integer())
        throw FormatError(std::string("field '") + key + "' must be an integer");
    const auto x = v.get<long long>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw FormatError(std::string("field '") + key + "' out of range");
    return static_cast<int>(x);
}

bool bool_field(const json& j, const char* key) {
    if (!j.contains(key))
        return false;
    if (!j.at(key).is_boolean())
        throw FormatError(std::string("field '") + key + "' must be a boolean");
    return j.at(key).get<bool>();
}

RegionNode parse_region(const json& j, int depth) {
    if (depth > 256)
        throw FormatError("region nesting too deep");
    if (!j.is_object())
        throw FormatError("region must be an object");
    RegionNode r;
    r.id = string_field(j, "id");
    r.layer = int_field(j, "layer", 1);
    r.fill = parse_color(field(j, "fill"));
    r.path = parse_path(field(j, "path"));
    if (j.contains("subpaths")) {
        if (!j.at("subpaths").is_array())
            throw FormatError("subpaths must be an array");
        for (const auto& s : j.at("subpaths"))
            r.subpaths.push_back(parse_path(s));
    }
    if (j.contains("mask"))
        r.source_mask_id = string_field(j, "mask");
    if (j.contains("children")) {
        if (!j.at("children").is_array())
            throw FormatError("children must be an array");
        for (const auto& c : j.at("children"))
            r.children.push_back(parse_region(c, depth + 1));
    }
    return r;
}

EditOp parse_op(const json& j) {
    if (!j.is_object())
        throw FormatError("edit must be an object");
    const std::string kind = string_field(j, "op");
    EditOp op;
    op.shallow = bool_field(j, "shallow");
    if (j.contains("pivot"))
        op.pivot = parse_point(j.at("pivot"));
    if (kind == "translate") {
        op.kind = OpKind::translate;
        op.target = string_field(j, "id");
        op.vector = {j.contains("dx") ? number(j.at("dx"), "dx") : 0.0, j.contains("dy") ? number(j.at("dy"), "dy") : 0.0};
    } else if (kind == "scale") {
        op.kind = OpKind::scale;
        op.target = string_field(j, "id");
        if (j.contains("factor")) {
            const double f = number(j.at("factor"), "factor");
            op.vector = {f, f};
        } else {
            op.vector = {number(field(j, "sx"), "sx"), number(field(j, "sy"), "sy")};
        }
    } else if (kind == "rotate") {
        op.kind = OpKind::rotate;
        op.target = string_field(j, "id");
        op.degrees = number(field(j, "degrees"), "degrees");
    } else if (kind == "recolor") {
        op.kind = OpKind::recolor;
        op.target = string_field(j, "id");
        op.color = parse_color(field(j, "fill"));
    } else if (kind == "insert") {
        op.kind = OpKind::insert;
        op.target = j.contains("parent") ? string_field(j, "parent") : "";
        op.layer = int_field(j, "layer", 0);
        op.index = int_field(j, "index", -1);
        op.region = parse_region(field(j, "region"), 0);
    } else if (kind == "remove") {
        op.kind = OpKind::remove;
        op.target = string_field(j, "id");
    } else if (kind == "reorder") {
        op.kind = OpKind::reorder;
        op.target = string_field(j, "id");
        op.index = int_field(j, "index", -1);
    } else if (kind == "set_points") {
        op.kind = OpKind::set_points;
        op.target = string_field(j, "id");
        op.points = parse_points(field(j, "points"));
    } else {
        throw FormatError("unknown op '" + kind + "'");
    }
    return op;
}

json op_json(const EditOp& op) {
    json j;
    j["op"] = kind_name(op.kind);
    switch (op.kind) {
    case OpKind::translate:
        j["id"] = op.target;
        j["dx"] = op.vector.x;
        j["dy"] = op.vector.y;
        break;
    case OpKind::scale:
        j["id"] = op.target;
        j["sx"] = op.vector.x;
        j["sy"] = op.vector.y;
        break;
    case OpKind::rotate:
        j["id"] = op.target;
        j["degrees"] = op.degrees;
        break;
    case OpKind::recolor:
        j["id"] = op.target;
        j["fill"] = json::array({op.color[0], op.color[1], op.color[2]});
        break;
    case OpKind::insert:
        j["parent"] = op.target;
        if (op.layer != 0)
            j["layer"] = op.layer;
        j["index"] = op.index;
        if (op.region)
            j["region"] = region_json(*op.region);
        break;
    case OpKind::remove:
        j["id"] = op.target;
        break;
    case OpKind::reorder:
        j["id"] = op.target;
        j["index"] = op.index;
        break;
    case OpKind::set_points:
        j["id"] = op.target;
        j["points"] = points_json(op.points);
        break;
    }
    if (op.shallow)
        j["shallow"] = true;
    if (op.pivot)
        j["pivot"] = point_json(*op.pivot);
    return j;
}

} // namespace

std::vector<EditOp> parse_edit_script(std::string_view json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("edit script is not valid JSON: ") + e.what());
    }
    if (!j.is_array())
        throw FormatError("edit script must be a JSON array");
    std::vector<EditOp> ops;
    for (std::size_t i = 0; i < j.size(); ++i) {
        try {
            ops.push_back(parse_op(j[i]));
        } catch (const Error& e) {
            throw ScriptError(i, e.what());
        }
    }
    return ops;
}

std::string write_edit_script(const std::vector<EditOp>& ops) {
    json j = json::array();
    for (const auto& op : ops)
        j.push_back(op_json(op));
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- diff replay

std::vector<EditOp> script_from_diff(const VectorDocument& a, const VectorDocument& b) {
    std::vector<EditOp> ops;
    VectorDocument cur = a;
    auto emit = [&](EditOp op) {
        cur = apply_edit(cur, op);
        ops.push_back(std::move(op));
    };
    auto same_shape = [](const RegionNode& x, const RegionNode& y) {
        if (x.path.points().size() != y.path.points().size() || x.subpaths.size() != y.subpaths.size())
            return false;
        for (std::size_t s = 0; s < x.subpaths.size(); ++s)
            if (x.subpaths[s].points().size() != y.subpaths[s].points().size())
                return false;
        return true;
    };

    // structural changes: drop, re-insert later
    for (const RegionNode* ra : regions_preorder(a)) {
        const RegionNode* rb = find_region(b, ra->id);
        const bool keep = rb && rb->layer == ra->layer && parent_of(a, ra->id) == parent_of(b, ra->id) &&
                          same_shape(*ra, *rb);
        if (!keep && find_region(cur, ra->id))
            emit(remove(ra->id));
    }

    std::set<std::string> inserted;
    std::function<void(const std::vector<RegionNode>&, const std::string&)> add = [&](const std::vector<RegionNode>& list,
                                                                                   const std::string& parent) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            const RegionNode& rb = list[i];
            if (!find_region(cur, rb.id)) {
                RegionNode copy = rb;
                copy.children.clear();
                emit(insert(parent, std::move(copy), static_cast<int>(i)));
                inserted.insert(rb.id);
            }
            add(rb.children, rb.id);
        }
    };
    add(b.roots, "");

    for (const RegionNode* rb : regions_preorder(b)) {
        if (inserted.count(rb->id))
            continue;
        const RegionNode* rc = find_region(cur, rb->id);
        const std::size_t n = rb->point_count();
        Point2 t{};
        for (std::size_t i = 0; i < n; ++i)
            t += rb->point(i) - rc->point(i);
        if (n > 0)
            t = (1.0 / static_cast<double>(n)) * t;
        bool rigid = true, changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const Point2 d = rb->point(i) - rc->point(i);
            changed |= d != Point2{};
            rigid &= geometry::distance(d, t) <= 1e-9 * std::max(1.0, geometry::norm(rb->point(i)));
        }
        if (changed) {
            if (rigid)
                emit(translate(rb->id, t, true));
            else {
                std::vector<Point2> pts(n);
                for (std::size_t i = 0; i < n; ++i)
                    pts[i] = rb->point(i);
                emit(set_points(rb->id, std::move(pts)));
            }
        }
        if (rc = find_region(cur, rb->id); rc->fill != rb->fill)
            emit(recolor(rb->id, rb->fill));
    }

    std::function<void(const std::vector<RegionNode>&)> order = [&](const std::vector<RegionNode>& list) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            const auto parent = parent_of(cur, list[i].id);
            const auto& siblings = parent ? find_region(cur, *parent)->children : cur.roots;
            if (i >= siblings.size() || siblings[i].id != list[i].id)
                emit(reorder(list[i].id, static_cast<int>(i)));
            order(list[i].children);
        }
    };
    order(b.roots);
    return ops;
}

// ---------------------------------------------------------------- composition

VectorDocument compose_documents(const VectorDocument& base, const VectorDocument& overlay, const Affine& placement,
                                 int layer, const std::string& parent) {
    for (double v : {placement.a, placement.b, placement.c, placement.d, placement.e, placement.f})
        require_finite(v, "placement");
    if (std::abs(placement.determinant()) < 1e-12)
        throw DomainError("placement is not invertible");
    const int top = max_layer(base);
    if (layer < 1 || layer > top + 1)
        throw DomainError("compose layer " + std::to_string(layer) + " outside 1.." + std::to_string(top + 1));
    VectorDocument out = base;
    if (overlay.roots.empty())
        return out;

    std::vector<RegionNode> incoming = overlay.roots;
    std::set<std::string> used = ids_of(base);
    std::function<void(RegionNode&)> rename = [&](RegionNode& n) {
        n.id = fresh_id(n.id, used);
        for (auto& c : n.children)
            rename(c);
    };
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
    for (auto& r : incoming) {
        apply_affine(r, placement);
        relayer(r, layer);
        rename(r);
        for_each_point(r, true, [&](Point2& p) {
            x0 = std::min(x0, p.x);
            y0 = std::min(y0, p.y);
            x1 = std::max(x1, p.x);
            y1 = std::max(y1, p.y);
        });
    }

    std::vector<RegionNode>* target = &out.roots;
    if (layer > 1) {
        RegionNode* host = nullptr;
        if (!parent.empty()) {
            host = &require(out, parent).node();
            if (host->layer != layer - 1)
                throw DomainError("compose parent '" + parent + "' is not on layer " + std::to_string(layer - 1));
        } else {
            double best = -1.0;
            for (RegionNode* r : regions_preorder(out)) {
                if (r->layer != layer - 1)
                    continue;
                double rx0 = std::numeric_limits<double>::infinity(), ry0 = rx0, rx1 = -rx0, ry1 = -rx0;
                for_each_point(*r, false, [&](Point2& p) {
                    rx0 = std::min(rx0, p.x);
                    ry0 = std::min(ry0, p.y);
                    rx1 = std::max(rx1, p.x);
                    ry1 = std::max(ry1, p.y);
                });
                const double overlap =
                    std::max(0.0, std::min(x1, rx1) - std::max(x0, rx0)) * std::max(0.0, std::min(y1, ry1) - std::max(y0, ry0));
                if (overlap > best) {
                    best = overlap;
                    host = r;
                }
            }
        }
        target = &host->children;
    } else if (!parent.empty()) {
        throw DomainError("layer-1 regions have no parent");
    }
    for (auto& r : incoming)
        target->push_back(std::move(r));
    if (const auto problems = check_document(out); !problems.empty())
        throw DomainError("compose: " + problems.front());
    return out;
}

// ---------------------------------------------------------------- masked splice

Point2 coverage_centroid(const VectorDocument& doc, const RegionNode& region, const raster::RenderParams& params) {
    const auto cov = raster::region_coverage(doc, region, params, {doc.width, doc.height});
    double sum = 0.0, sx = 0.0, sy = 0.0;
    for (int y = 0; y < cov.height; ++y)
        for (int x = 0; x < cov.width; ++x) {
            const double c = cov.at(x, y);
            sum += c;
            sx += c * (x + 0.5);
            sy += c * (y + 0.5);
        }
    if (sum > 0.0)
        return {sx / sum, sy / sum};
    Point2 mean{};
    const std::size_t n = region.point_count();
    for (std::size_t i = 0; i < n; ++i)
        mean += region.point(i);
    return n ? (1.0 / static_cast<double>(n)) * mean : mean;
}

VectorDocument masked_splice(const VectorDocument& source, const VectorDocument& target, const BinaryMask& mask,
                             const raster::RenderParams& params) {
    if (source.width != target.width || source.height != target.height)
        throw FormatError("masked_splice: documents differ in canvas size");
    if (mask.width != source.width || mask.height != source.height)
        throw FormatError("masked_splice: mask size differs from the canvas");
    auto inside = [&](const VectorDocument& doc, const RegionNode& r) {
        const Point2 c = coverage_centroid(doc, r, params);
        return mask.test(static_cast<int>(std::floor(c.x)), static_cast<int>(std::floor(c.y)));
    };

    VectorDocument out;
    out.width = source.width;
    out.height = source.height;
    std::set<std::string> used;
    std::function<void(const VectorDocument&, const RegionNode&, bool, std::vector<RegionNode>&, int)> pick =
        [&](const VectorDocument& doc, const RegionNode& n, bool want_inside, std::vector<RegionNode>& into, int layer) {
            if (inside(doc, n) == want_inside) {
                RegionNode copy = n;
                copy.children.clear();
                copy.layer = layer;
                copy.id = fresh_id(n.id, used);
                for (const auto& c : n.children)
                    pick(doc, c, want_inside, copy.children, layer + 1);
                into.push_back(std::move(copy));
            } else {
                for (const auto& c : n.children)
                    pick(doc, c, want_inside, into, layer);
            }
        };
    for (const auto& r : source.roots)
        pick(source, r, false, out.roots, 1);
    for (const auto& r : target.roots)
        pick(target, r, true, out.roots, 1);
    return out;
}

} // namespace layervec::edit
