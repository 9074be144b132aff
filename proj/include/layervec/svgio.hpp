#pragma once

#include "layervec/document.hpp"

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace layervec::svg {

struct Dialect {
    std::string version = "1";
    int precision = 3; // decimal places for coordinates
};

// Nested <g> per region (id, data-layer, data-parent, data-mask), one <path>
// per region with absolute M/C/Z data, fill as #rrggbb, even-odd fill rule.
// Throws FormatError on non-finite coordinates or invalid documents.
std::string write_svg(const VectorDocument& doc, const Dialect& dialect = {});

struct Warning {
    std::size_t offset = 0; // byte offset of the offending construct
    std::string message;
};

struct ParseResult {
    VectorDocument doc;
    std::vector<Warning> warnings;
};

// Accepts the dialect plus a tolerant subset: L/H/V (absolute or relative)
// become cubics with inner points at thirds, m/c are accepted, fills may be
// #rgb, #rrggbb, rgb(...) or a CSS colour name, and translate() transforms
// on groups and paths are applied. Unknown elements and attributes are
// skipped with a warning. Throws ParseError with a byte offset.
ParseResult parse_svg_with_warnings(std::string_view text);
VectorDocument parse_svg(std::string_view text);

std::string to_hex(const Color& c);

enum class Change { unchanged, moved, recolored, reshaped, added, removed };

const char* change_name(Change c);

struct RegionDiff {
    std::string id;
    Change kind = Change::unchanged;
    bool recolored = false;      // also set alongside moved / reshaped
    geometry::Point2 offset{};   // centroid displacement for moved
};

struct DiffOptions {
    double geometry_tolerance = 1e-6; // canvas units
    double color_tolerance = 0.5 / 255.0;
};

// Matches regions by id. A matched region whose control points differ only
// by a common translation is moved; any other point change, a different
// point count, layer or parent is reshaped. Entries follow a's pre-order,
// then regions only present in b.
std::vector<RegionDiff> diff_documents(const VectorDocument& a, const VectorDocument& b, const DiffOptions& opts = {});

} // namespace layervec::svg
