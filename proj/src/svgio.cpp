#include "layervec/svgio.hpp"

#include "layervec/error.hpp"
#include "layervec/image_io.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace layervec::svg {

using geometry::BezierPath;
using geometry::Point2;

namespace {

constexpr int kMaxDepth = 256;

// ---------------------------------------------------------------- writing

std::string format_number(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, v);
    std::string s = buf;
    if (s.find('.') != std::string::npos) {
        while (!s.empty() && s.back() == '0')
            s.pop_back();
        if (!s.empty() && s.back() == '.')
            s.pop_back();
    }
    if (s == "-0")
        s = "0";
    return s;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

void append_subpath(std::string& d, const BezierPath& path, int precision) {
    if (path.empty())
        return;
    auto pt = [&](Point2 p) {
        if (!geometry::is_finite(p))
            throw FormatError("write_svg: non-finite coordinate");
        return format_number(p.x, precision) + " " + format_number(p.y, precision);
    };
    if (!d.empty())
        d += ' ';
    d += "M " + pt(path.points()[0]);
    for (std::size_t i = 0; i < path.segment_count(); ++i) {
        const auto c = path.segment(i);
        d += " C " + pt(c.p1) + " " + pt(c.p2) + " " + pt(c.p3);
    }
    d += " Z";
}

void write_region(std::ostringstream& out, const RegionNode& r, const std::string& parent, int depth,
                  const Dialect& dialect) {
    const std::string pad(static_cast<std::size_t>(2 * depth), ' ');
    out << pad << "<g id=\"" << escape(r.id) << "\" data-layer=\"" << r.layer << "\" data-parent=\""
        << escape(parent) << "\"";
    if (r.source_mask_id)
        out << " data-mask=\"" << escape(*r.source_mask_id) << "\"";
    out << ">\n";
    std::string d;
    append_subpath(d, r.path, dialect.precision);
    for (const auto& s : r.subpaths)
        append_subpath(d, s, dialect.precision);
    out << pad << "  <path d=\"" << d << "\" fill=\"" << to_hex(r.fill) << "\" fill-rule=\"evenodd\"/>\n";
    for (const auto& c : r.children)
        write_region(out, c, r.id, depth + 1, dialect);
    out << pad << "</g>\n";
}

// ---------------------------------------------------------------- XML

struct Attribute {
    std::string name;
    std::string value;    // entity-decoded
    std::string_view raw; // as written
    std::size_t offset;   // of the raw value
};

struct Tag {
    std::string name;
    std::vector<Attribute> attrs;
    bool closing = false;
    bool self_closing = false;
    std::size_t offset = 0;

    const Attribute* find(std::string_view n) const {
        for (const auto& a : attrs)
            if (a.name == n)
                return &a;
        return nullptr;
    }
};

bool is_name_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == ':' || static_cast<unsigned char>(c) >= 0x80;
}
bool is_name_char(char c) {
    return is_name_start(c) || std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '.';
}
bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

class XmlReader {
public:
    explicit XmlReader(std::string_view text) : text_(text) {}

    // Next tag, skipping text, comments, processing instructions and
    // declarations. Returns false at end of input.
    bool next(Tag& tag) {
        for (;;) {
            while (pos_ < text_.size() && text_[pos_] != '<')
                ++pos_;
            if (pos_ >= text_.size())
                return false;
            const std::size_t start = pos_;
            if (starts_with("<!--")) {
                skip_past("-->", start, "unterminated comment");
                continue;
            }
            if (starts_with("<![CDATA[")) {
                skip_past("]]>", start, "unterminated CDATA section");
                continue;
            }
            if (starts_with("<?")) {
                skip_past("?>", start, "unterminated processing instruction");
                continue;
            }
            if (starts_with("<!")) {
                int bracket = 0;
                for (pos_ += 2; pos_ < text_.size(); ++pos_) {
                    if (text_[pos_] == '[')
                        ++bracket;
                    else if (text_[pos_] == ']')
                        --bracket;
                    else if (text_[pos_] == '>' && bracket <= 0)
                        break;
                }
                if (pos_ >= text_.size())
                    throw ParseError("unterminated declaration", start);
                ++pos_;
                continue;
            }
            read_tag(tag);
            return true;
        }
    }

private:
    bool starts_with(std::string_view s) const { return text_.substr(pos_, s.size()) == s; }

    void skip_past(std::string_view end, std::size_t start, const char* what) {
        const std::size_t e = text_.find(end, pos_ + 2);
        if (e == std::string_view::npos)
            throw ParseError(what, start);
        pos_ = e + end.size();
    }

    void skip_space() {
        while (pos_ < text_.size() && is_space(text_[pos_]))
            ++pos_;
    }

    std::string read_name() {
        if (pos_ >= text_.size() || !is_name_start(text_[pos_]))
            throw ParseError("expected a name", pos_);
        const std::size_t s = pos_;
        while (pos_ < text_.size() && is_name_char(text_[pos_]))
            ++pos_;
        return std::string(text_.substr(s, pos_ - s));
    }

    std::string decode(std::string_view raw, std::size_t offset) const {
        std::string out;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            if (raw[i] != '&') {
                out += raw[i];
                continue;
            }
            const std::size_t semi = raw.find(';', i);
            if (semi == std::string_view::npos || semi - i > 10)
                throw ParseError("malformed entity", offset + i);
            const std::string_view ent = raw.substr(i + 1, semi - i - 1);
            if (ent == "amp")
                out += '&';
            else if (ent == "lt")
                out += '<';
            else if (ent == "gt")
                out += '>';
            else if (ent == "quot")
                out += '"';
            else if (ent == "apos")
                out += '\'';
            else if (ent.size() > 1 && ent[0] == '#') {
                unsigned long code = 0;
                const bool hex = ent[1] == 'x' || ent[1] == 'X';
                const auto digits = ent.substr(hex ? 2 : 1);
                const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), code, hex ? 16 : 10);
                if (digits.empty() || res.ec != std::errc() || res.ptr != digits.data() + digits.size() ||
                    code == 0 || code > 0x10FFFF)
                    throw ParseError("malformed character reference", offset + i);
                // UTF-8 encode
                if (code < 0x80) {
                    out += static_cast<char>(code);
                } else if (code < 0x800) {
                    out += static_cast<char>(0xC0 | (code >> 6));
                    out += static_cast<char>(0x80 | (code & 0x3F));
                } else if (code < 0x10000) {
                    out += static_cast<char>(0xE0 | (code >> 12));
                    out += static_cast<char>(0x80 | ((code >> 6) & 0x3F));
                    out += static_cast<char>(0x80 | (code & 0x3F));
                } else {
                    out += static_cast<char>(0xF0 | (code >> 18));
                    out += static_cast<char>(0x80 | ((code >> 12) & 0x3F));
                    out += static_cast<char>(0x80 | ((code >> 6) & 0x3F));
                    out += static_cast<char>(0x80 | (code & 0x3F));
                }
            } else {
                throw ParseError("unknown entity '" + std::string(ent) + "'", offset + i);
            }
            i = semi;
        }
        return out;
    }

    void read_tag(Tag& tag) {
        tag = Tag{};
        tag.offset = pos_;
        ++pos_; // '<'
        if (pos_ < text_.size() && text_[pos_] == '/') {
            ++pos_;
            tag.closing = true;
            tag.name = read_name();
            skip_space();
            if (pos_ >= text_.size() || text_[pos_] != '>')
                throw ParseError("expected '>' in end tag", pos_);
            ++pos_;
            return;
        }
        tag.name = read_name();
        for (;;) {
            const std::size_t before = pos_;
            skip_space();
            if (pos_ >= text_.size())
                throw ParseError("unterminated tag <" + tag.name + ">", tag.offset);
            if (text_[pos_] == '>') {
                ++pos_;
                return;
            }
            if (text_[pos_] == '/') {
                if (pos_ + 1 >= text_.size() || text_[pos_ + 1] != '>')
                    throw ParseError("expected '/>'", pos_);
                pos_ += 2;
                tag.self_closing = true;
                return;
            }
            if (before == pos_)
                throw ParseError("expected whitespace before attribute", pos_);
            Attribute a;
            a.name = read_name();
            skip_space();
            if (pos_ >= text_.size() || text_[pos_] != '=')
                throw ParseError("expected '=' after attribute " + a.name, pos_);
            ++pos_;
            skip_space();
            if (pos_ >= text_.size() || (text_[pos_] != '"' && text_[pos_] != '\''))
                throw ParseError("expected quoted value for attribute " + a.name, pos_);
            const char q = text_[pos_++];
            const std::size_t end = text_.find(q, pos_);
            if (end == std::string_view::npos)
                throw ParseError("unterminated attribute value", pos_ - 1);
            a.raw = text_.substr(pos_, end - pos_);
            if (a.raw.find('<') != std::string_view::npos)
                throw ParseError("'<' in attribute value", pos_ + a.raw.find('<'));
            a.offset = pos_;
            a.value = decode(a.raw, pos_);
            pos_ = end + 1;
            for (const auto& other : tag.attrs)
                if (other.name == a.name)
                    throw ParseError("duplicate attribute " + a.name, a.offset);
            tag.attrs.push_back(std::move(a));
        }
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------- path data

struct ParsedPath {
    std::vector<BezierPath> subpaths;
};

class PathParser {
public:
    PathParser(std::string_view d, std::size_t base, Point2 offset, std::vector<Warning>& warnings)
        : d_(d), base_(base), offset_(offset), warnings_(warnings) {}

    ParsedPath parse() {
        skip_sep();
        char cmd = 0;
        while (pos_ < d_.size()) {
            const char c = d_[pos_];
            if (std::isalpha(static_cast<unsigned char>(c))) {
                cmd = c;
                cmd_offset_ = pos_;
                ++pos_;
                if (!std::strchr("MmLlHhVvCcZz", cmd))
                    throw ParseError(std::string("unsupported path command '") + cmd + "'", base_ + cmd_offset_);
                if (cmd == 'Z' || cmd == 'z') {
                    close_subpath(false);
                    skip_sep();
                    continue;
                }
            } else if (cmd == 0) {
                throw ParseError("path data must start with a moveto", base_ + pos_);
            } else if (cmd == 'Z' || cmd == 'z') {
                throw ParseError("unexpected number after closepath", base_ + pos_);
            }
            run(cmd);
            // implicit lineto after moveto
            if (cmd == 'M')
                cmd = 'L';
            else if (cmd == 'm')
                cmd = 'l';
            skip_sep();
        }
        if (open_)
            close_subpath(true);
        return std::move(out_);
    }

private:
    void skip_sep() {
        while (pos_ < d_.size() && (is_space(d_[pos_]) || d_[pos_] == ','))
            ++pos_;
    }

    double number() {
        skip_sep();
        const std::size_t s = pos_;
        std::size_t i = pos_;
        if (i < d_.size() && (d_[i] == '+' || d_[i] == '-'))
            ++i;
        std::size_t digits = 0;
        while (i < d_.size() && std::isdigit(static_cast<unsigned char>(d_[i])))
            ++i, ++digits;
        if (i < d_.size() && d_[i] == '.') {
            ++i;
            while (i < d_.size() && std::isdigit(static_cast<unsigned char>(d_[i])))
                ++i, ++digits;
        }
        if (digits == 0)
            throw ParseError("expected a number in path data", base_ + s);
        if (i < d_.size() && (d_[i] == 'e' || d_[i] == 'E')) {
            std::size_t j = i + 1;
            if (j < d_.size() && (d_[j] == '+' || d_[j] == '-'))
                ++j;
            std::size_t ed = 0;
            while (j < d_.size() && std::isdigit(static_cast<unsigned char>(d_[j])))
                ++j, ++ed;
            if (ed > 0)
                i = j;
        }
        std::string tok(d_.substr(s, i - s));
        if (tok[0] == '+')
            tok.erase(0, 1);
        double v = 0.0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(v))
            throw ParseError("number out of range in path data", base_ + s);
        pos_ = i;
        return v;
    }

    Point2 point(bool relative) {
        const double x = number();
        const double y = number();
        return relative ? cur_ + Point2{x, y} : Point2{x, y} + offset_;
    }

    bool at_number() {
        skip_sep();
        if (pos_ >= d_.size())
            return false;
        const char c = d_[pos_];
        return std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.';
    }

    void ensure_open() {
        if (!open_) {
            // drawing after Z continues from the closed subpath's start
            open_ = true;
            start_ = cur_;
            start_offset_ = cmd_offset_;
            pts_.clear();
        }
    }

    Point2 ok(Point2 p) const {
        if (!geometry::is_finite(p))
            throw ParseError("coordinate out of range in path data", base_ + pos_);
        return p;
    }

    void line_to(Point2 b) {
        b = ok(b);
        ensure_open();
        const Point2 a = cur_;
        pts_.push_back(a);
        pts_.push_back(a + (1.0 / 3.0) * (b - a));
        pts_.push_back(a + (2.0 / 3.0) * (b - a));
        cur_ = b;
    }

    void run(char cmd) {
        const bool rel = std::islower(static_cast<unsigned char>(cmd)) != 0;
        bool first = true;
        do {
            switch (cmd) {
            case 'M':
            case 'm': {
                if (!first)
                    break;
                if (open_)
                    close_subpath(true);
                const Point2 p = ok((cmd == 'm' && have_point_) ? cur_ + raw_point() : raw_point() + offset_);
                cur_ = start_ = p;
                have_point_ = true;
                open_ = true;
                start_offset_ = cmd_offset_;
                pts_.clear();
                return; // remaining pairs are implicit linetos
            }
            case 'L':
            case 'l':
                require_point();
                line_to(point(rel));
                break;
            case 'H':
            case 'h': {
                require_point();
                const double x = number();
                line_to({rel ? cur_.x + x : x + offset_.x, cur_.y});
                break;
            }
            case 'V':
            case 'v': {
                require_point();
                const double y = number();
                line_to({cur_.x, rel ? cur_.y + y : y + offset_.y});
                break;
            }
            case 'C':
            case 'c': {
                require_point();
                ensure_open();
                const Point2 base = cur_;
                const Point2 p1 = ok(rel ? base + raw_point() : raw_point() + offset_);
                const Point2 p2 = ok(rel ? base + raw_point() : raw_point() + offset_);
                const Point2 p3 = ok(rel ? base + raw_point() : raw_point() + offset_);
                pts_.push_back(cur_);
                pts_.push_back(p1);
                pts_.push_back(p2);
                cur_ = p3;
                break;
            }
            default:
                throw ParseError("unsupported path command", base_ + cmd_offset_);
            }
            first = false;
        } while (at_number());
    }

    Point2 raw_point() {
        const double x = number();
        const double y = number();
        return {x, y};
    }

    void require_point() {
        if (!have_point_)
            throw ParseError("path data must start with a moveto", base_ + cmd_offset_);
    }

    void close_subpath(bool implicit) {
        if (!open_) {
            cur_ = start_;
            return;
        }
        if (implicit)
            warnings_.push_back({base_ + start_offset_, "unclosed subpath closed automatically"});
        if (cur_ != start_)
            line_to(start_);
        if (pts_.empty())
            warnings_.push_back({base_ + start_offset_, "subpath without segments dropped"});
        else
            out_.subpaths.emplace_back(std::move(pts_));
        pts_.clear();
        open_ = false;
        cur_ = start_;
    }

    std::string_view d_;
    std::size_t base_;
    Point2 offset_;
    std::vector<Warning>& warnings_;
    std::size_t pos_ = 0;
    std::size_t cmd_offset_ = 0;
    std::size_t start_offset_ = 0;
    bool have_point_ = false;
    bool open_ = false;
    Point2 cur_{}, start_{};
    std::vector<Point2> pts_;
    ParsedPath out_;
};

// ---------------------------------------------------------------- colours

const std::map<std::string, std::array<int, 3>>& named_colors() {
    static const std::map<std::string, std::array<int, 3>> table = {
        {"aqua", {0, 255, 255}},      {"black", {0, 0, 0}},         {"blue", {0, 0, 255}},
        {"brown", {165, 42, 42}},     {"coral", {255, 127, 80}},    {"crimson", {220, 20, 60}},
        {"cyan", {0, 255, 255}},      {"darkblue", {0, 0, 139}},    {"darkgray", {169, 169, 169}},
        {"darkgreen", {0, 100, 0}},   {"darkgrey", {169, 169, 169}}, {"darkred", {139, 0, 0}},
        {"fuchsia", {255, 0, 255}},   {"gold", {255, 215, 0}},      {"gray", {128, 128, 128}},
        {"green", {0, 128, 0}},       {"grey", {128, 128, 128}},    {"indigo", {75, 0, 130}},
        {"ivory", {255, 255, 240}},   {"khaki", {240, 230, 140}},   {"lightblue", {173, 216, 230}},
        {"lightgray", {211, 211, 211}}, {"lightgreen", {144, 238, 144}}, {"lightgrey", {211, 211, 211}},
        {"lime", {0, 255, 0}},        {"magenta", {255, 0, 255}},   {"maroon", {128, 0, 0}},
        {"navy", {0, 0, 128}},        {"olive", {128, 128, 0}},     {"orange", {255, 165, 0}},
        {"pink", {255, 192, 203}},    {"purple", {128, 0, 128}},    {"red", {255, 0, 0}},
        {"salmon", {250, 128, 114}},  {"silver", {192, 192, 192}},  {"skyblue", {135, 206, 235}},
        {"tan", {210, 180, 140}},     {"teal", {0, 128, 128}},      {"tomato", {255, 99, 71}},
        {"turquoise", {64, 224, 208}}, {"violet", {238, 130, 238}}, {"white", {255, 255, 255}},
        {"yellow", {255, 255, 0}},
    };
    return table;
}

int hex_digit(char c) {
    if (c >= '0' && c <= '9')
        return c - '0';
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (c >= 'a' && c <= 'f')
        return c - 'a' + 10;
    return -1;
}

std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && is_space(s[a]))
        ++a;
    while (b > a && is_space(s[b - 1]))
        --b;
    return std::string(s.substr(a, b - a));
}

std::optional<Color> parse_color(const std::string& value) {
    std::string v = trim(value);
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    auto from_bytes = [](int r, int g, int b) { return Color{r / 255.0, g / 255.0, b / 255.0}; };
    if (!v.empty() && v[0] == '#') {
        if (v.size() == 7) {
            int b[6];
            for (int i = 0; i < 6; ++i)
                if ((b[i] = hex_digit(v[static_cast<std::size_t>(i) + 1])) < 0)
                    return std::nullopt;
            return from_bytes(b[0] * 16 + b[1], b[2] * 16 + b[3], b[4] * 16 + b[5]);
        }
        if (v.size() == 4) {
            int b[3];
            for (int i = 0; i < 3; ++i)
                if ((b[i] = hex_digit(v[static_cast<std::size_t>(i) + 1])) < 0)
                    return std::nullopt;
            return from_bytes(b[0] * 17, b[1] * 17, b[2] * 17);
        }
        return std::nullopt;
    }
    if (v.rfind("rgb(", 0) == 0 && v.back() == ')') {
        std::string inner = v.substr(4, v.size() - 5);
        std::replace(inner.begin(), inner.end(), ',', ' ');
        std::istringstream in(inner);
        std::string tok;
        std::array<int, 3> c{};
        for (int i = 0; i < 3; ++i) {
            if (!(in >> tok))
                return std::nullopt;
            const bool pct = tok.back() == '%';
            if (pct)
                tok.pop_back();
            double x = 0.0;
            const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
            if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(x))
                return std::nullopt;
            if (pct)
                x = x * 255.0 / 100.0;
            c[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(std::clamp(x, 0.0, 255.0)));
        }
        if (in >> tok)
            return std::nullopt;
        return from_bytes(c[0], c[1], c[2]);
    }
    const auto& table = named_colors();
    if (const auto it = table.find(v); it != table.end())
        return from_bytes(it->second[0], it->second[1], it->second[2]);
    return std::nullopt;
}

// translate(tx [ty]) → offset; anything else → nullopt
std::optional<Point2> parse_translate(const std::string& value) {
    std::string v = trim(value);
    if (v.rfind("translate", 0) != 0)
        return std::nullopt;
    v = trim(std::string_view(v).substr(9));
    if (v.size() < 2 || v.front() != '(' || v.back() != ')')
        return std::nullopt;
    std::string inner = v.substr(1, v.size() - 2);
    std::replace(inner.begin(), inner.end(), ',', ' ');
    std::istringstream in(inner);
    std::vector<double> nums;
    std::string tok;
    while (in >> tok) {
        double x = 0.0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(x))
            return std::nullopt;
        nums.push_back(x);
    }
    if (nums.empty() || nums.size() > 2)
        return std::nullopt;
    return Point2{nums[0], nums.size() > 1 ? nums[1] : 0.0};
}

std::optional<double> parse_length(const std::string& value) {
    std::string v = trim(value);
    if (v.size() > 2 && v.substr(v.size() - 2) == "px")
        v.resize(v.size() - 2);
    double x = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(x) || x < 0)
        return std::nullopt;
    return x;
}

// ---------------------------------------------------------------- tree building

struct Group {
    int region = -1;       // proto index once a path has been seen
    int parent_group = -1; // enclosing <g>, -1 = document level
    std::string id;
    std::optional<std::string> declared_parent;
    std::optional<int> declared_layer;
    std::optional<std::string> mask;
    std::optional<Color> fill;
    Point2 offset{};
    std::size_t offset_in_text = 0;
};

struct Proto {
    RegionNode node;
    int group = -1;        // group the region stands for, -1 for a bare path
    int parent_group = -1; // group it is nested in
    std::optional<std::string> declared_parent;
    std::optional<int> declared_layer;
    std::size_t offset = 0;
    std::vector<int> children;
};

} // namespace

std::string to_hex(const Color& c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", to_byte(c[0]), to_byte(c[1]), to_byte(c[2]));
    return buf;
}

std::string write_svg(const VectorDocument& doc, const Dialect& dialect) {
    if (dialect.precision < 1)
        throw DomainError("write_svg: precision must be at least 1");
    const auto problems = check_document(doc);
    if (!problems.empty())
        throw FormatError("write_svg: " + problems.front());
    std::ostringstream out;
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << doc.width << "\" height=\""
        << doc.height << "\" viewBox=\"0 0 " << doc.width << " " << doc.height << "\" data-layervec=\""
        << escape(dialect.version) << "\">\n";
    out << "  <g data-role=\"root\">\n";
    for (const auto& r : doc.roots)
        write_region(out, r, "", 2, dialect);
    out << "  </g>\n</svg>\n";
    return out.str();
}

ParseResult parse_svg_with_warnings(std::string_view text) {
    ParseResult result;
    auto& warnings = result.warnings;
    XmlReader xml(text);
    Tag tag;

    struct Frame {
        std::string name;
        int group = -1;   // index into groups for <g>
        bool skip = false; // inside an ignored element
        Point2 offset{};
    };
    std::vector<Frame> stack;
    std::vector<Group> groups;
    std::vector<Proto> protos;
    bool seen_svg = false;
    bool svg_closed = false;

    auto current_group = [&]() {
        for (auto it = stack.rbegin(); it != stack.rend(); ++it)
            if (it->group >= 0)
                return it->group;
        return -1;
    };
    auto known = [](const std::string& name, std::initializer_list<const char*> list) {
        if (name.rfind("data-", 0) == 0 || name.rfind("xmlns", 0) == 0 || name.rfind("xml:", 0) == 0)
            return true;
        for (const char* k : list)
            if (name == k)
                return true;
        return false;
    };
    auto transform_of = [&](const Tag& t, Point2 base) {
        if (const Attribute* tr = t.find("transform")) {
            if (auto d = parse_translate(tr->value))
                return base + *d;
            warnings.push_back({tr->offset, "unsupported transform ignored: " + tr->value});
        }
        return base;
    };

    while (xml.next(tag)) {
        if (tag.closing) {
            if (stack.empty() || stack.back().name != tag.name)
                throw ParseError("unexpected </" + tag.name + ">", tag.offset);
            stack.pop_back();
            if (stack.empty())
                svg_closed = true;
            continue;
        }
        if (svg_closed)
            throw ParseError("content after the root element", tag.offset);
        if (stack.size() >= static_cast<std::size_t>(kMaxDepth))
            throw ParseError("elements nested too deeply", tag.offset);

        Frame frame{tag.name, -1, false, stack.empty() ? Point2{} : stack.back().offset};
        if (!stack.empty() && stack.back().skip) {
            frame.skip = true;
        } else if (!seen_svg) {
            if (tag.name != "svg")
                throw ParseError("root element must be <svg>, found <" + tag.name + ">", tag.offset);
            seen_svg = true;
            for (const auto& a : tag.attrs)
                if (!known(a.name, {"width", "height", "viewBox", "version", "id", "baseProfile"}))
                    warnings.push_back({a.offset, "unknown attribute " + a.name + " on <svg> ignored"});
            std::optional<double> w, h;
            if (const Attribute* a = tag.find("width"))
                if (!(w = parse_length(a->value)))
                    warnings.push_back({a->offset, "unreadable width"});
            if (const Attribute* a = tag.find("height"))
                if (!(h = parse_length(a->value)))
                    warnings.push_back({a->offset, "unreadable height"});
            if ((!w || !h) && tag.find("viewBox")) {
                std::string vb = tag.find("viewBox")->value;
                std::replace(vb.begin(), vb.end(), ',', ' ');
                std::istringstream in(vb);
                double x0, y0, vw, vh;
                if (in >> x0 >> y0 >> vw >> vh) {
                    if (!w)
                        w = vw;
                    if (!h)
                        h = vh;
                }
            }
            if (!w || !h)
                warnings.push_back({tag.offset, "canvas size missing"});
            auto to_int = [](std::optional<double> v) {
                return v && *v < 1e9 ? static_cast<int>(std::lround(*v)) : 0;
            };
            result.doc.width = to_int(w);
            result.doc.height = to_int(h);
            frame.offset = transform_of(tag, frame.offset);
        } else if (tag.name == "g") {
            for (const auto& a : tag.attrs)
                if (!known(a.name, {"id", "transform", "fill", "fill-rule"}))
                    warnings.push_back({a.offset, "unknown attribute " + a.name + " on <g> ignored"});
            Group g;
            g.parent_group = current_group();
            g.offset_in_text = tag.offset;
            if (const Attribute* a = tag.find("id"))
                g.id = a->value;
            if (const Attribute* a = tag.find("data-parent"))
                g.declared_parent = a->value;
            if (const Attribute* a = tag.find("data-mask"))
                g.mask = a->value;
            if (const Attribute* a = tag.find("data-layer")) {
                int k = 0;
                const auto res = std::from_chars(a->value.data(), a->value.data() + a->value.size(), k);
                if (res.ec == std::errc() && res.ptr == a->value.data() + a->value.size() && k >= 1 &&
                    k <= 1000000)
                    g.declared_layer = k;
                else
                    warnings.push_back({a->offset, "data-layer must be a positive integer"});
            }
            if (const Attribute* a = tag.find("fill")) {
                g.fill = parse_color(a->value);
                if (!g.fill)
                    warnings.push_back({a->offset, "unsupported fill '" + a->value + "' ignored"});
            }
            frame.offset = transform_of(tag, frame.offset);
            g.offset = frame.offset;
            frame.group = static_cast<int>(groups.size());
            groups.push_back(std::move(g));
        } else if (tag.name == "path") {
            for (const auto& a : tag.attrs)
                if (!known(a.name, {"id", "d", "fill", "fill-rule", "transform"}))
                    warnings.push_back({a.offset, "unknown attribute " + a.name + " on <path> ignored"});
            const Attribute* d = tag.find("d");
            const Point2 offset = transform_of(tag, frame.offset);
            if (!d) {
                warnings.push_back({tag.offset, "<path> without d ignored"});
            } else {
                ParsedPath parsed = PathParser(d->raw, d->offset, offset, warnings).parse();
                if (parsed.subpaths.empty()) {
                    warnings.push_back({d->offset, "<path> without segments ignored"});
                } else {
                    if (const Attribute* fr = tag.find("fill-rule"); fr && trim(fr->value) != "evenodd")
                        warnings.push_back({fr->offset, "fill-rule treated as evenodd"});
                    const int owner = current_group();
                    Proto p;
                    p.offset = tag.offset;
                    p.node.path = std::move(parsed.subpaths.front());
                    p.node.subpaths.assign(std::make_move_iterator(parsed.subpaths.begin() + 1),
                                           std::make_move_iterator(parsed.subpaths.end()));
                    std::optional<Color> fill;
                    if (const Attribute* f = tag.find("fill")) {
                        fill = parse_color(f->value);
                        if (!fill)
                            warnings.push_back({f->offset, "unsupported fill '" + f->value + "', using black"});
                    } else if (owner >= 0 && groups[static_cast<std::size_t>(owner)].fill) {
                        fill = groups[static_cast<std::size_t>(owner)].fill;
                    } else {
                        warnings.push_back({tag.offset, "<path> without fill, using black"});
                    }
                    p.node.fill = fill.value_or(Color{0, 0, 0});
                    const bool claims_group = owner >= 0 && groups[static_cast<std::size_t>(owner)].region < 0;
                    if (claims_group) {
                        Group& g = groups[static_cast<std::size_t>(owner)];
                        g.region = static_cast<int>(protos.size());
                        p.group = owner;
                        p.parent_group = g.parent_group;
                        p.node.id = g.id;
                        p.declared_parent = g.declared_parent;
                        p.declared_layer = g.declared_layer;
                        p.node.source_mask_id = g.mask;
                    } else {
                        if (owner >= 0)
                            warnings.push_back({tag.offset, "extra <path> in a region group becomes a sibling region"});
                        p.parent_group = owner >= 0 ? groups[static_cast<std::size_t>(owner)].parent_group : -1;
                        if (const Attribute* a = tag.find("id"))
                            p.node.id = a->value;
                    }
                    protos.push_back(std::move(p));
                }
            }
            frame.skip = true; // nothing inside a path is meaningful
        } else {
            warnings.push_back({tag.offset, "unsupported element <" + tag.name + "> ignored"});
            frame.skip = true;
        }
        if (!tag.self_closing)
            stack.push_back(std::move(frame));
        else if (tag.name == "svg")
            svg_closed = true;
    }
    if (!seen_svg)
        throw ParseError("no <svg> element", 0);
    if (!stack.empty())
        throw ParseError("unclosed <" + stack.back().name + ">", text.size());

    // parent region of each proto: nearest enclosing group that owns a
    // region (other than itself)
    std::vector<int> roots;
    for (std::size_t i = 0; i < protos.size(); ++i) {
        int g = protos[i].parent_group;
        while (g >= 0 && groups[static_cast<std::size_t>(g)].region < 0)
            g = groups[static_cast<std::size_t>(g)].parent_group;
        if (g >= 0)
            protos[static_cast<std::size_t>(groups[static_cast<std::size_t>(g)].region)].children.push_back(static_cast<int>(i));
        else
            roots.push_back(static_cast<int>(i));
    }

    // ids
    std::set<std::string> used;
    for (const auto& p : protos)
        if (!p.node.id.empty())
            used.insert(p.node.id);
    std::set<std::string> taken;
    int auto_id = 0;
    for (auto& p : protos) {
        if (p.node.id.empty() || taken.count(p.node.id)) {
            const std::string old = p.node.id;
            std::string fresh;
            do
                fresh = (old.empty() ? "region" : old) + "_" + std::to_string(auto_id++);
            while (used.count(fresh));
            used.insert(fresh);
            warnings.push_back({p.offset, old.empty() ? "region without id named " + fresh
                                                      : "duplicate id " + old + " renamed " + fresh});
            p.node.id = fresh;
        }
        taken.insert(p.node.id);
    }

    // assemble with layers; protos only reference later-or-earlier indices
    // through `children`, and every proto has exactly one owner, so this
    // terminates without cycles.
    std::function<RegionNode(int, int, const std::string&)> build = [&](int i, int layer, const std::string& parent) {
        Proto& p = protos[static_cast<std::size_t>(i)];
        RegionNode n = std::move(p.node);
        n.layer = layer;
        if (p.declared_layer && *p.declared_layer != layer)
            warnings.push_back({p.offset, "data-layer " + std::to_string(*p.declared_layer) + " of " + n.id +
                                              " contradicts nesting (layer " + std::to_string(layer) + ")"});
        if (p.declared_parent && *p.declared_parent != parent)
            warnings.push_back({p.offset, "data-parent '" + *p.declared_parent + "' of " + n.id +
                                              " contradicts nesting (parent '" + parent + "')"});
        for (int c : p.children)
            n.children.push_back(build(c, layer + 1, n.id));
        return n;
    };
    for (int r : roots) {
        const Proto& p = protos[static_cast<std::size_t>(r)];
        const int layer = p.declared_layer.value_or(1);
        result.doc.roots.push_back(build(r, layer, ""));
    }
    return result;
}

VectorDocument parse_svg(std::string_view text) { return parse_svg_with_warnings(text).doc; }

const char* change_name(Change c) {
    switch (c) {
    case Change::unchanged: return "unchanged";
    case Change::moved: return "moved";
    case Change::recolored: return "recolored";
    case Change::reshaped: return "reshaped";
    case Change::added: return "added";
    case Change::removed: return "removed";
    }
    return "?";
}

std::vector<RegionDiff> diff_documents(const VectorDocument& a, const VectorDocument& b, const DiffOptions& opts) {
    std::vector<RegionDiff> out;
    std::map<std::string, const RegionNode*> in_b;
    for (const RegionNode* r : regions_preorder(b))
        in_b.emplace(r->id, r);
    std::set<std::string> in_a;
    for (const RegionNode* ra : regions_preorder(a)) {
        in_a.insert(ra->id);
        RegionDiff d{ra->id, Change::unchanged, false, {}};
        const auto it = in_b.find(ra->id);
        if (it == in_b.end()) {
            d.kind = Change::removed;
            out.push_back(d);
            continue;
        }
        const RegionNode* rb = it->second;
        for (int c = 0; c < 3; ++c)
            d.recolored |= std::abs(ra->fill[static_cast<std::size_t>(c)] - rb->fill[static_cast<std::size_t>(c)]) >
                           opts.color_tolerance;
        bool same_shape_count = ra->point_count() == rb->point_count() && ra->subpaths.size() == rb->subpaths.size() &&
                                ra->path.points().size() == rb->path.points().size();
        for (std::size_t s = 0; same_shape_count && s < ra->subpaths.size(); ++s)
            same_shape_count = ra->subpaths[s].points().size() == rb->subpaths[s].points().size();
        const bool same_place = ra->layer == rb->layer && parent_of(a, ra->id) == parent_of(b, ra->id);
        if (!same_shape_count || !same_place) {
            d.kind = Change::reshaped;
        } else {
            const std::size_t n = ra->point_count();
            Point2 ca{}, cb{};
            for (std::size_t i = 0; i < n; ++i) {
                ca += ra->point(i);
                cb += rb->point(i);
            }
            const Point2 t = n > 0 ? (1.0 / static_cast<double>(n)) * (cb - ca) : Point2{};
            double residual = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                residual = std::max(residual, geometry::distance(rb->point(i) - ra->point(i), t));
            if (residual > opts.geometry_tolerance)
                d.kind = Change::reshaped;
            else if (geometry::norm(t) > opts.geometry_tolerance) {
                d.kind = Change::moved;
                d.offset = t;
            } else if (d.recolored)
                d.kind = Change::recolored;
        }
        out.push_back(d);
    }
    for (const RegionNode* rb : regions_preorder(b))
        if (!in_a.count(rb->id))
            out.push_back({rb->id, Change::added, false, {}});
    return out;
}

} // namespace layervec::svg
