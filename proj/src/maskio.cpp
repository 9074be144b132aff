#include "layervec/maskio.hpp"

#include "layervec/error.hpp"
#include "layervec/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace layervec::maskio {

namespace fs = std::filesystem;
using nlohmann::json;

const Mask* MaskHierarchy::find(const std::string& id) const {
    for (const auto& layer : layers)
        for (const auto& m : layer.masks)
            if (m.id == id)
                return &m;
    return nullptr;
}

std::size_t MaskHierarchy::mask_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers)
        n += layer.masks.size();
    return n;
}

std::string mask_id(int level, int source_index) {
    return "m" + std::to_string(level) + "_" + std::to_string(source_index);
}

RawMaskStack load_mask_stack(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in)
        throw FormatError("missing manifest: " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }

    RawMaskStack stack;
    try {
        stack.width = manifest.at("width").get<int>();
        stack.height = manifest.at("height").get<int>();
        for (const auto& lv : manifest.at("levels")) {
            RawLevel level;
            level.t = lv.at("t").get<int>();
            level.files = lv.at("masks").get<std::vector<std::string>>();
            stack.levels.push_back(std::move(level));
        }
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (stack.width <= 0 || stack.height <= 0)
        throw FormatError(manifest_path.string() + ": width and height must be positive");
    if (stack.levels.empty())
        throw FormatError(manifest_path.string() + ": no levels");

    for (auto& level : stack.levels) {
        if (level.files.empty())
            throw FormatError(manifest_path.string() + ": level " + std::to_string(level.t) + " is empty");
        for (const auto& file : level.files) {
            const fs::path p = dir / file;
            if (!fs::exists(p))
                throw FormatError("missing mask file: " + p.string());
            BinaryMask m = read_mask_png(p);
            if (m.width != stack.width || m.height != stack.height)
                throw FormatError("dimension mismatch: " + p.string() + " is " + std::to_string(m.width) + "x" +
                                  std::to_string(m.height) + ", manifest says " + std::to_string(stack.width) +
                                  "x" + std::to_string(stack.height));
            level.masks.push_back(std::move(m));
        }
    }
    std::stable_sort(stack.levels.begin(), stack.levels.end(),
                     [](const RawLevel& a, const RawLevel& b) { return a.t < b.t; });
    for (std::size_t i = 1; i < stack.levels.size(); ++i)
        if (stack.levels[i].t == stack.levels[i - 1].t)
            throw FormatError(manifest_path.string() + ": duplicate level t=" + std::to_string(stack.levels[i].t));
    return stack;
}

void save_mask_stack(const RawMaskStack& stack, const fs::path& dir) {
    json levels = json::array();
    for (const auto& level : stack.levels) {
        const std::string sub = "level_" + std::to_string(level.t);
        fs::create_directories(dir / sub);
        json files = json::array();
        for (std::size_t j = 0; j < level.masks.size(); ++j) {
            const std::string name = sub + "/m_" + std::to_string(j) + ".png";
            write_mask_png(dir / name, level.masks[j]);
            files.push_back(name);
        }
        levels.push_back({{"t", level.t}, {"masks", files}});
    }
    json manifest{{"width", stack.width}, {"height", stack.height}, {"levels", levels}};
    std::ofstream out(dir / "manifest.json");
    if (!out)
        throw FormatError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

MaskHierarchy assign_masks_to_layers(const RawMaskStack& stack, double tau_occ) {
    if (!(tau_occ > 0.0 && tau_occ <= 1.0))
        throw DomainError("assign_masks_to_layers: tau_occ must be in (0, 1]");
    if (stack.levels.empty())
        throw FormatError("assign_masks_to_layers: empty mask stack");

    MaskHierarchy h;
    h.width = stack.width;
    h.height = stack.height;
    for (std::size_t li = 0; li < stack.levels.size(); ++li) {
        const RawLevel& level = stack.levels[li];
        std::vector<std::pair<std::size_t, int>> order; // (area, source index)
        for (std::size_t j = 0; j < level.masks.size(); ++j) {
            const BinaryMask& m = level.masks[j];
            if (m.width != stack.width || m.height != stack.height)
                throw FormatError("assign_masks_to_layers: mask " + mask_id(level.t, static_cast<int>(j)) +
                                  " has the wrong size");
            order.emplace_back(m.count(), static_cast<int>(j));
        }
        std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

        MaskLayer layer;
        layer.level_index = static_cast<int>(li) + 1;
        BinaryMask layer_union(stack.width, stack.height);
        for (const auto& [area, j] : order) {
            if (area == 0)
                continue;
            const BinaryMask& m = level.masks[static_cast<std::size_t>(j)];
            const double limit = tau_occ * static_cast<double>(area);
            if (static_cast<double>(intersection_count(m, layer_union)) > limit)
                continue;
            bool duplicate = false;
            for (const auto& prior : h.layers) {
                for (const auto& a : prior.masks) {
                    const auto inter = static_cast<double>(intersection_count(m, a.raster));
                    if (inter > limit && inter > tau_occ * static_cast<double>(a.area)) {
                        duplicate = true;
                        break;
                    }
                }
                if (duplicate)
                    break;
            }
            if (duplicate)
                continue;
            for (std::size_t i = 0; i < m.data.size(); ++i)
                layer_union.data[i] |= m.data[i];
            layer.masks.push_back({mask_id(level.t, j), level.t, j, m, std::nullopt, area});
        }
        h.layers.push_back(std::move(layer));
    }
    return h;
}

MaskHierarchy link_parents(MaskHierarchy h, double tau_parent) {
    if (!(tau_parent >= 0.0 && tau_parent <= 1.0))
        throw DomainError("link_parents: tau_parent must be in [0, 1]");
    if (!h.layers.empty())
        for (auto& m : h.layers[0].masks)
            m.parent_id.reset();
    for (std::size_t k = 1; k < h.layers.size(); ++k) {
        const auto& coarse = h.layers[k - 1].masks;
        for (auto& child : h.layers[k].masks) {
            const Mask* best = nullptr;
            std::size_t best_inter = 0;
            for (const auto& cand : coarse) {
                const std::size_t inter = intersection_count(child.raster, cand.raster);
                if (inter == 0)
                    continue;
                const bool better =
                    best == nullptr || inter > best_inter ||
                    (inter == best_inter && cand.source_index < best->source_index);
                if (better) {
                    best = &cand;
                    best_inter = inter;
                }
            }
            const double fraction =
                child.area > 0 ? static_cast<double>(best_inter) / static_cast<double>(child.area) : 0.0;
            if (best != nullptr && fraction >= tau_parent)
                child.parent_id = best->id;
            else
                child.parent_id = kSyntheticRoot;
        }
    }
    return h;
}

std::vector<Violation> validate_hierarchy(const MaskHierarchy& h, const Thresholds& th) {
    std::vector<Violation> out;
    auto fmt = [](double v) {
        std::ostringstream s;
        s.precision(4);
        s << v;
        return s.str();
    };
    std::map<std::string, std::size_t> layer_of;
    for (std::size_t k = 0; k < h.layers.size(); ++k) {
        const MaskLayer& layer = h.layers[k];
        if (layer.level_index != static_cast<int>(k) + 1)
            out.push_back({"", "layer " + std::to_string(k + 1) + " has level_index " + std::to_string(layer.level_index)});
        for (const auto& m : layer.masks) {
            if (!layer_of.emplace(m.id, k).second)
                out.push_back({m.id, "duplicate mask id"});
            if (m.raster.width != h.width || m.raster.height != h.height)
                out.push_back({m.id, "dimensions " + std::to_string(m.raster.width) + "x" +
                                         std::to_string(m.raster.height) + " differ from hierarchy"});
        }
    }
    for (std::size_t k = 0; k < h.layers.size(); ++k) {
        const auto& masks = h.layers[k].masks;
        for (std::size_t i = 0; i < masks.size(); ++i)
            for (std::size_t j = i + 1; j < masks.size(); ++j) {
                if (masks[i].raster.data.size() != masks[j].raster.data.size())
                    continue;
                const std::size_t smaller = std::min(masks[i].raster.count(), masks[j].raster.count());
                if (smaller == 0)
                    continue;
                const double frac = static_cast<double>(intersection_count(masks[i].raster, masks[j].raster)) /
                                    static_cast<double>(smaller);
                if (frac >= th.exclusivity)
                    out.push_back({masks[j].id, "overlaps " + masks[i].id + " on " + fmt(frac) +
                                                    " of the smaller mask (limit " + fmt(th.exclusivity) + ")"});
            }
        for (const auto& m : masks) {
            if (k == 0) {
                if (m.parent_id)
                    out.push_back({m.id, "layer-1 mask has parent " + *m.parent_id});
                continue;
            }
            if (!m.parent_id) {
                out.push_back({m.id, "orphaned: no parent"});
                continue;
            }
            if (*m.parent_id == kSyntheticRoot)
                continue;
            const auto it = layer_of.find(*m.parent_id);
            if (it == layer_of.end()) {
                out.push_back({m.id, "parent " + *m.parent_id + " does not exist"});
                continue;
            }
            if (it->second + 1 != k) {
                out.push_back({m.id, "parent " + *m.parent_id + " is not in layer " + std::to_string(k)});
                continue;
            }
            const Mask* parent = h.find(*m.parent_id);
            const std::size_t area = m.raster.count();
            if (area > 0 && parent->raster.data.size() == m.raster.data.size()) {
                const double frac =
                    static_cast<double>(intersection_count(m.raster, parent->raster)) / static_cast<double>(area);
                if (frac < th.parent)
                    out.push_back({m.id, "parent " + *m.parent_id + " contains only " + fmt(frac) +
                                             " of it (need " + fmt(th.parent) + ")"});
            }
        }
    }
    return out;
}

} // namespace layervec::maskio
