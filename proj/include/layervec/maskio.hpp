#pragma once

#include "layervec/image.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace layervec::maskio {

inline const std::string kSyntheticRoot = "root";

struct Mask {
    std::string id;
    int level = 0;        // simplification level t it came from
    int source_index = 0; // position in its level's manifest list; orders ids
    BinaryMask raster;
    std::optional<std::string> parent_id;
    std::size_t area = 0;
};

struct MaskLayer {
    int level_index = 1; // 1-based, coarse to fine
    std::vector<Mask> masks;
};

struct MaskHierarchy {
    int width = 0;
    int height = 0;
    std::vector<MaskLayer> layers;

    const Mask* find(const std::string& id) const;
    std::size_t mask_count() const;
};

struct RawLevel {
    int t = 0;
    std::vector<BinaryMask> masks;
    std::vector<std::string> files; // as listed in the manifest
};

struct RawMaskStack {
    int width = 0;
    int height = 0;
    std::vector<RawLevel> levels; // ascending t
};

struct Thresholds {
    double occlusion = 0.9;   // τ_occ
    double parent = 0.5;      // τ_parent
    double exclusivity = 0.1; // τ_excl
};

// Reads <dir>/manifest.json and the mask images it lists.
RawMaskStack load_mask_stack(const std::filesystem::path& dir);

// Writes a stack in the same layout: level_<t>/m_<j>.png plus manifest.json.
void save_mask_stack(const RawMaskStack& stack, const std::filesystem::path& dir);

std::string mask_id(int level, int source_index);

// Levels map one-to-one to layers. Within a level masks are visited by
// descending area (ties: source order). A mask is discarded when
//   - accepted masks of its own layer cover more than τ_occ of it, or
//   - some accepted mask A of an earlier layer overlaps it by more than
//     τ_occ of both areas (a re-detection of the same region).
// Empty masks are discarded. Empty layers are kept so that layer k is level k.
MaskHierarchy assign_masks_to_layers(const RawMaskStack& stack, double tau_occ = 0.9);

// parent = layer k−1 mask covering the largest fraction of the child, if
// that fraction ≥ τ_parent, else kSyntheticRoot. Ties go to the lowest id.
MaskHierarchy link_parents(MaskHierarchy h, double tau_parent = 0.5);

struct Violation {
    std::string mask_id;
    std::string message;
};

std::vector<Violation> validate_hierarchy(const MaskHierarchy& h, const Thresholds& th = {});

} // namespace layervec::maskio
