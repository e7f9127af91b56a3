#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cofcn/common.hpp"
#include "cofcn/image.hpp"

namespace cofcn {

constexpr int kPatchSize = 128;
// Axis-centered 64x64 window: pixel rows/cols 32..95.
constexpr int kCentralLo = 32;
constexpr int kCentralHi = 96; // exclusive

enum class LesionClass { negative, itc, micro, macro };
enum class PnStage { pN0, pN0i, pN1mi, pN1, pN2 };
enum class SetRole { support, query, test };
enum class PatchLabel { lesion, non_lesion };
enum class LabelingRule { train_majority, eval_any_pixel };

inline std::string to_string(LesionClass c) {
    switch (c) {
        case LesionClass::negative: return "negative";
        case LesionClass::itc: return "ITC";
        case LesionClass::micro: return "micro";
        default: return "macro";
    }
}
inline LesionClass lesion_class_from(const std::string& s) {
    if (s == "negative") return LesionClass::negative;
    if (s == "ITC") return LesionClass::itc;
    if (s == "micro") return LesionClass::micro;
    if (s == "macro") return LesionClass::macro;
    throw std::invalid_argument("unknown lesion class: " + s);
}
inline std::string to_string(PnStage s) {
    switch (s) {
        case PnStage::pN0: return "pN0";
        case PnStage::pN0i: return "pN0i+";
        case PnStage::pN1mi: return "pN1mi";
        case PnStage::pN1: return "pN1";
        default: return "pN2";
    }
}
inline PnStage pn_stage_from(const std::string& s) {
    if (s == "pN0") return PnStage::pN0;
    if (s == "pN0i+") return PnStage::pN0i;
    if (s == "pN1mi") return PnStage::pN1mi;
    if (s == "pN1") return PnStage::pN1;
    if (s == "pN2") return PnStage::pN2;
    throw std::invalid_argument("unknown pN stage: " + s);
}
inline std::string to_string(SetRole r) {
    switch (r) {
        case SetRole::support: return "support";
        case SetRole::query: return "query";
        default: return "test";
    }
}
inline SetRole set_role_from(const std::string& s) {
    if (s == "support") return SetRole::support;
    if (s == "query") return SetRole::query;
    if (s == "test") return SetRole::test;
    throw std::invalid_argument("unknown set role: " + s);
}
inline std::string to_string(PatchLabel l) {
    return l == PatchLabel::lesion ? "lesion" : "non_lesion";
}
inline PatchLabel patch_label_from(const std::string& s) {
    if (s == "lesion") return PatchLabel::lesion;
    if (s == "non_lesion") return PatchLabel::non_lesion;
    throw std::invalid_argument("unknown patch label: " + s);
}
inline std::string to_string(LabelingRule r) {
    return r == LabelingRule::train_majority ? "train" : "eval";
}
inline LabelingRule labeling_rule_from(const std::string& s) {
    if (s == "train") return LabelingRule::train_majority;
    if (s == "eval") return LabelingRule::eval_any_pixel;
    throw std::invalid_argument("unknown labeling rule: " + s);
}

struct SlideRef {
    std::string slide_id;
    int center_id = 0;
    std::string patient_id;
    std::string node_id;
    LesionClass lesion_class = LesionClass::negative;
    PnStage pn_stage = PnStage::pN0;
    SetRole set_role = SetRole::support;
    std::string image_path;
    std::string mask_path; // empty when the slide is not annotated

    void validate() const {
        if (center_id < 0 || center_id > 4)
            throw std::invalid_argument("slide " + slide_id + ": center_id " +
                                        std::to_string(center_id) + " outside 0..4");
    }
    // CAMELYON-style display name
    std::string display_name() const { return patient_id + "/" + node_id; }
};

struct PatchRecord {
    std::string slide_id;
    int grid_x = 0;
    int grid_y = 0;
    int origin_x = 0;
    int origin_y = 0;
    int size_px = kPatchSize;
    PatchLabel label = PatchLabel::non_lesion;
    double central_lesion_fraction = 0.0;

    PatchRef ref() const { return PatchRef{slide_id, grid_x, grid_y}; }
};

struct PatchManifest {
    std::vector<PatchRecord> records;
    LabelingRule labeling_rule = LabelingRule::train_majority;
    std::uint64_t balance_seed = 0;
    double drop_fraction = 0.0;
};

// --- operations --------------------------------------------------------------

struct GridTile {
    int grid_x, grid_y, origin_x, origin_y;
};

// Non-overlapping tiling ordered by (grid_y, grid_x); partial edge tiles are
// dropped so every tile has the full fixed input shape.
inline std::vector<GridTile> grid_patches(int width_px, int height_px,
                                          int patch_size = kPatchSize) {
    if (width_px < patch_size || height_px < patch_size)
        throw std::invalid_argument("image " + std::to_string(width_px) + "x" +
                                    std::to_string(height_px) +
                                    " smaller than patch size: empty grid");
    std::vector<GridTile> tiles;
    for (int gy = 0; gy * patch_size + patch_size <= height_px; ++gy)
        for (int gx = 0; gx * patch_size + patch_size <= width_px; ++gx)
            tiles.push_back({gx, gy, gx * patch_size, gy * patch_size});
    return tiles;
}

// Keep iff the maximum Gaussian-blurred HSV saturation reaches the threshold
// (fraction of full saturation).
inline bool tissue_filter(const Tensor<float>& patch_rgb, double blur_sigma = 2.0,
                          double threshold = 0.10) {
    if (patch_rgb.dims.size() != 3 || patch_rgb.dims[0] != 3)
        throw std::invalid_argument("tissue_filter: expected (3,h,w) patch");
    const int h = patch_rgb.dims[1], w = patch_rgb.dims[2];
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<double> sat(static_cast<size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        double r = patch_rgb[i], g = patch_rgb[plane + i], b = patch_rgb[2 * plane + i];
        if (!std::isfinite(r) || !std::isfinite(g) || !std::isfinite(b))
            throw std::invalid_argument("tissue_filter: non-finite pixel value");
        sat[static_cast<size_t>(i)] = saturation_of(r, g, b);
    }
    auto blurred = gaussian_blur(sat, w, h, blur_sigma);
    double mx = 0;
    for (double v : blurred) mx = std::max(mx, v);
    return mx >= threshold;
}

inline void check_mask_patch(const Tensor<float>& mask) {
    if (mask.dims != std::vector<int>{1, kPatchSize, kPatchSize} &&
        mask.dims != std::vector<int>{kPatchSize, kPatchSize})
        throw std::invalid_argument("mask patch must be 128x128, got " + mask.shape_str());
}

// Training rule: lesion iff at least 50% of the 64x64 central region is lesion.
inline std::pair<PatchLabel, double> label_patch_train(const Tensor<float>& mask_patch) {
    check_mask_patch(mask_patch);
    int count = 0;
    for (int y = kCentralLo; y < kCentralHi; ++y)
        for (int x = kCentralLo; x < kCentralHi; ++x)
            if (mask_patch[static_cast<std::int64_t>(y) * kPatchSize + x] > 0.5f) ++count;
    double frac = count / 4096.0;
    return {frac >= 0.5 ? PatchLabel::lesion : PatchLabel::non_lesion, frac};
}

// Evaluation rule: lesion iff any central-region pixel is lesion.
inline PatchLabel label_patch_eval(const Tensor<float>& mask_patch) {
    check_mask_patch(mask_patch);
    for (int y = kCentralLo; y < kCentralHi; ++y)
        for (int x = kCentralLo; x < kCentralHi; ++x)
            if (mask_patch[static_cast<std::int64_t>(y) * kPatchSize + x] > 0.5f)
                return PatchLabel::lesion;
    return PatchLabel::non_lesion;
}

// Class rebalancing: every lesion record is kept; exactly
// round((1-drop_fraction)*N) non-lesion records survive a seeded draw without
// replacement. Output preserves the original record order.
inline PatchManifest balance_manifest(const PatchManifest& manifest, double drop_fraction,
                                      std::uint64_t seed) {
    if (!(drop_fraction >= 0.0 && drop_fraction <= 1.0))
        throw std::invalid_argument("drop_fraction outside [0,1]");
    std::vector<size_t> non_lesion_idx;
    for (size_t i = 0; i < manifest.records.size(); ++i)
        if (manifest.records[i].label == PatchLabel::non_lesion) non_lesion_idx.push_back(i);
    const auto keep_count = static_cast<size_t>(
        std::llround((1.0 - drop_fraction) * static_cast<double>(non_lesion_idx.size())));
    Rng rng(seed);
    std::shuffle(non_lesion_idx.begin(), non_lesion_idx.end(), rng);
    non_lesion_idx.resize(keep_count);
    std::set<size_t> keep(non_lesion_idx.begin(), non_lesion_idx.end());
    PatchManifest out;
    out.labeling_rule = manifest.labeling_rule;
    out.balance_seed = seed;
    out.drop_fraction = drop_fraction;
    for (size_t i = 0; i < manifest.records.size(); ++i)
        if (manifest.records[i].label == PatchLabel::lesion || keep.count(i))
            out.records.push_back(manifest.records[i]);
    return out;
}

// --- manifest / slide-index I/O ----------------------------------------------

inline void check_manifest_unique(const PatchManifest& m) {
    std::set<PatchRef> seen;
    for (const auto& r : m.records)
        if (!seen.insert(r.ref()).second)
            throw std::invalid_argument("duplicate patch record " + r.ref().str());
}

inline void write_manifest(const fs::path& path, const PatchManifest& m) {
    check_manifest_unique(m);
    std::string out;
    for (const auto& r : m.records) {
        out += r.slide_id;
        out += '\t';
        out += std::to_string(r.grid_x) + '\t' + std::to_string(r.grid_y) + '\t';
        out += std::to_string(r.origin_x) + '\t' + std::to_string(r.origin_y) + '\t';
        out += std::to_string(r.size_px) + '\t';
        out += to_string(r.label) + '\t' + format_g17(r.central_lesion_fraction) + '\n';
    }
    write_text_file(path, out);
}

inline PatchManifest read_manifest(const fs::path& path) {
    PatchManifest m;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 8) throw std::runtime_error("bad manifest line in " + path.string());
        PatchRecord r;
        r.slide_id = f[0];
        r.grid_x = std::stoi(f[1]);
        r.grid_y = std::stoi(f[2]);
        r.origin_x = std::stoi(f[3]);
        r.origin_y = std::stoi(f[4]);
        r.size_px = std::stoi(f[5]);
        r.label = patch_label_from(f[6]);
        r.central_lesion_fraction = std::stod(f[7]);
        m.records.push_back(r);
    }
    check_manifest_unique(m);
    return m;
}

inline void write_slide_index(const fs::path& path, const std::vector<SlideRef>& slides) {
    std::string out;
    for (const auto& s : slides) {
        out += s.slide_id + '\t' + std::to_string(s.center_id) + '\t' + s.patient_id + '\t' +
               s.node_id + '\t' + to_string(s.lesion_class) + '\t' + to_string(s.pn_stage) +
               '\t' + to_string(s.set_role) + '\t' + s.image_path + '\t' +
               (s.mask_path.empty() ? "-" : s.mask_path) + '\n';
    }
    write_text_file(path, out);
}

inline std::vector<SlideRef> read_slide_index(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open slide index " + path.string());
    std::vector<SlideRef> slides;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 9) throw std::runtime_error("bad slide index line in " + path.string());
        SlideRef s;
        s.slide_id = f[0];
        s.center_id = std::stoi(f[1]);
        s.patient_id = f[2];
        s.node_id = f[3];
        s.lesion_class = lesion_class_from(f[4]);
        s.pn_stage = pn_stage_from(f[5]);
        s.set_role = set_role_from(f[6]);
        s.image_path = f[7];
        s.mask_path = f[8] == "-" ? "" : f[8];
        s.validate();
        slides.push_back(s);
    }
    return slides;
}

// Builds the labeled manifest for one slide: tile, tissue-filter, then label.
inline PatchManifest build_slide_manifest(const SlideRef& slide, const Image& image,
                                          const Image* mask, LabelingRule rule,
                                          double blur_sigma = 2.0, double sat_threshold = 0.10) {
    PatchManifest out;
    out.labeling_rule = rule;
    for (const auto& tile : grid_patches(image.width, image.height)) {
        auto rgb = extract_patch(image, tile.origin_x, tile.origin_y, kPatchSize);
        if (!tissue_filter(rgb, blur_sigma, sat_threshold)) continue;
        PatchRecord rec;
        rec.slide_id = slide.slide_id;
        rec.grid_x = tile.grid_x;
        rec.grid_y = tile.grid_y;
        rec.origin_x = tile.origin_x;
        rec.origin_y = tile.origin_y;
        if (mask) {
            auto mp = extract_mask_patch(*mask, tile.origin_x, tile.origin_y, kPatchSize);
            if (rule == LabelingRule::train_majority) {
                auto [label, frac] = label_patch_train(mp);
                rec.label = label;
                rec.central_lesion_fraction = frac;
            } else {
                rec.label = label_patch_eval(mp);
                auto [unused, frac] = label_patch_train(mp);
                (void)unused;
                rec.central_lesion_fraction = frac;
            }
        }
        out.records.push_back(rec);
    }
    return out;
}

} // namespace cofcn
