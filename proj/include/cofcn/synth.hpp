#pragma once

#include <array>
#include <cmath>
#include <set>

#include "cofcn/image.hpp"
#include "cofcn/patch.hpp"

namespace cofcn {

// Parameters for one synthetic slide. Base colors are explicit so callers can
// shift color statistics per medical center.
struct SynthSpec {
    int lesion_count = 2;
    double radius_min = 30.0;
    double radius_max = 46.0;
    std::array<double, 3> tissue_base{0.90, 0.72, 0.84};
    std::array<double, 3> lesion_base{0.50, 0.34, 0.64};
    double noise_amp = 0.03;
    double wobble = 0.08;      // lesion boundary modulation amplitude
    bool snap_to_grid = true;  // center lesions on patch-tile centers
};

namespace detail {

struct Wave {
    double kx, ky, phase, amp;
    double eval(double x, double y) const {
        return amp * std::cos(2.0 * 3.14159265358979323846 * (kx * x + ky * y) + phase);
    }
};

inline std::vector<Wave> random_waves(Rng& rng, int n, double wavelength_lo, double wavelength_hi,
                                      double amp) {
    std::uniform_real_distribution<double> uang(0, 2 * 3.14159265358979323846);
    std::uniform_real_distribution<double> uwl(wavelength_lo, wavelength_hi);
    std::vector<Wave> waves;
    for (int i = 0; i < n; ++i) {
        double wl = uwl(rng), ang = uang(rng);
        waves.push_back({std::cos(ang) / wl, std::sin(ang) / wl, uang(rng), amp});
    }
    return waves;
}

} // namespace detail

// Deterministic synthetic slide: a wavy tissue ellipse with pink texture on a
// white background, plus `lesion_count` non-touching dark blobs. The returned
// mask marks exactly the blob pixels.
inline std::pair<Image, Image> generate_synthetic_slide(std::uint64_t seed, int width, int height,
                                                        const SynthSpec& spec) {
    if (width < kPatchSize || height < kPatchSize)
        throw std::invalid_argument("slide dims must fit at least one 128x128 tile");
    if (spec.lesion_count < 0) throw std::invalid_argument("negative lesion count");
    if (spec.radius_min > spec.radius_max || spec.radius_min <= 0)
        throw std::invalid_argument("bad lesion radius range");
    if (2.0 * spec.radius_max + 8.0 > std::min(width, height))
        throw std::invalid_argument("lesion radius " + std::to_string(spec.radius_max) +
                                    " exceeds slide dims");

    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // tissue region: jittered ellipse with a wavy boundary
    const double cx = width / 2.0 + (u01(rng) - 0.5) * width / 8.0;
    const double cy = height / 2.0 + (u01(rng) - 0.5) * height / 8.0;
    const double rx = width * (0.44 + 0.04 * u01(rng));
    const double ry = height * (0.44 + 0.04 * u01(rng));
    const double bf1 = 2 + static_cast<int>(u01(rng) * 3), bp1 = u01(rng) * 6.283;
    const double bf2 = 4 + static_cast<int>(u01(rng) * 3), bp2 = u01(rng) * 6.283;
    auto tissue_radius = [&](double theta) {
        return 1.0 + 0.05 * std::sin(bf1 * theta + bp1) + 0.03 * std::sin(bf2 * theta + bp2);
    };
    auto in_tissue = [&](double x, double y) {
        double dx = (x - cx) / rx, dy = (y - cy) / ry;
        double rn = std::sqrt(dx * dx + dy * dy);
        return rn <= tissue_radius(std::atan2(dy, dx));
    };

    auto color_waves = detail::random_waves(rng, 3, 150.0, 400.0, 0.035);
    auto grain_waves = detail::random_waves(rng, 2, 18.0, 55.0, 0.02);

    // lesion placement
    struct Blob {
        double x, y, r, wf, wp;
    };
    std::vector<Blob> blobs;
    auto tiles = grid_patches(width, height);
    std::set<int> used_tiles;
    const int max_tries = 4000;
    for (int i = 0; i < spec.lesion_count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < max_tries && !placed; ++attempt) {
            double r = spec.radius_min + (spec.radius_max - spec.radius_min) * u01(rng);
            double bx, by;
            int tile_idx = -1;
            if (spec.snap_to_grid) {
                tile_idx = static_cast<int>(u01(rng) * tiles.size());
                tile_idx = std::min<int>(tile_idx, static_cast<int>(tiles.size()) - 1);
                if (used_tiles.count(tile_idx)) continue;
                bx = tiles[tile_idx].origin_x + kPatchSize / 2.0;
                by = tiles[tile_idx].origin_y + kPatchSize / 2.0;
            } else {
                bx = r + (width - 2 * r) * u01(rng);
                by = r + (height - 2 * r) * u01(rng);
            }
            // keep the blob core on tissue; edges may reach the boundary
            double margin = 0.5 * r;
            bool fits = in_tissue(bx, by);
            for (int a = 0; a < 4 && fits; ++a) {
                double th = a * 3.14159265358979323846 / 2.0;
                fits = in_tissue(bx + margin * std::cos(th), by + margin * std::sin(th));
            }
            for (const auto& o : blobs)
                if (std::hypot(bx - o.x, by - o.y) <
                    (r + o.r) * (1.0 + spec.wobble) + 6.0)
                    fits = false;
            if (!fits) continue;
            double wf = 3 + static_cast<int>(u01(rng) * 3);
            blobs.push_back({bx, by, r, wf, u01(rng) * 6.283});
            if (tile_idx >= 0) used_tiles.insert(tile_idx);
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("could not place lesion " + std::to_string(i) +
                                     " on a " + std::to_string(width) + "x" +
                                     std::to_string(height) + " slide");
    }

    Image rgb(width, height, 3, 255);
    Image mask(width, height, 1, 0);
    std::uniform_real_distribution<double> unoise(-spec.noise_amp, spec.noise_amp);

    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            // noise drawn for every pixel so layout changes cannot alter the stream
            std::array<double, 3> noise{unoise(rng), unoise(rng), unoise(rng)};
            const Blob* hit = nullptr;
            for (const auto& b : blobs) {
                double d = std::hypot(x - b.x, y - b.y);
                double rb = b.r * (1.0 + spec.wobble *
                                             std::sin(b.wf * std::atan2(y - b.y, x - b.x) + b.wp));
                if (d <= rb) {
                    hit = &b;
                    break;
                }
            }
            if (!hit && !in_tissue(x, y)) continue;
            double low = 0, grain = 0;
            for (const auto& wv : color_waves) low += wv.eval(x, y);
            for (const auto& wv : grain_waves) grain += wv.eval(x, y);
            const auto& base = hit ? spec.lesion_base : spec.tissue_base;
            if (hit) mask.at(x, y) = 255;
            for (int c = 0; c < 3; ++c) {
                double v = base[c] + low * (c == 1 ? 1.2 : 0.8) + grain + noise[c];
                rgb.at(x, y, c) =
                    static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    }
    return {std::move(rgb), std::move(mask)};
}

// Desk-scale metadata classification by largest blob radius.
inline LesionClass classify_synthetic(const SynthSpec& spec) {
    if (spec.lesion_count == 0) return LesionClass::negative;
    if (spec.radius_max <= 34.0) return LesionClass::itc;
    if (spec.radius_max <= 44.0) return LesionClass::micro;
    return LesionClass::macro;
}

inline PnStage pn_stage_for(LesionClass c) {
    switch (c) {
        case LesionClass::negative: return PnStage::pN0;
        case LesionClass::itc: return PnStage::pN0i;
        case LesionClass::micro: return PnStage::pN1mi;
        default: return PnStage::pN1;
    }
}

} // namespace cofcn
