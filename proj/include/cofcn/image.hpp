#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cofcn/common.hpp"
#include "cofcn/tensor.hpp"

namespace cofcn {

// 8-bit interleaved raster; channels is 1 (mask), 3 (RGB) or 4 (RGBA).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c),
          data(static_cast<size_t>(w) * h * c, fill) {}

    std::uint8_t& at(int x, int y, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

// --- netpbm I/O (PGM P5 for masks, PPM P6 for RGB, PAM P7 for RGBA) ---------

inline void write_image(const fs::path& path, const Image& img) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image " + path.string());
    if (img.channels == 1) {
        out << "P5\n" << img.width << " " << img.height << "\n255\n";
    } else if (img.channels == 3) {
        out << "P6\n" << img.width << " " << img.height << "\n255\n";
    } else if (img.channels == 4) {
        out << "P7\nWIDTH " << img.width << "\nHEIGHT " << img.height
            << "\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n";
    } else {
        throw std::invalid_argument("unsupported channel count " + std::to_string(img.channels));
    }
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
    if (!out) throw std::runtime_error("write failure on " + path.string());
}

inline Image read_image(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    Image img;
    auto next_token = [&in, &path]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw std::runtime_error("truncated header in " + path.string());
    };
    if (magic == "P5" || magic == "P6") {
        img.channels = magic == "P5" ? 1 : 3;
        img.width = std::stoi(next_token());
        img.height = std::stoi(next_token());
        int maxval = std::stoi(next_token());
        if (maxval != 255) throw std::runtime_error("unsupported maxval in " + path.string());
        in.ignore(1);
    } else if (magic == "P7") {
        std::string key;
        int depth = 0;
        while (in >> key && key != "ENDHDR") {
            if (key == "WIDTH") in >> img.width;
            else if (key == "HEIGHT") in >> img.height;
            else if (key == "DEPTH") in >> depth;
            else if (key == "MAXVAL" || key == "TUPLTYPE") { std::string v; in >> v; }
        }
        img.channels = depth;
        in.ignore(1);
    } else {
        throw std::runtime_error("unsupported image magic '" + magic + "' in " + path.string());
    }
    if (img.width <= 0 || img.height <= 0 || img.channels <= 0)
        throw std::runtime_error("bad image header in " + path.string());
    img.data.resize(static_cast<size_t>(img.width) * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
    if (!in) throw std::runtime_error("truncated image data in " + path.string());
    return img;
}

// --- float helpers -----------------------------------------------------------

// Extracts a (3,size,size) float patch in [0,1] from an RGB slide raster.
template <typename T = float>
Tensor<T> extract_patch(const Image& slide, int origin_x, int origin_y, int size) {
    if (slide.channels != 3) throw std::invalid_argument("extract_patch: RGB slide expected");
    if (origin_x < 0 || origin_y < 0 || origin_x + size > slide.width ||
        origin_y + size > slide.height)
        throw std::invalid_argument("extract_patch: window outside slide");
    Tensor<T> out({3, size, size});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                out[static_cast<std::int64_t>(c) * size * size + y * size + x] =
                    static_cast<T>(slide.at(origin_x + x, origin_y + y, c) / 255.0);
    return out;
}

inline Tensor<float> extract_mask_patch(const Image& mask, int origin_x, int origin_y, int size) {
    if (mask.channels != 1) throw std::invalid_argument("extract_mask_patch: 1-channel expected");
    if (origin_x < 0 || origin_y < 0 || origin_x + size > mask.width ||
        origin_y + size > mask.height)
        throw std::invalid_argument("extract_mask_patch: window outside mask");
    Tensor<float> out({1, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            out[static_cast<std::int64_t>(y) * size + x] =
                mask.at(origin_x + x, origin_y + y) > 127 ? 1.0f : 0.0f;
    return out;
}

// HSV saturation of an RGB pixel with components in [0,1].
inline double saturation_of(double r, double g, double b) {
    double mx = std::max({r, g, b});
    double mn = std::min({r, g, b});
    return mx > 0 ? (mx - mn) / mx : 0.0;
}

// Hue in degrees, s and v in [0,1] -> RGB bytes.
inline void hsv_to_rgb(double h, double s, double v, std::uint8_t& r, std::uint8_t& g,
                       std::uint8_t& b) {
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
    int i = static_cast<int>(h);
    double f = h - i;
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double rr, gg, bb;
    switch (i % 6) {
        case 0: rr = v; gg = t; bb = p; break;
        case 1: rr = q; gg = v; bb = p; break;
        case 2: rr = p; gg = v; bb = t; break;
        case 3: rr = p; gg = q; bb = v; break;
        case 4: rr = t; gg = p; bb = v; break;
        default: rr = v; gg = p; bb = q; break;
    }
    r = static_cast<std::uint8_t>(std::lround(rr * 255));
    g = static_cast<std::uint8_t>(std::lround(gg * 255));
    b = static_cast<std::uint8_t>(std::lround(bb * 255));
}

// Separable Gaussian blur of a single plane, replicated borders, kernel
// truncated at 3 sigma.
inline std::vector<double> gaussian_blur(const std::vector<double>& plane, int w, int h,
                                         double sigma) {
    if (sigma <= 0) return plane;
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;
    std::vector<double> tmp(plane.size()), out(plane.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                int xx = std::clamp(x + i, 0, w - 1);
                acc += kernel[i + radius] * plane[static_cast<size_t>(y) * w + xx];
            }
            tmp[static_cast<size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                int yy = std::clamp(y + i, 0, h - 1);
                acc += kernel[i + radius] * tmp[static_cast<size_t>(yy) * w + x];
            }
            out[static_cast<size_t>(y) * w + x] = acc;
        }
    return out;
}

// --- heatmap raster ----------------------------------------------------------
// Full-slide float32 probability plane; NaN marks cells with no prediction.

struct HeatMap {
    int width = 0;
    int height = 0;
    std::vector<float> values; // row-major, NaN = no data

    HeatMap() = default;
    HeatMap(int w, int h)
        : width(w), height(h),
          values(static_cast<size_t>(w) * h, std::numeric_limits<float>::quiet_NaN()) {}

    float at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
    void set(int x, int y, float v) { values[static_cast<size_t>(y) * width + x] = v; }
};

inline constexpr const char* kHeatMagic = "COFCNHEAT1";

inline void write_heatmap(const fs::path& path, const HeatMap& hm) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write heatmap " + path.string());
    out << kHeatMagic << "\n" << hm.width << " " << hm.height << "\n";
    out.write(reinterpret_cast<const char*>(hm.values.data()),
              static_cast<std::streamsize>(hm.values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failure on " + path.string());
}

inline HeatMap read_heatmap(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open heatmap " + path.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != kHeatMagic) throw std::runtime_error("bad heatmap magic in " + path.string());
    HeatMap hm;
    in >> hm.width >> hm.height;
    in.ignore(1);
    hm.values.resize(static_cast<size_t>(hm.width) * hm.height);
    in.read(reinterpret_cast<char*>(hm.values.data()),
            static_cast<std::streamsize>(hm.values.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated heatmap " + path.string());
    return hm;
}

} // namespace cofcn
