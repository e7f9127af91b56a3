#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cofcn {

namespace fs = std::filesystem;

// FNV-1a, used for config hashes and per-stage seed derivation.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derives an independent seed stream for a named stage from one global seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%llu:", static_cast<unsigned long long>(base));
    return fnv1a64(tag, fnv1a64(buf));
}

using Rng = std::mt19937_64;

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

// Identifies one patch tile within a slide.
struct PatchRef {
    std::string slide_id;
    int grid_x = 0;
    int grid_y = 0;

    friend bool operator==(const PatchRef& a, const PatchRef& b) {
        return a.slide_id == b.slide_id && a.grid_x == b.grid_x && a.grid_y == b.grid_y;
    }
    friend bool operator<(const PatchRef& a, const PatchRef& b) {
        if (a.slide_id != b.slide_id) return a.slide_id < b.slide_id;
        if (a.grid_y != b.grid_y) return a.grid_y < b.grid_y;
        return a.grid_x < b.grid_x;
    }
    std::string str() const {
        return slide_id + ":" + std::to_string(grid_x) + ":" + std::to_string(grid_y);
    }
    static PatchRef parse(const std::string& s) {
        auto parts = split(s, ':');
        if (parts.size() != 3) throw std::invalid_argument("bad patch ref: " + s);
        return PatchRef{parts[0], std::stoi(parts[1]), std::stoi(parts[2])};
    }
};

} // namespace cofcn
