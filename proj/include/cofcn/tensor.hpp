#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cofcn {

// Dense row-major tensor. Activations use (n, c, h, w); parameters and
// intermediate buffers use whatever rank fits.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> d, T fill = T(0)) : dims(std::move(d)) {
        data.assign(static_cast<size_t>(numel_of(dims)), fill);
    }

    static std::int64_t numel_of(const std::vector<int>& d) {
        std::int64_t n = 1;
        for (int x : d) {
            if (x < 0) throw std::invalid_argument("negative tensor dim");
            n *= x;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool empty() const { return data.empty(); }

    int dim(int i) const { return dims.at(static_cast<size_t>(i)); }
    int n() const { return dims.size() == 4 ? dims[0] : 1; }
    int c() const { return dims.size() == 4 ? dims[1] : (dims.size() == 1 ? dims[0] : 0); }
    int h() const { return dims.size() == 4 ? dims[2] : 0; }
    int w() const { return dims.size() == 4 ? dims[3] : 0; }

    T& at(int in, int ic, int ih, int iw) {
        return data[((static_cast<size_t>(in) * dims[1] + ic) * dims[2] + ih) * dims[3] + iw];
    }
    const T& at(int in, int ic, int ih, int iw) const {
        return data[((static_cast<size_t>(in) * dims[1] + ic) * dims[2] + ih) * dims[3] + iw];
    }

    T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& other) const { return dims == other.dims; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + ")";
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

} // namespace cofcn
