#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cofcn/autograd.hpp"
#include "cofcn/common.hpp"

namespace cofcn::nn {

template <typename T>
struct ParamRef {
    std::string name;
    Var<T> var;
};

template <typename T>
struct StateRef {
    std::string name;
    Tensor<T>* tensor;
};

// He-style normal init, fan-in mode.
template <typename T>
void he_init(Tensor<T>& w, int fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : w.data) v = static_cast<T>(dist(rng));
}

template <typename T>
struct Conv2d {
    int cin = 0, cout = 0, ksize = 3;
    Var<T> weight, bias;

    Conv2d() = default;
    Conv2d(int cin_, int cout_, int k, Rng& rng) : cin(cin_), cout(cout_), ksize(k) {
        Tensor<T> w({cout, cin, k, k});
        he_init(w, cin * k * k, rng);
        weight = make_var(std::move(w), true);
        bias = make_var(Tensor<T>({cout}), true);
    }
    Var<T> forward(const Var<T>& x) const { return conv2d(x, weight, bias); }
    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
    std::int64_t param_count() const { return weight->value.numel() + bias->value.numel(); }
};

template <typename T>
struct BatchNorm2d {
    int channels = 0;
    Var<T> gamma, beta;
    BnState<T> state;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int c) : channels(c) {
        gamma = make_var(Tensor<T>({c}, T(1)), true);
        beta = make_var(Tensor<T>({c}), true);
        state.running_mean = Tensor<T>({c});
        state.running_var = Tensor<T>({c}, T(1));
    }
    Var<T> forward(const Var<T>& x, bool training) {
        return batch_norm(x, gamma, beta, state, training);
    }
    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
    void buffers(const std::string& prefix, std::vector<StateRef<T>>& out) {
        out.push_back({prefix + ".running_mean", &state.running_mean});
        out.push_back({prefix + ".running_var", &state.running_var});
    }
    std::int64_t param_count() const { return 2 * channels; }
};

// conv 3x3 (stride 1, shape-preserving) -> batch norm -> ReLU
template <typename T>
struct ConvBnRelu {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;

    ConvBnRelu() = default;
    ConvBnRelu(int cin, int cout, Rng& rng) : conv(cin, cout, 3, rng), bn(cout) {}
    Var<T> forward(const Var<T>& x, bool training) {
        return relu(bn.forward(conv.forward(x), training));
    }
    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        conv.params(prefix + ".conv", out);
        bn.params(prefix + ".bn", out);
    }
    void buffers(const std::string& prefix, std::vector<StateRef<T>>& out) {
        bn.buffers(prefix + ".bn", out);
    }
    std::int64_t param_count() const { return conv.param_count() + bn.param_count(); }
};

template <typename T>
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<Tensor<T>> m, v;
    std::vector<ParamRef<T>> params;

    explicit Adam(std::vector<ParamRef<T>> p, double lr_, double b1, double b2)
        : lr(lr_), beta1(b1), beta2(b2), params(std::move(p)) {
        for (auto& pr : params) {
            m.emplace_back(pr.var->value.dims);
            v.emplace_back(pr.var->value.dims);
        }
    }
    void zero_grad() {
        for (auto& pr : params) pr.var->zero_grad();
    }
    void step() {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k].var->value;
            auto& g = params[k].var->grad;
            if (g.empty()) continue;
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                double gi = g[i];
                double mi = beta1 * m[k][i] + (1.0 - beta1) * gi;
                double vi = beta2 * v[k][i] + (1.0 - beta2) * gi * gi;
                m[k][i] = static_cast<T>(mi);
                v[k][i] = static_cast<T>(vi);
                p[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
            }
        }
    }
};

// ---------------------------------------------------------------------------
// checkpoint serialization
//
// Layout: magic line, one JSON-ish header line with model metadata, then raw
// little-endian float32 blobs in the order listed by params() then buffers().

inline constexpr const char* kCkptMagic = "COFCNCKPT1";

struct CkptMeta {
    std::string model;    // "autoencoder" | "cofcn" | "unet"
    int k_shots = 0;      // 0 when not applicable
    int center_id = -1;   // -1 when not applicable
    std::string extra;    // free-form config echo
};

template <typename T>
void save_checkpoint(const fs::path& path, const CkptMeta& meta,
                     const std::vector<ParamRef<T>>& params,
                     const std::vector<StateRef<T>>& buffers) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << kCkptMagic << "\n";
    out << "model=" << meta.model << " k=" << meta.k_shots << " center=" << meta.center_id
        << " extra=" << (meta.extra.empty() ? "-" : meta.extra) << "\n";
    auto write_tensor = [&out](const std::string& name, const Tensor<T>& t) {
        out << name;
        for (int d : t.dims) out << " " << d;
        out << "\n";
        std::vector<float> buf(t.data.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        out << "\n";
    };
    out << "params " << params.size() << " buffers " << buffers.size() << "\n";
    for (const auto& p : params) write_tensor(p.name, p.var->value);
    for (const auto& b : buffers) write_tensor(b.name, *b.tensor);
    if (!out) throw std::runtime_error("write failure on " + path.string());
}

// Loads into an already-constructed model; refuses mismatched metadata or shapes.
template <typename T>
CkptMeta load_checkpoint(const fs::path& path, const std::string& expect_model,
                         const std::vector<ParamRef<T>>& params,
                         const std::vector<StateRef<T>>& buffers) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != kCkptMagic) throw std::runtime_error("bad checkpoint magic in " + path.string());
    std::getline(in, line);
    CkptMeta meta;
    {
        auto fields = split(line, ' ');
        for (auto& f : fields) {
            auto kv = split(f, '=');
            if (kv.size() != 2) continue;
            if (kv[0] == "model") meta.model = kv[1];
            else if (kv[0] == "k") meta.k_shots = std::stoi(kv[1]);
            else if (kv[0] == "center") meta.center_id = std::stoi(kv[1]);
            else if (kv[0] == "extra") meta.extra = kv[1] == "-" ? "" : kv[1];
        }
    }
    if (meta.model != expect_model)
        throw std::runtime_error("checkpoint model '" + meta.model + "' does not match '" +
                                 expect_model + "'");
    std::getline(in, line);
    auto counts = split(line, ' ');
    if (counts.size() != 4 || std::stoull(counts[1]) != params.size() ||
        std::stoull(counts[3]) != buffers.size())
        throw std::runtime_error("checkpoint layout mismatch in " + path.string());

    auto read_tensor = [&in, &path](const std::string& name, Tensor<T>& t) {
        std::string hdr;
        std::getline(in, hdr);
        auto parts = split(hdr, ' ');
        if (parts.empty() || parts[0] != name)
            throw std::runtime_error("checkpoint tensor '" + (parts.empty() ? "" : parts[0]) +
                                     "' does not match expected '" + name + "'");
        std::vector<int> dims;
        for (size_t i = 1; i < parts.size(); ++i) dims.push_back(std::stoi(parts[i]));
        if (dims != t.dims)
            throw std::runtime_error("checkpoint tensor " + name + " shape mismatch in " +
                                     path.string());
        std::vector<float> buf(t.data.size());
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        in.ignore(1); // trailing newline
        if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
        for (size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<T>(buf[i]);
    };
    for (const auto& p : params) read_tensor(p.name, p.var->value);
    for (const auto& b : buffers) read_tensor(b.name, *b.tensor);
    return meta;
}

} // namespace cofcn::nn
