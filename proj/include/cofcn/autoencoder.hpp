#pragma once

#include <array>

#include "cofcn/nn.hpp"

namespace cofcn {

struct AutoencoderConfig {
    int latent_channels = 8; // fixed by the 8-d averaged embedding
    double learning_rate = 0.004;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int early_stop_patience = 3;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    int max_epochs = 200;
    double train_loss_target = 0.0; // 0 disables the optional target stop
};

// 8-d embedding of one patch: spatial mean of each latent channel.
struct LatentVector {
    std::array<double, 8> values{};
    PatchRef patch_ref;
};

// Convolutional autoencoder: four stride-2 encoder stages (channels
// 16,16,16,8) and a mirrored bilinear-upsampling decoder with a sigmoid output.
template <typename T>
struct ConvAutoencoder {
    bool training_mode = false;
    nn::ConvBnRelu<T> e1, e2, e3, e4, d1, d2, d3;
    nn::Conv2d<T> out_conv;

    explicit ConvAutoencoder(Rng& rng)
        : e1(3, 16, rng), e2(16, 16, rng), e3(16, 16, rng), e4(16, 8, rng),
          d1(8, 16, rng), d2(16, 16, rng), d3(16, 16, rng), out_conv(16, 3, 3, rng) {}

    nn::Var<T> encode(const Tensor<T>& patch) {
        if (patch.dims != std::vector<int>{1, 3, 128, 128} &&
            patch.dims != std::vector<int>{3, 128, 128})
            throw std::invalid_argument("autoencoder input: expected 3x128x128, got " +
                                        patch.shape_str());
        Tensor<T> x({1, 3, 128, 128});
        x.data = patch.data;
        const bool t = training_mode;
        auto v = nn::make_var(std::move(x));
        v = nn::maxpool2x2(e1.forward(v, t));
        v = nn::maxpool2x2(e2.forward(v, t));
        v = nn::maxpool2x2(e3.forward(v, t));
        v = nn::maxpool2x2(e4.forward(v, t)); // (1,8,8,8)
        return v;
    }

    std::pair<nn::Var<T>, nn::Var<T>> forward(const Tensor<T>& patch) {
        auto latent = encode(patch);
        const bool t = training_mode;
        auto v = d1.forward(nn::upsample2x(latent), t);
        v = d2.forward(nn::upsample2x(v), t);
        v = d3.forward(nn::upsample2x(v), t);
        v = nn::sigmoid(out_conv.forward(nn::upsample2x(v)));
        return {v, latent};
    }

    std::array<double, 8> embed(const Tensor<T>& patch) {
        auto latent = encode(patch);
        std::array<double, 8> out{};
        const std::int64_t plane = 8 * 8;
        for (int c = 0; c < 8; ++c) {
            double s = 0;
            for (std::int64_t i = 0; i < plane; ++i) s += latent->value[c * plane + i];
            out[c] = s / static_cast<double>(plane);
        }
        return out;
    }

    std::vector<nn::ParamRef<T>> parameters() {
        std::vector<nn::ParamRef<T>> out;
        e1.params("e1", out); e2.params("e2", out); e3.params("e3", out); e4.params("e4", out);
        d1.params("d1", out); d2.params("d2", out); d3.params("d3", out);
        out_conv.params("out", out);
        return out;
    }
    std::vector<nn::StateRef<T>> buffers() {
        std::vector<nn::StateRef<T>> out;
        e1.buffers("e1", out); e2.buffers("e2", out); e3.buffers("e3", out); e4.buffers("e4", out);
        d1.buffers("d1", out); d2.buffers("d2", out); d3.buffers("d3", out);
        return out;
    }

    void save(const fs::path& path, int center_id) {
        nn::save_checkpoint<T>(path, {"autoencoder", 0, center_id, ""}, parameters(), buffers());
    }
    // Loads center-tagged weights; callers pass the center they are embedding
    // for so cross-center checkpoints are rejected.
    int load(const fs::path& path, int expect_center = -1) {
        auto meta = nn::load_checkpoint<T>(path, "autoencoder", parameters(), buffers());
        if (expect_center >= 0 && meta.center_id != expect_center)
            throw std::runtime_error("autoencoder checkpoint is for center " +
                                     std::to_string(meta.center_id) + ", not center " +
                                     std::to_string(expect_center));
        return meta.center_id;
    }
};

} // namespace cofcn
