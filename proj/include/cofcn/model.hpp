#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cofcn/nn.hpp"

namespace cofcn {

inline bool valid_k_shots(int k) { return k == 1 || k == 2 || k == 4 || k == 8; }

// Feature-map ladder shared by both branches: spatial sizes down the encoder
// and the channel widths coming out of each convolution block.
struct LadderLevel {
    int spatial;
    int channels;
};

struct NetLadder {
    std::vector<LadderLevel> encoder;   // conv outputs, top to bottom
    int bottleneck_spatial = 0;
    std::vector<LadderLevel> decoder;   // conv outputs, bottom to top
    int cond_in_channels = 0;           // 0 for the plain U-Net
};

struct CoFcnConfig {
    int k_shots = 8;
    int input_size = 128;
};

namespace nn {

// One encoder step: conv-bn-relu features plus the 2x2 stride-2 max-pooled map.
template <typename T>
std::pair<Var<T>, Var<T>> encoder_block(ConvBnRelu<T>& blk, const Var<T>& x, bool training) {
    Var<T> features = blk.forward(x, training);
    return {features, maxpool2x2(features)};
}

// One decoder step: bilinear x2 upsample, concat the skip, conv-bn-relu.
template <typename T>
Var<T> decoder_block(ConvBnRelu<T>& blk, const Var<T>& x, const Var<T>& skip, bool training) {
    return blk.forward(concat_channels(upsample2x(x), skip), training);
}

} // namespace nn

template <typename T>
struct CoFcnOutput {
    nn::Var<T> seg_prob;        // (1,1,H,W) lesion-class probability
    nn::Var<T> cond_map;        // (k,1,H,W) conditioning classifier logits
    nn::Var<T> cond_logit_mean; // scalar mean of cond_map, autograd-connected
    double cond_score = 0;      // sigmoid of the mean, permutation-exact
};

// The mean over cond_map computed so that the result is bit-identical under
// any permutation of the shot axis: per-shot means are sorted before the
// final reduction.
template <typename T>
double cond_score_of(const Tensor<T>& cond_map) {
    const int k = cond_map.dim(0);
    const std::int64_t plane = cond_map.numel() / k;
    std::vector<double> shot_means(k);
    for (int j = 0; j < k; ++j) {
        double s = 0;
        const T* p = cond_map.data.data() + j * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
        shot_means[j] = s / static_cast<double>(plane);
    }
    std::sort(shot_means.begin(), shot_means.end());
    double total = 0;
    for (double m : shot_means) total += m;
    return 1.0 / (1.0 + std::exp(-total / k));
}

// Two-branch conditional FCN. The Conditioning Branch runs every support shot
// through shared weights; its per-level feature maps, averaged over the shots,
// are concatenated into the Segmentation Branch at encoder levels 1-4 and
// decoder levels D4..D2. The conditioning classifier emits one logit map per
// shot.
template <typename T>
struct CoFcn {
    CoFcnConfig cfg;
    bool training_mode = false;

    // conditioning branch
    nn::ConvBnRelu<T> e1c, e2c, e3c, e4c, bnc, d4c, d3c, d2c, d1c;
    nn::Conv2d<T> clc;
    // segmentation branch
    nn::ConvBnRelu<T> e1s, e2s, e3s, e4s, bns, d4s, d3s, d2s, d1s;
    nn::Conv2d<T> head;

    CoFcn(const CoFcnConfig& cfg_, Rng& rng)
        : cfg(cfg_),
          e1c(3, 32, rng), e2c(32, 64, rng), e3c(64, 128, rng), e4c(128, 256, rng),
          bnc(256, 256, rng),
          d4c(512, 128, rng), d3c(256, 64, rng), d2c(128, 32, rng), d1c(64, 32, rng),
          clc(32, 1, 1, rng),
          e1s(3, 32, rng), e2s(64, 64, rng), e3s(128, 128, rng), e4s(256, 256, rng),
          bns(512, 256, rng),
          d4s(768, 128, rng), d3s(512, 64, rng), d2s(256, 32, rng), d1s(128, 32, rng),
          head(32, 2, 1, rng) {
        if (!valid_k_shots(cfg.k_shots))
            throw std::invalid_argument("k_shots must be one of {1,2,4,8}");
    }

    int support_channels() const { return 3 * cfg.k_shots; }

    // query: (1,3,S,S); support: (1,3k,S,S) or (3k,S,S)
    CoFcnOutput<T> forward(const Tensor<T>& query, const Tensor<T>& support) {
        const int S = cfg.input_size;
        if (query.dims != std::vector<int>{1, 3, S, S} && query.dims != std::vector<int>{3, S, S})
            throw std::invalid_argument("query input: expected 3x" + std::to_string(S) + "x" +
                                        std::to_string(S) + ", got " + query.shape_str());
        const int sc = support.dims.size() == 4 ? support.dims[1] : support.dims[0];
        if ((support.dims.size() != 3 && support.dims.size() != 4) || sc != support_channels() ||
            support.dim(support.dims.size() - 1) != S || support.dim(support.dims.size() - 2) != S)
            throw std::invalid_argument(
                "support input: expected " + std::to_string(support_channels()) + "x" +
                std::to_string(S) + "x" + std::to_string(S) + " (3k channels for k=" +
                std::to_string(cfg.k_shots) + "), got " + support.shape_str());

        const int k = cfg.k_shots;
        Tensor<T> shots({k, 3, S, S});
        shots.data = support.data;
        Tensor<T> q({1, 3, S, S});
        q.data = query.data;

        const bool t = training_mode;
        using nn::concat_channels;
        using nn::maxpool2x2;
        using nn::mean_batch;
        using nn::upsample2x;

        // conditioning branch over the k-shot batch
        auto xc = nn::make_var(std::move(shots));
        auto [c1, p1] = nn::encoder_block(e1c, xc, t);
        auto [c2, p2] = nn::encoder_block(e2c, p1, t);
        auto [c3, p3] = nn::encoder_block(e3c, p2, t);
        auto [c4, p4] = nn::encoder_block(e4c, p3, t);
        auto bc = bnc.forward(p4, t);
        auto u4 = nn::decoder_block(d4c, bc, c4, t);
        auto u3 = nn::decoder_block(d3c, u4, c3, t);
        auto u2 = nn::decoder_block(d2c, u3, c2, t);
        auto u1 = nn::decoder_block(d1c, u2, c1, t);
        auto cond_map = clc.forward(u1); // (k,1,S,S) logits

        // segmentation branch with shot-averaged conditioning features
        auto xq = nn::make_var(std::move(q));
        auto s1 = concat_channels(e1s.forward(xq, t), mean_batch(c1));
        auto s2 = concat_channels(e2s.forward(maxpool2x2(s1), t), mean_batch(c2));
        auto s3 = concat_channels(e3s.forward(maxpool2x2(s2), t), mean_batch(c3));
        auto s4 = concat_channels(e4s.forward(maxpool2x2(s3), t), mean_batch(c4));
        auto bs = bns.forward(maxpool2x2(s4), t);
        auto t4 = concat_channels(nn::decoder_block(d4s, bs, s4, t), mean_batch(u4));
        auto t3 = concat_channels(nn::decoder_block(d3s, t4, s3, t), mean_batch(u3));
        auto t2 = concat_channels(nn::decoder_block(d2s, t3, s2, t), mean_batch(u2));
        auto t1 = nn::decoder_block(d1s, t2, s1, t);
        auto probs = nn::softmax_channels(head.forward(t1));

        CoFcnOutput<T> out;
        out.seg_prob = nn::slice_channel(probs, 1);
        out.cond_map = cond_map;
        out.cond_logit_mean = nn::mean_all(cond_map);
        out.cond_score = cond_score_of(cond_map->value);
        return out;
    }

    NetLadder ladder() const {
        NetLadder l;
        const int s = cfg.input_size;
        l.encoder = {{s, e1s.conv.cout}, {s / 2, e2s.conv.cout}, {s / 4, e3s.conv.cout},
                     {s / 8, e4s.conv.cout}};
        l.bottleneck_spatial = s / 16;
        l.decoder = {{s / 8, d4s.conv.cout}, {s / 4, d3s.conv.cout}, {s / 2, d2s.conv.cout},
                     {s, d1s.conv.cout}};
        l.cond_in_channels = support_channels();
        return l;
    }

    std::vector<nn::ParamRef<T>> parameters() {
        std::vector<nn::ParamRef<T>> out;
        e1c.params("cond.e1", out); e2c.params("cond.e2", out); e3c.params("cond.e3", out);
        e4c.params("cond.e4", out); bnc.params("cond.bn", out);
        d4c.params("cond.d4", out); d3c.params("cond.d3", out); d2c.params("cond.d2", out);
        d1c.params("cond.d1", out); clc.params("cond.cl", out);
        e1s.params("seg.e1", out); e2s.params("seg.e2", out); e3s.params("seg.e3", out);
        e4s.params("seg.e4", out); bns.params("seg.bn", out);
        d4s.params("seg.d4", out); d3s.params("seg.d3", out); d2s.params("seg.d2", out);
        d1s.params("seg.d1", out); head.params("seg.head", out);
        return out;
    }
    std::vector<nn::StateRef<T>> buffers() {
        std::vector<nn::StateRef<T>> out;
        e1c.buffers("cond.e1", out); e2c.buffers("cond.e2", out); e3c.buffers("cond.e3", out);
        e4c.buffers("cond.e4", out); bnc.buffers("cond.bn", out);
        d4c.buffers("cond.d4", out); d3c.buffers("cond.d3", out); d2c.buffers("cond.d2", out);
        d1c.buffers("cond.d1", out);
        e1s.buffers("seg.e1", out); e2s.buffers("seg.e2", out); e3s.buffers("seg.e3", out);
        e4s.buffers("seg.e4", out); bns.buffers("seg.bn", out);
        d4s.buffers("seg.d4", out); d3s.buffers("seg.d3", out); d2s.buffers("seg.d2", out);
        d1s.buffers("seg.d1", out);
        return out;
    }
    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : parameters()) n += p.var->value.numel();
        return n;
    }

    void save(const fs::path& path) {
        nn::save_checkpoint<T>(path, {"cofcn", cfg.k_shots, -1, ""}, parameters(), buffers());
    }
    void load(const fs::path& path) {
        auto meta = nn::load_checkpoint<T>(path, "cofcn", parameters(), buffers());
        if (meta.k_shots != cfg.k_shots)
            throw std::runtime_error("checkpoint k=" + std::to_string(meta.k_shots) +
                                     " does not match model k=" + std::to_string(cfg.k_shots));
    }
};

// Baseline: the Segmentation Branch alone, with the conditioning
// concatenations removed and encoder input widths shrunk accordingly.
template <typename T>
struct UNet {
    int input_size = 128;
    bool training_mode = false;

    nn::ConvBnRelu<T> e1, e2, e3, e4, bn, d4, d3, d2, d1;
    nn::Conv2d<T> head;

    explicit UNet(Rng& rng, int input_size_ = 128)
        : input_size(input_size_),
          e1(3, 32, rng), e2(32, 64, rng), e3(64, 128, rng), e4(128, 256, rng),
          bn(256, 256, rng),
          d4(512, 128, rng), d3(256, 64, rng), d2(128, 32, rng), d1(64, 32, rng),
          head(32, 2, 1, rng) {}

    nn::Var<T> forward(const Tensor<T>& query) {
        const int S = input_size;
        if (query.dims != std::vector<int>{1, 3, S, S} && query.dims != std::vector<int>{3, S, S})
            throw std::invalid_argument("query input: expected 3x" + std::to_string(S) + "x" +
                                        std::to_string(S) + ", got " + query.shape_str());
        Tensor<T> q({1, 3, S, S});
        q.data = query.data;
        const bool t = training_mode;
        auto x = nn::make_var(std::move(q));
        auto [s1, p1] = nn::encoder_block(e1, x, t);
        auto [s2, p2] = nn::encoder_block(e2, p1, t);
        auto [s3, p3] = nn::encoder_block(e3, p2, t);
        auto [s4, p4] = nn::encoder_block(e4, p3, t);
        auto b = bn.forward(p4, t);
        auto t4 = nn::decoder_block(d4, b, s4, t);
        auto t3 = nn::decoder_block(d3, t4, s3, t);
        auto t2 = nn::decoder_block(d2, t3, s2, t);
        auto t1 = nn::decoder_block(d1, t2, s1, t);
        return nn::slice_channel(nn::softmax_channels(head.forward(t1)), 1);
    }

    NetLadder ladder() const {
        NetLadder l;
        const int s = input_size;
        l.encoder = {{s, e1.conv.cout}, {s / 2, e2.conv.cout}, {s / 4, e3.conv.cout},
                     {s / 8, e4.conv.cout}};
        l.bottleneck_spatial = s / 16;
        l.decoder = {{s / 8, d4.conv.cout}, {s / 4, d3.conv.cout}, {s / 2, d2.conv.cout},
                     {s, d1.conv.cout}};
        return l;
    }

    std::vector<nn::ParamRef<T>> parameters() {
        std::vector<nn::ParamRef<T>> out;
        e1.params("e1", out); e2.params("e2", out); e3.params("e3", out); e4.params("e4", out);
        bn.params("bn", out);
        d4.params("d4", out); d3.params("d3", out); d2.params("d2", out); d1.params("d1", out);
        head.params("head", out);
        return out;
    }
    std::vector<nn::StateRef<T>> buffers() {
        std::vector<nn::StateRef<T>> out;
        e1.buffers("e1", out); e2.buffers("e2", out); e3.buffers("e3", out); e4.buffers("e4", out);
        bn.buffers("bn", out);
        d4.buffers("d4", out); d3.buffers("d3", out); d2.buffers("d2", out); d1.buffers("d1", out);
        return out;
    }
    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : parameters()) n += p.var->value.numel();
        return n;
    }

    void save(const fs::path& path) {
        nn::save_checkpoint<T>(path, {"unet", 0, -1, ""}, parameters(), buffers());
    }
    void load(const fs::path& path) { nn::load_checkpoint<T>(path, "unet", parameters(), buffers()); }
};

} // namespace cofcn
