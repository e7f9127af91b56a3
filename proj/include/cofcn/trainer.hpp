#pragma once

#include <functional>
#include <iostream>
#include <limits>

#include "cofcn/autoencoder.hpp"
#include "cofcn/loss.hpp"
#include "cofcn/model.hpp"

namespace cofcn {

struct TrainConfig {
    double learning_rate = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double lesion_weight = 4.0;  // w_l in the composite loss
    double pretext_weight = 0.2; // w in the composite loss
    int k_shots = 8;
    int patience = 3;
    double train_fraction = 0.75;
    std::uint64_t seed = 0;
    int max_epochs = 100;
    int batch_size = 8;
    double train_loss_target = 0.0; // 0 disables the optional target stop
    int log_every = 0;              // epoch progress on stderr; 0 = silent
    std::string log_tag;

    void validate() const {
        if (lesion_weight <= 0 || pretext_weight <= 0 || learning_rate <= 0)
            throw std::invalid_argument("loss weights and learning rate must be > 0");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw std::invalid_argument("train_fraction outside (0,1)");
        if (patience < 1 || max_epochs < 1 || batch_size < 1)
            throw std::invalid_argument("patience, max_epochs, batch_size must be >= 1");
    }
};

// Validation-loss early stopping: an epoch improves only if it beats the
// running best by at least min_improvement; `patience` consecutive
// non-improving epochs stop the run.
struct EarlyStopper {
    int patience = 3;
    double min_improvement = 1e-6;
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int bad_epochs = 0;

    // returns true when this epoch sets a new best
    bool observe(int epoch, double val_loss) {
        if (best - val_loss >= min_improvement) {
            best = val_loss;
            best_epoch = epoch;
            bad_epochs = 0;
            return true;
        }
        ++bad_epochs;
        return false;
    }
    bool should_stop() const { return bad_epochs >= patience; }
};

struct EpochRow {
    int epoch;
    double train_loss;
    double val_loss;
    double lr;
};

struct TrainResult {
    int epochs_run = 0;
    int best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    double final_train_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
    bool reached_target = false;
    std::vector<EpochRow> log;
};

inline void write_metrics_log(const fs::path& path, const std::vector<EpochRow>& rows) {
    std::string out;
    for (const auto& r : rows)
        out += std::to_string(r.epoch) + '\t' + format_g17(r.train_loss) + '\t' +
               format_g17(r.val_loss) + '\t' + format_g17(r.lr) + '\n';
    write_text_file(path, out);
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot_params(const std::vector<nn::ParamRef<T>>& params,
                                       const std::vector<nn::StateRef<T>>& buffers) {
    std::vector<Tensor<T>> snap;
    for (const auto& p : params) snap.push_back(p.var->value);
    for (const auto& b : buffers) snap.push_back(*b.tensor);
    return snap;
}

template <typename T>
void restore_params(const std::vector<Tensor<T>>& snap,
                    const std::vector<nn::ParamRef<T>>& params,
                    const std::vector<nn::StateRef<T>>& buffers) {
    size_t i = 0;
    for (const auto& p : params) p.var->value = snap[i++];
    for (const auto& b : buffers) *b.tensor = snap[i++];
}

} // namespace detail

// Shared training loop: seeded train/validation split, per-epoch shuffling,
// gradient accumulation over batches, early stopping on the validation loss,
// and best-validation weight restoration. The optional train_loss_target stops
// once the epoch-mean training loss falls below it, keeping the final weights.
template <typename T>
TrainResult train_loop(size_t n_items, const TrainConfig& cfg, nn::Adam<T>& opt,
                       const std::vector<nn::ParamRef<T>>& params,
                       const std::vector<nn::StateRef<T>>& buffers,
                       const std::function<void(bool)>& set_training,
                       const std::function<double(size_t, T)>& forward_backward,
                       const std::function<double(size_t)>& eval_loss) {
    cfg.validate();
    if (n_items < 2)
        throw std::invalid_argument("training needs at least 2 items for a non-empty split, got " +
                                    std::to_string(n_items));
    std::vector<size_t> idx(n_items);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng split_rng(derive_seed(cfg.seed, "split"));
    std::shuffle(idx.begin(), idx.end(), split_rng);
    size_t n_train = static_cast<size_t>(std::llround(cfg.train_fraction * n_items));
    n_train = std::clamp<size_t>(n_train, 1, n_items - 1);
    std::vector<size_t> train_idx(idx.begin(), idx.begin() + n_train);
    std::vector<size_t> val_idx(idx.begin() + n_train, idx.end());

    TrainResult res;
    EarlyStopper stopper;
    stopper.patience = cfg.patience;
    auto best_snap = detail::snapshot_params(params, buffers);
    bool keep_final = false;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng epoch_rng(derive_seed(cfg.seed, "epoch:" + std::to_string(epoch)));
        std::shuffle(train_idx.begin(), train_idx.end(), epoch_rng);

        set_training(true);
        double train_sum = 0;
        for (size_t b = 0; b < train_idx.size(); b += cfg.batch_size) {
            size_t len = std::min<size_t>(cfg.batch_size, train_idx.size() - b);
            opt.zero_grad();
            for (size_t i = 0; i < len; ++i)
                train_sum += forward_backward(train_idx[b + i], T(1) / static_cast<T>(len));
            opt.step();
        }
        double train_loss = train_sum / static_cast<double>(train_idx.size());

        set_training(false);
        double val_sum = 0;
        for (size_t i : val_idx) val_sum += eval_loss(i);
        double val_loss = val_sum / static_cast<double>(val_idx.size());

        res.log.push_back({epoch, train_loss, val_loss, opt.lr});
        res.epochs_run = epoch;
        res.final_train_loss = train_loss;
        if (cfg.log_every > 0 && epoch % cfg.log_every == 0)
            std::cerr << "[" << (cfg.log_tag.empty() ? "train" : cfg.log_tag) << "] epoch "
                      << epoch << ": train " << train_loss << ", val " << val_loss << "\n";

        if (stopper.observe(epoch, val_loss)) {
            best_snap = detail::snapshot_params(params, buffers);
            res.best_epoch = epoch;
            res.best_val_loss = val_loss;
        }
        if (cfg.train_loss_target > 0 && train_loss < cfg.train_loss_target) {
            res.reached_target = true;
            keep_final = true;
            break;
        }
        if (stopper.should_stop()) {
            res.stopped_early = true;
            break;
        }
    }
    if (!keep_final) detail::restore_params(best_snap, params, buffers);
    set_training(false);
    return res;
}

// --- autoencoder training ------------------------------------------------------

template <typename T>
TrainResult train_autoencoder(ConvAutoencoder<T>& model, const std::vector<Tensor<T>>& patches,
                              const AutoencoderConfig& cfg) {
    if (patches.empty()) throw std::invalid_argument("train_autoencoder: empty patch set");
    TrainConfig loop_cfg;
    loop_cfg.learning_rate = cfg.learning_rate;
    loop_cfg.adam_beta1 = cfg.adam_beta1;
    loop_cfg.adam_beta2 = cfg.adam_beta2;
    loop_cfg.patience = cfg.early_stop_patience;
    loop_cfg.train_fraction = cfg.train_fraction;
    loop_cfg.seed = cfg.seed;
    loop_cfg.max_epochs = cfg.max_epochs;
    loop_cfg.batch_size = 8;
    loop_cfg.train_loss_target = cfg.train_loss_target;
    // loss weights are unused for reconstruction; keep them valid
    loop_cfg.lesion_weight = 1.0;
    loop_cfg.pretext_weight = 1.0;

    std::vector<Tensor<T>> targets;
    for (const auto& p : patches) {
        Tensor<T> t({1, 3, 128, 128});
        if (t.numel() != p.numel())
            throw std::invalid_argument("train_autoencoder: patch shape " + p.shape_str());
        t.data = p.data;
        targets.push_back(std::move(t));
    }
    auto params = model.parameters();
    auto buffers = model.buffers();
    nn::Adam<T> opt(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    return train_loop<T>(
        patches.size(), loop_cfg, opt, params, buffers,
        [&](bool training) { model.training_mode = training; },
        [&](size_t i, T scale) {
            auto [recon, latent] = model.forward(patches[i]);
            auto loss = nn::mse_loss(recon, targets[i]);
            nn::backward(loss, scale);
            return static_cast<double>(loss->value[0]);
        },
        [&](size_t i) {
            auto [recon, latent] = model.forward(patches[i]);
            return static_cast<double>(nn::mse_loss(recon, targets[i])->value[0]);
        });
}

// --- co-FCN / U-Net training -----------------------------------------------------

template <typename T>
struct CoFcnSample {
    PatchRef ref;
    Tensor<T> query;   // (3,128,128)
    Tensor<T> mask;    // (1,1,128,128)
    Tensor<T> support; // (3k,128,128); empty for the baseline
    double pi = 0;     // lesion prevalence of the query's cluster
};

template <typename T>
TrainResult train_cofcn(CoFcn<T>& model, const std::vector<CoFcnSample<T>>& samples,
                        const TrainConfig& cfg) {
    auto params = model.parameters();
    auto buffers = model.buffers();
    nn::Adam<T> opt(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    auto loss_of = [&](size_t i) {
        const auto& s = samples[i];
        auto out = model.forward(s.query, s.support);
        auto wbce = nn::weighted_bce_loss(out.seg_prob, s.mask,
                                          static_cast<T>(cfg.lesion_weight));
        auto pretext = nn::bce_with_logit_scalar(out.cond_logit_mean, s.pi);
        return nn::add(wbce, nn::scale(pretext, static_cast<T>(cfg.pretext_weight)));
    };
    return train_loop<T>(
        samples.size(), cfg, opt, params, buffers,
        [&](bool training) { model.training_mode = training; },
        [&](size_t i, T scale) {
            auto loss = loss_of(i);
            nn::backward(loss, scale);
            return static_cast<double>(loss->value[0]);
        },
        [&](size_t i) { return static_cast<double>(loss_of(i)->value[0]); });
}

template <typename T>
TrainResult train_unet(UNet<T>& model, const std::vector<CoFcnSample<T>>& samples,
                       const TrainConfig& cfg) {
    auto params = model.parameters();
    auto buffers = model.buffers();
    nn::Adam<T> opt(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    auto loss_of = [&](size_t i) {
        const auto& s = samples[i];
        auto prob = model.forward(s.query);
        return nn::weighted_bce_loss(prob, s.mask, static_cast<T>(cfg.lesion_weight));
    };
    return train_loop<T>(
        samples.size(), cfg, opt, params, buffers,
        [&](bool training) { model.training_mode = training; },
        [&](size_t i, T scale) {
            auto loss = loss_of(i);
            nn::backward(loss, scale);
            return static_cast<double>(loss->value[0]);
        },
        [&](size_t i) { return static_cast<double>(loss_of(i)->value[0]); });
}

} // namespace cofcn
