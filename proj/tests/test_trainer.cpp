#include <catch_amalgamated.hpp>

#include <random>

#include "cofcn/loss.hpp"
#include "cofcn/trainer.hpp"

using namespace cofcn;
using Catch::Matchers::WithinAbs;

namespace {

template <typename T>
Tensor<T> filled(std::vector<int> dims, T v) {
    Tensor<T> t(std::move(dims));
    t.fill(v);
    return t;
}

template <typename T>
Tensor<T> random_tensor(std::vector<int> dims, Rng& rng, T lo = T(0), T hi = T(1)) {
    Tensor<T> t(std::move(dims));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) v = static_cast<T>(u(rng));
    return t;
}

} // namespace

TEST_CASE("weighted_bce hand values") {
    auto pred = filled<double>({1, 1, 128, 128}, 0.5);
    auto target = filled<double>({1, 1, 128, 128}, 1.0);
    CHECK_THAT(weighted_bce(pred, target, 4.0), WithinAbs(4.0 * std::log(2.0), 1e-9));

    // perfect prediction: only the clamp residue remains
    auto zeros = filled<double>({1, 1, 16, 16}, 0.0);
    CHECK(weighted_bce(zeros, zeros, 1.0) <= 1.001e-7);
    auto ones = filled<double>({1, 1, 16, 16}, 1.0);
    CHECK(weighted_bce(ones, ones, 1.0) <= 1.001e-7);
    CHECK(weighted_bce(ones, ones, 4.0) <= 4.1e-7);

    CHECK_THROWS_AS(weighted_bce(pred, zeros, 4.0), std::invalid_argument);
}

TEST_CASE("weighted_bce reduces to unweighted at w_l=1") {
    Rng rng(3);
    auto pred = random_tensor<double>({1, 1, 8, 8}, rng, 0.01, 0.99);
    Tensor<double> target({1, 1, 8, 8});
    for (auto& v : target.data) v = rng() % 2 ? 1.0 : 0.0;
    double direct = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i)
        direct += -(target[i] * std::log(pred[i]) + (1 - target[i]) * std::log(1 - pred[i]));
    direct /= pred.numel();
    CHECK_THAT(weighted_bce(pred, target, 1.0), WithinAbs(direct, 1e-12));
}

TEST_CASE("pretext_loss hand values and symmetry") {
    auto zeros = filled<double>({4, 1, 128, 128}, 0.0);
    CHECK_THAT(pretext_loss(zeros, 0.5), WithinAbs(std::log(2.0), 1e-9));

    auto sat = filled<double>({2, 1, 16, 16}, 20.0);
    CHECK_THAT(pretext_loss(sat, 1.0), WithinAbs(0.0, 1e-6));

    Rng rng(5);
    auto cm = random_tensor<double>({4, 1, 8, 8}, rng, -2.0, 2.0);
    Tensor<double> shuffled = cm;
    // permute the k axis
    const std::int64_t plane = 64;
    const std::vector<int> perm{3, 1, 0, 2};
    for (int j = 0; j < 4; ++j)
        std::copy_n(cm.data.begin() + perm[j] * plane, plane,
                    shuffled.data.begin() + j * plane);
    CHECK_THAT(pretext_loss(cm, 0.3), WithinAbs(pretext_loss(shuffled, 0.3), 1e-12));

    CHECK_THROWS_AS(pretext_loss(cm, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(pretext_loss(cm, -0.1), std::invalid_argument);
}

TEST_CASE("total_loss composition and linearity in w") {
    auto pred = filled<double>({1, 1, 32, 32}, 0.5);
    auto target = filled<double>({1, 1, 32, 32}, 1.0);
    auto cm = filled<double>({2, 1, 32, 32}, 0.0);

    CHECK_THAT(total_loss(pred, target, cm, 0.5, 4.0, 0.0),
               WithinAbs(weighted_bce(pred, target, 4.0), 1e-15));
    // both-term hand case: 4 ln2 + 0.2 ln2
    CHECK_THAT(total_loss(pred, target, cm, 0.5, 4.0, 0.2), WithinAbs(4.2 * std::log(2.0), 1e-9));
    CHECK_THAT(total_loss(pred, target, cm, 0.5, 4.0, 0.2),
               WithinAbs(2.7726 + 0.2 * 0.6931, 2e-4));

    // d(total)/dw = pretext_loss
    Rng rng(6);
    auto rp = random_tensor<double>({1, 1, 8, 8}, rng, 0.05, 0.95);
    Tensor<double> rt({1, 1, 8, 8});
    for (auto& v : rt.data) v = rng() % 2 ? 1.0 : 0.0;
    auto rcm = random_tensor<double>({2, 1, 8, 8}, rng, -1.0, 1.0);
    double w = 0.7, h = 1e-6;
    double slope = (total_loss(rp, rt, rcm, 0.4, 4.0, w + h) -
                    total_loss(rp, rt, rcm, 0.4, 4.0, w - h)) / (2 * h);
    CHECK_THAT(slope, WithinAbs(pretext_loss(rcm, 0.4), 1e-6));
}

TEST_CASE("total_loss is non-negative") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        auto p = random_tensor<double>({1, 1, 8, 8}, rng, 0.0, 1.0);
        Tensor<double> t({1, 1, 8, 8});
        for (auto& v : t.data) v = rng() % 2 ? 1.0 : 0.0;
        auto cm = random_tensor<double>({2, 1, 8, 8}, rng, -3.0, 3.0);
        CHECK(total_loss(p, t, cm, (rng() % 100) / 100.0, 4.0, 0.2) >= 0.0);
    }
}

TEST_CASE("autograd losses match the plain evaluations") {
    Rng rng(8);
    auto p = random_tensor<double>({1, 1, 8, 8}, rng, 0.02, 0.98);
    Tensor<double> t({1, 1, 8, 8});
    for (auto& v : t.data) v = rng() % 2 ? 1.0 : 0.0;
    auto pv = nn::make_var(p);
    CHECK_THAT(nn::weighted_bce_loss(pv, t, 4.0)->value[0],
               WithinAbs(weighted_bce(p, t, 4.0), 1e-12));

    auto cm = random_tensor<double>({2, 1, 8, 8}, rng, -2.0, 2.0);
    auto cv = nn::make_var(cm);
    auto pretext = nn::bce_with_logit_scalar(nn::mean_all(cv), 0.3);
    CHECK_THAT(pretext->value[0], WithinAbs(pretext_loss(cm, 0.3), 1e-12));
}

TEST_CASE("loss-term gradients match central differences on a 4x4 probe") {
    Rng rng(9);
    // weighted BCE w.r.t. probabilities
    auto p = random_tensor<double>({1, 1, 4, 4}, rng, 0.1, 0.9);
    Tensor<double> t({1, 1, 4, 4});
    for (auto& v : t.data) v = rng() % 2 ? 1.0 : 0.0;
    {
        auto pv = nn::make_var(p, true);
        auto loss = nn::weighted_bce_loss(pv, t, 4.0);
        nn::backward(loss);
        const double h = 1e-7;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            auto pp = p, pm = p;
            pp[i] += h;
            pm[i] -= h;
            double fd = (weighted_bce(pp, t, 4.0) - weighted_bce(pm, t, 4.0)) / (2 * h);
            CHECK_THAT(pv->grad[i], WithinAbs(fd, 1e-3 * std::max(1.0, std::abs(fd))));
        }
    }
    // pretext w.r.t. cond-map entries
    auto cm = random_tensor<double>({2, 1, 4, 4}, rng, -1.5, 1.5);
    {
        auto cv = nn::make_var(cm, true);
        auto loss = nn::bce_with_logit_scalar(nn::mean_all(cv), 0.37);
        nn::backward(loss);
        const double h = 1e-6;
        for (std::int64_t i = 0; i < cm.numel(); ++i) {
            auto cp = cm, cmm = cm;
            cp[i] += h;
            cmm[i] -= h;
            double fd = (pretext_loss(cp, 0.37) - pretext_loss(cmm, 0.37)) / (2 * h);
            CHECK_THAT(cv->grad[i], WithinAbs(fd, 1e-3 * std::max(1e-6, std::abs(fd))));
        }
    }
}

TEST_CASE("total_loss gradient through the network matches finite differences") {
    Rng rng(10);
    CoFcn<double> model({2, 16}, rng); // same topology, downscaled input
    model.training_mode = true;
    auto query = random_tensor<double>({3, 16, 16}, rng);
    auto support = random_tensor<double>({6, 16, 16}, rng);
    Tensor<double> mask({1, 1, 16, 16});
    for (auto& v : mask.data) v = rng() % 2 ? 1.0 : 0.0;
    const double pi = 0.37, wl = 4.0, w = 0.2;

    auto loss_value = [&]() {
        auto out = model.forward(query, support);
        auto wbce = nn::weighted_bce_loss(out.seg_prob, mask, wl);
        auto pretext = nn::bce_with_logit_scalar(out.cond_logit_mean, pi);
        return nn::add(wbce, nn::scale(pretext, w));
    };

    auto params = model.parameters();
    for (auto& pr : params) pr.var->zero_grad();
    auto loss = loss_value();
    nn::backward(loss);

    Rng pick(11);
    int checked = 0;
    for (int trial = 0; trial < 60 && checked < 20; ++trial) {
        auto& pr = params[pick() % params.size()];
        if (pr.var->grad.empty()) continue;
        std::int64_t i = static_cast<std::int64_t>(pick() % pr.var->value.numel());
        double g = pr.var->grad[i];
        if (std::abs(g) < 1e-7) continue; // FD too noisy near zero
        const double h = std::max(1e-6, 1e-5 * std::abs(pr.var->value[i]));
        double saved = pr.var->value[i];
        pr.var->value[i] = saved + h;
        double f1 = loss_value()->value[0];
        pr.var->value[i] = saved - h;
        double f2 = loss_value()->value[0];
        pr.var->value[i] = saved;
        double fd = (f1 - f2) / (2 * h);
        CHECK_THAT(g, WithinAbs(fd, 1e-3 * std::max(std::abs(fd), std::abs(g))));
        ++checked;
    }
    CHECK(checked >= 15);
}

TEST_CASE("early stopper patience semantics") {
    EarlyStopper s;
    s.patience = 3;
    CHECK(s.observe(1, 1.0));
    CHECK_FALSE(s.should_stop());
    CHECK_FALSE(s.observe(2, 1.1));
    CHECK_FALSE(s.should_stop());
    CHECK_FALSE(s.observe(3, 1.1));
    CHECK_FALSE(s.should_stop());
    CHECK_FALSE(s.observe(4, 1.1));
    CHECK(s.should_stop()); // stops after epoch 4
    CHECK(s.best_epoch == 1);

    // improvement must beat the running best by at least 1e-6
    EarlyStopper s2;
    s2.patience = 1;
    CHECK(s2.observe(1, 1.0));
    CHECK_FALSE(s2.observe(2, 1.0 - 1e-9));
    CHECK(s2.should_stop());
}

namespace {

// train_loop harness with scripted losses; the single validation item makes
// one eval call per epoch, which is how epochs are counted here
TrainResult scripted_loop(const std::vector<double>& val_losses, TrainConfig cfg,
                          std::vector<double> train_losses = {}) {
    Tensor<float> w({4});
    auto param = nn::make_var(w, true);
    std::vector<nn::ParamRef<float>> params{{"w", param}};
    std::vector<nn::StateRef<float>> buffers;
    nn::Adam<float> opt(params, cfg.learning_rate, 0.9, 0.999);
    cfg.train_fraction = 0.75; // 4 items: 3 train, 1 val
    size_t evals = 0;
    return train_loop<float>(
        4, cfg, opt, params, buffers, [](bool) {},
        [&](size_t, float) {
            return train_losses.empty()
                       ? 1.0
                       : train_losses[std::min(evals, train_losses.size() - 1)];
        },
        [&](size_t) {
            double v = val_losses[std::min(evals, val_losses.size() - 1)];
            ++evals;
            return v;
        });
}

} // namespace

TEST_CASE("train_loop stops after patience epochs without improvement") {
    TrainConfig cfg;
    cfg.patience = 3;
    cfg.max_epochs = 10;
    cfg.train_fraction = 0.75; // wait: 4 items -> 3 train, 1 val
    cfg.batch_size = 2;
    cfg.seed = 1;
    auto res = scripted_loop({1.0, 1.1, 1.1, 1.1, 1.1, 1.1}, cfg);
    CHECK(res.epochs_run == 4);
    CHECK(res.stopped_early);
    CHECK(res.best_epoch == 1);
    CHECK_THAT(res.best_val_loss, WithinAbs(1.0, 1e-12));
}

TEST_CASE("train_loop optional loss target stops early") {
    TrainConfig cfg;
    cfg.patience = 50;
    cfg.max_epochs = 30;
    cfg.batch_size = 4;
    cfg.seed = 1;
    cfg.train_loss_target = 0.5;
    auto res = scripted_loop({1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4}, cfg,
                             {2.0, 1.0, 0.4, 0.3});
    CHECK(res.reached_target);
    CHECK(res.epochs_run == 3);
}

TEST_CASE("train_loop rejects empty splits") {
    TrainConfig cfg;
    cfg.seed = 1;
    Tensor<float> w({2});
    auto param = nn::make_var(w, true);
    std::vector<nn::ParamRef<float>> params{{"w", param}};
    std::vector<nn::StateRef<float>> buffers;
    nn::Adam<float> opt(params, 0.001, 0.9, 0.999);
    CHECK_THROWS_AS(train_loop<float>(
                        1, cfg, opt, params, buffers, [](bool) {},
                        [](size_t, float) { return 1.0; }, [](size_t) { return 1.0; }),
                    std::invalid_argument);
}

TEST_CASE("unet training is deterministic under a fixed seed") {
    auto run = [&]() {
        Rng rng(77);
        UNet<float> model(rng, 32);
        std::vector<CoFcnSample<float>> samples;
        Rng drng(5);
        for (int i = 0; i < 4; ++i) {
            CoFcnSample<float> s;
            s.query = random_tensor<float>({3, 32, 32}, drng);
            s.mask = Tensor<float>({1, 1, 32, 32});
            for (auto& v : s.mask.data) v = drng() % 2 ? 1.0f : 0.0f;
            samples.push_back(std::move(s));
        }
        TrainConfig cfg;
        cfg.max_epochs = 3;
        cfg.patience = 10;
        cfg.batch_size = 2;
        cfg.seed = 99;
        UNet<float> m2(rng, 32); // note: rng state differs; model comes from run-local rng
        (void)m2;
        auto res = train_unet(model, samples, cfg);
        return res.final_train_loss;
    };
    double a = run();
    double b = run();
    CHECK(a == b); // bitwise
}

TEST_CASE("cofcn training loss decreases on a downscaled overfit run") {
    Rng rng(55);
    CoFcn<float> model({2, 16}, rng);
    std::vector<CoFcnSample<float>> samples;
    Rng drng(6);
    for (int i = 0; i < 8; ++i) {
        CoFcnSample<float> s;
        s.query = random_tensor<float>({3, 16, 16}, drng);
        s.support = random_tensor<float>({6, 16, 16}, drng);
        s.mask = Tensor<float>({1, 1, 16, 16});
        float v = i % 2 ? 1.0f : 0.0f;
        s.mask.fill(v);
        s.pi = v;
        samples.push_back(std::move(s));
    }
    TrainConfig cfg;
    cfg.max_epochs = 6;
    cfg.patience = 20;
    cfg.batch_size = 4;
    cfg.seed = 3;
    auto result = train_cofcn(model, samples, cfg);
    REQUIRE(result.log.size() == 6);
    double early = (result.log[0].train_loss + result.log[1].train_loss) / 2;
    double late = (result.log[4].train_loss + result.log[5].train_loss) / 2;
    CHECK(late < early);
}

TEST_CASE("adam minimizes a quadratic") {
    Tensor<float> w({4});
    w.fill(2.0f);
    auto param = nn::make_var(w, true);
    std::vector<nn::ParamRef<float>> params{{"w", param}};
    nn::Adam<float> opt(params, 0.05, 0.9, 0.999);
    Tensor<float> target({4});
    target.fill(0.5f);
    for (int step = 0; step < 400; ++step) {
        opt.zero_grad();
        auto loss = nn::mse_loss(param, target);
        nn::backward(loss);
        opt.step();
    }
    for (int i = 0; i < 4; ++i) CHECK_THAT(param->value[i], WithinAbs(0.5f, 1e-2));
}
