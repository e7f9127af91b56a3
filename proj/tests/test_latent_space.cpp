#include <catch_amalgamated.hpp>

#include <random>

#include "cofcn/pca.hpp"
#include "cofcn/synth.hpp"
#include "cofcn/trainer.hpp"

using namespace cofcn;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<Tensor<float>> synthetic_patches(int count, std::uint64_t seed) {
    SynthSpec spec;
    spec.lesion_count = 2;
    auto [rgb, mask] = generate_synthetic_slide(seed, 512, 512, spec);
    std::vector<Tensor<float>> patches;
    for (const auto& tile : grid_patches(rgb.width, rgb.height)) {
        if (static_cast<int>(patches.size()) >= count) break;
        auto p = extract_patch<float>(rgb, tile.origin_x, tile.origin_y, kPatchSize);
        if (tissue_filter(p)) patches.push_back(std::move(p));
    }
    REQUIRE(static_cast<int>(patches.size()) == count);
    return patches;
}

} // namespace

TEST_CASE("autoencoder forward shape contract") {
    Rng rng(1);
    ConvAutoencoder<float> model(rng);
    model.training_mode = false;
    Tensor<float> patch({3, 128, 128});
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : patch.data) v = u(rng);

    auto [recon, latent] = model.forward(patch);
    CHECK(recon->value.dims == std::vector<int>{1, 3, 128, 128});
    CHECK(latent->value.dims == std::vector<int>{1, 8, 8, 8}); // 8 latent channels
    for (auto v : recon->value.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    auto [recon2, latent2] = model.forward(patch);
    CHECK(recon->value.data == recon2->value.data); // inference determinism

    Tensor<float> bad({3, 64, 64});
    CHECK_THROWS_AS(model.forward(bad), std::invalid_argument);
}

TEST_CASE("embed is the spatial mean of the latent channels") {
    Rng rng(2);
    ConvAutoencoder<float> model(rng);
    model.training_mode = false;
    Tensor<float> patch({3, 128, 128});
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : patch.data) v = u(rng);

    auto emb = model.embed(patch);
    auto latent = model.encode(patch);
    for (int c = 0; c < 8; ++c) {
        double s = 0;
        for (int i = 0; i < 64; ++i) s += latent->value[c * 64 + i];
        CHECK_THAT(emb[c], WithinAbs(s / 64.0, 1e-9));
    }
    CHECK(emb.size() == 8);
}

TEST_CASE("spatial mean is invariant to shuffling the latent map") {
    Rng rng(3);
    Tensor<double> latent({1, 8, 8, 8});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : latent.data) v = u(rng);
    std::vector<int> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int c = 0; c < 8; ++c) {
        double a = 0, b = 0;
        for (int i = 0; i < 64; ++i) {
            a += latent.data[c * 64 + i];
            b += latent.data[c * 64 + perm[i]];
        }
        CHECK_THAT(a / 64, WithinAbs(b / 64, 1e-12));
    }
}

TEST_CASE("autoencoder overfits a 16-patch corpus") {
    auto patches = synthetic_patches(16, 21);
    AutoencoderConfig cfg;
    cfg.max_epochs = 500;
    cfg.early_stop_patience = 500; // disabled for the overfit run
    cfg.seed = 5;
    cfg.train_loss_target = 0.008;
    Rng rng(cfg.seed);
    ConvAutoencoder<float> model(rng);
    auto result = train_autoencoder(model, patches, cfg);
    CHECK(result.final_train_loss < 0.01);
    CHECK(result.epochs_run <= 500);
}

TEST_CASE("autoencoder early stopping halts before the epoch cap") {
    auto patches = synthetic_patches(8, 22);
    AutoencoderConfig cfg;
    cfg.max_epochs = 400;
    cfg.early_stop_patience = 2;
    cfg.seed = 6;
    Rng rng(cfg.seed);
    ConvAutoencoder<float> model(rng);
    auto result = train_autoencoder(model, patches, cfg);
    CHECK(result.stopped_early);
    CHECK(result.epochs_run < 400);
}

TEST_CASE("autoencoder training is reproducible under a fixed seed") {
    auto patches = synthetic_patches(6, 23);
    auto run = [&]() {
        AutoencoderConfig cfg;
        cfg.max_epochs = 4;
        cfg.early_stop_patience = 50;
        cfg.seed = 7;
        Rng rng(cfg.seed);
        ConvAutoencoder<float> model(rng);
        return train_autoencoder(model, patches, cfg);
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].train_loss == b.log[i].train_loss);
        CHECK(a.log[i].val_loss == b.log[i].val_loss);
    }
}

TEST_CASE("autoencoder rejects empty and single-item corpora") {
    AutoencoderConfig cfg;
    Rng rng(1);
    ConvAutoencoder<float> model(rng);
    std::vector<Tensor<float>> none;
    CHECK_THROWS_AS(train_autoencoder(model, none, cfg), std::invalid_argument);
    std::vector<Tensor<float>> one(1, Tensor<float>({3, 128, 128}));
    CHECK_THROWS_AS(train_autoencoder(model, one, cfg), std::invalid_argument);
}

TEST_CASE("autoencoder checkpoints are center-tagged") {
    auto dir = fs::temp_directory_path() / "cofcn_ae_test";
    fs::create_directories(dir);
    Rng rng(9);
    ConvAutoencoder<float> model(rng);
    model.save(dir / "ae.ckpt", 2);
    Rng rng2(10);
    ConvAutoencoder<float> other(rng2);
    CHECK(other.load(dir / "ae.ckpt", 2) == 2);
    CHECK_THROWS_WITH(other.load(dir / "ae.ckpt", 3),
                      Catch::Matchers::ContainsSubstring("center"));
    fs::remove_all(dir);
}

TEST_CASE("pca projects the mean to the origin and centers the data") {
    Rng rng(30);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> vecs;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> v(8);
        for (auto& x : v) x = d(rng) + 2.0;
        vecs.push_back(v);
    }
    auto model = fit_pca(vecs, 3);
    auto origin = model.project(model.mean);
    for (double x : origin) CHECK_THAT(x, WithinAbs(0.0, 1e-12));

    std::array<double, 3> mean_proj{};
    for (const auto& v : vecs) {
        auto p = model.project(v);
        for (int i = 0; i < 3; ++i) mean_proj[i] += p[i];
    }
    for (int i = 0; i < 3; ++i) CHECK_THAT(mean_proj[i] / vecs.size(), WithinAbs(0.0, 1e-8));
}

TEST_CASE("pca recovers an axis-aligned 3-d subspace exactly") {
    Rng rng(31);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> vecs;
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v(8, 0.25); // constant in 5 dims
        v[1] = 3.0 * d(rng);
        v[4] = 1.5 * d(rng);
        v[6] = 0.5 * d(rng);
        vecs.push_back(v);
    }
    auto model = fit_pca(vecs, 3);
    for (const auto& v : vecs) {
        auto rec = model.reconstruct(model.project(v));
        double err = 0;
        for (int i = 0; i < 8; ++i) err += (rec[i] - v[i]) * (rec[i] - v[i]);
        CHECK(std::sqrt(err) <= 1e-8);
    }
    CHECK(model.explained_variance[0] >= model.explained_variance[1]);
    CHECK(model.explained_variance[1] >= model.explained_variance[2]);
}

TEST_CASE("pca component rows are orthonormal") {
    Rng rng(32);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> vecs;
    for (int i = 0; i < 30; ++i) {
        std::vector<double> v(8);
        for (auto& x : v) x = d(rng);
        vecs.push_back(v);
    }
    auto model = fit_pca(vecs, 3);
    for (int r = 0; r < 3; ++r)
        for (int q = 0; q < 3; ++q) {
            double dot = 0;
            for (int i = 0; i < 8; ++i) dot += model.components[r][i] * model.components[q][i];
            CHECK_THAT(dot, WithinAbs(r == q ? 1.0 : 0.0, 1e-6));
        }
}

TEST_CASE("pca names the deficient rank") {
    std::vector<std::vector<double>> vecs;
    Rng rng(33);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        std::vector<double> v(8, 1.0); // varies in only 2 dims
        v[0] = d(rng);
        v[3] = d(rng);
        vecs.push_back(v);
    }
    CHECK_THROWS_WITH(fit_pca(vecs, 3), Catch::Matchers::ContainsSubstring("rank 2"));
    CHECK_THROWS_AS(fit_pca({{1.0, 2.0}}, 3), std::invalid_argument);
}

TEST_CASE("pca model json round trip") {
    Rng rng(34);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> vecs;
    for (int i = 0; i < 25; ++i) {
        std::vector<double> v(8);
        for (auto& x : v) x = d(rng);
        vecs.push_back(v);
    }
    auto model = fit_pca(vecs, 3);
    auto path = fs::temp_directory_path() / "cofcn_pca_test.json";
    save_pca(path, model);
    auto back = load_pca(path);
    fs::remove(path);
    for (int i = 0; i < 8; ++i) CHECK(back.mean[i] == model.mean[i]);
    for (int r = 0; r < 3; ++r) {
        CHECK(back.explained_variance[r] == model.explained_variance[r]);
        for (int i = 0; i < 8; ++i) CHECK(back.components[r][i] == model.components[r][i]);
    }
}
