// cofcn command-line entry point: validates configs and drives the pipeline
// stages (synth, prepare, train-ae, embed, fit-pca, cluster, prototypes,
// train-cofcn, train-unet, infer, evaluate, compare, render).

#include <CLI11.hpp>

#include <iostream>

#include "cofcn/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string workdir;
    std::string slides_dir;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "project config file (INI sections)");
    cmd->add_option("--workdir", opts.workdir, "override [project] workdir");
    cmd->add_option("--slides-dir", opts.slides_dir, "override [project] slides_dir");
    cmd->add_option("--seed", opts.seed, "override [project] seed");
}

cofcn::ProjectConfig resolve_config(const CommonOpts& opts) {
    cofcn::ProjectConfig cfg;
    if (!opts.config_path.empty()) cfg = cofcn::load_config(opts.config_path);
    if (!opts.workdir.empty()) cfg.workdir = opts.workdir;
    if (!opts.slides_dir.empty()) cfg.slides_dir = opts.slides_dir;
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    return cfg;
}

// exit 2 when the config is invalid
bool check_config(const cofcn::ProjectConfig& cfg) {
    auto violations = cofcn::validate_config(cfg);
    for (const auto& v : violations) std::cerr << "config violation: " << v << "\n";
    return violations.empty();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cofcn: conditional few-shot segmentation pipeline for slide screening"};
    app.require_subcommand(1);

    CommonOpts common;

    auto* validate_cmd = app.add_subcommand("validate", "check a project config");
    add_common(validate_cmd, common);

    auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic slide corpus");
    add_common(synth_cmd, common);

    auto* prepare_cmd =
        app.add_subcommand("prepare", "tile slides into balanced labeled patch manifests");
    add_common(prepare_cmd, common);
    std::string prep_slides, prep_out, prep_labeling = "train";
    double prep_drop = 0.0;
    std::int64_t prep_seed = 0;
    prepare_cmd->add_option("--slides", prep_slides,
                            "direct mode: slide directory with slides.tsv");
    prepare_cmd->add_option("--out", prep_out, "direct mode: output manifest path");
    prepare_cmd->add_option("--drop-fraction", prep_drop, "direct mode: non-lesion drop fraction");
    prepare_cmd->add_option("--labeling", prep_labeling, "direct mode: train|eval");
    prepare_cmd->add_option("--balance-seed", prep_seed, "direct mode: balancing seed");

    auto* train_ae_cmd = app.add_subcommand("train-ae", "train per-center autoencoders");
    add_common(train_ae_cmd, common);
    int only_center = -1;
    train_ae_cmd->add_option("--center", only_center, "restrict to one center");

    auto* embed_cmd = app.add_subcommand("embed", "embed support patches to 8-d vectors");
    add_common(embed_cmd, common);
    embed_cmd->add_option("--center", only_center, "restrict to one center");

    auto* fit_pca_cmd = app.add_subcommand("fit-pca", "fit per-center PCA and project to 3-d");
    add_common(fit_pca_cmd, common);
    fit_pca_cmd->add_option("--center", only_center, "restrict to one center");

    auto* cluster_cmd = app.add_subcommand("cluster", "fit per-center GMMs and estimate pi_l");
    add_common(cluster_cmd, common);
    int components = -1;
    cluster_cmd->add_option("--center", only_center, "restrict to one center");
    cluster_cmd->add_option("--components", components, "number of GMM components");

    auto* proto_cmd = app.add_subcommand("prototypes", "build k-means prototype pools");
    add_common(proto_cmd, common);
    int microcluster_dim = -1;
    proto_cmd->add_option("--center", only_center, "restrict to one center");
    proto_cmd->add_option("--microcluster-dim", microcluster_dim, "microcluster dimension");

    auto* select_cmd =
        app.add_subcommand("select", "show the support selection for one query patch");
    add_common(select_cmd, common);
    int sel_center = 0, sel_k = 2;
    std::string sel_query;
    select_cmd->add_option("--center", sel_center, "query patch center")->required();
    select_cmd->add_option("--k", sel_k, "shot count (1, 2, 4, 8)");
    select_cmd->add_option("--query", sel_query, "patch ref slide_id:grid_x:grid_y")->required();

    auto* train_cofcn_cmd = app.add_subcommand("train-cofcn", "train the conditional network");
    add_common(train_cofcn_cmd, common);
    int train_k = -1, train_patience = -1, train_epochs = -1;
    double train_wl = -1, train_w = -1, train_lr = -1;
    train_cofcn_cmd->add_option("--k", train_k, "shot count");
    train_cofcn_cmd->add_option("--wl", train_wl, "lesion class weight");
    train_cofcn_cmd->add_option("--w", train_w, "pretext loss weight");
    train_cofcn_cmd->add_option("--lr", train_lr, "learning rate");
    train_cofcn_cmd->add_option("--patience", train_patience, "early stop patience");
    train_cofcn_cmd->add_option("--max-epochs", train_epochs, "epoch cap");

    auto* train_unet_cmd = app.add_subcommand("train-unet", "train the baseline U-Net");
    add_common(train_unet_cmd, common);
    train_unet_cmd->add_option("--wl", train_wl, "lesion class weight");
    train_unet_cmd->add_option("--lr", train_lr, "learning rate");
    train_unet_cmd->add_option("--patience", train_patience, "early stop patience");
    train_unet_cmd->add_option("--max-epochs", train_epochs, "epoch cap");

    auto* infer_cmd = app.add_subcommand("infer", "predict the test slides");
    add_common(infer_cmd, common);
    std::string infer_model;
    infer_cmd->add_option("--model", infer_model, "explicit checkpoint path");
    infer_cmd->add_option("--k", train_k, "restrict to one shot count");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "per-slide ROC statistics");
    add_common(evaluate_cmd, common);

    auto* compare_cmd = app.add_subcommand("compare", "co-FCN vs U-Net paired report");
    add_common(compare_cmd, common);

    auto* render_cmd = app.add_subcommand("render", "render prediction heatmap overlays");
    add_common(render_cmd, common);
    double threshold = -1;
    render_cmd->add_option("--threshold", threshold, "transparency threshold");

    auto* run_cmd = app.add_subcommand("run", "run every stage in order");
    add_common(run_cmd, common);

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = resolve_config(common);
        // apply stage-specific overrides
        if (components > 0) cfg.gmm_components = components;
        if (microcluster_dim > 0) cfg.microcluster_dim = microcluster_dim;
        if (train_k > 0) cfg.k_list = {train_k};
        if (train_wl > 0) cfg.lesion_weight = train_wl;
        if (train_w > 0) cfg.pretext_weight = train_w;
        if (train_lr > 0) cfg.learning_rate = train_lr;
        if (train_patience > 0) cfg.patience = train_patience;
        if (train_epochs > 0) cfg.max_epochs = train_epochs;
        if (threshold >= 0) cfg.render_threshold = threshold;

        if (app.got_subcommand(validate_cmd)) {
            if (!check_config(cfg)) return 2;
            std::cout << "config ok (hash " << cfg.config_hash() << ")\n";
            return 0;
        }
        if (!check_config(cfg)) return 2;

        using cofcn::Stage;
        if (app.got_subcommand(synth_cmd)) {
            cofcn::stage_synth(cfg);
        } else if (app.got_subcommand(prepare_cmd)) {
            if (!prep_slides.empty() || !prep_out.empty()) {
                if (prep_slides.empty() || prep_out.empty())
                    throw std::runtime_error("direct prepare needs both --slides and --out");
                auto slides = cofcn::read_slide_index(cofcn::fs::path(prep_slides) /
                                                      "slides.tsv");
                cofcn::SlideImageCache cache(slides, prep_slides);
                cofcn::PatchManifest merged;
                auto rule = cofcn::labeling_rule_from(prep_labeling);
                merged.labeling_rule = rule;
                for (const auto& s : slides) {
                    const cofcn::Image* mask =
                        s.mask_path.empty() ? nullptr : &cache.mask(s.slide_id);
                    auto m = cofcn::build_slide_manifest(s, cache.image(s.slide_id), mask, rule,
                                                         cfg.blur_sigma, cfg.sat_threshold);
                    merged.records.insert(merged.records.end(), m.records.begin(),
                                          m.records.end());
                }
                auto balanced = cofcn::balance_manifest(
                    merged, prep_drop, static_cast<std::uint64_t>(prep_seed));
                cofcn::write_manifest(prep_out, balanced);
            } else {
                cofcn::stage_prepare(cfg);
            }
        } else if (app.got_subcommand(train_ae_cmd)) {
            cofcn::stage_train_ae(cfg, only_center);
        } else if (app.got_subcommand(embed_cmd)) {
            cofcn::stage_embed(cfg, only_center);
        } else if (app.got_subcommand(fit_pca_cmd)) {
            cofcn::stage_fit_pca(cfg, only_center);
        } else if (app.got_subcommand(cluster_cmd)) {
            cofcn::stage_cluster(cfg, only_center);
        } else if (app.got_subcommand(proto_cmd)) {
            cofcn::stage_prototypes(cfg, only_center);
        } else if (app.got_subcommand(select_cmd)) {
            if (!cofcn::valid_k_shots(sel_k)) throw std::runtime_error("k must be 1, 2, 4 or 8");
            cofcn::Paths paths(cfg);
            auto slides = cofcn::read_slide_index(paths.slide_index());
            cofcn::SlideImageCache cache(slides, paths.slides);
            auto stack = cofcn::load_center_stack(paths, sel_center);
            auto ref = cofcn::PatchRef::parse(sel_query);
            auto patch = cofcn::extract_patch<float>(cache.image(ref.slide_id),
                                                     ref.grid_x * cofcn::kPatchSize,
                                                     ref.grid_y * cofcn::kPatchSize,
                                                     cofcn::kPatchSize);
            auto emb = stack.autoencoder->embed(patch);
            auto p3 = stack.pca.project(std::vector<double>(emb.begin(), emb.end()));
            cofcn::Vec3 v(p3[0], p3[1], p3[2]);
            int g = cofcn::assign_cluster(v, stack.selector.model);
            auto sa = cofcn::select_support(ref, v, g, sel_k, stack.selector.pools,
                                            stack.selector.model);
            std::cout << "query " << ref.str() << " cluster " << g << " pi "
                      << stack.selector.model.pi_l[g] << "\ndigits";
            for (int d : sa.shot_classes) std::cout << " " << d;
            std::cout << "\nshots";
            for (const auto& s : sa.shots) std::cout << " " << s.str();
            std::cout << "\n";
            if (sa.fallback_count)
                std::cerr << "warning: " << sa.fallback_count
                          << " shots fell back to the opposite-class pool\n";
        } else if (app.got_subcommand(train_cofcn_cmd)) {
            cofcn::stage_train_cofcn(cfg);
        } else if (app.got_subcommand(train_unet_cmd)) {
            cofcn::stage_train_unet(cfg);
        } else if (app.got_subcommand(infer_cmd)) {
            if (!infer_model.empty())
                cofcn::infer_with_model(cfg, infer_model);
            else
                cofcn::stage_infer(cfg);
        } else if (app.got_subcommand(evaluate_cmd)) {
            cofcn::stage_evaluate(cfg);
        } else if (app.got_subcommand(compare_cmd)) {
            cofcn::stage_compare(cfg);
        } else if (app.got_subcommand(render_cmd)) {
            cofcn::stage_render(cfg);
        } else if (app.got_subcommand(run_cmd)) {
            cofcn::run_all(cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
