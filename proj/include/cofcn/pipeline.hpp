#pragma once

#include <iostream>

#include "cofcn/config.hpp"
#include "cofcn/infer.hpp"
#include "cofcn/synth.hpp"
#include "cofcn/trainer.hpp"

namespace cofcn {

enum class Stage {
    synth,
    prepare,
    train_ae,
    embed,
    fit_pca,
    cluster,
    prototypes,
    train_cofcn,
    train_unet,
    infer,
    evaluate,
    compare,
    render
};

inline const std::vector<std::pair<Stage, const char*>>& stage_names() {
    static const std::vector<std::pair<Stage, const char*>> names = {
        {Stage::synth, "synth"},           {Stage::prepare, "prepare"},
        {Stage::train_ae, "train-ae"},     {Stage::embed, "embed"},
        {Stage::fit_pca, "fit-pca"},       {Stage::cluster, "cluster"},
        {Stage::prototypes, "prototypes"}, {Stage::train_cofcn, "train-cofcn"},
        {Stage::train_unet, "train-unet"}, {Stage::infer, "infer"},
        {Stage::evaluate, "evaluate"},     {Stage::compare, "compare"},
        {Stage::render, "render"}};
    return names;
}

inline std::string to_string(Stage s) {
    for (const auto& [st, name] : stage_names())
        if (st == s) return name;
    return "?";
}

inline Stage stage_from(const std::string& s) {
    for (const auto& [st, name] : stage_names())
        if (s == name) return st;
    throw std::invalid_argument("unknown stage '" + s + "'");
}

// --- artifact layout -----------------------------------------------------------

struct Paths {
    fs::path work;
    fs::path slides;

    explicit Paths(const ProjectConfig& cfg) : work(cfg.workdir), slides(cfg.slides_path()) {}

    fs::path slide_index() const { return slides / "slides.tsv"; }
    fs::path manifest_support(int c) const {
        return work / "manifests" / ("support_c" + std::to_string(c) + ".tsv");
    }
    fs::path manifest_query(int c) const {
        return work / "manifests" / ("query_c" + std::to_string(c) + ".tsv");
    }
    fs::path manifest_eval(const std::string& slide_id) const {
        return work / "manifests" / ("eval_" + slide_id + ".tsv");
    }
    fs::path ae_ckpt(int c) const { return work / "ae" / ("ae_c" + std::to_string(c) + ".ckpt"); }
    fs::path ae_log(int c) const {
        return work / "ae" / ("ae_c" + std::to_string(c) + "_log.tsv");
    }
    fs::path embeddings(int c) const {
        return work / "embed" / ("embed_c" + std::to_string(c) + ".tsv");
    }
    fs::path pca_model(int c) const {
        return work / "pca" / ("pca_c" + std::to_string(c) + ".json");
    }
    fs::path projections(int c) const {
        return work / "pca" / ("proj_c" + std::to_string(c) + ".tsv");
    }
    fs::path gmm_model(int c) const {
        return work / "cluster" / ("gmm_c" + std::to_string(c) + ".json");
    }
    fs::path selector(int c) const {
        return work / "selector" / ("selector_c" + std::to_string(c) + ".json");
    }
    std::string cofcn_tag(int k) const { return "cofcn_k" + std::to_string(k); }
    fs::path model_ckpt(const std::string& tag) const {
        return work / "models" / (tag + ".ckpt");
    }
    fs::path model_log(const std::string& tag) const {
        return work / "models" / (tag + "_log.tsv");
    }
    fs::path prediction(const std::string& tag, const std::string& slide_id) const {
        return work / "predictions" / tag / (slide_id + ".tsv");
    }
    fs::path heatmap(const std::string& tag, const std::string& slide_id) const {
        return work / "predictions" / tag / (slide_id + ".heat");
    }
    fs::path eval_table(const std::string& tag) const {
        return work / "eval" / ("roc_" + tag + ".tsv");
    }
    fs::path eval_text(const std::string& tag) const {
        return work / "eval" / ("roc_" + tag + ".txt");
    }
    fs::path report_tsv() const { return work / "report" / "compare.tsv"; }
    fs::path report_text() const { return work / "report" / "compare.txt"; }
    fs::path overlay(const std::string& tag, const std::string& slide_id) const {
        return work / "render" / tag / (slide_id + "_overlay.pam");
    }
    fs::path composite(const std::string& tag, const std::string& slide_id) const {
        return work / "render" / tag / (slide_id + "_composite.ppm");
    }
    fs::path meta(const std::string& stage) const { return work / "meta" / (stage + ".json"); }
};

// Missing-upstream diagnostics name the stage to run first.
inline void require_artifact(const fs::path& path, const std::string& producing_stage) {
    if (!fs::exists(path))
        throw std::runtime_error("missing artifact " + path.string() + ": run " +
                                 producing_stage + " first");
}

inline void write_stage_meta(const Paths& paths, const ProjectConfig& cfg,
                             const std::string& stage, const std::vector<fs::path>& inputs,
                             const std::vector<fs::path>& outputs) {
    nlohmann::json j;
    j["version"] = 1;
    j["stage"] = stage;
    j["config_hash"] = cfg.config_hash();
    std::vector<std::string> in_rel, out_rel;
    for (const auto& p : inputs) in_rel.push_back(fs::path(p).lexically_relative(paths.work).string());
    for (const auto& p : outputs)
        out_rel.push_back(fs::path(p).lexically_relative(paths.work).string());
    j["inputs"] = in_rel;
    j["outputs"] = out_rel;
    write_text_file(paths.meta(stage), j.dump(2) + "\n");
}

inline std::vector<int> all_centers(const ProjectConfig& cfg) {
    std::set<int> s(cfg.train_centers.begin(), cfg.train_centers.end());
    s.insert(cfg.test_centers.begin(), cfg.test_centers.end());
    return {s.begin(), s.end()};
}

inline bool is_test_center(const ProjectConfig& cfg, int c) {
    return std::find(cfg.test_centers.begin(), cfg.test_centers.end(), c) !=
           cfg.test_centers.end();
}

// --- synth ----------------------------------------------------------------------

inline SynthSpec synth_spec_for_center(const ProjectConfig& cfg, int center) {
    SynthSpec spec;
    spec.lesion_count = cfg.lesion_count;
    spec.radius_min = cfg.radius_min;
    spec.radius_max = cfg.radius_max;
    spec.noise_amp = cfg.noise_amp;
    // mild per-center stain drift plus a stronger scanner shift for test centers
    const double drift = 0.012 * center;
    spec.tissue_base = {0.90 - drift, 0.72 + 0.6 * drift, 0.84 + drift};
    spec.lesion_base = {0.50 - 0.5 * drift, 0.34 + 0.5 * drift, 0.64 + 0.5 * drift};
    if (is_test_center(cfg, center)) {
        const double s = cfg.color_shift_test;
        spec.tissue_base = {spec.tissue_base[0] - s, spec.tissue_base[1] - 0.6 * s,
                            spec.tissue_base[2] + s};
        spec.lesion_base = {spec.lesion_base[0] - 0.8 * s, spec.lesion_base[1] - 0.4 * s,
                            spec.lesion_base[2] + 0.8 * s};
    }
    return spec;
}

inline void stage_synth(const ProjectConfig& cfg) {
    Paths paths(cfg);
    const auto stage_seed = cfg.stage_seed("synth");
    std::vector<SlideRef> slides;
    std::vector<fs::path> outputs;
    int patient = 100;
    for (int c : all_centers(cfg)) {
        const bool test = is_test_center(cfg, c);
        struct Plan {
            SetRole role;
            int count;
            const char* tag;
        };
        std::vector<Plan> plan = {{SetRole::support, cfg.support_slides, "sup"},
                                  {test ? SetRole::test : SetRole::query, cfg.query_slides,
                                   test ? "tst" : "qry"}};
        for (const auto& p : plan) {
            for (int i = 0; i < p.count; ++i) {
                SlideRef ref;
                ref.slide_id = "c" + std::to_string(c) + "_" + p.tag + std::to_string(i);
                ref.center_id = c;
                ref.patient_id = "patient_" + std::to_string(patient++);
                ref.node_id = "node_" + std::to_string(i);
                ref.set_role = p.role;
                auto spec = synth_spec_for_center(cfg, c);
                // slight per-slide variation so slides are not clones
                spec.radius_max = std::max(spec.radius_min, spec.radius_max - 2.0 * i);
                ref.lesion_class = classify_synthetic(spec);
                ref.pn_stage = pn_stage_for(ref.lesion_class);
                auto [rgb, mask] = generate_synthetic_slide(
                    derive_seed(stage_seed, ref.slide_id), cfg.slide_width, cfg.slide_height,
                    spec);
                ref.image_path = ref.slide_id + ".ppm";
                ref.mask_path = ref.slide_id + "_mask.pgm";
                write_image(paths.slides / ref.image_path, rgb);
                write_image(paths.slides / ref.mask_path, mask);
                slides.push_back(ref);
            }
        }
    }
    write_slide_index(paths.slide_index(), slides);
    write_stage_meta(paths, cfg, "synth", {}, {paths.slide_index()});
}

// --- prepare ---------------------------------------------------------------------

inline void stage_prepare(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    const auto seed = cfg.stage_seed("prepare");
    std::vector<fs::path> outputs;

    auto merge_for = [&](int center, SetRole role, LabelingRule rule) {
        PatchManifest merged;
        merged.labeling_rule = rule;
        for (const auto& s : slides) {
            if (s.center_id != center || s.set_role != role) continue;
            const Image* mask = s.mask_path.empty() ? nullptr : &cache.mask(s.slide_id);
            auto m = build_slide_manifest(s, cache.image(s.slide_id), mask, rule, cfg.blur_sigma,
                                          cfg.sat_threshold);
            merged.records.insert(merged.records.end(), m.records.begin(), m.records.end());
        }
        return merged;
    };

    for (int c : all_centers(cfg)) {
        auto support = merge_for(c, SetRole::support, LabelingRule::train_majority);
        auto balanced = balance_manifest(support, cfg.drop_support,
                                         derive_seed(seed, "support:" + std::to_string(c)));
        write_manifest(paths.manifest_support(c), balanced);
        outputs.push_back(paths.manifest_support(c));
        if (!is_test_center(cfg, c)) {
            auto query = merge_for(c, SetRole::query, LabelingRule::train_majority);
            auto qbal = balance_manifest(query, cfg.drop_query,
                                         derive_seed(seed, "query:" + std::to_string(c)));
            write_manifest(paths.manifest_query(c), qbal);
            outputs.push_back(paths.manifest_query(c));
        }
    }
    for (const auto& s : slides) {
        if (s.set_role != SetRole::test) continue;
        const Image* mask = s.mask_path.empty() ? nullptr : &cache.mask(s.slide_id);
        auto m = build_slide_manifest(s, cache.image(s.slide_id), mask,
                                      LabelingRule::eval_any_pixel, cfg.blur_sigma,
                                      cfg.sat_threshold);
        write_manifest(paths.manifest_eval(s.slide_id), m);
        outputs.push_back(paths.manifest_eval(s.slide_id));
    }
    write_stage_meta(paths, cfg, "prepare", {paths.slide_index()}, outputs);
}

// --- latent space stages -----------------------------------------------------------

inline std::vector<Tensor<float>> load_patch_tensors(const PatchManifest& m,
                                                     SlideImageCache& cache) {
    std::vector<Tensor<float>> out;
    for (const auto& rec : m.records)
        out.push_back(
            extract_patch<float>(cache.image(rec.slide_id), rec.origin_x, rec.origin_y,
                                 rec.size_px));
    return out;
}

inline void stage_train_ae(const ProjectConfig& cfg, int only_center = -1) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    std::vector<fs::path> inputs, outputs;
    for (int c : all_centers(cfg)) {
        if (only_center >= 0 && c != only_center) continue;
        require_artifact(paths.manifest_support(c), "prepare");
        auto manifest = read_manifest(paths.manifest_support(c));
        auto patches = load_patch_tensors(manifest, cache);
        AutoencoderConfig acfg;
        acfg.learning_rate = cfg.ae_learning_rate;
        acfg.early_stop_patience = cfg.ae_patience;
        acfg.train_fraction = cfg.ae_train_fraction;
        acfg.max_epochs = cfg.ae_max_epochs;
        acfg.train_loss_target = cfg.ae_loss_target;
        acfg.seed = derive_seed(cfg.stage_seed("train-ae"), std::to_string(c));
        Rng rng(acfg.seed);
        ConvAutoencoder<float> model(rng);
        auto result = train_autoencoder(model, patches, acfg);
        model.save(paths.ae_ckpt(c), c);
        write_metrics_log(paths.ae_log(c), result.log);
        std::cerr << "[train-ae] center " << c << ": " << result.epochs_run
                  << " epochs, best val " << result.best_val_loss << "\n";
        inputs.push_back(paths.manifest_support(c));
        outputs.push_back(paths.ae_ckpt(c));
    }
    write_stage_meta(paths, cfg, "train-ae", inputs, outputs);
}

inline std::shared_ptr<ConvAutoencoder<float>> load_autoencoder(const Paths& paths, int center) {
    Rng rng(0);
    auto model = std::make_shared<ConvAutoencoder<float>>(rng);
    model->load(paths.ae_ckpt(center), center);
    model->training_mode = false;
    return model;
}

inline void stage_embed(const ProjectConfig& cfg, int only_center = -1) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    std::vector<fs::path> inputs, outputs;
    for (int c : all_centers(cfg)) {
        if (only_center >= 0 && c != only_center) continue;
        require_artifact(paths.manifest_support(c), "prepare");
        require_artifact(paths.ae_ckpt(c), "train-ae");
        auto manifest = read_manifest(paths.manifest_support(c));
        auto ae = load_autoencoder(paths, c);
        std::string out;
        for (const auto& rec : manifest.records) {
            auto patch = extract_patch<float>(cache.image(rec.slide_id), rec.origin_x,
                                              rec.origin_y, rec.size_px);
            auto emb = ae->embed(patch);
            out += rec.slide_id + '\t' + std::to_string(rec.grid_x) + '\t' +
                   std::to_string(rec.grid_y);
            for (double v : emb) out += '\t' + format_g17(v);
            out += '\n';
        }
        write_text_file(paths.embeddings(c), out);
        inputs.push_back(paths.ae_ckpt(c));
        outputs.push_back(paths.embeddings(c));
    }
    write_stage_meta(paths, cfg, "embed", inputs, outputs);
}

struct EmbeddingRow {
    PatchRef ref;
    std::vector<double> values; // 8-d, plus 3-d projection when present
};

inline std::vector<EmbeddingRow> read_embeddings(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embeddings " + path.string());
    std::vector<EmbeddingRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split(line, '\t');
        if (f.size() < 11) throw std::runtime_error("bad embedding line in " + path.string());
        EmbeddingRow r;
        r.ref = PatchRef{f[0], std::stoi(f[1]), std::stoi(f[2])};
        for (size_t i = 3; i < f.size(); ++i) r.values.push_back(std::stod(f[i]));
        rows.push_back(r);
    }
    return rows;
}

inline void stage_fit_pca(const ProjectConfig& cfg, int only_center = -1) {
    Paths paths(cfg);
    std::vector<fs::path> inputs, outputs;
    for (int c : all_centers(cfg)) {
        if (only_center >= 0 && c != only_center) continue;
        require_artifact(paths.embeddings(c), "embed");
        auto rows = read_embeddings(paths.embeddings(c));
        std::vector<std::vector<double>> vecs;
        for (const auto& r : rows)
            vecs.emplace_back(r.values.begin(), r.values.begin() + 8);
        auto model = fit_pca(vecs, 3);
        save_pca(paths.pca_model(c), model);
        std::string out;
        for (const auto& r : rows) {
            auto p = model.project({r.values.begin(), r.values.begin() + 8});
            out += r.ref.slide_id + '\t' + std::to_string(r.ref.grid_x) + '\t' +
                   std::to_string(r.ref.grid_y);
            for (int i = 0; i < 8; ++i) out += '\t' + format_g17(r.values[i]);
            for (int i = 0; i < 3; ++i) out += '\t' + format_g17(p[i]);
            out += '\n';
        }
        write_text_file(paths.projections(c), out);
        inputs.push_back(paths.embeddings(c));
        outputs.push_back(paths.pca_model(c));
        outputs.push_back(paths.projections(c));
    }
    write_stage_meta(paths, cfg, "fit-pca", inputs, outputs);
}

// --- clustering / prototypes --------------------------------------------------------

inline std::map<PatchRef, PatchLabel> manifest_labels(const PatchManifest& m) {
    std::map<PatchRef, PatchLabel> labels;
    for (const auto& rec : m.records) labels[rec.ref()] = rec.label;
    return labels;
}

inline void stage_cluster(const ProjectConfig& cfg, int only_center = -1) {
    Paths paths(cfg);
    std::vector<fs::path> inputs, outputs;
    for (int c : all_centers(cfg)) {
        if (only_center >= 0 && c != only_center) continue;
        require_artifact(paths.embeddings(c), "embed");
        require_artifact(paths.projections(c), "fit-pca");
        require_artifact(paths.manifest_support(c), "prepare");
        auto rows = read_embeddings(paths.projections(c));
        auto labels = manifest_labels(read_manifest(paths.manifest_support(c)));
        std::vector<Vec3> vecs;
        for (const auto& r : rows) vecs.push_back(Vec3(r.values[8], r.values[9], r.values[10]));
        auto fit = fit_gmm(vecs, cfg.gmm_components,
                           derive_seed(cfg.stage_seed("cluster"), std::to_string(c)));
        fit.model.center_id = c;
        // class-wise assignment ratios for the prevalence estimate
        std::vector<double> count_pos(cfg.gmm_components, 0), count_neg(cfg.gmm_components, 0);
        double total_pos = 0, total_neg = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            int g = assign_cluster(vecs[i], fit.model);
            auto it = labels.find(rows[i].ref);
            if (it == labels.end())
                throw std::runtime_error("embedding for unknown patch " + rows[i].ref.str());
            if (it->second == PatchLabel::lesion) {
                count_pos[g] += 1;
                total_pos += 1;
            } else {
                count_neg[g] += 1;
                total_neg += 1;
            }
        }
        std::vector<double> r_pos(cfg.gmm_components, 0), r_neg(cfg.gmm_components, 0);
        for (int g = 0; g < cfg.gmm_components; ++g) {
            r_pos[g] = total_pos > 0 ? count_pos[g] / total_pos : 0.0;
            r_neg[g] = total_neg > 0 ? count_neg[g] / total_neg : 0.0;
        }
        fit.model.pi_l = estimate_pi(r_pos, r_neg);
        write_text_file(paths.gmm_model(c), gmm_to_json(fit.model).dump(2) + "\n");
        std::cerr << "[cluster] center " << c << ": " << fit.iterations << " EM iterations, "
                  << (fit.converged ? "converged" : "max-iter") << "\n";
        inputs.push_back(paths.projections(c));
        outputs.push_back(paths.gmm_model(c));
    }
    write_stage_meta(paths, cfg, "cluster", inputs, outputs);
}

inline void stage_prototypes(const ProjectConfig& cfg, int only_center = -1) {
    Paths paths(cfg);
    std::vector<fs::path> inputs, outputs;
    for (int c : all_centers(cfg)) {
        if (only_center >= 0 && c != only_center) continue;
        require_artifact(paths.gmm_model(c), "cluster");
        require_artifact(paths.projections(c), "fit-pca");
        require_artifact(paths.manifest_support(c), "prepare");
        auto model = gmm_from_json(nlohmann::json::parse(read_text_file(paths.gmm_model(c))));
        auto rows = read_embeddings(paths.projections(c));
        auto labels = manifest_labels(read_manifest(paths.manifest_support(c)));
        std::vector<SupportPatch> patches;
        for (const auto& r : rows) {
            SupportPatch p;
            p.ref = r.ref;
            p.pca = Vec3(r.values[8], r.values[9], r.values[10]);
            p.label = labels.at(r.ref);
            p.cluster_id = assign_cluster(p.pca, model);
            patches.push_back(p);
        }
        SelectorArtifact art;
        art.model = model;
        art.microcluster_dim = cfg.microcluster_dim;
        art.pools = build_prototype_pools(
            patches, model.n_components, c, cfg.microcluster_dim,
            derive_seed(cfg.stage_seed("prototypes"), std::to_string(c)));
        save_selector(paths.selector(c), art);
        int empty = 0;
        for (const auto& p : art.pools) empty += p.prototypes.empty() ? 1 : 0;
        std::cerr << "[prototypes] center " << c << ": " << art.pools.size() << " pools, "
                  << empty << " empty\n";
        inputs.push_back(paths.gmm_model(c));
        outputs.push_back(paths.selector(c));
    }
    write_stage_meta(paths, cfg, "prototypes", inputs, outputs);
}

// --- training ------------------------------------------------------------------------

inline CenterStack<float> load_center_stack(const Paths& paths, int center) {
    CenterStack<float> stack;
    require_artifact(paths.ae_ckpt(center), "train-ae");
    require_artifact(paths.pca_model(center), "fit-pca");
    require_artifact(paths.selector(center), "prototypes");
    stack.autoencoder = load_autoencoder(paths, center);
    stack.pca = load_pca(paths.pca_model(center));
    stack.selector = load_selector(paths.selector(center));
    return stack;
}

inline Tensor<float> mask_target(const Image& mask, const PatchRecord& rec) {
    auto mp = extract_mask_patch(mask, rec.origin_x, rec.origin_y, rec.size_px);
    Tensor<float> out({1, 1, kPatchSize, kPatchSize});
    out.data = mp.data;
    return out;
}

// Builds the (query, support, pi) training samples for the conditional model
// from the train-center query manifests.
inline std::vector<CoFcnSample<float>> build_cofcn_samples(const ProjectConfig& cfg,
                                                           const Paths& paths, int k,
                                                           SlideImageCache& cache,
                                                           int* fallback_count = nullptr) {
    std::vector<CoFcnSample<float>> samples;
    for (int c : cfg.train_centers) {
        require_artifact(paths.manifest_query(c), "prepare");
        auto stack = load_center_stack(paths, c);
        auto manifest = read_manifest(paths.manifest_query(c));
        for (const auto& rec : manifest.records) {
            CoFcnSample<float> s;
            s.ref = rec.ref();
            s.query = extract_patch<float>(cache.image(rec.slide_id), rec.origin_x, rec.origin_y,
                                           rec.size_px);
            s.mask = mask_target(cache.mask(rec.slide_id), rec);
            auto emb = stack.autoencoder->embed(s.query);
            auto p3 = stack.pca.project(std::vector<double>(emb.begin(), emb.end()));
            Vec3 v(p3[0], p3[1], p3[2]);
            int g = assign_cluster(v, stack.selector.model);
            auto assignment =
                select_support(s.ref, v, g, k, stack.selector.pools, stack.selector.model);
            if (fallback_count) *fallback_count += assignment.fallback_count;
            s.support = stack_support<float>(assignment.shots, cache);
            s.pi = stack.selector.model.pi_l[g];
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

inline void stage_train_cofcn(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    std::vector<fs::path> outputs;
    for (int k : cfg.k_list) {
        int fallbacks = 0;
        auto samples = build_cofcn_samples(cfg, paths, k, cache, &fallbacks);
        if (fallbacks)
            std::cerr << "[train-cofcn] warning: " << fallbacks
                      << " support shots fell back to the opposite-class pool\n";
        TrainConfig tcfg;
        tcfg.learning_rate = cfg.learning_rate;
        tcfg.lesion_weight = cfg.lesion_weight;
        tcfg.pretext_weight = cfg.pretext_weight;
        tcfg.k_shots = k;
        tcfg.patience = cfg.patience;
        tcfg.train_fraction = cfg.train_fraction;
        tcfg.max_epochs = cfg.max_epochs;
        tcfg.batch_size = cfg.batch_size;
        tcfg.train_loss_target = cfg.train_loss_target;
        tcfg.log_every = 10;
        tcfg.log_tag = "train-cofcn k=" + std::to_string(k);
        tcfg.seed = derive_seed(cfg.stage_seed("train-cofcn"), std::to_string(k));
        Rng rng(tcfg.seed);
        CoFcn<float> model({k, kPatchSize}, rng);
        auto result = train_cofcn(model, samples, tcfg);
        model.save(paths.model_ckpt(paths.cofcn_tag(k)));
        write_metrics_log(paths.model_log(paths.cofcn_tag(k)), result.log);
        std::cerr << "[train-cofcn] k=" << k << ": " << result.epochs_run
                  << " epochs, final train loss " << result.final_train_loss << "\n";
        outputs.push_back(paths.model_ckpt(paths.cofcn_tag(k)));
    }
    write_stage_meta(paths, cfg, "train-cofcn", {}, outputs);
}

inline void stage_train_unet(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    // the baseline trains on the union of the support and query sets
    std::vector<CoFcnSample<float>> samples;
    for (int c : cfg.train_centers) {
        for (const fs::path& mpath : {paths.manifest_support(c), paths.manifest_query(c)}) {
            require_artifact(mpath, "prepare");
            auto manifest = read_manifest(mpath);
            for (const auto& rec : manifest.records) {
                CoFcnSample<float> s;
                s.ref = rec.ref();
                s.query = extract_patch<float>(cache.image(rec.slide_id), rec.origin_x,
                                               rec.origin_y, rec.size_px);
                s.mask = mask_target(cache.mask(rec.slide_id), rec);
                samples.push_back(std::move(s));
            }
        }
    }
    TrainConfig tcfg;
    tcfg.learning_rate = cfg.learning_rate;
    tcfg.lesion_weight = cfg.lesion_weight;
    tcfg.pretext_weight = cfg.pretext_weight;
    tcfg.patience = cfg.patience;
    tcfg.train_fraction = cfg.train_fraction;
    tcfg.max_epochs = cfg.max_epochs;
    tcfg.batch_size = cfg.batch_size;
    tcfg.train_loss_target = cfg.train_loss_target;
    tcfg.log_every = 10;
    tcfg.log_tag = "train-unet";
    tcfg.seed = cfg.stage_seed("train-unet");
    Rng rng(tcfg.seed);
    UNet<float> model(rng);
    auto result = train_unet(model, samples, tcfg);
    model.save(paths.model_ckpt("unet"));
    write_metrics_log(paths.model_log("unet"), result.log);
    std::cerr << "[train-unet] " << result.epochs_run << " epochs, final train loss "
              << result.final_train_loss << "\n";
    write_stage_meta(paths, cfg, "train-unet", {}, {paths.model_ckpt("unet")});
}

// --- inference / evaluation -------------------------------------------------------------

inline std::vector<SlideRef> test_slides(const std::vector<SlideRef>& slides) {
    std::vector<SlideRef> out;
    for (const auto& s : slides)
        if (s.set_role == SetRole::test) out.push_back(s);
    return out;
}

inline void stage_infer(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    const auto agg = aggregation_from(cfg.aggregation);
    std::vector<fs::path> outputs;

    require_artifact(paths.model_ckpt("unet"), "train-unet");
    Rng rng_u(0);
    UNet<float> unet(rng_u);
    unet.load(paths.model_ckpt("unet"));

    std::map<int, CenterStack<float>> stacks;
    for (const auto& slide : test_slides(slides)) {
        require_artifact(paths.manifest_eval(slide.slide_id), "prepare");
        auto manifest = read_manifest(paths.manifest_eval(slide.slide_id));
        if (!stacks.count(slide.center_id))
            stacks.emplace(slide.center_id, load_center_stack(paths, slide.center_id));
        auto& stack = stacks.at(slide.center_id);

        for (int k : cfg.k_list) {
            require_artifact(paths.model_ckpt(paths.cofcn_tag(k)), "train-cofcn");
            Rng rng_c(0);
            CoFcn<float> model({k, kPatchSize}, rng_c);
            model.load(paths.model_ckpt(paths.cofcn_tag(k)));
            int fallbacks = 0;
            auto pred = predict_slide_cofcn(model, slide, manifest, stack, cache, k, agg,
                                            &fallbacks);
            if (fallbacks)
                std::cerr << "[infer] warning: " << fallbacks << " fallback shots on "
                          << slide.slide_id << " (k=" << k << ")\n";
            write_predictions(paths.prediction(paths.cofcn_tag(k), slide.slide_id), pred);
            write_heatmap(paths.heatmap(paths.cofcn_tag(k), slide.slide_id), pred.heatmap);
            outputs.push_back(paths.prediction(paths.cofcn_tag(k), slide.slide_id));
        }
        auto upred = predict_slide_unet(unet, slide, manifest, cache, agg);
        write_predictions(paths.prediction("unet", slide.slide_id), upred);
        write_heatmap(paths.heatmap("unet", slide.slide_id), upred.heatmap);
        outputs.push_back(paths.prediction("unet", slide.slide_id));
    }
    write_stage_meta(paths, cfg, "infer", {paths.model_ckpt("unet")}, outputs);
}

inline std::vector<std::string> model_tags(const ProjectConfig& cfg) {
    Paths paths(cfg);
    std::vector<std::string> tags;
    for (int k : cfg.k_list) tags.push_back(paths.cofcn_tag(k));
    tags.push_back("unet");
    return tags;
}

inline void stage_evaluate(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = test_slides(read_slide_index(paths.slide_index()));
    std::vector<fs::path> outputs;
    for (const auto& tag : model_tags(cfg)) {
        std::string tsv =
            "slide_id\tdisplay\tlesion_class\tauc\tdelong_variance\tci_lo\tci_hi\tpauc_spec90\tn_pos\tn_neg\n";
        std::string text = "model " + tag + "\n";
        for (const auto& slide : slides) {
            auto ppath = paths.prediction(tag, slide.slide_id);
            require_artifact(ppath, "infer");
            auto pred = read_predictions(ppath);
            std::vector<double> scores;
            std::vector<int> labels;
            if (!prediction_scores(pred, scores, labels)) {
                tsv += slide.slide_id + '\t' + slide.display_name() + '\t' +
                       to_string(slide.lesion_class) + "\tNA\tNA\tNA\tNA\tNA\t0\t0\n";
                text += "  " + slide.display_name() + " (" + to_string(slide.lesion_class) +
                        "): undefined AUC (single-class slide)\n";
                continue;
            }
            auto roc = delong_ci(scores, labels);
            auto pa = pauc_full(scores, labels, 0.90, 1.00);
            roc.pauc_spec90 = pa.value;
            roc.pauc_spec90_normalized = pa.normalized;
            tsv += slide.slide_id + '\t' + slide.display_name() + '\t' +
                   to_string(slide.lesion_class) + '\t' + format_g17(roc.auc) + '\t' +
                   format_g17(roc.delong_variance) + '\t' + format_g17(roc.ci_lo) + '\t' +
                   format_g17(roc.ci_hi) + '\t' + format_g17(pa.value) + '\t' +
                   std::to_string(roc.n_pos) + '\t' + std::to_string(roc.n_neg) + '\n';
            text += "  " + slide.display_name() + " (" + to_string(slide.lesion_class) +
                    "): AUC " + roc.format() + ", pAUC[0.9,1.0] " + format_g17(pa.value) + "\n";
        }
        write_text_file(paths.eval_table(tag), tsv);
        write_text_file(paths.eval_text(tag), text);
        outputs.push_back(paths.eval_table(tag));
    }
    write_stage_meta(paths, cfg, "evaluate", {}, outputs);
}

inline void stage_compare(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = test_slides(read_slide_index(paths.slide_index()));
    std::map<int, std::map<std::string, SlidePrediction>> cofcn_preds;
    std::map<std::string, SlidePrediction> unet_preds;
    for (const auto& slide : slides) {
        for (int k : cfg.k_list) {
            auto p = paths.prediction(paths.cofcn_tag(k), slide.slide_id);
            require_artifact(p, "infer");
            cofcn_preds[k][slide.slide_id] = read_predictions(p);
        }
        auto pu = paths.prediction("unet", slide.slide_id);
        require_artifact(pu, "infer");
        unet_preds[slide.slide_id] = read_predictions(pu);
    }
    auto report = compare_report(cofcn_preds, unet_preds, slides);
    for (const auto& w : report.warnings) std::cerr << "[compare] warning: " << w << "\n";
    write_text_file(paths.report_text(), compare_report_text(report));
    write_text_file(paths.report_tsv(), compare_report_tsv(report));
    write_stage_meta(paths, cfg, "compare", {}, {paths.report_text(), paths.report_tsv()});
}

inline void stage_render(const ProjectConfig& cfg) {
    Paths paths(cfg);
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    std::vector<fs::path> outputs;
    for (const auto& slide : test_slides(slides)) {
        for (const auto& tag : model_tags(cfg)) {
            auto hpath = paths.heatmap(tag, slide.slide_id);
            require_artifact(hpath, "infer");
            auto hm = read_heatmap(hpath);
            auto overlay = render_overlay(hm, cfg.render_threshold);
            write_image(paths.overlay(tag, slide.slide_id), overlay);
            write_image(paths.composite(tag, slide.slide_id),
                        composite_over(cache.image(slide.slide_id), overlay));
            outputs.push_back(paths.overlay(tag, slide.slide_id));
        }
    }
    write_stage_meta(paths, cfg, "render", {}, outputs);
}

// Inference with an explicit checkpoint path; the model kind and shot count
// come from the checkpoint header, the tag from the filename stem.
inline void infer_with_model(const ProjectConfig& cfg, const fs::path& ckpt) {
    Paths paths(cfg);
    require_artifact(ckpt, "train-cofcn or train-unet");
    require_artifact(paths.slide_index(), "synth");
    auto slides = read_slide_index(paths.slide_index());
    SlideImageCache cache(slides, paths.slides);
    const auto agg = aggregation_from(cfg.aggregation);
    const std::string tag = ckpt.stem().string();

    std::ifstream in(ckpt, std::ios::binary);
    std::string magic, header;
    std::getline(in, magic);
    std::getline(in, header);
    const bool is_cofcn = header.find("model=cofcn") != std::string::npos;
    int k = 0;
    for (const auto& f : split(header, ' ')) {
        auto kv = split(f, '=');
        if (kv.size() == 2 && kv[0] == "k") k = std::stoi(kv[1]);
    }
    in.close();

    Rng rng(0);
    std::map<int, CenterStack<float>> stacks;
    if (is_cofcn) {
        CoFcn<float> model({k, kPatchSize}, rng);
        model.load(ckpt);
        for (const auto& slide : test_slides(slides)) {
            require_artifact(paths.manifest_eval(slide.slide_id), "prepare");
            auto manifest = read_manifest(paths.manifest_eval(slide.slide_id));
            if (!stacks.count(slide.center_id))
                stacks.emplace(slide.center_id, load_center_stack(paths, slide.center_id));
            auto pred = predict_slide_cofcn(model, slide, manifest, stacks.at(slide.center_id),
                                            cache, k, agg);
            write_predictions(paths.prediction(tag, slide.slide_id), pred);
            write_heatmap(paths.heatmap(tag, slide.slide_id), pred.heatmap);
        }
    } else {
        UNet<float> model(rng);
        model.load(ckpt);
        for (const auto& slide : test_slides(slides)) {
            require_artifact(paths.manifest_eval(slide.slide_id), "prepare");
            auto manifest = read_manifest(paths.manifest_eval(slide.slide_id));
            auto pred = predict_slide_unet(model, slide, manifest, cache, agg);
            write_predictions(paths.prediction(tag, slide.slide_id), pred);
            write_heatmap(paths.heatmap(tag, slide.slide_id), pred.heatmap);
        }
    }
}

// --- dispatch -------------------------------------------------------------------------

inline void run_stage(Stage stage, const ProjectConfig& cfg) {
    switch (stage) {
        case Stage::synth: stage_synth(cfg); break;
        case Stage::prepare: stage_prepare(cfg); break;
        case Stage::train_ae: stage_train_ae(cfg); break;
        case Stage::embed: stage_embed(cfg); break;
        case Stage::fit_pca: stage_fit_pca(cfg); break;
        case Stage::cluster: stage_cluster(cfg); break;
        case Stage::prototypes: stage_prototypes(cfg); break;
        case Stage::train_cofcn: stage_train_cofcn(cfg); break;
        case Stage::train_unet: stage_train_unet(cfg); break;
        case Stage::infer: stage_infer(cfg); break;
        case Stage::evaluate: stage_evaluate(cfg); break;
        case Stage::compare: stage_compare(cfg); break;
        case Stage::render: stage_render(cfg); break;
    }
}

inline void run_all(const ProjectConfig& cfg) {
    for (const auto& [stage, name] : stage_names()) run_stage(stage, cfg);
}

} // namespace cofcn
