#pragma once

#include <map>
#include <set>

#include "cofcn/common.hpp"

namespace cofcn {

// Flat key-value project configuration with one section per pipeline module.
struct ProjectConfig {
    // [project]
    std::string workdir = "work";
    std::string slides_dir; // defaults to <workdir>/slides
    std::uint64_t seed = 1;
    std::vector<int> train_centers{0, 1, 2};
    std::vector<int> test_centers{3, 4};

    // [synth]
    int slide_width = 384;
    int slide_height = 384;
    int support_slides = 2; // per center
    int query_slides = 1;   // per center; test-center query slides are the test WSIs
    int lesion_count = 2;
    double radius_min = 30.0;
    double radius_max = 42.0;
    double noise_amp = 0.03;
    double color_shift_test = 0.05;

    // [patch]
    double blur_sigma = 2.0;
    double sat_threshold = 0.10;
    double drop_support = 0.85;
    double drop_query = 0.95;

    // [autoencoder]
    double ae_learning_rate = 0.004;
    int ae_patience = 3;
    int ae_max_epochs = 200;
    double ae_train_fraction = 0.8;
    double ae_loss_target = 0.0;

    // [cluster]
    int gmm_components = 6;

    // [prototypes]
    int microcluster_dim = 20;

    // [train]
    std::vector<int> k_list{2};
    double lesion_weight = 4.0;
    double pretext_weight = 0.2;
    double learning_rate = 0.001;
    int patience = 3;
    double train_fraction = 0.75;
    int max_epochs = 150;
    int batch_size = 8;
    double train_loss_target = 0.0;

    // [infer]
    std::string aggregation = "min";

    // [render]
    double render_threshold = 0.75;

    fs::path slides_path() const {
        return slides_dir.empty() ? fs::path(workdir) / "slides" : fs::path(slides_dir);
    }

    std::string canonical() const {
        std::string s;
        auto add = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
        auto ints = [](const std::vector<int>& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
            return s;
        };
        add("workdir", workdir);
        add("slides_dir", slides_dir);
        add("seed", std::to_string(seed));
        add("train_centers", ints(train_centers));
        add("test_centers", ints(test_centers));
        add("slide_width", std::to_string(slide_width));
        add("slide_height", std::to_string(slide_height));
        add("support_slides", std::to_string(support_slides));
        add("query_slides", std::to_string(query_slides));
        add("lesion_count", std::to_string(lesion_count));
        add("radius_min", format_g17(radius_min));
        add("radius_max", format_g17(radius_max));
        add("noise_amp", format_g17(noise_amp));
        add("color_shift_test", format_g17(color_shift_test));
        add("blur_sigma", format_g17(blur_sigma));
        add("sat_threshold", format_g17(sat_threshold));
        add("drop_support", format_g17(drop_support));
        add("drop_query", format_g17(drop_query));
        add("ae_learning_rate", format_g17(ae_learning_rate));
        add("ae_patience", std::to_string(ae_patience));
        add("ae_max_epochs", std::to_string(ae_max_epochs));
        add("ae_train_fraction", format_g17(ae_train_fraction));
        add("ae_loss_target", format_g17(ae_loss_target));
        add("gmm_components", std::to_string(gmm_components));
        add("microcluster_dim", std::to_string(microcluster_dim));
        add("k_list", ints(k_list));
        add("lesion_weight", format_g17(lesion_weight));
        add("pretext_weight", format_g17(pretext_weight));
        add("learning_rate", format_g17(learning_rate));
        add("patience", std::to_string(patience));
        add("train_fraction", format_g17(train_fraction));
        add("max_epochs", std::to_string(max_epochs));
        add("batch_size", std::to_string(batch_size));
        add("train_loss_target", format_g17(train_loss_target));
        add("aggregation", aggregation);
        add("render_threshold", format_g17(render_threshold));
        return s;
    }

    std::string config_hash() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(canonical())));
        return buf;
    }

    std::uint64_t stage_seed(const std::string& stage) const { return derive_seed(seed, stage); }
};

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const auto& tok : split(s, ','))
        if (!trim(tok).empty()) out.push_back(std::stoi(trim(tok)));
    return out;
}

} // namespace detail

// Parses the INI-style config text: [section] headers, key = value lines,
// '#' or ';' comments. Unknown keys are reported as errors.
inline ProjectConfig parse_config(const std::string& text) {
    ProjectConfig cfg;
    std::string section;
    int lineno = 0;
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        std::string full = section.empty() ? key : section + "." + key;
        try {
            if (full == "project.workdir") cfg.workdir = val;
            else if (full == "project.slides_dir") cfg.slides_dir = val;
            else if (full == "project.seed") cfg.seed = std::stoull(val);
            else if (full == "project.train_centers") cfg.train_centers = detail::parse_int_list(val);
            else if (full == "project.test_centers") cfg.test_centers = detail::parse_int_list(val);
            else if (full == "synth.slide_width") cfg.slide_width = std::stoi(val);
            else if (full == "synth.slide_height") cfg.slide_height = std::stoi(val);
            else if (full == "synth.support_slides") cfg.support_slides = std::stoi(val);
            else if (full == "synth.query_slides") cfg.query_slides = std::stoi(val);
            else if (full == "synth.lesion_count") cfg.lesion_count = std::stoi(val);
            else if (full == "synth.radius_min") cfg.radius_min = std::stod(val);
            else if (full == "synth.radius_max") cfg.radius_max = std::stod(val);
            else if (full == "synth.noise_amp") cfg.noise_amp = std::stod(val);
            else if (full == "synth.color_shift_test") cfg.color_shift_test = std::stod(val);
            else if (full == "patch.blur_sigma") cfg.blur_sigma = std::stod(val);
            else if (full == "patch.sat_threshold") cfg.sat_threshold = std::stod(val);
            else if (full == "patch.drop_support") cfg.drop_support = std::stod(val);
            else if (full == "patch.drop_query") cfg.drop_query = std::stod(val);
            else if (full == "autoencoder.learning_rate") cfg.ae_learning_rate = std::stod(val);
            else if (full == "autoencoder.patience") cfg.ae_patience = std::stoi(val);
            else if (full == "autoencoder.max_epochs") cfg.ae_max_epochs = std::stoi(val);
            else if (full == "autoencoder.train_fraction") cfg.ae_train_fraction = std::stod(val);
            else if (full == "autoencoder.loss_target") cfg.ae_loss_target = std::stod(val);
            else if (full == "cluster.components") cfg.gmm_components = std::stoi(val);
            else if (full == "prototypes.microcluster_dim") cfg.microcluster_dim = std::stoi(val);
            else if (full == "train.k_list") cfg.k_list = detail::parse_int_list(val);
            else if (full == "train.lesion_weight") cfg.lesion_weight = std::stod(val);
            else if (full == "train.pretext_weight") cfg.pretext_weight = std::stod(val);
            else if (full == "train.learning_rate") cfg.learning_rate = std::stod(val);
            else if (full == "train.patience") cfg.patience = std::stoi(val);
            else if (full == "train.train_fraction") cfg.train_fraction = std::stod(val);
            else if (full == "train.max_epochs") cfg.max_epochs = std::stoi(val);
            else if (full == "train.batch_size") cfg.batch_size = std::stoi(val);
            else if (full == "train.loss_target") cfg.train_loss_target = std::stod(val);
            else if (full == "infer.aggregation") cfg.aggregation = val;
            else if (full == "render.threshold") cfg.render_threshold = std::stod(val);
            else
                throw std::invalid_argument("unknown config key '" + full + "'");
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception&) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": bad value for " + full);
        }
    }
    return cfg;
}

inline ProjectConfig load_config(const fs::path& path) {
    return parse_config(read_text_file(path));
}

// Static validation; returns human-readable violations instead of throwing.
inline std::vector<std::string> validate_config(const ProjectConfig& cfg) {
    std::vector<std::string> v;
    std::set<int> train(cfg.train_centers.begin(), cfg.train_centers.end());
    for (int c : cfg.test_centers)
        if (train.count(c))
            v.push_back("center " + std::to_string(c) +
                        " appears in both train and test sets; training and test slides must "
                        "come from separate medical centers");
    for (int c : cfg.train_centers)
        if (c < 0 || c > 4) v.push_back("train center " + std::to_string(c) + " outside 0..4");
    for (int c : cfg.test_centers)
        if (c < 0 || c > 4) v.push_back("test center " + std::to_string(c) + " outside 0..4");
    if (cfg.train_centers.empty()) v.push_back("no training centers configured");
    if (cfg.test_centers.empty()) v.push_back("no test centers configured");
    for (int k : cfg.k_list)
        if (!(k == 1 || k == 2 || k == 4 || k == 8))
            v.push_back("k=" + std::to_string(k) + " is not a supported shot count (1, 2, 4, 8)");
    if (cfg.k_list.empty()) v.push_back("k_list is empty");
    if (cfg.lesion_weight <= 0) v.push_back("lesion_weight must be > 0");
    if (cfg.pretext_weight <= 0) v.push_back("pretext_weight must be > 0");
    if (cfg.learning_rate <= 0) v.push_back("learning_rate must be > 0");
    if (cfg.ae_learning_rate <= 0) v.push_back("autoencoder learning_rate must be > 0");
    if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1))
        v.push_back("train.train_fraction outside (0,1)");
    if (!(cfg.ae_train_fraction > 0 && cfg.ae_train_fraction < 1))
        v.push_back("autoencoder.train_fraction outside (0,1)");
    for (auto [name, d] : {std::pair<const char*, double>{"patch.drop_support", cfg.drop_support},
                           {"patch.drop_query", cfg.drop_query}})
        if (!(d >= 0.0 && d <= 1.0)) v.push_back(std::string(name) + " outside [0,1]");
    if (!(cfg.sat_threshold >= 0 && cfg.sat_threshold <= 1))
        v.push_back("patch.sat_threshold outside [0,1]");
    if (!(cfg.render_threshold >= 0 && cfg.render_threshold <= 1))
        v.push_back("render.threshold outside [0,1]");
    if (cfg.aggregation != "min" && cfg.aggregation != "max")
        v.push_back("infer.aggregation must be 'min' or 'max'");
    if (cfg.gmm_components < 1) v.push_back("cluster.components must be >= 1");
    if (cfg.microcluster_dim < 1) v.push_back("prototypes.microcluster_dim must be >= 1");
    if (cfg.patience < 1 || cfg.ae_patience < 1) v.push_back("patience must be >= 1");
    if (cfg.max_epochs < 1 || cfg.ae_max_epochs < 1) v.push_back("max_epochs must be >= 1");
    if (cfg.batch_size < 1) v.push_back("batch_size must be >= 1");
    return v;
}

} // namespace cofcn
