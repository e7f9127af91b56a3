#pragma once

#include <iostream>
#include <map>

#include "cofcn/autoencoder.hpp"
#include "cofcn/image.hpp"
#include "cofcn/model.hpp"
#include "cofcn/patch.hpp"
#include "cofcn/pca.hpp"
#include "cofcn/roc.hpp"
#include "cofcn/selector.hpp"

namespace cofcn {

enum class PatchAggregation { min_prob, max_prob };

inline PatchAggregation aggregation_from(const std::string& s) {
    if (s == "min") return PatchAggregation::min_prob;
    if (s == "max") return PatchAggregation::max_prob;
    throw std::invalid_argument("unknown aggregation: " + s);
}

struct PatchPrediction {
    PatchRef ref;
    int eval_label = 0;
    double lesion_prob = 0;
};

struct SlidePrediction {
    std::string slide_id;
    std::vector<PatchPrediction> per_patch;
    HeatMap heatmap; // central-region pixel probabilities at slide scale
};

// Lazily loads and caches slide rasters and masks by slide id.
class SlideImageCache {
  public:
    explicit SlideImageCache(const std::vector<SlideRef>& slides, const fs::path& base = {}) {
        for (const auto& s : slides) paths_[s.slide_id] = s;
        base_ = base;
    }
    const Image& image(const std::string& slide_id) {
        auto it = images_.find(slide_id);
        if (it != images_.end()) return it->second;
        const SlideRef& ref = resolve(slide_id);
        if (ref.image_path.empty()) throw std::runtime_error("no image for " + slide_id);
        return images_[slide_id] = read_image(base_ / ref.image_path);
    }
    const Image& mask(const std::string& slide_id) {
        auto it = masks_.find(slide_id);
        if (it != masks_.end()) return it->second;
        const SlideRef& ref = resolve(slide_id);
        if (ref.mask_path.empty()) throw std::runtime_error("slide " + slide_id + " has no mask");
        return masks_[slide_id] = read_image(base_ / ref.mask_path);
    }
    const SlideRef& resolve(const std::string& slide_id) const {
        auto it = paths_.find(slide_id);
        if (it == paths_.end()) throw std::runtime_error("unknown slide " + slide_id);
        return it->second;
    }

  private:
    std::map<std::string, SlideRef> paths_;
    std::map<std::string, Image> images_;
    std::map<std::string, Image> masks_;
    fs::path base_;
};

// Aggregates one patch's central-region probabilities into the patch lesion
// probability (the minimum by default) and stamps them into the heatmap.
inline double aggregate_central(const Tensor<float>& seg_prob, PatchAggregation agg,
                                const PatchRecord& rec, HeatMap* heatmap) {
    const int S = kPatchSize;
    double best = agg == PatchAggregation::min_prob ? 1.0 : 0.0;
    for (int y = kCentralLo; y < kCentralHi; ++y)
        for (int x = kCentralLo; x < kCentralHi; ++x) {
            double p = seg_prob[static_cast<std::int64_t>(y) * S + x];
            best = agg == PatchAggregation::min_prob ? std::min(best, p) : std::max(best, p);
            if (heatmap)
                heatmap->set(rec.origin_x + x, rec.origin_y + y, static_cast<float>(p));
        }
    return best;
}

// Everything needed to drive the selector for one center at inference time.
template <typename T>
struct CenterStack {
    std::shared_ptr<ConvAutoencoder<T>> autoencoder;
    PcaModel pca;
    SelectorArtifact selector;
};

template <typename T>
Tensor<T> stack_support(const std::vector<PatchRef>& shots, SlideImageCache& cache) {
    const int k = static_cast<int>(shots.size());
    Tensor<T> support({3 * k, kPatchSize, kPatchSize});
    for (int j = 0; j < k; ++j) {
        const auto& ref = shots[j];
        auto img = extract_patch<T>(cache.image(ref.slide_id), ref.grid_x * kPatchSize,
                                    ref.grid_y * kPatchSize, kPatchSize);
        std::copy(img.data.begin(), img.data.end(),
                  support.data.begin() + static_cast<std::int64_t>(j) * img.numel());
    }
    return support;
}

// Slide-level inference for the conditional network: every manifest patch is
// embedded, clustered, paired with its k support shots, and scored.
template <typename T>
SlidePrediction predict_slide_cofcn(CoFcn<T>& model, const SlideRef& slide,
                                    const PatchManifest& manifest, CenterStack<T>& stack,
                                    SlideImageCache& cache, int k,
                                    PatchAggregation agg = PatchAggregation::min_prob,
                                    int* fallback_count = nullptr) {
    if (!stack.autoencoder) throw std::runtime_error("missing autoencoder for center inference");
    if (stack.selector.model.pi_l.empty())
        throw std::runtime_error("selector artifact missing lesion prevalence: run cluster/prototypes first");
    model.training_mode = false;
    stack.autoencoder->training_mode = false;

    const Image& image = cache.image(slide.slide_id);
    SlidePrediction out;
    out.slide_id = slide.slide_id;
    out.heatmap = HeatMap(image.width, image.height);

    auto records = manifest.records;
    std::sort(records.begin(), records.end(),
              [](const PatchRecord& a, const PatchRecord& b) { return a.ref() < b.ref(); });
    for (const auto& rec : records) {
        if (rec.slide_id != slide.slide_id) continue;
        auto query = extract_patch<T>(image, rec.origin_x, rec.origin_y, kPatchSize);
        auto emb = stack.autoencoder->embed(query);
        auto p3 = stack.pca.project(std::vector<double>(emb.begin(), emb.end()));
        Vec3 v(p3[0], p3[1], p3[2]);
        int g = assign_cluster(v, stack.selector.model);
        auto assignment =
            select_support(rec.ref(), v, g, k, stack.selector.pools, stack.selector.model);
        if (fallback_count) *fallback_count += assignment.fallback_count;
        auto support = stack_support<T>(assignment.shots, cache);
        auto result = model.forward(query, support);
        PatchPrediction pp;
        pp.ref = rec.ref();
        pp.eval_label = rec.label == PatchLabel::lesion ? 1 : 0;
        pp.lesion_prob = aggregate_central(result.seg_prob->value.template cast<float>(), agg,
                                           rec, &out.heatmap);
        out.per_patch.push_back(pp);
    }
    return out;
}

// Baseline path: ignores k and selector artifacts entirely.
template <typename T>
SlidePrediction predict_slide_unet(UNet<T>& model, const SlideRef& slide,
                                   const PatchManifest& manifest, SlideImageCache& cache,
                                   PatchAggregation agg = PatchAggregation::min_prob) {
    model.training_mode = false;
    const Image& image = cache.image(slide.slide_id);
    SlidePrediction out;
    out.slide_id = slide.slide_id;
    out.heatmap = HeatMap(image.width, image.height);
    auto records = manifest.records;
    std::sort(records.begin(), records.end(),
              [](const PatchRecord& a, const PatchRecord& b) { return a.ref() < b.ref(); });
    for (const auto& rec : records) {
        if (rec.slide_id != slide.slide_id) continue;
        auto query = extract_patch<T>(image, rec.origin_x, rec.origin_y, kPatchSize);
        auto prob = model.forward(query);
        PatchPrediction pp;
        pp.ref = rec.ref();
        pp.eval_label = rec.label == PatchLabel::lesion ? 1 : 0;
        pp.lesion_prob =
            aggregate_central(prob->value.template cast<float>(), agg, rec, &out.heatmap);
        out.per_patch.push_back(pp);
    }
    return out;
}

// --- prediction I/O -------------------------------------------------------------

inline void write_predictions(const fs::path& path, const SlidePrediction& pred) {
    std::string out;
    for (const auto& p : pred.per_patch)
        out += p.ref.slide_id + '\t' + std::to_string(p.ref.grid_x) + '\t' +
               std::to_string(p.ref.grid_y) + '\t' + std::to_string(p.eval_label) + '\t' +
               format_g17(p.lesion_prob) + '\n';
    write_text_file(path, out);
}

inline SlidePrediction read_predictions(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions " + path.string());
    SlidePrediction pred;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split(line, '\t');
        if (f.size() != 5) throw std::runtime_error("bad prediction line in " + path.string());
        PatchPrediction p;
        p.ref = PatchRef{f[0], std::stoi(f[1]), std::stoi(f[2])};
        p.eval_label = std::stoi(f[3]);
        p.lesion_prob = std::stod(f[4]);
        pred.per_patch.push_back(p);
        pred.slide_id = f[0];
    }
    return pred;
}

// ROC inputs from a prediction; false when the slide has a single class only
// (its AUC is undefined).
inline bool prediction_scores(const SlidePrediction& pred, std::vector<double>& scores,
                              std::vector<int>& labels) {
    scores.clear();
    labels.clear();
    for (const auto& p : pred.per_patch) {
        scores.push_back(p.lesion_prob);
        labels.push_back(p.eval_label);
    }
    bool has_pos = false, has_neg = false;
    for (int l : labels) (l ? has_pos : has_neg) = true;
    return has_pos && has_neg;
}

// --- comparison report ------------------------------------------------------------

struct CompareRow {
    std::string slide_id;
    std::string display;
    std::string lesion_class;
    int k = 0;
    bool defined = false;
    double auc_unet = 0;
    double auc_cofcn = 0;
    double delta_percent = 0; // 100*(cofcn-unet)/unet
    double p_value = 1;
    std::string code;
};

struct CompareReport {
    std::vector<CompareRow> rows;
    std::vector<std::string> warnings;
};

// Relative difference of a against baseline b, as a percentage of b.
inline double relative_percent(double a, double b) {
    return b != 0.0 ? 100.0 * (a - b) / b : 0.0;
}

// Pairs the two models' per-patch scores per slide and k, and reports the
// relative AUC difference with the correlated-curve significance code.
inline CompareReport
compare_report(const std::map<int, std::map<std::string, SlidePrediction>>& cofcn_per_k,
               const std::map<std::string, SlidePrediction>& unet,
               const std::vector<SlideRef>& slides) {
    CompareReport rep;
    for (const auto& [k, per_slide] : cofcn_per_k) {
        for (const auto& slide : slides) {
            auto itc = per_slide.find(slide.slide_id);
            auto itu = unet.find(slide.slide_id);
            if (itc == per_slide.end() || itu == unet.end()) {
                rep.warnings.push_back("slide " + slide.slide_id +
                                       " not paired across models at k=" + std::to_string(k) +
                                       "; skipped");
                continue;
            }
            // align by patch ref
            std::map<PatchRef, std::pair<double, int>> by_ref;
            for (const auto& p : itc->second.per_patch)
                by_ref[p.ref] = {p.lesion_prob, p.eval_label};
            std::vector<double> sa, sb;
            std::vector<int> labels;
            for (const auto& p : itu->second.per_patch) {
                auto it = by_ref.find(p.ref);
                if (it == by_ref.end()) continue;
                sa.push_back(it->second.first);
                sb.push_back(p.lesion_prob);
                labels.push_back(p.eval_label);
            }
            CompareRow row;
            row.slide_id = slide.slide_id;
            row.display = slide.display_name();
            row.lesion_class = to_string(slide.lesion_class);
            row.k = k;
            bool has_pos = false, has_neg = false;
            for (int l : labels) (l ? has_pos : has_neg) = true;
            if (labels.empty() || !has_pos || !has_neg) {
                row.defined = false; // undefined AUC marker
            } else {
                auto t = delong_test(sa, sb, labels);
                row.defined = true;
                row.auc_cofcn = t.auc_a;
                row.auc_unet = t.auc_b;
                row.delta_percent = relative_percent(t.auc_a, t.auc_b);
                row.p_value = t.p_value;
                row.code = t.code;
            }
            rep.rows.push_back(row);
        }
    }
    return rep;
}

inline std::string compare_report_text(const CompareReport& rep) {
    char buf[256];
    std::string out = "slide        class     k   AUC(U-Net)  AUC(co-FCN)  delta%      sig\n";
    out += "-------------------------------------------------------------------\n";
    for (const auto& r : rep.rows) {
        if (r.defined) {
            std::snprintf(buf, sizeof(buf), "%-12s %-9s %-3d %-11.3f %-12.3f %+-10.1f  %s\n",
                          r.display.c_str(), r.lesion_class.c_str(), r.k, r.auc_unet,
                          r.auc_cofcn, r.delta_percent, r.code.c_str());
        } else {
            std::snprintf(buf, sizeof(buf), "%-12s %-9s %-3d %-11s %-12s %-10s\n",
                          r.display.c_str(), r.lesion_class.c_str(), r.k, "NA", "NA",
                          "undefined");
        }
        out += buf;
    }
    for (const auto& w : rep.warnings) out += "# warning: " + w + "\n";
    return out;
}

inline std::string compare_report_tsv(const CompareReport& rep) {
    std::string out = "slide_id\tdisplay\tlesion_class\tk\tauc_unet\tauc_cofcn\tdelta_percent\tp_value\tsig_code\n";
    for (const auto& r : rep.rows) {
        if (r.defined) {
            out += r.slide_id + '\t' + r.display + '\t' + r.lesion_class + '\t' +
                   std::to_string(r.k) + '\t' + format_g17(r.auc_unet) + '\t' +
                   format_g17(r.auc_cofcn) + '\t' + format_g17(r.delta_percent) + '\t' +
                   format_g17(r.p_value) + '\t' + r.code + '\n';
        } else {
            out += r.slide_id + '\t' + r.display + '\t' + r.lesion_class + '\t' +
                   std::to_string(r.k) + "\tNA\tNA\tNA\tNA\t\n";
        }
    }
    return out;
}

// --- heatmap rendering -------------------------------------------------------------

// RGBA overlay: probabilities below the threshold (and cells without
// predictions) are fully transparent; the rest sweep from green at the
// threshold to red at 1.0.
inline Image render_overlay(const HeatMap& hm, double threshold = 0.75) {
    Image overlay(hm.width, hm.height, 4, 0);
    for (int y = 0; y < hm.height; ++y)
        for (int x = 0; x < hm.width; ++x) {
            float p = hm.at(x, y);
            if (!std::isfinite(p) || p < threshold) continue;
            double t = threshold < 1.0 ? (p - threshold) / (1.0 - threshold) : 1.0;
            t = std::clamp(t, 0.0, 1.0);
            std::uint8_t r, g, b;
            hsv_to_rgb(120.0 * (1.0 - t), 1.0, 1.0, r, g, b);
            overlay.at(x, y, 0) = r;
            overlay.at(x, y, 1) = g;
            overlay.at(x, y, 2) = b;
            overlay.at(x, y, 3) = 255;
        }
    return overlay;
}

inline Image composite_over(const Image& background, const Image& overlay) {
    if (background.channels != 3) throw std::invalid_argument("composite: RGB background expected");
    if (overlay.channels != 4) throw std::invalid_argument("composite: RGBA overlay expected");
    if (background.width != overlay.width || background.height != overlay.height)
        throw std::invalid_argument("composite: overlay grid misaligned with background");
    Image out = background;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            const double a = overlay.at(x, y, 3) / 255.0;
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) = static_cast<std::uint8_t>(
                    std::lround(a * overlay.at(x, y, c) + (1.0 - a) * background.at(x, y, c)));
        }
    return out;
}

inline Image render_heatmap(const SlidePrediction& pred, const Image& background,
                            double threshold = 0.75) {
    if (pred.heatmap.width != background.width || pred.heatmap.height != background.height)
        throw std::invalid_argument("render: heatmap grid misaligned with slide raster");
    return composite_over(background, render_overlay(pred.heatmap, threshold));
}

} // namespace cofcn
