#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <set>

#include "cofcn/gmm.hpp"
#include "cofcn/patch.hpp"

namespace cofcn {

// One support patch known to the selector: where it lives and its 3-d PCA
// coordinates.
struct SupportPatch {
    PatchRef ref;
    Vec3 pca;
    PatchLabel label = PatchLabel::non_lesion;
    int cluster_id = -1;
};

struct PrototypePool {
    int center_id = -1;
    int cluster_id = -1;
    PatchLabel cls = PatchLabel::non_lesion;
    std::vector<std::pair<PatchRef, Vec3>> prototypes; // may be empty
};

struct SupportAssignment {
    PatchRef query_ref;
    int cluster_id = -1;
    std::vector<int> shot_classes; // most-significant digit first; 1 = lesion pool
    std::vector<PatchRef> shots;
    int fallback_count = 0; // shots served from the opposite-class pool
};

// Binary-digit shot policy: n = min(floor(pi * 2^k), 2^k - 1) rendered as k
// binary digits, most-significant first.
inline std::vector<int> shot_classes(double pi, int k) {
    if (!(pi >= 0.0 && pi <= 1.0)) throw std::invalid_argument("pi outside [0,1]");
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    const double scaled = std::floor(pi * std::pow(2.0, k));
    const std::int64_t cap = (std::int64_t(1) << k) - 1;
    const std::int64_t n = std::min<std::int64_t>(static_cast<std::int64_t>(scaled), cap);
    std::vector<int> digits(k);
    for (int i = 0; i < k; ++i) digits[k - 1 - i] = static_cast<int>((n >> i) & 1);
    return digits;
}

// k-means prototype extraction per (cluster, class): the number of
// microclusters is max(1, floor(count / microcluster_dim)) and each prototype
// is the member patch closest to its microcluster centroid.
inline std::vector<PrototypePool> build_prototype_pools(const std::vector<SupportPatch>& patches,
                                                        int n_components, int center_id,
                                                        int microcluster_dim = 20,
                                                        std::uint64_t seed = 0) {
    if (microcluster_dim < 1) throw std::invalid_argument("microcluster_dim must be >= 1");
    std::vector<PrototypePool> pools;
    for (int g = 0; g < n_components; ++g) {
        for (PatchLabel cls : {PatchLabel::lesion, PatchLabel::non_lesion}) {
            PrototypePool pool;
            pool.center_id = center_id;
            pool.cluster_id = g;
            pool.cls = cls;
            std::vector<const SupportPatch*> members;
            for (const auto& p : patches)
                if (p.cluster_id == g && p.label == cls) members.push_back(&p);
            if (!members.empty()) {
                // stable member order regardless of input order
                std::sort(members.begin(), members.end(),
                          [](const SupportPatch* a, const SupportPatch* b) {
                              return a->ref < b->ref;
                          });
                const int count = static_cast<int>(members.size());
                const int k = std::max(1, count / microcluster_dim);
                std::vector<Vec3> pts;
                for (const auto* m : members) pts.push_back(m->pca);
                auto km = kmeans(pts, k, derive_seed(seed, "pool:" + std::to_string(g) + ":" +
                                                               to_string(cls)));
                for (int c = 0; c < k; ++c) {
                    int best = -1;
                    double bd = std::numeric_limits<double>::max();
                    for (int i = 0; i < count; ++i) {
                        if (km.assignment[i] != c) continue;
                        double d = (pts[i] - km.centroids[c]).squaredNorm();
                        if (d < bd || (d == bd && best >= 0 &&
                                       members[i]->ref < members[best]->ref)) {
                            bd = d;
                            best = i;
                        }
                    }
                    if (best >= 0) pool.prototypes.push_back({members[best]->ref, pts[best]});
                }
            }
            pools.push_back(std::move(pool));
        }
    }
    return pools;
}

namespace detail {

inline const PrototypePool* find_pool(const std::vector<PrototypePool>& pools, int cluster_id,
                                      PatchLabel cls) {
    for (const auto& p : pools)
        if (p.cluster_id == cluster_id && p.cls == cls) return &p;
    return nullptr;
}

// Nearest unused prototype by (L2 distance, patch_ref) — the lexicographic
// tie-break keeps the choice independent of pool storage order.
inline std::optional<PatchRef> nearest_unused(const PrototypePool* pool, const Vec3& q,
                                              const std::set<PatchRef>& used) {
    if (!pool) return std::nullopt;
    const std::pair<PatchRef, Vec3>* best = nullptr;
    double bd = std::numeric_limits<double>::max();
    for (const auto& proto : pool->prototypes) {
        if (used.count(proto.first)) continue;
        double d = (proto.second - q).squaredNorm();
        if (best == nullptr || d < bd || (d == bd && proto.first < best->first)) {
            bd = d;
            best = &proto;
        }
    }
    if (!best) return std::nullopt;
    return best->first;
}

} // namespace detail

// Walks the policy digits most-significant first, taking the closest
// not-yet-used prototype from the digit's pool. An exhausted or empty pool
// falls back to the opposite class (counted in fallback_count so callers can
// log it); if both pools are exhausted the selection fails.
inline SupportAssignment select_support(const PatchRef& query_ref, const Vec3& query_pca,
                                        int cluster_id, int k,
                                        const std::vector<PrototypePool>& pools,
                                        const ClusterModel& model) {
    if (cluster_id < 0 || cluster_id >= model.n_components)
        throw std::invalid_argument("cluster_id out of range");
    if (model.pi_l.empty())
        throw std::runtime_error("cluster model has no lesion prevalence estimates");
    SupportAssignment out;
    out.query_ref = query_ref;
    out.cluster_id = cluster_id;
    out.shot_classes = shot_classes(model.pi_l[cluster_id], k);
    std::set<PatchRef> used;
    for (int digit : out.shot_classes) {
        PatchLabel want = digit ? PatchLabel::lesion : PatchLabel::non_lesion;
        PatchLabel other = digit ? PatchLabel::non_lesion : PatchLabel::lesion;
        auto pick = detail::nearest_unused(detail::find_pool(pools, cluster_id, want), query_pca,
                                           used);
        if (!pick) {
            pick = detail::nearest_unused(detail::find_pool(pools, cluster_id, other), query_pca,
                                          used);
            if (pick) ++out.fallback_count;
        }
        if (!pick)
            throw std::runtime_error("no prototypes left in cluster " +
                                     std::to_string(cluster_id) + " for query " +
                                     query_ref.str());
        used.insert(*pick);
        out.shots.push_back(*pick);
    }
    return out;
}

// --- combined selector artifact (cluster model + prototype pools) --------------

struct SelectorArtifact {
    ClusterModel model;
    std::vector<PrototypePool> pools;
    int microcluster_dim = 20;
};

inline void save_selector(const fs::path& path, const SelectorArtifact& art) {
    nlohmann::json jp = nlohmann::json::array();
    for (const auto& pool : art.pools) {
        nlohmann::json protos = nlohmann::json::array();
        for (const auto& [ref, v] : pool.prototypes)
            protos.push_back({{"slide_id", ref.slide_id},
                              {"grid_x", ref.grid_x},
                              {"grid_y", ref.grid_y},
                              {"pca", {v[0], v[1], v[2]}}});
        jp.push_back({{"cluster_id", pool.cluster_id},
                      {"class", to_string(pool.cls)},
                      {"prototypes", protos}});
    }
    nlohmann::json j = {{"version", 1},
                        {"center_id", art.model.center_id},
                        {"microcluster_dim", art.microcluster_dim},
                        {"gmm", gmm_to_json(art.model)},
                        {"pools", jp}};
    write_text_file(path, j.dump(2) + "\n");
}

inline SelectorArtifact load_selector(const fs::path& path) {
    auto j = nlohmann::json::parse(read_text_file(path));
    SelectorArtifact art;
    art.model = gmm_from_json(j.at("gmm"));
    art.microcluster_dim = j.at("microcluster_dim").get<int>();
    for (const auto& jp : j.at("pools")) {
        PrototypePool pool;
        pool.center_id = art.model.center_id;
        pool.cluster_id = jp.at("cluster_id").get<int>();
        pool.cls = patch_label_from(jp.at("class").get<std::string>());
        for (const auto& pr : jp.at("prototypes")) {
            PatchRef ref{pr.at("slide_id").get<std::string>(), pr.at("grid_x").get<int>(),
                         pr.at("grid_y").get<int>()};
            const auto& v = pr.at("pca");
            pool.prototypes.push_back({ref, Vec3(v[0], v[1], v[2])});
        }
        art.pools.push_back(std::move(pool));
    }
    return art;
}

} // namespace cofcn
