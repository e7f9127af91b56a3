#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cofcn/common.hpp"

namespace cofcn {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// --- k-means (shared by GMM init and prototype extraction) --------------------

struct KMeansResult {
    std::vector<Vec3> centroids;
    std::vector<int> assignment;
};

inline int nearest_centroid(const Vec3& p, const std::vector<Vec3>& centroids) {
    int best = 0;
    double bd = (p - centroids[0]).squaredNorm();
    for (size_t c = 1; c < centroids.size(); ++c) {
        double d = (p - centroids[c]).squaredNorm();
        if (d < bd) {
            bd = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

// Lloyd iterations with k-means++ seeding. Empty clusters are reseeded to the
// point farthest from its centroid.
inline KMeansResult kmeans(const std::vector<Vec3>& points, int k, std::uint64_t seed,
                           int max_iter = 100) {
    const int n = static_cast<int>(points.size());
    if (k < 1 || n < k) throw std::invalid_argument("kmeans: need at least k points");
    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    KMeansResult res;
    res.centroids.push_back(points[static_cast<size_t>(u01(rng) * n) % n]);
    std::vector<double> d2(n);
    while (static_cast<int>(res.centroids.size()) < k) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : res.centroids)
                best = std::min(best, (points[i] - c).squaredNorm());
            d2[i] = best;
            total += best;
        }
        if (total <= 0) {
            // all remaining points coincide with a centroid
            res.centroids.push_back(points[static_cast<size_t>(u01(rng) * n) % n]);
            continue;
        }
        double target = u01(rng) * total, acc = 0;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            acc += d2[i];
            if (acc >= target) {
                pick = i;
                break;
            }
        }
        res.centroids.push_back(points[pick]);
    }

    res.assignment.assign(n, -1);
    for (int iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int a = nearest_centroid(points[i], res.centroids);
            if (a != res.assignment[i]) {
                res.assignment[i] = a;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;
        std::vector<Vec3> sums(k, Vec3::Zero());
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            sums[res.assignment[i]] += points[i];
            ++counts[res.assignment[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                res.centroids[c] = sums[c] / counts[c];
            } else {
                int far_i = 0;
                double far_d = -1;
                for (int i = 0; i < n; ++i) {
                    double d = (points[i] - res.centroids[res.assignment[i]]).squaredNorm();
                    if (d > far_d) {
                        far_d = d;
                        far_i = i;
                    }
                }
                res.centroids[c] = points[far_i];
            }
        }
    }
    for (int i = 0; i < n; ++i) res.assignment[i] = nearest_centroid(points[i], res.centroids);
    return res;
}

// --- Gaussian mixture ----------------------------------------------------------

// Full-covariance GMM over the 3-d PCA vectors of one medical center, plus the
// per-cluster lesion prevalence once estimated.
struct ClusterModel {
    int center_id = -1;
    int n_components = 6;
    std::vector<double> weights;
    std::vector<Vec3> means;
    std::vector<Mat3> covariances;
    std::vector<double> pi_l; // empty until estimate_pi fills it

    void validate() const {
        double ws = 0;
        for (double w : weights) ws += w;
        if (std::abs(ws - 1.0) > 1e-9)
            throw std::runtime_error("cluster model weights sum to " + std::to_string(ws));
    }
};

struct GmmFitResult {
    ClusterModel model;
    std::vector<double> loglik_history; // mean log-likelihood per EM iteration
    int iterations = 0;
    bool converged = false;
};

namespace detail {

struct GaussPrep {
    Mat3 inv;
    double log_norm; // -0.5*(d*log(2pi) + log|Sigma|)
};

inline GaussPrep prep_gauss(const Mat3& cov) {
    Eigen::LLT<Mat3> llt(cov);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("covariance not positive definite");
    Mat3 L = llt.matrixL();
    double logdet = 2.0 * std::log(L(0, 0) * L(1, 1) * L(2, 2));
    GaussPrep g;
    g.inv = llt.solve(Mat3::Identity());
    g.log_norm = -0.5 * (3.0 * std::log(2.0 * 3.14159265358979323846) + logdet);
    return g;
}

inline double log_sum_exp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    if (!std::isfinite(mx)) return mx;
    double s = 0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

} // namespace detail

// Log responsibilities (normalized) of one vector under the model.
inline std::vector<double> responsibilities(const Vec3& v, const ClusterModel& m) {
    if (!v.allFinite()) throw std::invalid_argument("responsibilities: non-finite vector");
    std::vector<double> lp(m.n_components);
    for (int g = 0; g < m.n_components; ++g) {
        auto gp = detail::prep_gauss(m.covariances[g]);
        Vec3 d = v - m.means[g];
        lp[g] = std::log(std::max(m.weights[g], 1e-300)) + gp.log_norm -
                0.5 * d.dot(gp.inv * d);
    }
    double lse = detail::log_sum_exp(lp);
    std::vector<double> r(m.n_components);
    for (int g = 0; g < m.n_components; ++g) r[g] = std::exp(lp[g] - lse);
    return r;
}

// Argmax of the posterior responsibilities; ties break to the lowest cluster id.
inline int assign_cluster(const Vec3& v, const ClusterModel& m) {
    auto r = responsibilities(v, m);
    int best = 0;
    for (int g = 1; g < m.n_components; ++g)
        if (r[g] > r[best]) best = g;
    return best;
}

// EM fit with k-means++ initialization, covariance floor `reg`, and
// convergence on the mean log-likelihood improvement.
inline GmmFitResult fit_gmm(const std::vector<Vec3>& vectors, int n_components = 6,
                            std::uint64_t seed = 0, double tol = 1e-4, int max_iter = 200,
                            double reg = 1e-6) {
    const int n = static_cast<int>(vectors.size());
    if (n < n_components)
        throw std::invalid_argument("fit_gmm: " + std::to_string(n) + " vectors for " +
                                    std::to_string(n_components) + " components");
    for (const auto& v : vectors)
        if (!v.allFinite()) throw std::invalid_argument("fit_gmm: non-finite vector");

    GmmFitResult out;
    ClusterModel& m = out.model;
    m.n_components = n_components;

    // init from k-means
    auto km = kmeans(vectors, n_components, seed, 10);
    Vec3 gmean = Vec3::Zero();
    for (const auto& v : vectors) gmean += v;
    gmean /= n;
    Mat3 gcov = Mat3::Zero();
    for (const auto& v : vectors) gcov += (v - gmean) * (v - gmean).transpose();
    gcov = gcov / n + reg * Mat3::Identity();
    std::vector<int> counts(n_components, 0);
    for (int a : km.assignment) ++counts[a];
    for (int g = 0; g < n_components; ++g) {
        m.weights.push_back(std::max(counts[g], 1) / static_cast<double>(n));
        m.means.push_back(km.centroids[g]);
        m.covariances.push_back(gcov);
    }
    {
        double ws = 0;
        for (double w : m.weights) ws += w;
        for (double& w : m.weights) w /= ws;
    }

    std::vector<std::vector<double>> resp(n, std::vector<double>(n_components));
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < max_iter; ++iter) {
        // E step under current parameters; records the current log-likelihood
        std::vector<detail::GaussPrep> preps;
        for (int g = 0; g < n_components; ++g) preps.push_back(detail::prep_gauss(m.covariances[g]));
        double ll = 0;
        std::vector<double> lp(n_components);
        for (int i = 0; i < n; ++i) {
            for (int g = 0; g < n_components; ++g) {
                Vec3 d = vectors[i] - m.means[g];
                lp[g] = std::log(std::max(m.weights[g], 1e-300)) + preps[g].log_norm -
                        0.5 * d.dot(preps[g].inv * d);
            }
            double lse = detail::log_sum_exp(lp);
            ll += lse;
            for (int g = 0; g < n_components; ++g) resp[i][g] = std::exp(lp[g] - lse);
        }
        ll /= n;
        out.loglik_history.push_back(ll);
        out.iterations = iter + 1;
        if (ll - prev_ll < tol && iter > 0) {
            out.converged = true;
            break;
        }
        prev_ll = ll;

        // M step
        for (int g = 0; g < n_components; ++g) {
            double nk = 0;
            Vec3 mu = Vec3::Zero();
            for (int i = 0; i < n; ++i) {
                nk += resp[i][g];
                mu += resp[i][g] * vectors[i];
            }
            if (nk < 1e-12) {
                // dead component: keep its parameters, floor its weight
                m.weights[g] = 1e-12;
                continue;
            }
            mu /= nk;
            Mat3 cov = Mat3::Zero();
            for (int i = 0; i < n; ++i) {
                Vec3 d = vectors[i] - mu;
                cov += resp[i][g] * (d * d.transpose());
            }
            m.weights[g] = nk / n;
            m.means[g] = mu;
            m.covariances[g] = cov / nk + reg * Mat3::Identity();
        }
        double ws = 0;
        for (double w : m.weights) ws += w;
        for (double& w : m.weights) w /= ws;
    }

    // canonical component order for stable artifacts
    std::vector<int> order(n_components);
    for (int g = 0; g < n_components; ++g) order[g] = g;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (int i = 0; i < 3; ++i) {
            if (m.means[a][i] != m.means[b][i]) return m.means[a][i] < m.means[b][i];
        }
        return a < b;
    });
    ClusterModel sorted = m;
    for (int g = 0; g < n_components; ++g) {
        sorted.weights[g] = m.weights[order[g]];
        sorted.means[g] = m.means[order[g]];
        sorted.covariances[g] = m.covariances[order[g]];
    }
    out.model = sorted;
    out.model.validate();
    return out;
}

// Per-cluster lesion prevalence from class-wise assignment ratios:
// pi_l[g] = r_pos[g] / (r_pos[g] + r_neg[g]), with 0/0 defined as 0.
inline std::vector<double> estimate_pi(const std::vector<double>& r_pos,
                                       const std::vector<double>& r_neg) {
    if (r_pos.size() != r_neg.size())
        throw std::invalid_argument("estimate_pi: ratio vectors differ in length");
    double sp = 0, sn = 0;
    for (size_t g = 0; g < r_pos.size(); ++g) {
        if (r_pos[g] < 0 || r_neg[g] < 0)
            throw std::invalid_argument("estimate_pi: negative ratio at cluster " +
                                        std::to_string(g));
        sp += r_pos[g];
        sn += r_neg[g];
    }
    if (sp > 1.0 + 1e-9 || sn > 1.0 + 1e-9)
        throw std::invalid_argument("estimate_pi: ratio vector sums exceed 1");
    std::vector<double> pi(r_pos.size());
    for (size_t g = 0; g < r_pos.size(); ++g) {
        double denom = r_pos[g] + r_neg[g];
        pi[g] = denom > 0 ? r_pos[g] / denom : 0.0;
    }
    return pi;
}

// --- serialization -------------------------------------------------------------

inline nlohmann::json gmm_to_json(const ClusterModel& m) {
    nlohmann::json jm = nlohmann::json::array(), jc = nlohmann::json::array();
    for (const auto& mu : m.means) jm.push_back({mu[0], mu[1], mu[2]});
    for (const auto& cov : m.covariances) {
        nlohmann::json rows = nlohmann::json::array();
        for (int r = 0; r < 3; ++r) rows.push_back({cov(r, 0), cov(r, 1), cov(r, 2)});
        jc.push_back(rows);
    }
    return {{"version", 1},          {"center_id", m.center_id},
            {"n_components", m.n_components}, {"weights", m.weights},
            {"means", jm},           {"covariances", jc},
            {"pi_l", m.pi_l}};
}

inline ClusterModel gmm_from_json(const nlohmann::json& j) {
    ClusterModel m;
    m.center_id = j.at("center_id").get<int>();
    m.n_components = j.at("n_components").get<int>();
    m.weights = j.at("weights").get<std::vector<double>>();
    for (const auto& mu : j.at("means")) m.means.push_back(Vec3(mu[0], mu[1], mu[2]));
    for (const auto& cov : j.at("covariances")) {
        Mat3 c;
        for (int r = 0; r < 3; ++r)
            for (int q = 0; q < 3; ++q) c(r, q) = cov[r][q];
        m.covariances.push_back(c);
    }
    m.pi_l = j.at("pi_l").get<std::vector<double>>();
    return m;
}

} // namespace cofcn
