#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <vector>

#include "cofcn/common.hpp"

namespace cofcn {

// PCA with orthonormal component rows, fitted on 8-d embedding vectors and
// projecting to 3-d.
struct PcaModel {
    std::vector<double> mean;                       // in_dim
    std::vector<std::vector<double>> components;    // out_dim rows, orthonormal
    std::vector<double> explained_variance;         // non-increasing

    int in_dim() const { return static_cast<int>(mean.size()); }
    int out_dim() const { return static_cast<int>(components.size()); }

    std::vector<double> project(const std::vector<double>& v) const {
        if (static_cast<int>(v.size()) != in_dim())
            throw std::invalid_argument("project: vector dim " + std::to_string(v.size()) +
                                        " != " + std::to_string(in_dim()));
        std::vector<double> out(components.size());
        for (size_t r = 0; r < components.size(); ++r) {
            double s = 0;
            for (size_t i = 0; i < mean.size(); ++i) s += components[r][i] * (v[i] - mean[i]);
            out[r] = s;
        }
        return out;
    }

    std::vector<double> reconstruct(const std::vector<double>& p) const {
        if (p.size() != components.size()) throw std::invalid_argument("reconstruct: bad dim");
        std::vector<double> out(mean);
        for (size_t r = 0; r < components.size(); ++r)
            for (size_t i = 0; i < mean.size(); ++i) out[i] += components[r][i] * p[r];
        return out;
    }
};

inline PcaModel fit_pca(const std::vector<std::vector<double>>& vectors, int dims = 3) {
    if (vectors.empty()) throw std::invalid_argument("fit_pca: no vectors");
    const int d = static_cast<int>(vectors[0].size());
    const int n = static_cast<int>(vectors.size());
    if (dims < 1 || dims > d) throw std::invalid_argument("fit_pca: bad target dims");
    if (n < dims)
        throw std::invalid_argument("fit_pca: need at least " + std::to_string(dims) +
                                    " vectors, got " + std::to_string(n));
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(vectors[i].size()) != d)
            throw std::invalid_argument("fit_pca: inconsistent vector dims");
        for (int j = 0; j < d; ++j) X(i, j) = vectors[i][j];
    }
    Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    Eigen::MatrixXd cov = (X.transpose() * X) / std::max(1, n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw std::runtime_error("fit_pca: eigensolver failed");

    // eigenvalues ascending from Eigen; take the top `dims` in descending order
    Eigen::VectorXd evals = es.eigenvalues();
    Eigen::MatrixXd evecs = es.eigenvectors();
    const double lmax = std::max(evals.maxCoeff(), 0.0);
    int rank = 0;
    for (int i = 0; i < d; ++i)
        if (evals[i] > std::max(lmax * 1e-12, 1e-300)) ++rank;
    if (rank < dims)
        throw std::invalid_argument("fit_pca: data rank " + std::to_string(rank) +
                                    " is below requested " + std::to_string(dims) +
                                    " dimensions");

    PcaModel model;
    model.mean.assign(mu.data(), mu.data() + d);
    for (int r = 0; r < dims; ++r) {
        int src = d - 1 - r;
        Eigen::VectorXd comp = evecs.col(src);
        // deterministic sign: largest-magnitude entry positive
        int arg = 0;
        for (int i = 1; i < d; ++i)
            if (std::abs(comp[i]) > std::abs(comp[arg])) arg = i;
        if (comp[arg] < 0) comp = -comp;
        model.components.emplace_back(comp.data(), comp.data() + d);
        model.explained_variance.push_back(std::max(evals[src], 0.0));
    }
    return model;
}

inline nlohmann::json pca_to_json(const PcaModel& m) {
    return {{"version", 1},
            {"mean", m.mean},
            {"components", m.components},
            {"explained_variance", m.explained_variance}};
}

inline PcaModel pca_from_json(const nlohmann::json& j) {
    PcaModel m;
    m.mean = j.at("mean").get<std::vector<double>>();
    m.components = j.at("components").get<std::vector<std::vector<double>>>();
    m.explained_variance = j.at("explained_variance").get<std::vector<double>>();
    return m;
}

inline void save_pca(const fs::path& path, const PcaModel& m) {
    write_text_file(path, pca_to_json(m).dump(2) + "\n");
}

inline PcaModel load_pca(const fs::path& path) {
    return pca_from_json(nlohmann::json::parse(read_text_file(path)));
}

} // namespace cofcn
