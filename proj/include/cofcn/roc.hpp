#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cofcn {

// Midranks of v (1-based, ties get the average rank).
inline std::vector<double> midranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline void split_by_label(const std::vector<double>& scores, const std::vector<int>& labels,
                           std::vector<double>& pos, std::vector<double>& neg) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("scores and labels differ in length");
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw std::invalid_argument("non-finite score");
        (labels[i] ? pos : neg).push_back(scores[i]);
    }
    if (pos.empty() || neg.empty())
        throw std::invalid_argument("need at least one positive and one negative label");
}

// DeLong structural components. auc equals the Mann-Whitney statistic with the
// midrank tie convention.
struct DelongComponents {
    double auc = 0;
    std::vector<double> v10; // one per positive
    std::vector<double> v01; // one per negative
};

inline DelongComponents delong_components(const std::vector<double>& pos,
                                          const std::vector<double>& neg) {
    const size_t m = pos.size(), n = neg.size();
    std::vector<double> all(pos);
    all.insert(all.end(), neg.begin(), neg.end());
    auto tz = midranks(all);
    auto tx = midranks(pos);
    auto ty = midranks(neg);
    DelongComponents c;
    double sum_tz_pos = 0;
    for (size_t i = 0; i < m; ++i) sum_tz_pos += tz[i];
    c.auc = (sum_tz_pos - static_cast<double>(m) * (m + 1) / 2.0) /
            (static_cast<double>(m) * static_cast<double>(n));
    c.v10.resize(m);
    c.v01.resize(n);
    for (size_t i = 0; i < m; ++i) c.v10[i] = (tz[i] - tx[i]) / static_cast<double>(n);
    for (size_t j = 0; j < n; ++j) c.v01[j] = 1.0 - (tz[m + j] - ty[j]) / static_cast<double>(m);
    return c;
}

inline double sample_cov(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    if (n < 2) return 0.0;
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double s = 0;
    for (size_t i = 0; i < n; ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / (n - 1);
}

} // namespace detail

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<double> pos, neg;
    detail::split_by_label(scores, labels, pos, neg);
    return detail::delong_components(pos, neg).auc;
}

// Inverse standard normal CDF (Wichura's PPND16 rational approximations).
inline double qnorm(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("qnorm: p outside (0,1)");
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                     6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
                   1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
                 1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
               (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                     3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
                   5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
                 4.2313330701600911252e1) * r + 1.0);
    }
    double r = q < 0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                    2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
                  3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
                4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
              (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                    1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                  6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
                2.05319162663775882187e0) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                    1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                  2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
                5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
              (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                    1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                  1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                5.99832206555887937690e-1) * r + 1.0);
    }
    return q < 0 ? -val : val;
}

inline double pnorm(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

struct RocResult {
    double auc = 0;
    double delong_variance = 0;
    double ci_lo = 0;
    double ci_hi = 0;
    double ci_level = 0.95;
    int n_pos = 0;
    int n_neg = 0;
    std::optional<double> pauc_spec90;
    std::optional<double> pauc_spec90_normalized;

    // the paper-style "0.981 ± 0.011" rendering (CI half-width)
    std::string format() const {
        char buf[64];
        double half = qnorm((1.0 + ci_level) / 2.0) * std::sqrt(delong_variance);
        std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", auc, half);
        return buf;
    }
};

// AUC with DeLong variance and normal-quantile CI, clipped to [0,1].
inline RocResult delong_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                           double level = 0.95) {
    std::vector<double> pos, neg;
    detail::split_by_label(scores, labels, pos, neg);
    auto c = detail::delong_components(pos, neg);
    const double s10 = detail::sample_cov(c.v10, c.v10);
    const double s01 = detail::sample_cov(c.v01, c.v01);
    RocResult r;
    r.auc = c.auc;
    r.delong_variance = s10 / static_cast<double>(pos.size()) +
                        s01 / static_cast<double>(neg.size());
    r.ci_level = level;
    const double z = qnorm((1.0 + level) / 2.0);
    const double sd = std::sqrt(std::max(r.delong_variance, 0.0));
    r.ci_lo = std::max(0.0, c.auc - z * sd);
    r.ci_hi = std::min(1.0, c.auc + z * sd);
    r.n_pos = static_cast<int>(pos.size());
    r.n_neg = static_cast<int>(neg.size());
    return r;
}

// Significance codes from the two-sided p-value:
// *** < 0.001 <= ** < 0.01 <= * < 0.05 <= . < 0.1
inline std::string sig_code(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    if (p < 0.1) return ".";
    return "";
}

struct DelongTestResult {
    double auc_a = 0;
    double auc_b = 0;
    double delta_auc_percent = 0; // 100 * (auc_a - auc_b), percentage points
    double p_value = 1;
    std::string code;
};

// Two-sided z-test on the difference of two correlated AUCs over the same
// paired labels, using the DeLong covariance of the structural components.
inline DelongTestResult delong_test(const std::vector<double>& scores_a,
                                    const std::vector<double>& scores_b,
                                    const std::vector<int>& labels) {
    if (scores_a.size() != scores_b.size())
        throw std::invalid_argument("delong_test: score vectors differ in length");
    std::vector<double> pos_a, neg_a, pos_b, neg_b;
    detail::split_by_label(scores_a, labels, pos_a, neg_a);
    detail::split_by_label(scores_b, labels, pos_b, neg_b);
    auto ca = detail::delong_components(pos_a, neg_a);
    auto cb = detail::delong_components(pos_b, neg_b);
    const double m = static_cast<double>(pos_a.size());
    const double n = static_cast<double>(neg_a.size());
    const double var = (detail::sample_cov(ca.v10, ca.v10) + detail::sample_cov(cb.v10, cb.v10) -
                        2.0 * detail::sample_cov(ca.v10, cb.v10)) / m +
                       (detail::sample_cov(ca.v01, ca.v01) + detail::sample_cov(cb.v01, cb.v01) -
                        2.0 * detail::sample_cov(ca.v01, cb.v01)) / n;
    DelongTestResult r;
    r.auc_a = ca.auc;
    r.auc_b = cb.auc;
    r.delta_auc_percent = 100.0 * (ca.auc - cb.auc);
    if (var <= 0.0 || !(std::sqrt(var) > 0.0)) {
        r.p_value = ca.auc == cb.auc ? 1.0 : 0.0;
    } else {
        const double z = (ca.auc - cb.auc) / std::sqrt(var);
        r.p_value = std::erfc(std::abs(z) / std::sqrt(2.0));
    }
    r.code = sig_code(r.p_value);
    return r;
}

// --- ROC polyline and partial AUC ----------------------------------------------

struct RocPoint {
    double fpr, tpr;
};

// Vertices of the empirical ROC curve, one step per distinct score value, tie
// groups advancing diagonally (consistent with the midrank AUC).
inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
    std::vector<double> pos, neg;
    detail::split_by_label(scores, labels, pos, neg);
    std::vector<std::pair<double, int>> sorted;
    for (size_t i = 0; i < scores.size(); ++i) sorted.push_back({scores[i], labels[i]});
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<RocPoint> pts{{0.0, 0.0}};
    const double m = static_cast<double>(pos.size());
    const double n = static_cast<double>(neg.size());
    size_t i = 0;
    double tp = 0, fp = 0;
    while (i < sorted.size()) {
        size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1].first == sorted[i].first) ++j;
        for (size_t k = i; k <= j; ++k) (sorted[k].second ? tp : fp) += 1.0;
        pts.push_back({fp / n, tp / m});
        i = j + 1;
    }
    return pts;
}

struct PartialAucResult {
    double value = 0;      // raw area over the requested specificity range
    double normalized = 0; // McClish transform into [0.5, 1]
};

// Trapezoidal area under the ROC restricted to specificity in
// [spec_lo, spec_hi], i.e. FPR in [1-spec_hi, 1-spec_lo], with linear
// interpolation at the range endpoints. Reported un-normalized.
inline PartialAucResult pauc_full(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double spec_lo = 0.90,
                                  double spec_hi = 1.00) {
    if (!(spec_lo >= 0.0 && spec_hi <= 1.0 && spec_lo < spec_hi))
        throw std::invalid_argument("pauc: empty or invalid specificity range");
    const double flo = 1.0 - spec_hi;
    const double fhi = 1.0 - spec_lo;
    auto pts = roc_curve(scores, labels);
    double area = 0;
    for (size_t s = 0; s + 1 < pts.size(); ++s) {
        double x0 = pts[s].fpr, y0 = pts[s].tpr;
        double x1 = pts[s + 1].fpr, y1 = pts[s + 1].tpr;
        double a = std::max(x0, flo), b = std::min(x1, fhi);
        if (a >= b) continue;
        auto lerp = [&](double x) {
            return x1 > x0 ? y0 + (y1 - y0) * (x - x0) / (x1 - x0) : y1;
        };
        area += (b - a) * (lerp(a) + lerp(b)) / 2.0;
    }
    PartialAucResult r;
    r.value = area;
    const double width = fhi - flo;
    const double min_area = (fhi * fhi - flo * flo) / 2.0;
    r.normalized = width > min_area
                       ? 0.5 * (1.0 + (area - min_area) / (width - min_area))
                       : 1.0;
    return r;
}

inline double pauc(const std::vector<double>& scores, const std::vector<int>& labels,
                   double spec_lo = 0.90, double spec_hi = 1.00) {
    return pauc_full(scores, labels, spec_lo, spec_hi).value;
}

} // namespace cofcn
