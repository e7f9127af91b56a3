#include <catch_amalgamated.hpp>

#include <random>

#include "cofcn/common.hpp"
#include "cofcn/roc.hpp"

using namespace cofcn;
using Catch::Matchers::WithinAbs;

namespace {

// oracle: enumerate all (positive, negative) pairs
double pair_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0, ties = 0;
    std::int64_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1;
            else if (scores[i] == scores[j]) ties += 1;
        }
    }
    return (wins + 0.5 * ties) / static_cast<double>(pairs);
}

// oracle: piecewise-constant integration of the tie-free empirical ROC over an
// FPR window (the dense-threshold limit)
double step_pauc(const std::vector<double>& scores, const std::vector<int>& labels, double flo,
                 double fhi) {
    std::vector<double> pos, neg;
    for (size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
    std::sort(neg.rbegin(), neg.rend());
    const double m = static_cast<double>(pos.size());
    const double nn = static_cast<double>(neg.size());
    double area = 0;
    for (size_t j = 1; j <= neg.size(); ++j) {
        double x0 = (j - 1) / nn, x1 = j / nn;
        double a = std::max(x0, flo), b = std::min(x1, fhi);
        if (a >= b) continue;
        double tpr = 0;
        for (double p : pos) tpr += p >= neg[j - 1] ? 1 : 0;
        area += (b - a) * (tpr / m);
    }
    return area;
}

std::pair<std::vector<double>, std::vector<int>> random_instance(Rng& rng, int n_pos, int n_neg,
                                                                 double sep) {
    std::normal_distribution<double> dp(sep, 1.0), dn(0.0, 1.0);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < n_pos; ++i) {
        scores.push_back(dp(rng));
        labels.push_back(1);
    }
    for (int i = 0; i < n_neg; ++i) {
        scores.push_back(dn(rng));
        labels.push_back(0);
    }
    return {scores, labels};
}

} // namespace

TEST_CASE("roc_auc basic cases") {
    CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
    CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {0, 0}), std::invalid_argument);
}

TEST_CASE("roc_auc equals pair enumeration on random instances") {
    Rng rng(42);
    std::uniform_int_distribution<int> usize(1, 15);
    std::uniform_int_distribution<int> uscore(0, 9);
    for (int rep = 0; rep < 1000; ++rep) {
        int np = usize(rng), nn = usize(rng);
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i = 0; i < np + nn; ++i) {
            scores.push_back(uscore(rng) / 10.0); // coarse grid forces ties
            labels.push_back(i < np ? 1 : 0);
        }
        CHECK(roc_auc(scores, labels) == pair_auc(scores, labels));
    }
}

TEST_CASE("roc_auc complement and monotone-transform invariance") {
    Rng rng(9);
    for (int rep = 0; rep < 50; ++rep) {
        auto [scores, labels] = random_instance(rng, 8, 8, 0.7);
        std::vector<double> neg_scores, exp_scores;
        for (double s : scores) {
            neg_scores.push_back(-s);
            exp_scores.push_back(std::exp(2.0 * s) + 3.0);
        }
        CHECK_THAT(roc_auc(scores, labels) + roc_auc(neg_scores, labels), WithinAbs(1.0, 1e-12));
        CHECK(roc_auc(scores, labels) == roc_auc(exp_scores, labels));
    }
}

TEST_CASE("delong_ci degenerate and variance vs bootstrap") {
    auto r = delong_ci({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
    CHECK(r.auc == 1.0);
    CHECK(r.delong_variance == 0.0);
    CHECK(r.ci_lo == 1.0);
    CHECK(r.ci_hi == 1.0);

    Rng rng(123);
    auto [scores, labels] = random_instance(rng, 20, 30, 1.2);
    auto ci = delong_ci(scores, labels);
    // stratified bootstrap oracle
    std::vector<double> pos, neg;
    for (size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
    Rng brng(7);
    std::uniform_int_distribution<size_t> up(0, pos.size() - 1), un(0, neg.size() - 1);
    std::vector<double> aucs;
    for (int rep = 0; rep < 4000; ++rep) {
        std::vector<double> s;
        std::vector<int> l;
        for (size_t i = 0; i < pos.size(); ++i) {
            s.push_back(pos[up(brng)]);
            l.push_back(1);
        }
        for (size_t i = 0; i < neg.size(); ++i) {
            s.push_back(neg[un(brng)]);
            l.push_back(0);
        }
        aucs.push_back(roc_auc(s, l));
    }
    double mean = 0;
    for (double a : aucs) mean += a;
    mean /= aucs.size();
    double var = 0;
    for (double a : aucs) var += (a - mean) * (a - mean);
    var /= (aucs.size() - 1);
    CHECK(std::abs(ci.delong_variance - var) <= 0.15 * var);
}

TEST_CASE("delong_ci width shrinks with sample size") {
    double last = 1e9;
    for (int n : {50, 200, 800}) {
        Rng rng(1000 + n);
        auto [scores, labels] = random_instance(rng, n / 2, n / 2, 1.0);
        auto ci = delong_ci(scores, labels);
        double width = ci.ci_hi - ci.ci_lo;
        CHECK(width < last);
        last = width;
    }
}

TEST_CASE("delong_ci format mirrors the mean-pm style") {
    Rng rng(4);
    auto [scores, labels] = random_instance(rng, 25, 25, 1.5);
    auto ci = delong_ci(scores, labels);
    auto text = ci.format();
    CHECK(text.find(" ± ") != std::string::npos);
    CHECK(text.size() >= 11);
}

TEST_CASE("delong_test identical curves") {
    Rng rng(21);
    auto [scores, labels] = random_instance(rng, 10, 10, 0.8);
    auto t = delong_test(scores, scores, labels);
    CHECK(t.delta_auc_percent == 0.0);
    CHECK(t.p_value == 1.0);
    CHECK(t.code == "");
}

TEST_CASE("delong_test antisymmetry") {
    Rng rng(22);
    auto [sa, labels] = random_instance(rng, 15, 15, 1.0);
    std::vector<double> sb;
    std::normal_distribution<double> d(0.0, 0.3);
    for (double s : sa) sb.push_back(s + d(rng));
    auto t1 = delong_test(sa, sb, labels);
    auto t2 = delong_test(sb, sa, labels);
    CHECK(t1.delta_auc_percent == -t2.delta_auc_percent);
    CHECK(t1.p_value == t2.p_value);
}

TEST_CASE("delong_test separates strong from random scores") {
    Rng rng(31);
    std::vector<double> strong, random_scores;
    std::vector<int> labels;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        bool pos = i < 100;
        labels.push_back(pos);
        strong.push_back(pos ? 2.0 + u(rng) : u(rng)); // disjoint support
        random_scores.push_back(u(rng));
    }
    auto t = delong_test(strong, random_scores, labels);
    CHECK(t.p_value < 0.001);
    CHECK(t.code == "***");
}

TEST_CASE("significance codes at the paper thresholds") {
    CHECK(sig_code(0.0005) == "***");
    CHECK(sig_code(0.005) == "**");
    CHECK(sig_code(0.03) == "*");
    CHECK(sig_code(0.07) == ".");
    CHECK(sig_code(0.5) == "");
    CHECK(sig_code(1.0) == "");
    // boundary semantics: [0.001, 0.01) is **
    CHECK(sig_code(0.001) == "**");
    CHECK(sig_code(0.01) == "*");
    CHECK(sig_code(0.05) == ".");
    CHECK(sig_code(0.1) == "");
}

TEST_CASE("pauc perfect classifier and full range") {
    std::vector<double> scores{0.9, 0.8, 0.2, 0.1};
    std::vector<int> labels{1, 1, 0, 0};
    // exact up to the 1-ulp representation of the range width
    CHECK_THAT(pauc(scores, labels, 0.90, 1.00), WithinAbs(0.10, 1e-15));

    Rng rng(55);
    for (int rep = 0; rep < 20; ++rep) {
        auto [s, l] = random_instance(rng, 12, 12, 0.6);
        CHECK_THAT(pauc(s, l, 0.0, 1.0), WithinAbs(roc_auc(s, l), 1e-9));
        CHECK(pauc(s, l, 0.9, 1.0) <= 0.1 + 1e-12);
    }
    CHECK_THROWS_AS(pauc(scores, labels, 0.9, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(pauc(scores, labels, 0.95, 0.9), std::invalid_argument);
}

TEST_CASE("pauc matches integration oracle on a random instance") {
    Rng rng(77);
    auto [scores, labels] = random_instance(rng, 100, 100, 0.9);
    double got = pauc(scores, labels, 0.90, 1.00);
    double want = step_pauc(scores, labels, 0.0, 0.1);
    CHECK_THAT(got, WithinAbs(want, 1e-6));
    // and over a wider range
    CHECK_THAT(pauc(scores, labels, 0.5, 1.0),
               WithinAbs(step_pauc(scores, labels, 0.0, 0.5), 1e-6));
}

TEST_CASE("pauc normalization stays within [0.5, 1] for better-than-chance data") {
    Rng rng(78);
    auto [scores, labels] = random_instance(rng, 50, 50, 1.5);
    auto r = pauc_full(scores, labels, 0.90, 1.00);
    CHECK(r.normalized >= 0.5);
    CHECK(r.normalized <= 1.0);
}

TEST_CASE("qnorm matches known quantiles") {
    CHECK_THAT(qnorm(0.975), WithinAbs(1.959963984540054, 1e-12));
    CHECK_THAT(qnorm(0.5), WithinAbs(0.0, 1e-15));
    CHECK_THAT(qnorm(0.025), WithinAbs(-1.959963984540054, 1e-12));
    CHECK_THAT(qnorm(0.995), WithinAbs(2.5758293035489004, 1e-12));
    CHECK_THROWS_AS(qnorm(0.0), std::invalid_argument);
}
