#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cofcn/tensor.hpp"

namespace cofcn {

// Plain-value counterparts of the training losses. The autograd versions in
// autograd.hpp drive optimization; these define the numbers.

// mean over pixels of -[w_l*y*log(p) + (1-y)*log(1-p)], p clamped to
// [1e-7, 1-1e-7]
template <typename T>
double weighted_bce(const Tensor<T>& pred, const Tensor<T>& target, double w_l) {
    if (pred.dims != target.dims)
        throw std::invalid_argument("weighted_bce: shape mismatch " + pred.shape_str() + " vs " +
                                    target.shape_str());
    constexpr double eps = 1e-7;
    double s = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        double p = std::clamp(static_cast<double>(pred[i]), eps, 1.0 - eps);
        double y = target[i];
        s += -(w_l * y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    return s / static_cast<double>(pred.numel());
}

// BCE between a probability s and a soft target pi, on the logit scale
inline double bce_logit(double logit, double pi) {
    if (!(pi >= 0.0 && pi <= 1.0)) throw std::invalid_argument("pi outside [0,1]");
    double softplus = logit >= 0 ? logit + std::log1p(std::exp(-logit))
                                 : std::log1p(std::exp(logit));
    return softplus - pi * logit;
}

// BCE(sigmoid(mean(cond_map)), pi) where the mean runs over all k*H*W entries
template <typename T>
double pretext_loss(const Tensor<T>& cond_map, double pi) {
    if (cond_map.empty()) throw std::invalid_argument("pretext_loss: empty cond_map");
    double s = 0;
    for (std::int64_t i = 0; i < cond_map.numel(); ++i) {
        double v = cond_map[i];
        if (!std::isfinite(v)) throw std::invalid_argument("pretext_loss: non-finite cond_map");
        s += v;
    }
    return bce_logit(s / static_cast<double>(cond_map.numel()), pi);
}

template <typename T>
double total_loss(const Tensor<T>& seg_prob, const Tensor<T>& query_mask,
                  const Tensor<T>& cond_map, double pi, double w_l, double w) {
    return weighted_bce(seg_prob, query_mask, w_l) + w * pretext_loss(cond_map, pi);
}

} // namespace cofcn
