#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cofcn/tensor.hpp"

namespace cofcn::nn {

using cofcn::Tensor;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reverse-mode autodiff node. Graphs are built define-by-run; parameters are
// long-lived nodes whose gradients accumulate across backward calls until
// zero_grad.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Node() = default;
    explicit Node(Tensor<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

    void ensure_grad() {
        if (grad.dims != value.dims) {
            grad = Tensor<T>(value.dims);
        }
    }
    void zero_grad() {
        if (!grad.empty()) grad.zero();
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> v, bool requires_grad = false) {
    return std::make_shared<Node<T>>(std::move(v), requires_grad);
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> bw) {
    auto out = std::make_shared<Node<T>>(std::move(value));
    for (auto& p : parents)
        if (p->requires_grad) out->requires_grad = true;
    if (out->requires_grad) {
        out->parents = std::move(parents);
        out->backward_fn = std::move(bw);
    }
    return out;
}

// Runs reverse-mode accumulation from a scalar root. `seed` scales the root
// gradient, which lets batch loops accumulate mean gradients directly.
template <typename T>
void backward(const Var<T>& root, T seed = T(1)) {
    if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* n : topo) n->ensure_grad();
    root->grad[0] += seed;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// convolution (stride 1; kernel 3x3 pad 1 or 1x1 pad 0) via im2col + GEMM

template <typename T>
void im2col3(const T* x, int C, int H, int W, RowMat<T>& col) {
    col.resize(C * 9, static_cast<Eigen::Index>(H) * W);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < C * 9; ++r) {
        int c = r / 9;
        int dy = (r / 3) % 3 - 1;
        int dx = r % 3 - 1;
        T* dst = col.data() + static_cast<std::int64_t>(r) * H * W;
        const T* src_plane = x + static_cast<std::int64_t>(c) * H * W;
        for (int oh = 0; oh < H; ++oh) {
            T* drow = dst + static_cast<std::int64_t>(oh) * W;
            int ih = oh + dy;
            if (ih < 0 || ih >= H) {
                std::fill(drow, drow + W, T(0));
                continue;
            }
            const T* srow = src_plane + static_cast<std::int64_t>(ih) * W;
            int lo = std::max(0, -dx);
            int hi = W - std::max(0, dx); // valid ow in [lo, hi)
            if (lo > 0) drow[0] = T(0);
            for (int ow = lo; ow < hi; ++ow) drow[ow] = srow[ow + dx];
            if (hi < W) drow[W - 1] = T(0);
        }
    }
}

template <typename T>
void col2im3_accum(const RowMat<T>& col, int C, int H, int W, T* dx) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        T* dplane = dx + static_cast<std::int64_t>(c) * H * W;
        for (int k = 0; k < 9; ++k) {
            int r = c * 9 + k;
            int dy = k / 3 - 1;
            int dx_ = k % 3 - 1;
            const T* src = col.data() + static_cast<std::int64_t>(r) * H * W;
            for (int oh = 0; oh < H; ++oh) {
                int ih = oh + dy;
                if (ih < 0 || ih >= H) continue;
                const T* srow = src + static_cast<std::int64_t>(oh) * W;
                T* drow = dplane + static_cast<std::int64_t>(ih) * W;
                int lo = std::max(0, -dx_);
                int hi = W - std::max(0, dx_);
                for (int ow = lo; ow < hi; ++ow) drow[ow + dx_] += srow[ow];
            }
        }
    }
}

// GEMM helpers with a fixed block partition, so the threading layout never
// changes the per-element accumulation order. They accept Eigen expressions
// (maps, transposes) without materializing them.

// C (+)= A * B, parallel over fixed column blocks of C
template <typename T, typename DA, typename DB>
void gemm_cols_into(Eigen::Ref<RowMat<T>> C, const Eigen::MatrixBase<DA>& A,
                    const Eigen::MatrixBase<DB>& B, bool accumulate) {
    const Eigen::Index block = 2048;
    const Eigen::Index nblocks = (B.cols() + block - 1) / block;
#pragma omp parallel for schedule(static)
    for (Eigen::Index bi = 0; bi < nblocks; ++bi) {
        Eigen::Index c0 = bi * block;
        Eigen::Index nc = std::min(block, B.cols() - c0);
        if (accumulate)
            C.middleCols(c0, nc).noalias() += A.derived() * B.derived().middleCols(c0, nc);
        else
            C.middleCols(c0, nc).noalias() = A.derived() * B.derived().middleCols(c0, nc);
    }
}

template <typename DA, typename DB, typename T>
void gemm_blocked(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B, RowMat<T>& C) {
    C.resize(A.rows(), B.cols());
    gemm_cols_into<T>(C, A, B, false);
}

// C += A * B, parallel over fixed row blocks of C (for wide-K reductions)
template <typename T, typename DA, typename DB>
void gemm_rows_accum(Eigen::Ref<RowMat<T>> C, const Eigen::MatrixBase<DA>& A,
                     const Eigen::MatrixBase<DB>& B) {
    const Eigen::Index block = 16;
    const Eigen::Index nblocks = (C.rows() + block - 1) / block;
#pragma omp parallel for schedule(static)
    for (Eigen::Index bi = 0; bi < nblocks; ++bi) {
        Eigen::Index r0 = bi * block;
        Eigen::Index nr = std::min(block, C.rows() - r0);
        C.middleRows(r0, nr).noalias() += A.derived().middleRows(r0, nr) * B.derived();
    }
}

// Few-output-channel products starve the GEMM kernel on its row panels; below
// this width the transposed orientation is used instead.
inline constexpr int kSkinnyGemmRows = 48;

// C = (A * B) with C given transposed: Ct (cols x rows), computed as Bt * At
// in row blocks. Used when A*B would have very few rows.
template <typename T, typename DA, typename DB>
void gemm_flipped(RowMat<T>& Ct, const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B) {
    Ct.resize(B.cols(), A.rows());
    const Eigen::Index block = 2048;
    const Eigen::Index nblocks = (B.cols() + block - 1) / block;
#pragma omp parallel for schedule(static)
    for (Eigen::Index bi = 0; bi < nblocks; ++bi) {
        Eigen::Index r0 = bi * block;
        Eigen::Index nr = std::min(block, B.cols() - r0);
        Ct.middleRows(r0, nr).noalias() =
            B.derived().middleCols(r0, nr).transpose() * A.derived().transpose();
    }
}

// weight dims: (cout, cin, k, k) with k in {1, 3}; bias dims: (cout)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const auto& xd = x->value.dims;
    const auto& wd = weight->value.dims;
    check_shape(xd.size() == 4 && wd.size() == 4, "conv2d expects 4-d input and weight");
    const int N = xd[0], Cin = xd[1], H = xd[2], W = xd[3];
    const int Cout = wd[0], K = wd[2];
    check_shape(wd[1] == Cin, "conv2d input channels " + std::to_string(Cin) +
                                  " vs weight " + std::to_string(wd[1]));
    check_shape(K == 1 || K == 3, "conv2d kernel must be 1 or 3");
    check_shape(!bias || bias->value.numel() == Cout, "conv2d bias size");

    Tensor<T> out({N, Cout, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Eigen::Map<const RowMat<T>> Wm(weight->value.data.data(), Cout,
                                   static_cast<Eigen::Index>(Cin) * K * K);
    RowMat<T> col, yt;
    for (int n = 0; n < N; ++n) {
        const T* xp = x->value.data.data() + static_cast<std::int64_t>(n) * Cin * plane;
        T* op = out.data.data() + static_cast<std::int64_t>(n) * Cout * plane;
        Eigen::Map<RowMat<T>> Om(op, Cout, plane);
        const bool skinny = Cout < kSkinnyGemmRows;
        if (K == 3) {
            im2col3(xp, Cin, H, W, col);
            if (skinny)
                gemm_flipped<T>(yt, Wm, col);
            else
                gemm_cols_into<T>(Om, Wm, col, false);
        } else {
            Eigen::Map<const RowMat<T>> Xm(xp, Cin, plane);
            if (skinny)
                gemm_flipped<T>(yt, Wm, Xm);
            else
                gemm_cols_into<T>(Om, Wm, Xm, false);
        }
#pragma omp parallel for schedule(static)
        for (int co = 0; co < Cout; ++co) {
            const T b = bias ? bias->value[co] : T(0);
            T* orow = op + static_cast<std::int64_t>(co) * plane;
            if (skinny) {
                const T* src = yt.data() + co;
                for (std::int64_t i = 0; i < plane; ++i) orow[i] = src[i * Cout] + b;
            } else if (bias) {
                for (std::int64_t i = 0; i < plane; ++i) orow[i] += b;
            }
        }
    }

    std::vector<Var<T>> parents = bias ? std::vector<Var<T>>{x, weight, bias}
                                       : std::vector<Var<T>>{x, weight};
    return make_op<T>(
        std::move(out), parents, [x, weight, bias, N, Cin, Cout, H, W, K](Node<T>& self) {
            const std::int64_t plane = static_cast<std::int64_t>(H) * W;
            Eigen::Map<const RowMat<T>> Wm(weight->value.data.data(), Cout,
                                           static_cast<Eigen::Index>(Cin) * K * K);
            RowMat<T> col, colg;
            for (int n = 0; n < N; ++n) {
                Eigen::Map<const RowMat<T>> dY(
                    self.grad.data.data() + static_cast<std::int64_t>(n) * Cout * plane, Cout,
                    plane);
                const T* xp = x->value.data.data() + static_cast<std::int64_t>(n) * Cin * plane;
                if (weight->requires_grad) {
                    weight->ensure_grad();
                    Eigen::Map<RowMat<T>> dW(weight->grad.data.data(), Cout,
                                             static_cast<Eigen::Index>(Cin) * K * K);
                    const bool skinny = Cout < kSkinnyGemmRows;
                    RowMat<T> zt;
                    if (K == 3) {
                        im2col3(xp, Cin, H, W, col); // recomputed; cheaper than caching
                        if (skinny) {
                            gemm_flipped<T>(zt, dY, col.transpose());
                            dW.noalias() += zt.transpose();
                        } else {
                            gemm_rows_accum<T>(dW, dY, col.transpose());
                        }
                    } else {
                        Eigen::Map<const RowMat<T>> Xm(xp, Cin, plane);
                        if (skinny) {
                            gemm_flipped<T>(zt, dY, Xm.transpose());
                            dW.noalias() += zt.transpose();
                        } else {
                            gemm_rows_accum<T>(dW, dY, Xm.transpose());
                        }
                    }
                }
                if (bias && bias->requires_grad) {
                    // serial accumulation: alignment-dependent SIMD reductions
                    // would break run-to-run determinism
                    bias->ensure_grad();
                    const T* dyp = self.grad.data.data() +
                                   static_cast<std::int64_t>(n) * Cout * plane;
                    for (int co = 0; co < Cout; ++co) {
                        T acc = T(0);
                        for (std::int64_t i = 0; i < plane; ++i)
                            acc += dyp[static_cast<std::int64_t>(co) * plane + i];
                        bias->grad[co] += acc;
                    }
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* dxp = x->grad.data.data() + static_cast<std::int64_t>(n) * Cin * plane;
                    if (K == 3) {
                        colg.resize(static_cast<Eigen::Index>(Cin) * 9, plane);
                        gemm_cols_into<T>(colg, Wm.transpose(), dY, false);
                        col2im3_accum(colg, Cin, H, W, dxp);
                    } else {
                        Eigen::Map<RowMat<T>> dX(dxp, Cin, plane);
                        gemm_cols_into<T>(dX, Wm.transpose(), dY, true);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// batch normalization

template <typename T>
struct BnState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnState<T>& state,
                  bool training) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4, "batch_norm expects 4-d input");
    const int N = d[0], C = d[1];
    const std::int64_t plane = static_cast<std::int64_t>(d[2]) * d[3];
    const std::int64_t M = static_cast<std::int64_t>(N) * plane;
    check_shape(gamma->value.numel() == C && beta->value.numel() == C, "batch_norm channels");

    auto mean = std::make_shared<std::vector<T>>(C), invstd = std::make_shared<std::vector<T>>(C);
    if (training) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            double s = 0, s2 = 0;
            for (int n = 0; n < N; ++n) {
                const T* p = x->value.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    s += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            double mu = s / static_cast<double>(M);
            double var = s2 / static_cast<double>(M) - mu * mu;
            if (var < 0) var = 0;
            (*mean)[c] = static_cast<T>(mu);
            (*invstd)[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
            double unbiased = M > 1 ? var * static_cast<double>(M) / (M - 1) : var;
            state.running_mean[c] =
                (T(1) - state.momentum) * state.running_mean[c] + state.momentum * static_cast<T>(mu);
            state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] +
                                   state.momentum * static_cast<T>(unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = state.running_mean[c];
            (*invstd)[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps));
        }
    }

    Tensor<T> out(d);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const T g = gamma->value[c], b = beta->value[c], mu = (*mean)[c], is = (*invstd)[c];
        for (int n = 0; n < N; ++n) {
            const T* p = x->value.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            T* o = out.data.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) o[i] = g * (p[i] - mu) * is + b;
        }
    }

    return make_op<T>(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, mean, invstd, N, C, plane, M, training](Node<T>& self) {
                          if (gamma->requires_grad) gamma->ensure_grad();
                          if (beta->requires_grad) beta->ensure_grad();
                          if (x->requires_grad) x->ensure_grad();
#pragma omp parallel for schedule(static)
                          for (int c = 0; c < C; ++c) {
                              const T mu = (*mean)[c], is = (*invstd)[c], g = gamma->value[c];
                              double sum_dy = 0, sum_dy_xhat = 0;
                              for (int n = 0; n < N; ++n) {
                                  std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                                  const T* dy = self.grad.data.data() + off;
                                  const T* xv = x->value.data.data() + off;
                                  for (std::int64_t i = 0; i < plane; ++i) {
                                      sum_dy += dy[i];
                                      sum_dy_xhat += static_cast<double>(dy[i]) * (xv[i] - mu) * is;
                                  }
                              }
                              if (gamma->requires_grad)
                                  gamma->grad[c] += static_cast<T>(sum_dy_xhat);
                              if (beta->requires_grad) beta->grad[c] += static_cast<T>(sum_dy);
                              if (!x->requires_grad) continue;
                              const T mdy = static_cast<T>(sum_dy / static_cast<double>(M));
                              const T mdyx = static_cast<T>(sum_dy_xhat / static_cast<double>(M));
                              for (int n = 0; n < N; ++n) {
                                  std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                                  const T* dy = self.grad.data.data() + off;
                                  const T* xv = x->value.data.data() + off;
                                  T* dx = x->grad.data.data() + off;
                                  if (training) {
                                      for (std::int64_t i = 0; i < plane; ++i) {
                                          T xhat = (xv[i] - mu) * is;
                                          dx[i] += g * is * (dy[i] - mdy - xhat * mdyx);
                                      }
                                  } else {
                                      for (std::int64_t i = 0; i < plane; ++i)
                                          dx[i] += g * is * dy[i];
                                  }
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// pointwise / structural ops

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x->value.dims);
    const std::int64_t n = x->value.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    return make_op<T>(std::move(out), {x}, [x, n](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i)
            if (x->value[i] > T(0)) x->grad[i] += self.grad[i];
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x->value.dims);
    const std::int64_t n = x->value.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i)
        out[i] = T(1) / (T(1) + std::exp(-static_cast<double>(x->value[i])));
    auto y = std::make_shared<Tensor<T>>(out);
    return make_op<T>(std::move(out), {x}, [x, y, n](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i)
            x->grad[i] += self.grad[i] * (*y)[i] * (T(1) - (*y)[i]);
    });
}

template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4, "maxpool expects 4-d input");
    const int N = d[0], C = d[1], H = d[2], W = d[3];
    if (H % 2 || W % 2)
        throw std::invalid_argument("maxpool2x2: odd spatial dims " + x->value.shape_str());
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.numel());
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * C; ++nc) {
        const T* p = x->value.data.data() + static_cast<std::int64_t>(nc) * H * W;
        T* o = out.data.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
        std::int32_t* am = argmax->data() + static_cast<std::int64_t>(nc) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow) {
                int base = 2 * oh * W + 2 * ow;
                int best = base;
                T bv = p[base];
                for (int idx : {base + 1, base + W, base + W + 1})
                    if (p[idx] > bv) {
                        bv = p[idx];
                        best = idx;
                    }
                o[oh * Wo + ow] = bv;
                am[oh * Wo + ow] = best;
            }
    }
    return make_op<T>(std::move(out), {x}, [x, argmax, N, C, H, W, Ho, Wo](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int nc = 0; nc < N * C; ++nc) {
            T* dx = x->grad.data.data() + static_cast<std::int64_t>(nc) * H * W;
            const T* dy = self.grad.data.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
            const std::int32_t* am = argmax->data() + static_cast<std::int64_t>(nc) * Ho * Wo;
            for (int i = 0; i < Ho * Wo; ++i) dx[am[i]] += dy[i];
        }
    });
}

// bilinear x2 upsampling, half-pixel centers
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4, "upsample expects 4-d input");
    const int N = d[0], C = d[1], H = d[2], W = d[3];
    const int Ho = 2 * H, Wo = 2 * W;
    auto coords = [](int o, int limit, int& i0, int& i1, T& f) {
        double s = 0.5 * o - 0.25;
        double fl = std::floor(s);
        i0 = static_cast<int>(fl);
        f = static_cast<T>(s - fl);
        i1 = std::min(i0 + 1, limit - 1);
        if (i0 < 0) i0 = 0;
    };
    Tensor<T> out({N, C, Ho, Wo});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * C; ++nc) {
        const T* p = x->value.data.data() + static_cast<std::int64_t>(nc) * H * W;
        T* o = out.data.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            int y0, y1;
            T fy;
            coords(oh, H, y0, y1, fy);
            for (int ow = 0; ow < Wo; ++ow) {
                int x0, x1;
                T fx;
                coords(ow, W, x0, x1, fx);
                o[oh * Wo + ow] = (T(1) - fy) * ((T(1) - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                                  fy * ((T(1) - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
            }
        }
    }
    return make_op<T>(std::move(out), {x}, [x, coords, N, C, H, W, Ho, Wo](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int nc = 0; nc < N * C; ++nc) {
            T* dx = x->grad.data.data() + static_cast<std::int64_t>(nc) * H * W;
            const T* dy = self.grad.data.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
            for (int oh = 0; oh < Ho; ++oh) {
                int y0, y1;
                T fy;
                coords(oh, H, y0, y1, fy);
                for (int ow = 0; ow < Wo; ++ow) {
                    int x0, x1;
                    T fx;
                    coords(ow, W, x0, x1, fx);
                    T g = dy[oh * Wo + ow];
                    dx[y0 * W + x0] += (T(1) - fy) * (T(1) - fx) * g;
                    dx[y0 * W + x1] += (T(1) - fy) * fx * g;
                    dx[y1 * W + x0] += fy * (T(1) - fx) * g;
                    dx[y1 * W + x1] += fy * fx * g;
                }
            }
        }
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& da = a->value.dims;
    const auto& db = b->value.dims;
    check_shape(da.size() == 4 && db.size() == 4 && da[0] == db[0] && da[2] == db[2] &&
                    da[3] == db[3],
                "concat " + a->value.shape_str() + " vs " + b->value.shape_str());
    const int N = da[0], Ca = da[1], Cb = db[1];
    const std::int64_t plane = static_cast<std::int64_t>(da[2]) * da[3];
    Tensor<T> out({N, Ca + Cb, da[2], da[3]});
#pragma omp parallel for schedule(static)
    for (int nc = 0; nc < N * (Ca + Cb); ++nc) {
        const int n = nc / (Ca + Cb), c = nc % (Ca + Cb);
        const T* src = c < Ca
                           ? a->value.data.data() + (static_cast<std::int64_t>(n) * Ca + c) * plane
                           : b->value.data.data() +
                                 (static_cast<std::int64_t>(n) * Cb + (c - Ca)) * plane;
        std::copy_n(src, plane, out.data.data() + static_cast<std::int64_t>(nc) * plane);
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, N, Ca, Cb, plane](Node<T>& self) {
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int nc = 0; nc < N * (Ca + Cb); ++nc) {
            const int n = nc / (Ca + Cb), c = nc % (Ca + Cb);
            const T* g = self.grad.data.data() + static_cast<std::int64_t>(nc) * plane;
            T* dst = nullptr;
            if (c < Ca && a->requires_grad)
                dst = a->grad.data.data() + (static_cast<std::int64_t>(n) * Ca + c) * plane;
            else if (c >= Ca && b->requires_grad)
                dst = b->grad.data.data() + (static_cast<std::int64_t>(n) * Cb + (c - Ca)) * plane;
            if (!dst) continue;
            for (std::int64_t i = 0; i < plane; ++i) dst[i] += g[i];
        }
    });
}

// mean over the batch axis: (N,C,H,W) -> (1,C,H,W)
template <typename T>
Var<T> mean_batch(const Var<T>& x) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4, "mean_batch expects 4-d input");
    const int N = d[0];
    const std::int64_t rest = x->value.numel() / N;
    Tensor<T> out({1, d[1], d[2], d[3]});
    const T inv = T(1) / static_cast<T>(N);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < rest; ++i) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) acc += x->value[n * rest + i];
        out[i] = acc * inv;
    }
    return make_op<T>(std::move(out), {x}, [x, N, rest, inv](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < rest; ++i) {
            const T g = self.grad[i] * inv;
            for (int n = 0; n < N; ++n) x->grad[n * rest + i] += g;
        }
    });
}

// softmax over the channel axis
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4, "softmax expects 4-d input");
    const int N = d[0], C = d[1];
    const std::int64_t plane = static_cast<std::int64_t>(d[2]) * d[3];
    Tensor<T> out(d);
#pragma omp parallel for schedule(static)
    for (std::int64_t np = 0; np < N * plane; ++np) {
        const std::int64_t n = np / plane, i = np % plane;
        const T* p = x->value.data.data() + n * C * plane;
        T* o = out.data.data() + n * C * plane;
        T mx = p[i];
        for (int c = 1; c < C; ++c) mx = std::max(mx, p[c * plane + i]);
        double sum = 0;
        for (int c = 0; c < C; ++c) sum += std::exp(static_cast<double>(p[c * plane + i] - mx));
        for (int c = 0; c < C; ++c)
            o[c * plane + i] =
                static_cast<T>(std::exp(static_cast<double>(p[c * plane + i] - mx)) / sum);
    }
    auto y = std::make_shared<Tensor<T>>(out);
    return make_op<T>(std::move(out), {x}, [x, y, N, C, plane](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::int64_t np = 0; np < N * plane; ++np) {
            const std::int64_t n = np / plane, i = np % plane;
            const T* yv = y->data.data() + n * C * plane;
            const T* dy = self.grad.data.data() + n * C * plane;
            T* dx = x->grad.data.data() + n * C * plane;
            double dot = 0;
            for (int c = 0; c < C; ++c)
                dot += static_cast<double>(dy[c * plane + i]) * yv[c * plane + i];
            for (int c = 0; c < C; ++c)
                dx[c * plane + i] +=
                    yv[c * plane + i] * (dy[c * plane + i] - static_cast<T>(dot));
        }
    });
}

template <typename T>
Var<T> slice_channel(const Var<T>& x, int channel) {
    const auto& d = x->value.dims;
    check_shape(d.size() == 4 && channel < d[1], "slice_channel");
    const int N = d[0], C = d[1];
    const std::int64_t plane = static_cast<std::int64_t>(d[2]) * d[3];
    Tensor<T> out({N, 1, d[2], d[3]});
    for (int n = 0; n < N; ++n)
        std::copy_n(x->value.data.data() + (static_cast<std::int64_t>(n) * C + channel) * plane,
                    plane, out.data.data() + static_cast<std::int64_t>(n) * plane);
    return make_op<T>(std::move(out), {x}, [x, channel, N, C, plane](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const T* g = self.grad.data.data() + static_cast<std::int64_t>(n) * plane;
            T* dx = x->grad.data.data() + (static_cast<std::int64_t>(n) * C + channel) * plane;
            for (std::int64_t i = 0; i < plane; ++i) dx[i] += g[i];
        }
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const std::int64_t n = x->value.numel();
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += x->value[i];
    Tensor<T> out({1});
    out[0] = static_cast<T>(s / static_cast<double>(n));
    return make_op<T>(std::move(out), {x}, [x, n](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) x->grad[i] += g;
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_shape(a->value.dims == b->value.dims, "add");
    Tensor<T> out(a->value.dims);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        for (auto& p : {a, b}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T k) {
    Tensor<T> out(a->value.dims);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = k * a->value[i];
    return make_op<T>(std::move(out), {a}, [a, k](Node<T>& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) a->grad[i] += k * self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Tensor<T>& target) {
    check_shape(pred->value.dims == target.dims, "mse_loss");
    const std::int64_t n = pred->value.numel();
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(pred->value[i]) - target[i];
        s += d * d;
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(s / static_cast<double>(n));
    auto tgt = std::make_shared<Tensor<T>>(target);
    return make_op<T>(std::move(out), {pred}, [pred, tgt, n](Node<T>& self) {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        const T g = self.grad[0] * T(2) / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i)
            pred->grad[i] += g * (pred->value[i] - (*tgt)[i]);
    });
}

inline constexpr double kBceEps = 1e-7;

// mean over pixels of -[w_l*y*log(p) + (1-y)*log(1-p)], p clamped to
// [kBceEps, 1-kBceEps]; gradient is zero where the clamp is active
template <typename T>
Var<T> weighted_bce_loss(const Var<T>& prob, const Tensor<T>& target, T w_l) {
    check_shape(prob->value.dims == target.dims, "weighted_bce: pred " + prob->value.shape_str());
    const std::int64_t n = prob->value.numel();
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double p = std::clamp(static_cast<double>(prob->value[i]), kBceEps, 1.0 - kBceEps);
        double y = target[i];
        s += -(static_cast<double>(w_l) * y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(s / static_cast<double>(n));
    auto tgt = std::make_shared<Tensor<T>>(target);
    return make_op<T>(std::move(out), {prob}, [prob, tgt, w_l, n](Node<T>& self) {
        if (!prob->requires_grad) return;
        prob->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            double p = static_cast<double>(prob->value[i]);
            if (p < kBceEps || p > 1.0 - kBceEps) continue;
            double y = (*tgt)[i];
            prob->grad[i] += g * static_cast<T>(-static_cast<double>(w_l) * y / p +
                                                (1.0 - y) / (1.0 - p));
        }
    });
}

// BCE(sigmoid(m), pi) for a scalar logit m, computed in the stable softplus form
template <typename T>
Var<T> bce_with_logit_scalar(const Var<T>& logit, double pi) {
    if (logit->value.numel() != 1) throw std::invalid_argument("bce_with_logit_scalar: not scalar");
    if (!(pi >= 0.0 && pi <= 1.0)) throw std::invalid_argument("pi outside [0,1]");
    const double m = logit->value[0];
    const double softplus_neg = m >= 0 ? std::log1p(std::exp(-m)) + m : std::log1p(std::exp(m));
    // loss = (1-pi)*m + log(1+exp(-m))
    const double loss = (1.0 - pi) * m + (softplus_neg - m);
    Tensor<T> out({1});
    out[0] = static_cast<T>(loss);
    return make_op<T>(std::move(out), {logit}, [logit, pi, m](Node<T>& self) {
        if (!logit->requires_grad) return;
        logit->ensure_grad();
        const double sig = 1.0 / (1.0 + std::exp(-m));
        logit->grad[0] += self.grad[0] * static_cast<T>(sig - pi);
    });
}

} // namespace cofcn::nn
