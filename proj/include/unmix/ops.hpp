#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "unmix/autodiff.hpp"
#include "unmix/gemm.hpp"
#include "unmix/tensor.hpp"

namespace unmix::ops {

inline int conv_out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline int conv_transpose_out_size(int in, int k, int stride, int pad, int out_pad) {
    return (in - 1) * stride - 2 * pad + k + out_pad;
}

// y = w * x + b, NCHW. Batch-parallel; weight layout [Co, Ci, k, k].
template <typename T>
VarPtr<T> conv2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int stride,
                 int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: rank mismatch");
    const int B = static_cast<int>(xs[0]), Ci = static_cast<int>(xs[1]),
              H = static_cast<int>(xs[2]), W = static_cast<int>(xs[3]);
    const int Co = static_cast<int>(ws[0]), k = static_cast<int>(ws[2]);
    if (ws[1] != xs[1]) throw std::invalid_argument("conv2d: channel mismatch");
    if (b->value.numel() != static_cast<std::size_t>(Co))
        throw std::invalid_argument("conv2d: bias size mismatch");
    const int Ho = conv_out_size(H, k, stride, pad), Wo = conv_out_size(W, k, stride, pad);
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");

    const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
    const std::size_t ckk = static_cast<std::size_t>(Ci) * k * k;
    Tensor<T> y({static_cast<std::size_t>(B), static_cast<std::size_t>(Co),
                 static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});

    const T* xp = x->value.data();
    const T* wp = w->value.data();
    const T* bp = b->value.data();
    T* yp = y.data();

#pragma omp parallel
    {
        std::vector<T> col(ckk * P);
#pragma omp for
        for (int n = 0; n < B; ++n) {
            im2col(xp + static_cast<std::size_t>(n) * Ci * H * W, Ci, H, W, k, stride, pad, Ho,
                   Wo, col.data());
            T* yn = yp + static_cast<std::size_t>(n) * Co * P;
            for (int co = 0; co < Co; ++co)
                for (std::size_t j = 0; j < P; ++j) yn[co * P + j] = bp[co];
            gemm_nn(static_cast<std::size_t>(Co), P, ckk, wp, col.data(), yn);
        }
    }

    auto out = make_node<T>(std::move(y), {x, w, b});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    Node<T>* wn = w.get();
    Node<T>* bn = b.get();
    out->backprop = [on, xn, wn, bn, B, Ci, H, W, Co, k, stride, pad, Ho, Wo, P, ckk]() {
        const T* dy = on->grad.data();
        const bool need_dx = xn->requires_grad;
        const bool need_dw = wn->requires_grad;
        const bool need_db = bn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (need_dw) wn->ensure_grad();
        if (need_db) bn->ensure_grad();
        const T* xp = xn->value.data();
        const T* wp = wn->value.data();
#pragma omp parallel
        {
            std::vector<T> col(need_dw ? ckk * P : 0);
            std::vector<T> dcol(need_dx ? ckk * P : 0);
            std::vector<T> dw_local(need_dw ? wn->value.numel() : 0, T(0));
            std::vector<T> db_local(need_db ? static_cast<std::size_t>(Co) : 0, T(0));
#pragma omp for nowait
            for (int n = 0; n < B; ++n) {
                const T* dyn = dy + static_cast<std::size_t>(n) * Co * P;
                if (need_dx) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    gemm_tn(ckk, P, static_cast<std::size_t>(Co), wp, dyn, dcol.data());
                    col2im(dcol.data(), Ci, H, W, k, stride, pad, Ho, Wo,
                           xn->grad.data() + static_cast<std::size_t>(n) * Ci * H * W);
                }
                if (need_dw) {
                    im2col(xp + static_cast<std::size_t>(n) * Ci * H * W, Ci, H, W, k, stride,
                           pad, Ho, Wo, col.data());
                    gemm_nt(static_cast<std::size_t>(Co), ckk, P, dyn, col.data(),
                            dw_local.data());
                }
                if (need_db)
                    for (int co = 0; co < Co; ++co) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < P; ++j) acc += dyn[co * P + j];
                        db_local[co] += acc;
                    }
            }
#pragma omp critical
            {
                if (need_dw) {
                    T* dst = wn->grad.data();
                    for (std::size_t i = 0; i < dw_local.size(); ++i) dst[i] += dw_local[i];
                }
                if (need_db) {
                    T* dst = bn->grad.data();
                    for (int co = 0; co < Co; ++co) dst[co] += db_local[co];
                }
            }
        }
    };
    return out;
}

// Transposed convolution; weight layout [Ci, Co, k, k] (input-major, which is
// also the orientation the pathway block partition expects).
template <typename T>
VarPtr<T> conv_transpose2d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b,
                           int stride, int pad, int out_pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw std::invalid_argument("conv_transpose2d: rank mismatch");
    const int B = static_cast<int>(xs[0]), Ci = static_cast<int>(xs[1]),
              Hi = static_cast<int>(xs[2]), Wi = static_cast<int>(xs[3]);
    const int Co = static_cast<int>(ws[1]), k = static_cast<int>(ws[2]);
    if (ws[0] != xs[1]) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    if (b->value.numel() != static_cast<std::size_t>(Co))
        throw std::invalid_argument("conv_transpose2d: bias size mismatch");
    const int Ho = conv_transpose_out_size(Hi, k, stride, pad, out_pad);
    const int Wo = conv_transpose_out_size(Wi, k, stride, pad, out_pad);
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv_transpose2d: empty output");

    const std::size_t P = static_cast<std::size_t>(Hi) * Wi;
    const std::size_t okk = static_cast<std::size_t>(Co) * k * k;
    Tensor<T> y({static_cast<std::size_t>(B), static_cast<std::size_t>(Co),
                 static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});

    const T* xp = x->value.data();
    const T* wp = w->value.data();
    const T* bp = b->value.data();
    T* yp = y.data();
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;

#pragma omp parallel
    {
        std::vector<T> cols(okk * P);
#pragma omp for
        for (int n = 0; n < B; ++n) {
            std::fill(cols.begin(), cols.end(), T(0));
            // cols = W^T [Co*k*k, Ci] * x_n [Ci, P]
            gemm_tn(okk, P, static_cast<std::size_t>(Ci),
                    wp, xp + static_cast<std::size_t>(n) * Ci * P, cols.data());
            T* yn = yp + static_cast<std::size_t>(n) * Co * out_plane;
            for (int co = 0; co < Co; ++co)
                for (std::size_t j = 0; j < out_plane; ++j) yn[co * out_plane + j] = bp[co];
            col2im(cols.data(), Co, Ho, Wo, k, stride, pad, Hi, Wi, yn);
        }
    }

    auto out = make_node<T>(std::move(y), {x, w, b});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    Node<T>* wn = w.get();
    Node<T>* bn = b.get();
    out->backprop = [on, xn, wn, bn, B, Ci, Hi, Wi, Co, k, stride, pad, Ho, Wo, P, okk,
                     out_plane]() {
        const T* dy = on->grad.data();
        const bool need_dx = xn->requires_grad;
        const bool need_dw = wn->requires_grad;
        const bool need_db = bn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (need_dw) wn->ensure_grad();
        if (need_db) bn->ensure_grad();
        const T* xp = xn->value.data();
        const T* wp = wn->value.data();
#pragma omp parallel
        {
            std::vector<T> dcols(okk * P);
            std::vector<T> dw_local(need_dw ? wn->value.numel() : 0, T(0));
            std::vector<T> db_local(need_db ? static_cast<std::size_t>(Co) : 0, T(0));
#pragma omp for nowait
            for (int n = 0; n < B; ++n) {
                const T* dyn = dy + static_cast<std::size_t>(n) * Co * out_plane;
                im2col(dyn, Co, Ho, Wo, k, stride, pad, Hi, Wi, dcols.data());
                if (need_dx)
                    // dx_n += W [Ci, Co*k*k] * dcols [Co*k*k, P]
                    gemm_nn(static_cast<std::size_t>(Ci), P, okk, wp, dcols.data(),
                            xn->grad.data() + static_cast<std::size_t>(n) * Ci * P);
                if (need_dw)
                    // dW += x_n [Ci, P] * dcols^T [P, Co*k*k]
                    gemm_nt(static_cast<std::size_t>(Ci), okk, P,
                            xp + static_cast<std::size_t>(n) * Ci * P, dcols.data(),
                            dw_local.data());
                if (need_db)
                    for (int co = 0; co < Co; ++co) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < out_plane; ++j)
                            acc += dyn[co * out_plane + j];
                        db_local[co] += acc;
                    }
            }
#pragma omp critical
            {
                if (need_dw) {
                    T* dst = wn->grad.data();
                    for (std::size_t i = 0; i < dw_local.size(); ++i) dst[i] += dw_local[i];
                }
                if (need_db) {
                    T* dst = bn->grad.data();
                    for (int co = 0; co < Co; ++co) dst[co] += db_local[co];
                }
            }
        }
    };
    return out;
}

// Batch norm over (B,H,W) per channel. Training mode uses batch statistics and
// updates the running buffers in place; inference mode reads the buffers.
template <typename T>
VarPtr<T> batch_norm2d(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       T momentum, T eps) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw std::invalid_argument("batch_norm2d: rank mismatch");
    const std::size_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    if (gamma->value.numel() != C || beta->value.numel() != C ||
        running_mean.numel() != C || running_var.numel() != C)
        throw std::invalid_argument("batch_norm2d: parameter size mismatch");

    const std::size_t m = B * HW;
    const T* xp = x->value.data();
    std::vector<T> mean(C), inv_std(C);

    if (training) {
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < C; ++c) {
            double sum = 0.0, sq = 0.0;
            for (std::size_t n = 0; n < B; ++n) {
                const T* p = xp + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            double mu = sum / static_cast<double>(m);
            double var = sq / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(mu);
            running_var[c] =
                (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(running_var[c]) + static_cast<double>(eps)));
        }
    }

    Tensor<T> y(x->value.shape());
    const T* gp = gamma->value.data();
    const T* bp = beta->value.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = xp + (n * C + c) * HW;
            T* o = yp + (n * C + c) * HW;
            const T mu = mean[c], is = inv_std[c], g = gp[c], bb = bp[c];
            for (std::size_t i = 0; i < HW; ++i) o[i] = g * (p[i] - mu) * is + bb;
        }

    auto out = make_node<T>(std::move(y), {x, gamma, beta});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    Node<T>* gn = gamma.get();
    Node<T>* bn = beta.get();
    // backward recomputes x_hat from the saved per-channel statistics
    out->backprop = [on, xn, gn, bn, B, C, HW, m, training, mean = std::move(mean),
                     inv_std = std::move(inv_std)]() {
        const T* dy = on->grad.data();
        const T* xp = xn->value.data();
        const T* gp = gn->value.data();
        const bool need_dx = xn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < C; ++c) {
            const T mu = mean[c], is = inv_std[c];
            double sum_dy = 0.0, sum_dyh = 0.0;
            for (std::size_t n = 0; n < B; ++n) {
                const T* d = dy + (n * C + c) * HW;
                const T* p = xp + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    sum_dy += d[i];
                    sum_dyh += static_cast<double>(d[i]) * (p[i] - mu) * is;
                }
            }
            if (gn->requires_grad) gn->grad[c] += static_cast<T>(sum_dyh);
            if (bn->requires_grad) bn->grad[c] += static_cast<T>(sum_dy);
            if (!need_dx) continue;
            const T g_is = gp[c] * is;
            if (training) {
                const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
                const T mean_dyh = static_cast<T>(sum_dyh / static_cast<double>(m));
                for (std::size_t n = 0; n < B; ++n) {
                    const T* d = dy + (n * C + c) * HW;
                    const T* p = xp + (n * C + c) * HW;
                    T* dx = xn->grad.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i)
                        dx[i] += g_is * (d[i] - mean_dy - (p[i] - mu) * is * mean_dyh);
                }
            } else {
                for (std::size_t n = 0; n < B; ++n) {
                    const T* d = dy + (n * C + c) * HW;
                    T* dx = xn->grad.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) dx[i] += g_is * d[i];
                }
            }
        }
    };
    return out;
}

// Group norm over (C/G,H,W) per sample per group; per-channel affine. With
// `freeze_affine`, gamma/beta act as constants (no gradient accumulation).
template <typename T>
VarPtr<T> group_norm(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                     int groups, T eps, bool freeze_affine = false) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw std::invalid_argument("group_norm: rank mismatch");
    const std::size_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    if (groups <= 0 || C % static_cast<std::size_t>(groups) != 0)
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw std::invalid_argument("group_norm: parameter size mismatch");

    const std::size_t G = static_cast<std::size_t>(groups);
    const std::size_t cg = C / G;
    const std::size_t m = cg * HW;
    const T* xp = x->value.data();
    const T* gp = gamma->value.data();
    const T* bp = beta->value.data();

    Tensor<T> y(x->value.shape());
    std::vector<T> mean(B * G), inv_std(B * G);
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t g = 0; g < G; ++g) {
            const T* base = xp + (n * C + g * cg) * HW;
            double sum = 0.0, sq = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                sum += base[i];
                sq += static_cast<double>(base[i]) * base[i];
            }
            double mu = sum / static_cast<double>(m);
            double var = sq / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;
            T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            mean[n * G + g] = static_cast<T>(mu);
            inv_std[n * G + g] = is;
            T* yb = yp + (n * C + g * cg) * HW;
            for (std::size_t c = 0; c < cg; ++c) {
                const T ga = gp[g * cg + c], be = bp[g * cg + c];
                for (std::size_t i = 0; i < HW; ++i)
                    yb[c * HW + i] = ga * (base[c * HW + i] - static_cast<T>(mu)) * is + be;
            }
        }

    auto out = make_node<T>(std::move(y), {x, gamma, beta});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    Node<T>* gn = gamma.get();
    Node<T>* bn = beta.get();
    // backward recomputes the normalized values from the saved statistics
    out->backprop = [on, xn, gn, bn, B, C, G, cg, HW, m, freeze_affine, mean = std::move(mean),
                     inv_std = std::move(inv_std)]() {
        const T* dy = on->grad.data();
        const T* xp = xn->value.data();
        const T* gp = gn->value.data();
        const bool need_dx = xn->requires_grad;
        const bool need_affine = !freeze_affine && gn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (need_affine) {
            gn->ensure_grad();
            bn->ensure_grad();
        }
        if (need_affine)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t g = c / cg;
                double sg = 0.0, sb = 0.0;
                for (std::size_t n = 0; n < B; ++n) {
                    const T* d = dy + (n * C + c) * HW;
                    const T* p = xp + (n * C + c) * HW;
                    const T mu = mean[n * G + g], is = inv_std[n * G + g];
                    for (std::size_t i = 0; i < HW; ++i) {
                        sg += static_cast<double>(d[i]) * (p[i] - mu) * is;
                        sb += d[i];
                    }
                }
                gn->grad[c] += static_cast<T>(sg);
                bn->grad[c] += static_cast<T>(sb);
            }
        if (!need_dx) return;
#pragma omp parallel for schedule(static)
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t g = 0; g < G; ++g) {
                const T* d = dy + (n * C + g * cg) * HW;
                const T* p = xp + (n * C + g * cg) * HW;
                const T mu = mean[n * G + g];
                const T is = inv_std[n * G + g];
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t c = 0; c < cg; ++c) {
                    const T ga = gp[g * cg + c];
                    for (std::size_t i = 0; i < HW; ++i) {
                        const double du = static_cast<double>(ga) * d[c * HW + i];
                        s1 += du;
                        s2 += du * (p[c * HW + i] - mu) * is;
                    }
                }
                const T mean_du = static_cast<T>(s1 / static_cast<double>(m));
                const T mean_duu = static_cast<T>(s2 / static_cast<double>(m));
                T* dx = xn->grad.data() + (n * C + g * cg) * HW;
                for (std::size_t c = 0; c < cg; ++c) {
                    const T ga = gp[g * cg + c];
                    for (std::size_t i = 0; i < HW; ++i)
                        dx[c * HW + i] += is * (ga * d[c * HW + i] - mean_du -
                                                (p[c * HW + i] - mu) * is * mean_duu);
                }
            }
    };
    return out;
}

// w = g * v / ||v||, norms taken per slice along dim 0.
template <typename T>
VarPtr<T> weight_norm(const VarPtr<T>& v, const VarPtr<T>& g) {
    const std::size_t D0 = v->value.dim(0);
    const std::size_t slice = v->value.numel() / D0;
    if (g->value.numel() != D0) throw std::invalid_argument("weight_norm: magnitude size");

    std::vector<T> norms(D0);
    Tensor<T> w(v->value.shape());
    const T* vp = v->value.data();
    const T* gp = g->value.data();
    T* wp = w.data();
    for (std::size_t i = 0; i < D0; ++i) {
        const T* vs = vp + i * slice;
        double sq = 0.0;
        for (std::size_t j = 0; j < slice; ++j) sq += static_cast<double>(vs[j]) * vs[j];
        T n = static_cast<T>(std::sqrt(sq));
        norms[i] = n;
        // a zero direction has no defined orientation; the effective slice is zero
        const T s = n > T(0) ? gp[i] / n : T(0);
        for (std::size_t j = 0; j < slice; ++j) wp[i * slice + j] = s * vs[j];
    }

    auto out = make_node<T>(std::move(w), {v, g});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* vn = v.get();
    Node<T>* gn = g.get();
    out->backprop = [on, vn, gn, D0, slice, norms = std::move(norms)]() {
        const T* dw = on->grad.data();
        const T* vp = vn->value.data();
        const T* gp = gn->value.data();
        if (vn->requires_grad) vn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        for (std::size_t i = 0; i < D0; ++i) {
            const T n = norms[i];
            if (n <= T(0)) continue;
            const T* vs = vp + i * slice;
            const T* dws = dw + i * slice;
            double dot = 0.0;
            for (std::size_t j = 0; j < slice; ++j) dot += static_cast<double>(dws[j]) * vs[j];
            if (gn->requires_grad) gn->grad[i] += static_cast<T>(dot) / n;
            if (vn->requires_grad) {
                const T a = gp[i] / n;
                const T c = gp[i] * static_cast<T>(dot) / (n * n * n);
                T* dv = vn->grad.data() + i * slice;
                for (std::size_t j = 0; j < slice; ++j) dv[j] += a * dws[j] - c * vs[j];
            }
        }
    };
    return out;
}

template <typename T>
VarPtr<T> relu(const VarPtr<T>& x) {
    Tensor<T> y(x->value.shape());
    const T* xp = x->value.data();
    T* yp = y.data();
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
    auto out = make_node<T>(std::move(y), {x});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    out->backprop = [on, xn, n]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* dy = on->grad.data();
        const T* xp = xn->value.data();
        T* dx = xn->grad.data();
        for (std::size_t i = 0; i < n; ++i)
            if (xp[i] > T(0)) dx[i] += dy[i];
    };
    return out;
}

template <typename T>
VarPtr<T> sigmoid(const VarPtr<T>& x) {
    Tensor<T> y(x->value.shape());
    const T* xp = x->value.data();
    T* yp = y.data();
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i)
        yp[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(xp[i]))));
    auto out = make_node<T>(std::move(y), {x});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    out->backprop = [on, xn, n]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* dy = on->grad.data();
        const T* yp = on->value.data();
        T* dx = xn->grad.data();
        for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * yp[i] * (T(1) - yp[i]);
    };
    return out;
}

// Concatenation along the channel dimension, encoder order preserved.
template <typename T>
VarPtr<T> concat_channels(const std::vector<VarPtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
    const auto& s0 = xs[0]->value.shape();
    if (s0.size() != 4) throw std::invalid_argument("concat_channels: rank mismatch");
    std::size_t total_c = 0;
    for (const auto& x : xs) {
        const auto& s = x->value.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw std::invalid_argument("concat_channels: shape mismatch");
        total_c += s[1];
    }
    const std::size_t B = s0[0], HW = s0[2] * s0[3];
    Tensor<T> y({B, total_c, s0[2], s0[3]});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const std::size_t c = x->value.dim(1);
        for (std::size_t n = 0; n < B; ++n)
            std::copy_n(x->value.data() + n * c * HW, c * HW,
                        y.data() + (n * total_c + off) * HW);
        off += c;
    }

    std::vector<VarPtr<T>> parents(xs.begin(), xs.end());
    auto out = make_node<T>(std::move(y), std::move(parents));
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    out->backprop = [on, offsets, B, HW, total_c]() {
        const T* dy = on->grad.data();
        for (std::size_t idx = 0; idx < on->parents.size(); ++idx) {
            Node<T>* xn = on->parents[idx].get();
            if (!xn->requires_grad) continue;
            xn->ensure_grad();
            const std::size_t c = xn->value.dim(1);
            for (std::size_t n = 0; n < B; ++n) {
                const T* src = dy + (n * total_c + offsets[idx]) * HW;
                T* dst = xn->grad.data() + n * c * HW;
                for (std::size_t i = 0; i < c * HW; ++i) dst[i] += src[i];
            }
        }
    };
    return out;
}

// Mean binary cross-entropy against a constant target. Log terms are clamped
// at -100 and the backward denominator at 1e-12, matching the usual
// probability-space BCE treatment of saturated predictions.
template <typename T>
VarPtr<T> bce_mean(const VarPtr<T>& p, Tensor<T> target) {
    if (!p->value.same_shape(target)) throw std::invalid_argument("bce_mean: shape mismatch");
    const std::size_t n = p->value.numel();
    const T* pp = p->value.data();
    const T* tp = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = tp[i];
        if (t < 0.0 || t > 1.0) throw std::invalid_argument("bce_mean: target outside [0,1]");
        const double pv = pp[i];
        if (pv < 0.0 || pv > 1.0)
            throw std::invalid_argument("bce_mean: prediction outside [0,1]");
        double log_p = pv > 0.0 ? std::log(pv) : -100.0;
        double log_1p = pv < 1.0 ? std::log(1.0 - pv) : -100.0;
        if (log_p < -100.0) log_p = -100.0;
        if (log_1p < -100.0) log_1p = -100.0;
        acc -= t * log_p + (1.0 - t) * log_1p;
    }
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));

    auto out = make_node<T>(std::move(y), {p});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* pn = p.get();
    out->backprop = [on, pn, n, target = std::move(target)]() {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        const T g = on->grad[0];
        const T* pp = pn->value.data();
        const T* tp = target.data();
        T* dp = pn->grad.data();
        const T scale = g / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            T denom = pp[i] * (T(1) - pp[i]);
            if (denom < T(1e-12)) denom = T(1e-12);
            dp[i] += scale * (pp[i] - tp[i]) / denom;
        }
    };
    return out;
}

// (1/(B*N*h)) * sum of squared encoding values; h is the per-sample encoding
// size and the batch mean is folded in.
template <typename T>
VarPtr<T> encoding_l2_mean(const std::vector<VarPtr<T>>& zs) {
    if (zs.empty()) throw std::invalid_argument("encoding_l2: empty encoding list");
    const std::size_t N = zs.size();
    const std::size_t B = zs[0]->value.dim(0);
    const std::size_t h = zs[0]->value.numel() / B;
    if (h == 0) throw std::invalid_argument("encoding_l2: empty encodings");
    double acc = 0.0;
    for (const auto& z : zs) {
        if (z->value.numel() != B * h)
            throw std::invalid_argument("encoding_l2: encoding shape mismatch");
        const T* zp = z->value.data();
        for (std::size_t i = 0; i < B * h; ++i) acc += static_cast<double>(zp[i]) * zp[i];
    }
    const double denom = static_cast<double>(B) * N * h;
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / denom));

    std::vector<VarPtr<T>> parents(zs.begin(), zs.end());
    auto out = make_node<T>(std::move(y), std::move(parents));
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    out->backprop = [on, denom]() {
        const T g = on->grad[0];
        for (const auto& parent : on->parents) {
            Node<T>* zn = parent.get();
            if (!zn->requires_grad) continue;
            zn->ensure_grad();
            const T* zp = zn->value.data();
            T* dz = zn->grad.data();
            const T s = static_cast<T>(2.0 / denom) * g;
            const std::size_t cnt = zn->value.numel();
            for (std::size_t i = 0; i < cnt; ++i) dz[i] += s * zp[i];
        }
    };
    return out;
}

// Dot product against fixed coefficients; reduces a tensor to a scalar.
template <typename T>
VarPtr<T> inner(const VarPtr<T>& x, Tensor<T> coeff) {
    if (!x->value.same_shape(coeff)) throw std::invalid_argument("inner: shape mismatch");
    double acc = 0.0;
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i)
        acc += static_cast<double>(x->value[i]) * coeff[i];
    auto out = make_node<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* xn = x.get();
    out->backprop = [on, xn, coeff = std::move(coeff), n]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T g = on->grad[0];
        T* dx = xn->grad.data();
        for (std::size_t i = 0; i < n; ++i) dx[i] += g * coeff[i];
    };
    return out;
}

template <typename T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> y = a->value;
    y += b->value;
    auto out = make_node<T>(std::move(y), {a, b});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    out->backprop = [on]() {
        for (const auto& parent : on->parents) {
            Node<T>* pn = parent.get();
            if (!pn->requires_grad) continue;
            pn->accumulate(on->grad.data(), on->grad.numel());
        }
    };
    return out;
}

template <typename T>
VarPtr<T> scale(const VarPtr<T>& a, T c) {
    Tensor<T> y = a->value;
    y *= c;
    auto out = make_node<T>(std::move(y), {a});
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    Node<T>* an = a.get();
    out->backprop = [on, an, c]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const T* dy = on->grad.data();
        T* da = an->grad.data();
        const std::size_t n = on->grad.numel();
        for (std::size_t i = 0; i < n; ++i) da[i] += c * dy[i];
    };
    return out;
}

}  // namespace unmix::ops
