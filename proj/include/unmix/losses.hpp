#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "unmix/model.hpp"
#include "unmix/ops.hpp"

namespace unmix::losses {

enum class AlphaScheme { uniform, positional };

// Loss functions return pre-lambda values; each lambda is applied exactly
// once in total_loss.
struct LossConfig {
    double lambda_pathway = 0.5;
    double lambda_zero_recon = 0.01;
    double lambda_z = 0.01;
    AlphaScheme alpha_scheme = AlphaScheme::uniform;

    void validate() const {
        if (lambda_pathway < 0 || lambda_zero_recon < 0 || lambda_z < 0)
            throw std::invalid_argument("loss config: lambdas must be non-negative");
    }
};

// N x N grid of channel blocks over a weight stored input-major:
// [C_in, C_out] for dense weights, [C_in, C_out, kh, kw] for transposed
// convolutions. Spatial taps belong to their channel block.
struct BlockPartition {
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t taps = 1;  // product of spatial dims
    int n = 1;

    std::size_t rows_per_block() const { return c_in / n; }
    std::size_t cols_per_block() const { return c_out / n; }
    std::size_t block_elements() const { return rows_per_block() * cols_per_block() * taps; }
};

template <typename T>
BlockPartition partition(const Tensor<T>& w, int n) {
    if (n < 1) throw std::invalid_argument("partition: n must be >= 1");
    if (w.rank() != 2 && w.rank() != 4)
        throw std::invalid_argument("partition: weight must be rank 2 or 4");
    BlockPartition part;
    part.c_in = w.dim(0);
    part.c_out = w.dim(1);
    part.taps = w.rank() == 4 ? w.dim(2) * w.dim(3) : 1;
    part.n = n;
    if (part.c_in % n != 0 || part.c_out % n != 0)
        throw std::invalid_argument("partition: channel dims not divisible by n");
    return part;
}

// Visits every element of block (i,j); f(flat_index).
template <typename T, typename F>
void for_each_block_element(const Tensor<T>& w, const BlockPartition& part, int i, int j,
                            F&& f) {
    const std::size_t rb = part.rows_per_block(), cb = part.cols_per_block();
    for (std::size_t r = 0; r < rb; ++r) {
        const std::size_t row = static_cast<std::size_t>(i) * rb + r;
        for (std::size_t c = 0; c < cb; ++c) {
            const std::size_t col = static_cast<std::size_t>(j) * cb + c;
            const std::size_t base = (row * part.c_out + col) * part.taps;
            for (std::size_t t = 0; t < part.taps; ++t) f(base + t);
        }
    }
}

// Per-block scaling: Eq-style uniform alpha is the reciprocal of the block's
// channel-grid size; the positional scheme additionally divides by (N - i)
// above the diagonal and by i below it.
inline double block_alpha(const BlockPartition& part, int i, int j, AlphaScheme scheme) {
    const double base =
        1.0 / (static_cast<double>(part.rows_per_block()) * part.cols_per_block());
    if (scheme == AlphaScheme::uniform) return base;
    if (j > i) return base / static_cast<double>(part.n - i);
    if (j < i) return base / static_cast<double>(i);
    return base;  // diagonal blocks never contribute
}

// Core routine shared by the value API and the autodiff op: returns the
// off-diagonal weighted L1 and, when dw is given, accumulates
// gscale * d/dw into it.
template <typename T>
double pathway_core(const Tensor<T>& w, int n, AlphaScheme scheme, T* dw, T gscale) {
    BlockPartition part = partition(w, n);
    double total = 0.0;
    const T* wp = w.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double alpha = block_alpha(part, i, j, scheme);
            double block_l1 = 0.0;
            for_each_block_element(w, part, i, j, [&](std::size_t idx) {
                block_l1 += std::abs(static_cast<double>(wp[idx]));
                if (dw && wp[idx] != T(0))
                    dw[idx] += gscale * static_cast<T>(alpha) *
                               (wp[idx] > T(0) ? T(1) : T(-1));
            });
            total += alpha * block_l1;
        }
    return total;
}

// ---- value-level API ----

template <typename T>
double bce_reconstruction(const Tensor<T>& x_hat, const Tensor<T>& x) {
    if (!x_hat.same_shape(x)) throw std::invalid_argument("bce: shape mismatch");
    const std::size_t n = x.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = x[i];
        if (t < 0.0 || t > 1.0) throw std::invalid_argument("bce: target outside [0,1]");
        const double p = x_hat[i];
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("bce: prediction outside [0,1]");
        double log_p = p > 0.0 ? std::max(std::log(p), -100.0) : -100.0;
        double log_1p = p < 1.0 ? std::max(std::log(1.0 - p), -100.0) : -100.0;
        acc -= t * log_p + (1.0 - t) * log_1p;
    }
    return acc / static_cast<double>(n);
}

template <typename T>
double encoding_l2(const std::vector<Tensor<T>>& zs) {
    if (zs.empty()) throw std::invalid_argument("encoding_l2: empty encoding list");
    const std::size_t N = zs.size();
    const std::size_t h = zs[0].numel();
    if (h == 0) throw std::invalid_argument("encoding_l2: empty encodings");
    double acc = 0.0;
    for (const auto& z : zs) {
        if (z.numel() != h) throw std::invalid_argument("encoding_l2: size mismatch");
        for (std::size_t i = 0; i < h; ++i) acc += static_cast<double>(z[i]) * z[i];
    }
    return acc / (static_cast<double>(N) * h);
}

template <typename T>
double pathway_separation(const std::vector<const Tensor<T>*>& weights, int n,
                          AlphaScheme scheme) {
    double total = 0.0;
    for (const Tensor<T>* w : weights) total += pathway_core(*w, n, scheme, (T*)nullptr, T(0));
    return total;
}

// ---- graph (training) API ----

template <typename T>
VarPtr<T> pathway_loss(const std::vector<VarPtr<T>>& weights, int n, AlphaScheme scheme) {
    if (weights.empty()) throw std::invalid_argument("pathway_loss: no weights");
    double total = 0.0;
    for (const auto& w : weights) total += pathway_core(w->value, n, scheme, (T*)nullptr, T(0));
    auto out = make_node<T>(Tensor<T>::scalar(static_cast<T>(total)), weights);
    if (!out->requires_grad) return out;
    Node<T>* on = out.get();
    out->backprop = [on, n, scheme]() {
        const T g = on->grad[0];
        for (const auto& parent : on->parents) {
            Node<T>* wn = parent.get();
            if (!wn->requires_grad) continue;
            wn->ensure_grad();
            pathway_core(wn->value, n, scheme, wn->grad.data(), g);
        }
    };
    return out;
}

// Decoder pass with an all-zero encoding against an all-zero target.
// Normalization affine parameters are frozen in this pass; encoder
// parameters are untouched because only the decoder runs. Rows of an
// all-zero batch are identical under per-sample group normalization, so a
// single row computes the same mean loss and gradients as a full batch.
template <typename T>
VarPtr<T> zero_reconstruction_loss(model::Model<T>& m) {
    const auto& cfg = m.config();
    const std::size_t cz = static_cast<std::size_t>(cfg.num_encoders) * cfg.encoding_channels;
    const std::size_t s = static_cast<std::size_t>(cfg.encoding_spatial());
    Tensor<T> z_zero({1, cz, s, s});
    VarPtr<T> out = m.decode(make_leaf<T>(std::move(z_zero), false), /*freeze_affine=*/true);
    Tensor<T> target(out->value.shape());
    return ops::bce_mean(out, std::move(target));
}

struct LossParts {
    double reconstruction = 0.0;
    double pathway = 0.0;
    double zero_reconstruction = 0.0;
    double encoding = 0.0;
};

// L_total = L_recon + l_pathway*L_pathway + l_zero*L_zero + l_z*L_z.
// A non-finite part signals training divergence and is reported by name.
inline double total_loss(const LossParts& parts, const LossConfig& cfg) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("total_loss: non-finite term: ") + name);
    };
    check(parts.reconstruction, "reconstruction");
    check(parts.pathway, "pathway_separation");
    check(parts.zero_reconstruction, "zero_reconstruction");
    check(parts.encoding, "encoding_l2");
    return parts.reconstruction + cfg.lambda_pathway * parts.pathway +
           cfg.lambda_zero_recon * parts.zero_reconstruction + cfg.lambda_z * parts.encoding;
}

}  // namespace unmix::losses
