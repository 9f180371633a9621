#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "unmix/datagen.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"

namespace unmix::infer {

struct SourceEstimate {
    int encoder_index = 0;
    datagen::Image estimate;
    int crop_margin = 0;
};

// Keep only encoder n's encoding; all other channel blocks are zeroed in
// their original positions, then the decoder runs once. The model is placed
// in inference mode (batch-norm running statistics).
template <typename T>
Tensor<T> mask_and_decode_batch(model::Model<T>& m, const Tensor<T>& x, int n) {
    const auto& cfg = m.config();
    if (n < 0 || n >= cfg.num_encoders)
        throw std::out_of_range("mask_and_decode: encoder index out of range");
    m.set_training(false);
    auto zs = m.encode_all(x);
    const auto& zshape = zs[0]->value.shape();
    const std::size_t B = zshape[0], cz = zshape[1], hw = zshape[2] * zshape[3];
    Tensor<T> z_masked({B, static_cast<std::size_t>(cfg.num_encoders) * cz, zshape[2],
                        zshape[3]});
    for (std::size_t b = 0; b < B; ++b) {
        const T* src = zs[n]->value.data() + b * cz * hw;
        T* dst = z_masked.data() +
                 (b * cfg.num_encoders * cz + static_cast<std::size_t>(n) * cz) * hw;
        std::copy_n(src, cz * hw, dst);
    }
    return m.decode(z_masked)->value;
}

template <typename T>
Tensor<T> image_to_tensor(const datagen::Image& img) {
    Tensor<T> x({1, 1, static_cast<std::size_t>(img.height),
                 static_cast<std::size_t>(img.width)});
    for (std::size_t i = 0; i < img.px.size(); ++i) x[i] = static_cast<T>(img.px[i]);
    return x;
}

template <typename T>
SourceEstimate mask_and_decode(model::Model<T>& m, const datagen::Image& x, int n) {
    Tensor<T> out = mask_and_decode_batch(m, image_to_tensor<T>(x), n);
    SourceEstimate est;
    est.encoder_index = n;
    est.estimate = datagen::Image(static_cast<int>(out.dim(2)), static_cast<int>(out.dim(3)));
    for (std::size_t i = 0; i < out.numel(); ++i)
        est.estimate.px[i] = static_cast<float>(out[i]);
    return est;
}

template <typename T>
std::vector<SourceEstimate> estimate_all(model::Model<T>& m, const datagen::Image& x) {
    std::vector<SourceEstimate> out;
    out.reserve(m.config().num_encoders);
    for (int n = 0; n < m.config().num_encoders; ++n)
        out.push_back(mask_and_decode(m, x, n));
    return out;
}

inline datagen::Image crop_image(const datagen::Image& img, int margin) {
    if (margin < 0) throw std::invalid_argument("crop: negative margin");
    if (2 * margin >= img.height || 2 * margin >= img.width)
        throw std::invalid_argument("crop: margin too large for image extent");
    if (margin == 0) return img;
    datagen::Image out(img.height - 2 * margin, img.width - 2 * margin);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c) out.at(r, c) = img.at(r + margin, c + margin);
    return out;
}

inline SourceEstimate crop(const SourceEstimate& est, int margin) {
    SourceEstimate out;
    out.encoder_index = est.encoder_index;
    out.crop_margin = est.crop_margin + margin;
    out.estimate = crop_image(est.estimate, margin);
    return out;
}

struct DeadEncoderReport {
    std::vector<double> scores;         // mean |masked decode| per encoder
    std::vector<double> diagonal_mass;  // sum over hidden layers of |B_nn|
    std::vector<bool> dead;             // score < 20% of the others' mean
};

// An encoder is flagged dead when its score falls below 20% of the mean
// score of the remaining encoders.
inline std::vector<bool> dead_flags_from_scores(const std::vector<double>& scores) {
    const std::size_t n = scores.size();
    std::vector<bool> dead(n, false);
    if (n < 2) return dead;
    for (std::size_t i = 0; i < n; ++i) {
        double others = 0.0;
        for (std::size_t k = 0; k < n; ++k)
            if (k != i) others += scores[k];
        others /= static_cast<double>(n - 1);
        dead[i] = scores[i] < 0.2 * others;
    }
    return dead;
}

template <typename T>
DeadEncoderReport dead_encoder_score(model::Model<T>& m, const datagen::ImageStack& samples,
                                     std::int64_t max_samples = 256, int batch_size = 64) {
    if (samples.count < 1) throw std::invalid_argument("dead_encoder_score: no samples");
    const int N = m.config().num_encoders;
    const std::int64_t count = std::min<std::int64_t>(samples.count, max_samples);

    DeadEncoderReport report;
    report.scores.assign(N, 0.0);
    std::int64_t total = 0;
    const std::size_t hw = static_cast<std::size_t>(samples.height) * samples.width;
    for (std::int64_t begin = 0; begin < count; begin += batch_size) {
        std::int64_t end = std::min<std::int64_t>(begin + batch_size, count);
        const std::size_t b = static_cast<std::size_t>(end - begin);
        Tensor<T> x({b, 1, static_cast<std::size_t>(samples.height),
                     static_cast<std::size_t>(samples.width)});
        for (std::size_t i = 0; i < b; ++i) {
            const float* src = samples.sample(begin + static_cast<std::int64_t>(i));
            for (std::size_t j = 0; j < hw; ++j) x[i * hw + j] = static_cast<T>(src[j]);
        }
        for (int n = 0; n < N; ++n) {
            Tensor<T> est = mask_and_decode_batch(m, x, n);
            double acc = 0.0;
            for (std::size_t i = 0; i < est.numel(); ++i)
                acc += std::abs(static_cast<double>(est[i]));
            report.scores[n] += acc / static_cast<double>(hw);
        }
        total += end - begin;
    }
    for (auto& s : report.scores) s /= static_cast<double>(total);

    report.diagonal_mass.assign(N, 0.0);
    for (const auto& w : m.decoder_hidden_weights()) {
        auto part = losses::partition(w->value, N);
        for (int n = 0; n < N; ++n) {
            double acc = 0.0;
            losses::for_each_block_element(w->value, part, n, n, [&](std::size_t idx) {
                acc += std::abs(static_cast<double>(w->value[idx]));
            });
            report.diagonal_mass[n] += acc;
        }
    }

    report.dead = dead_flags_from_scores(report.scores);
    return report;
}

}  // namespace unmix::infer
