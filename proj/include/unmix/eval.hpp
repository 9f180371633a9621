#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "unmix/datagen.hpp"
#include "unmix/infer.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"

namespace unmix::eval {

inline double mae(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
    return acc / static_cast<double>(n);
}

inline double mae(const datagen::Image& a, const datagen::Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("mae: shape mismatch");
    return mae(a.px.data(), b.px.data(), a.px.size());
}

struct MatchResult {
    std::vector<int> assignment;   // assignment[t] = estimate index chosen for truth t
    std::vector<double> pair_mae;  // cost of the chosen pair per truth
    double total_mae = 0.0;
};

// Injective assignment of truths to estimates minimizing total cost, by
// exhaustive recursion; intended for N <= 8.
inline MatchResult match_from_costs(const std::vector<std::vector<double>>& costs) {
    const std::size_t n_truths = costs.size();
    if (n_truths == 0) throw std::invalid_argument("match: no truths");
    const std::size_t n_estimates = costs[0].size();
    if (n_estimates < n_truths)
        throw std::invalid_argument("match: fewer estimates than truths");

    std::vector<int> current(n_truths, -1), best(n_truths, -1);
    std::vector<bool> used(n_estimates, false);
    double best_total = std::numeric_limits<double>::infinity();

    auto recurse = [&](auto&& self, std::size_t t, double acc) -> void {
        if (t == n_truths) {
            if (acc < best_total) {
                best_total = acc;
                best = current;
            }
            return;
        }
        for (std::size_t e = 0; e < n_estimates; ++e) {
            if (used[e]) continue;
            used[e] = true;
            current[t] = static_cast<int>(e);
            self(self, t + 1, acc + costs[t][e]);
            used[e] = false;
        }
    };
    recurse(recurse, 0, 0.0);

    MatchResult result;
    result.assignment = best;
    for (std::size_t t = 0; t < n_truths; ++t)
        result.pair_mae.push_back(costs[t][best[t]]);
    result.total_mae = best_total;
    return result;
}

inline MatchResult match_sources(const std::vector<datagen::Image>& estimates,
                                 const std::vector<datagen::Image>& truths) {
    if (estimates.size() < truths.size())
        throw std::invalid_argument("match_sources: fewer estimates than truths");
    std::vector<std::vector<double>> costs(truths.size(),
                                           std::vector<double>(estimates.size(), 0.0));
    for (std::size_t t = 0; t < truths.size(); ++t)
        for (std::size_t e = 0; e < estimates.size(); ++e)
            costs[t][e] = mae(estimates[e], truths[t]);
    return match_from_costs(costs);
}

// Entry (i,j) = sum of |w| over block (i,j), spatial taps included.
template <typename T>
Tensor<double> block_mass(const Tensor<T>& w, int n) {
    auto part = losses::partition(w, n);
    Tensor<double> mass({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            losses::for_each_block_element(w, part, i, j, [&](std::size_t idx) {
                acc += std::abs(static_cast<double>(w[idx]));
            });
            mass[static_cast<std::size_t>(i) * n + j] = acc;
        }
    return mass;
}

// One N x N matrix per pathway-partitionable decoder layer.
template <typename T>
std::vector<Tensor<double>> weight_mass(model::Model<T>& m) {
    std::vector<Tensor<double>> out;
    for (const auto& w : m.decoder_hidden_weights())
        out.push_back(block_mass(w->value, m.config().num_encoders));
    return out;
}

// The output layer is not N x N partitionable (single output channel); its
// mass is reported per input pathway block instead.
template <typename T>
std::vector<double> output_layer_pathway_mass(model::Model<T>& m) {
    const auto& layer = m.decoder.back();
    const Tensor<T>& w = layer.weight->value;
    const int n = m.config().num_encoders;
    const std::size_t c_in = w.dim(0);
    const std::size_t per = c_in / n;
    const std::size_t rest = w.numel() / c_in;
    std::vector<double> mass(n, 0.0);
    for (std::size_t r = 0; r < c_in; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rest; ++i)
            acc += std::abs(static_cast<double>(w[r * rest + i]));
        mass[std::min<std::size_t>(r / per, n - 1)] += acc;
    }
    return mass;
}

struct EvalReport {
    int num_encoders = 0;
    std::vector<int> permutation;  // [triangle, circle] -> encoder index
    double triangle_mae = 0.0;
    double circle_mae = 0.0;
    double mixture_mae = 0.0;
    std::vector<double> dead_scores;
    std::vector<double> diagonal_mass;
    std::vector<bool> dead_flags;
    std::vector<Tensor<double>> layer_block_mass;
    std::vector<double> output_layer_mass;
    std::int64_t samples_evaluated = 0;
};

// All metrics are computed on the held-out split. Encoder-to-source
// assignment minimizes total MAE over injective assignments, evaluated on
// per-pair costs averaged over the whole split.
template <typename T>
EvalReport evaluate(model::Model<T>& m, const datagen::ImageStack& mixtures,
                    const datagen::ImageStack& tri_sources,
                    const datagen::ImageStack& circ_sources, int crop_margin = 0,
                    int batch_size = 128, std::int64_t max_samples = -1) {
    if (mixtures.count != tri_sources.count || mixtures.count != circ_sources.count)
        throw std::invalid_argument("evaluate: split role counts differ");
    if (mixtures.count == 0) throw std::invalid_argument("evaluate: empty split");
    const int N = m.config().num_encoders;
    const std::int64_t count =
        max_samples > 0 ? std::min<std::int64_t>(mixtures.count, max_samples) : mixtures.count;
    const std::size_t hw = static_cast<std::size_t>(mixtures.height) * mixtures.width;
    const int H = mixtures.height, W = mixtures.width;
    if (2 * crop_margin >= H || 2 * crop_margin >= W)
        throw std::invalid_argument("evaluate: crop margin too large");

    m.set_training(false);

    // cost[s][n]: MAE between encoder n's estimate and source s, inside the
    // cropped region, averaged over samples.
    std::vector<std::vector<double>> cost(2, std::vector<double>(N, 0.0));
    std::vector<double> scores(N, 0.0);
    double mixture_abs = 0.0;
    const std::size_t crop_hw =
        static_cast<std::size_t>(H - 2 * crop_margin) * (W - 2 * crop_margin);

    auto cropped_abs_diff = [&](const T* est, const float* truth) {
        double acc = 0.0;
        for (int r = crop_margin; r < H - crop_margin; ++r)
            for (int c = crop_margin; c < W - crop_margin; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * W + c;
                acc += std::abs(static_cast<double>(est[i]) - truth[i]);
            }
        return acc / static_cast<double>(crop_hw);
    };

    for (std::int64_t begin = 0; begin < count; begin += batch_size) {
        const std::int64_t end = std::min<std::int64_t>(begin + batch_size, count);
        const std::size_t b = static_cast<std::size_t>(end - begin);
        Tensor<T> x({b, 1, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
        for (std::size_t i = 0; i < b; ++i) {
            const float* src = mixtures.sample(begin + static_cast<std::int64_t>(i));
            for (std::size_t j = 0; j < hw; ++j) x[i * hw + j] = static_cast<T>(src[j]);
        }

        auto [zs, x_hat] = m.forward(x);
        for (std::size_t i = 0; i < x.numel(); ++i)
            mixture_abs += std::abs(static_cast<double>(x_hat->value[i]) - x[i]);

        for (int n = 0; n < N; ++n) {
            Tensor<T> est = infer::mask_and_decode_batch(m, x, n);
            for (std::size_t i = 0; i < b; ++i) {
                const T* e = est.data() + i * hw;
                const std::int64_t s = begin + static_cast<std::int64_t>(i);
                cost[0][n] += cropped_abs_diff(e, tri_sources.sample(s));
                cost[1][n] += cropped_abs_diff(e, circ_sources.sample(s));
                double acc = 0.0;
                for (std::size_t j = 0; j < hw; ++j)
                    acc += std::abs(static_cast<double>(e[j]));
                scores[n] += acc / static_cast<double>(hw);
            }
        }
    }

    for (auto& row : cost)
        for (auto& v : row) v /= static_cast<double>(count);
    for (auto& s : scores) s /= static_cast<double>(count);

    MatchResult match = match_from_costs(cost);

    EvalReport report;
    report.num_encoders = N;
    report.permutation = match.assignment;
    report.triangle_mae = match.pair_mae[0];
    report.circle_mae = match.pair_mae[1];
    report.mixture_mae = mixture_abs / (static_cast<double>(count) * hw);
    report.dead_scores = scores;
    report.samples_evaluated = count;

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
    report.dead_flags = infer::dead_flags_from_scores(scores);
    report.layer_block_mass = weight_mass(m);
    report.output_layer_mass = output_layer_pathway_mass(m);
    return report;
}

std::string eval_report_to_json(const EvalReport& report);

}  // namespace unmix::eval
