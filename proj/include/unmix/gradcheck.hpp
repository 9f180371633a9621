#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "unmix/losses.hpp"
#include "unmix/model.hpp"
#include "unmix/rng.hpp"

namespace unmix::gradcheck {

struct TermEntry {
    std::string term;
    bool skipped = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t compared = 0;
    // zero-recon term only: encoder and normalization-affine gradients must
    // be exactly zero.
    double max_frozen_grad = 0.0;
    std::size_t frozen_checked = 0;
};

struct Report {
    std::vector<TermEntry> entries;
    std::size_t parameter_count = 0;

    bool all_passed(double tolerance) const {
        for (const auto& e : entries) {
            if (e.skipped) continue;
            if (e.max_rel_err >= tolerance) return false;
            if (e.max_frozen_grad != 0.0) return false;
        }
        return true;
    }
};

namespace detail {

inline bool is_affine_param(const std::string& name) {
    return name.find(".norm_gamma") != std::string::npos ||
           name.find(".norm_beta") != std::string::npos;
}

inline bool is_encoder_param(const std::string& name) {
    return name.rfind("encoder.", 0) == 0;
}

// Central finite differences against the analytic gradients of `loss_fn`.
// `fd_param` selects which parameters are compared; the rest are asserted to
// carry exactly zero analytic gradient.
inline TermEntry check_term(
    const std::string& term, std::vector<std::pair<std::string, VarPtr<double>>>& params,
    const std::function<double()>& loss_value, const std::function<VarPtr<double>()>& loss_graph,
    const std::function<bool(const std::string&)>& fd_param, double h) {
    TermEntry entry;
    entry.term = term;

    for (auto& [name, p] : params) {
        p->ensure_grad();
        p->grad.zero();
    }
    backward(loss_graph());

    for (auto& [name, p] : params) {
        const std::size_t n = p->value.numel();
        if (!fd_param(name)) {
            for (std::size_t i = 0; i < n; ++i) {
                const double g = std::abs(p->grad[i]);
                if (g > entry.max_frozen_grad) entry.max_frozen_grad = g;
                ++entry.frozen_checked;
            }
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double f_plus = loss_value();
            p->value[i] = saved - h;
            const double f_minus = loss_value();
            p->value[i] = saved;
            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double a = p->grad[i];
            const double denom = std::max({1.0, std::abs(a), std::abs(fd)});
            const double rel = std::abs(a - fd) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_param = name + "[" + std::to_string(i) + "]";
            }
            ++entry.compared;
        }
    }
    return entry;
}

}  // namespace detail

inline model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.num_encoders = 2;
    cfg.image_size = 16;
    cfg.input_channels = 1;
    cfg.encoder_channels = {4, 6};
    cfg.encoding_channels = 3;
    cfg.encoder_kernel = 3;
    cfg.decoder_channels = {8, 4};
    cfg.decoder_kernel = 4;
    return cfg;
}

// Compares analytic gradients of all four loss terms against central finite
// differences on a small 64-bit model. Terms whose lambda is zero are
// reported as skipped.
inline Report run(std::uint64_t seed, const losses::LossConfig& lc, double h = 1e-5,
                  int batch = 2) {
    auto m = model::Model<double>::build(tiny_config(), seed);
    m.set_training(true);

    // Move the test point to a generic position: freshly built models have
    // all-zero biases and betas, which parks every ReLU of the zero-encoding
    // pass exactly on its kink where finite differences are undefined.
    Rng jitter(derive_seed(seed, 3));
    auto params = m.named_parameters();
    for (auto& [name, p] : params) {
        const bool is_bias = name.find(".bias") != std::string::npos ||
                             name.find(".norm_beta") != std::string::npos;
        const bool is_gain = name.find(".norm_gamma") != std::string::npos;
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            if (is_bias) p->value[i] += jitter.uniform(0.02, 0.2) * (jitter.bernoulli(0.5) ? 1 : -1);
            if (is_gain) p->value[i] *= jitter.uniform(0.8, 1.2);
            // keep weights away from the L1 kink as well
            if (std::abs(p->value[i]) < 1e-3 && p->value[i] != 0.0)
                p->value[i] = p->value[i] > 0 ? 1e-3 : -1e-3;
        }
    }

    Rng rng(derive_seed(seed, 7));
    Tensor<double> x({static_cast<std::size_t>(batch), 1,
                      static_cast<std::size_t>(m.config().image_size),
                      static_cast<std::size_t>(m.config().image_size)});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(0.05, 0.95);

    Report report;
    for (auto& [name, p] : params) report.parameter_count += p->value.numel();

    auto any_param = [](const std::string&) { return true; };

    {
        auto graph = [&]() {
            auto [zs, x_hat] = m.forward(x);
            return ops::bce_mean(x_hat, x);
        };
        auto value = [&]() { return graph()->value[0]; };
        report.entries.push_back(
            detail::check_term("reconstruction", params, value, graph, any_param, h));
    }
    {
        TermEntry entry;
        if (lc.lambda_z == 0) {
            entry.term = "encoding_l2";
            entry.skipped = true;
            report.entries.push_back(entry);
        } else {
            auto graph = [&]() { return ops::encoding_l2_mean(m.encode_all(x)); };
            auto value = [&]() { return graph()->value[0]; };
            report.entries.push_back(
                detail::check_term("encoding_l2", params, value, graph, any_param, h));
        }
    }
    {
        TermEntry entry;
        if (lc.lambda_pathway == 0) {
            entry.term = "pathway_separation";
            entry.skipped = true;
            report.entries.push_back(entry);
        } else {
            auto graph = [&]() {
                return losses::pathway_loss(m.decoder_hidden_weights(),
                                            m.config().num_encoders, lc.alpha_scheme);
            };
            auto value = [&]() { return graph()->value[0]; };
            report.entries.push_back(
                detail::check_term("pathway_separation", params, value, graph, any_param, h));
        }
    }
    {
        TermEntry entry;
        if (lc.lambda_zero_recon == 0) {
            entry.term = "zero_reconstruction";
            entry.skipped = true;
            report.entries.push_back(entry);
        } else {
            auto graph = [&]() { return losses::zero_reconstruction_loss(m); };
            auto value = [&]() { return graph()->value[0]; };
            // The decoder's non-affine parameters receive gradients; encoder
            // parameters and normalization affine parameters must stay at
            // exactly zero.
            auto fd_param = [](const std::string& name) {
                return !detail::is_encoder_param(name) && !detail::is_affine_param(name);
            };
            report.entries.push_back(
                detail::check_term("zero_reconstruction", params, value, graph, fd_param, h));
        }
    }
    return report;
}

}  // namespace unmix::gradcheck
