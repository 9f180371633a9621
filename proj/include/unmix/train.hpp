#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "unmix/checkpoint.hpp"
#include "unmix/datagen.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"

namespace unmix::train {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 256;
    double learning_rate = 1e-3;
    int lr_step_epochs = 50;
    double lr_gamma = 0.1;
    double global_weight_decay = 1e-5;
    losses::LossConfig loss;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (!(learning_rate > 0))
            throw std::invalid_argument("train config: learning_rate must be positive");
        if (lr_step_epochs < 1)
            throw std::invalid_argument("train config: lr_step_epochs must be >= 1");
        if (!(lr_gamma > 0 && lr_gamma <= 1))
            throw std::invalid_argument("train config: lr_gamma must be in (0,1]");
        if (global_weight_decay < 0)
            throw std::invalid_argument("train config: weight decay must be non-negative");
        loss.validate();
    }
};

inline double step_lr(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw std::invalid_argument("step_lr: negative epoch");
    return cfg.learning_rate * std::pow(cfg.lr_gamma, epoch / cfg.lr_step_epochs);
}

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double loss_total = 0;
    double loss_recon = 0;
    double loss_pathway = 0;
    double loss_zero_recon = 0;
    double loss_z = 0;
    double val_recon_mae = 0;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_mae = 0;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::string term, int epoch, int batch)
        : std::runtime_error("training diverged: non-finite " + term + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch)),
          term_(std::move(term)) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

// Adaptive moment estimation with L2-style weight decay added to the
// gradient of every parameter.
template <typename T>
class Adam {
public:
    Adam(std::vector<VarPtr<T>> params, double lr, double weight_decay)
        : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void set_lr(double lr) { lr_ = lr; }

    void zero_grad() {
        for (auto& p : params_) {
            p->ensure_grad();
            p->grad.zero();
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            p->ensure_grad();
            T* w = p->value.data();
            const T* g = p->grad.data();
            T* m = m_[pi].data();
            T* v = v_[pi].data();
            const std::size_t n = p->value.numel();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]) + weight_decay_ * w[i];
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                w[i] -= static_cast<T>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
            }
        }
    }

private:
    std::vector<VarPtr<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_;
    double weight_decay_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
};

// One epoch-worth of batches of mixture rows copied into an NCHW tensor.
template <typename T>
Tensor<T> make_batch(const datagen::ImageStack& stack, const std::vector<std::int64_t>& order,
                     std::size_t begin, std::size_t end) {
    const std::size_t b = end - begin;
    const std::size_t hw = static_cast<std::size_t>(stack.height) * stack.width;
    Tensor<T> x({b, 1, static_cast<std::size_t>(stack.height),
                 static_cast<std::size_t>(stack.width)});
    for (std::size_t i = 0; i < b; ++i) {
        const float* src = stack.sample(order[begin + i]);
        T* dst = x.data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) dst[j] = static_cast<T>(src[j]);
    }
    return x;
}

template <typename T>
double validation_recon_mae(model::Model<T>& m, const datagen::ImageStack& val,
                            int batch_size = 128) {
    if (val.count == 0) return std::nan("");
    const bool was_training = m.training();
    m.set_training(false);
    std::vector<std::int64_t> order(val.count);
    for (std::int64_t i = 0; i < val.count; ++i) order[i] = i;
    double acc = 0.0;
    std::size_t total = 0;
    for (std::int64_t begin = 0; begin < val.count; begin += batch_size) {
        std::int64_t end = std::min<std::int64_t>(begin + batch_size, val.count);
        Tensor<T> x = make_batch<T>(val, order, begin, end);
        auto [zs, x_hat] = m.forward(x);
        for (std::size_t i = 0; i < x.numel(); ++i)
            acc += std::abs(static_cast<double>(x_hat->value[i]) - x[i]);
        total += x.numel();
    }
    m.set_training(was_training);
    return acc / static_cast<double>(total);
}

// Algorithm: per batch, one primary forward pass (reconstruction, encoding L2,
// pathway terms) plus a second decoder-only pass with a zero encoding; both
// contribute gradients to the same optimizer step. Batch-norm statistics are
// only touched by the primary pass, and the learning-rate schedule follows
// step_lr exactly. Training runs from model.epoch up to cfg.epochs, so a
// loaded checkpoint resumes its schedule.
template <typename T>
TrainReport fit(model::Model<T>& m, const datagen::ImageStack& train_mixtures,
                const datagen::ImageStack& val_mixtures, const TrainConfig& cfg,
                const std::string& out_dir = "", std::ostream* log = nullptr) {
    cfg.validate();
    if (train_mixtures.count == 0) throw std::invalid_argument("fit: empty training set");
    if (train_mixtures.height != m.config().image_size ||
        train_mixtures.width != m.config().image_size)
        throw std::invalid_argument("fit: data does not match model image_size");

    TrainReport report;
    auto params = m.parameters();
    Adam<T> opt(params, cfg.learning_rate, cfg.global_weight_decay);
    auto hidden_weights = m.decoder_hidden_weights();

    std::ofstream csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        csv.open(std::filesystem::path(out_dir) / "training_log.csv", std::ios::trunc);
        csv << "epoch,lr,loss_total,loss_recon,loss_pathway,loss_zero_recon,loss_z,"
               "val_recon_mae,seconds\n";
    }

    std::vector<std::int64_t> order(train_mixtures.count);
    for (std::int64_t i = 0; i < train_mixtures.count; ++i) order[i] = i;

    for (int epoch = static_cast<int>(m.epoch); epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = step_lr(epoch, cfg);
        opt.set_lr(lr);
        m.set_training(true);

        // Per-epoch reshuffle from the run seed.
        Rng shuffle_rng(derive_seed(cfg.seed, 0x51000000ULL + static_cast<std::uint64_t>(epoch)));
        for (std::int64_t i = train_mixtures.count - 1; i > 0; --i) {
            std::int64_t j = static_cast<std::int64_t>(
                shuffle_rng.next_below(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[i], order[j]);
        }

        losses::LossParts epoch_parts;
        double epoch_total = 0.0;
        int batches = 0;

        for (std::int64_t begin = 0; begin < train_mixtures.count;
             begin += cfg.batch_size, ++batches) {
            std::int64_t end =
                std::min<std::int64_t>(begin + cfg.batch_size, train_mixtures.count);
            Tensor<T> x = make_batch<T>(train_mixtures, order, begin, end);

            auto [zs, x_hat] = m.forward(x);
            VarPtr<T> recon = ops::bce_mean(x_hat, x);
            VarPtr<T> total = recon;

            losses::LossParts parts;
            parts.reconstruction = recon->value[0];
            if (cfg.loss.lambda_pathway > 0) {
                VarPtr<T> pw = losses::pathway_loss(hidden_weights, m.config().num_encoders,
                                                    cfg.loss.alpha_scheme);
                parts.pathway = pw->value[0];
                total = ops::add(total, ops::scale(pw, static_cast<T>(cfg.loss.lambda_pathway)));
            }
            if (cfg.loss.lambda_zero_recon > 0) {
                VarPtr<T> zr = losses::zero_reconstruction_loss(m);
                parts.zero_reconstruction = zr->value[0];
                total = ops::add(total,
                                 ops::scale(zr, static_cast<T>(cfg.loss.lambda_zero_recon)));
            }
            if (cfg.loss.lambda_z > 0) {
                VarPtr<T> lz = ops::encoding_l2_mean(zs);
                parts.encoding = lz->value[0];
                total = ops::add(total, ops::scale(lz, static_cast<T>(cfg.loss.lambda_z)));
            }

            double total_value;
            try {
                total_value = losses::total_loss(parts, cfg.loss);
            } catch (const std::runtime_error& e) {
                std::string msg = e.what();
                std::string term = msg.substr(msg.rfind(": ") + 2);
                throw DivergenceError(term, epoch, batches);
            }

            opt.zero_grad();
            backward(total);
            opt.step();

            epoch_parts.reconstruction += parts.reconstruction;
            epoch_parts.pathway += parts.pathway;
            epoch_parts.zero_reconstruction += parts.zero_reconstruction;
            epoch_parts.encoding += parts.encoding;
            epoch_total += total_value;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.loss_total = epoch_total / batches;
        rec.loss_recon = epoch_parts.reconstruction / batches;
        rec.loss_pathway = epoch_parts.pathway / batches;
        rec.loss_zero_recon = epoch_parts.zero_reconstruction / batches;
        rec.loss_z = epoch_parts.encoding / batches;
        rec.val_recon_mae = validation_recon_mae(m, val_mixtures);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(rec);

        m.epoch = epoch + 1;
        if (!out_dir.empty()) {
            auto last = (std::filesystem::path(out_dir) / "last.ckpt").string();
            model::save_checkpoint(m, last);
            report.last_checkpoint = last;
        }
        const bool better = report.best_epoch < 0 ||
                            (!std::isnan(rec.val_recon_mae) &&
                             rec.val_recon_mae < report.best_val_mae);
        if (better) {
            report.best_epoch = epoch;
            report.best_val_mae = rec.val_recon_mae;
            if (!out_dir.empty()) {
                auto best = (std::filesystem::path(out_dir) / "best.ckpt").string();
                model::save_checkpoint(m, best);
                report.best_checkpoint = best;
            }
        }

        if (csv.is_open())
            csv << rec.epoch << ',' << rec.lr << ',' << rec.loss_total << ',' << rec.loss_recon
                << ',' << rec.loss_pathway << ',' << rec.loss_zero_recon << ',' << rec.loss_z
                << ',' << rec.val_recon_mae << ',' << rec.seconds << '\n'
                << std::flush;
        if (log)
            (*log) << "epoch " << rec.epoch << " lr " << rec.lr << " total " << rec.loss_total
                   << " recon " << rec.loss_recon << " pathway " << rec.loss_pathway
                   << " zero " << rec.loss_zero_recon << " z " << rec.loss_z << " val_mae "
                   << rec.val_recon_mae << " (" << rec.seconds << "s)\n"
                   << std::flush;
    }
    return report;
}

// Convenience wrapper over an in-memory split.
template <typename T>
TrainReport fit(model::Model<T>& m, const datagen::DatasetSplit& data, const TrainConfig& cfg,
                const std::string& out_dir = "", std::ostream* log = nullptr) {
    auto to_stack = [](const std::vector<datagen::MixtureSample>& samples) {
        datagen::ImageStack stack;
        if (samples.empty()) return stack;
        stack.count = static_cast<std::int64_t>(samples.size());
        stack.height = samples[0].mixture.height;
        stack.width = samples[0].mixture.width;
        stack.px.reserve(samples.size() * samples[0].mixture.px.size());
        for (const auto& s : samples)
            stack.px.insert(stack.px.end(), s.mixture.px.begin(), s.mixture.px.end());
        return stack;
    };
    datagen::ImageStack train_stack = to_stack(data.train);
    datagen::ImageStack val_stack = to_stack(data.test);
    return fit(m, train_stack, val_stack, cfg, out_dir, log);
}

}  // namespace unmix::train
