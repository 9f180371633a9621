#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unmix/model.hpp"
#include "unmix/tensor.hpp"

namespace unmix::model {

// On-disk checkpoint: a JSON manifest (config, epoch, seed, parameter index)
// followed by the concatenated little-endian float32 blobs in index order.
struct RawCheckpoint {
    ModelConfig config;
    std::int64_t epoch = 0;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, Tensor<float>>> params;
    std::vector<std::pair<std::string, Tensor<float>>> buffers;
};

void save_checkpoint_file(const RawCheckpoint& ckpt, const std::string& path);
RawCheckpoint load_checkpoint_file(const std::string& path);

std::string model_config_to_json_string(const ModelConfig& cfg);
ModelConfig model_config_from_json_string(const std::string& text);

template <typename T>
RawCheckpoint to_raw(Model<T>& m) {
    RawCheckpoint raw;
    raw.config = m.config();
    raw.epoch = m.epoch;
    raw.seed = m.seed;
    for (auto& [name, p] : m.named_parameters())
        raw.params.emplace_back(name, p->value.template cast<float>());
    for (auto& [name, b] : m.named_buffers())
        raw.buffers.emplace_back(name, b->template cast<float>());
    return raw;
}

template <typename T>
Model<T> from_raw(const RawCheckpoint& raw) {
    Model<T> m = Model<T>::build(raw.config, raw.seed);
    m.epoch = raw.epoch;
    auto named = m.named_parameters();
    if (named.size() != raw.params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (named[i].first != raw.params[i].first)
            throw std::runtime_error("checkpoint: unexpected parameter " + raw.params[i].first);
        if (named[i].second->value.shape() != raw.params[i].second.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + raw.params[i].first);
        named[i].second->value = raw.params[i].second.template cast<T>();
    }
    auto buffers = m.named_buffers();
    if (buffers.size() != raw.buffers.size())
        throw std::runtime_error("checkpoint: buffer count mismatch");
    for (std::size_t i = 0; i < buffers.size(); ++i) {
        if (buffers[i].first != raw.buffers[i].first)
            throw std::runtime_error("checkpoint: unexpected buffer " + raw.buffers[i].first);
        *buffers[i].second = raw.buffers[i].second.template cast<T>();
    }
    return m;
}

template <typename T>
void save_checkpoint(Model<T>& m, const std::string& path) {
    save_checkpoint_file(to_raw(m), path);
}

// If `expect` is given, the stored config must match exactly (e.g. a model
// trained with a different number of encoders is rejected).
template <typename T>
Model<T> load_checkpoint(const std::string& path, const ModelConfig* expect = nullptr) {
    RawCheckpoint raw = load_checkpoint_file(path);
    if (expect && !(raw.config == *expect))
        throw std::runtime_error("checkpoint: stored config does not match expected config");
    return from_raw<T>(raw);
}

}  // namespace unmix::model
