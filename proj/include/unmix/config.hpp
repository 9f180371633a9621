#pragma once

#include <cstdint>
#include <string>

#include "unmix/datagen.hpp"
#include "unmix/errors.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"
#include "unmix/train.hpp"

namespace unmix::config {

// Union of every tunable knob; one master seed covers generation,
// initialization and training so a run is reproducible from (file, seed).
struct RunConfig {
    model::ModelConfig model;
    train::TrainConfig train;
    datagen::MixingConfig mixing;
    std::int64_t n_pairs = 150000;
    double split_fraction = 0.8;
    int crop_margin = 0;
    std::uint64_t seed = 0;

    void set_seed(std::uint64_t s) {
        seed = s;
        train.seed = s;
        mixing.seed = s;
    }

    void validate() const {
        model.validate();
        train.validate();
        if (n_pairs < 1) throw ConfigError("config: n_pairs must be >= 1");
        if (!(split_fraction > 0.0 && split_fraction < 1.0))
            throw ConfigError("config: split_fraction outside (0,1)");
        if (crop_margin < 0) throw ConfigError("config: crop_margin must be non-negative");
    }
};

// Flat `key = value` text, one pair per line, '#' comments. Unknown keys are
// rejected; an empty file yields the defaults above (the published toy-run
// settings). See README for the key list.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

std::string run_config_to_text(const RunConfig& cfg);

}  // namespace unmix::config
