#include "unmix/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "unmix/errors.hpp"

using json = nlohmann::json;

namespace unmix::model {

namespace {

constexpr char kMagic[8] = {'U', 'N', 'M', 'I', 'X', 'A', 'E', '1'};

json config_to_json(const ModelConfig& cfg) {
    return json{{"num_encoders", cfg.num_encoders},
                {"input_channels", cfg.input_channels},
                {"image_size", cfg.image_size},
                {"encoder_channels", cfg.encoder_channels},
                {"encoding_channels", cfg.encoding_channels},
                {"encoder_kernel", cfg.encoder_kernel},
                {"decoder_channels", cfg.resolved_decoder_channels()},
                {"decoder_kernel", cfg.decoder_kernel},
                {"activation", "relu"}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.num_encoders = j.at("num_encoders").get<int>();
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.image_size = j.at("image_size").get<int>();
    cfg.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    cfg.encoding_channels = j.at("encoding_channels").get<int>();
    cfg.encoder_kernel = j.at("encoder_kernel").get<int>();
    cfg.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    cfg.decoder_kernel = j.at("decoder_kernel").get<int>();
    if (j.at("activation").get<std::string>() != "relu")
        throw std::runtime_error("checkpoint: unknown activation");
    return cfg;
}

json tensor_index(const std::vector<std::pair<std::string, Tensor<float>>>& items) {
    json arr = json::array();
    for (const auto& [name, t] : items)
        arr.push_back(json{{"name", name}, {"shape", t.shape()}});
    return arr;
}

}  // namespace

std::string model_config_to_json_string(const ModelConfig& cfg) {
    return config_to_json(cfg).dump(2);
}

ModelConfig model_config_from_json_string(const std::string& text) {
    return config_from_json(json::parse(text));
}

void save_checkpoint_file(const RawCheckpoint& ckpt, const std::string& path) {
    json header{{"format", "unmix-ae-checkpoint"},
                {"version", 1},
                {"config", config_to_json(ckpt.config)},
                {"epoch", ckpt.epoch},
                {"seed", ckpt.seed},
                {"params", tensor_index(ckpt.params)},
                {"buffers", tensor_index(ckpt.buffers)}};
    const std::string head = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    std::uint64_t len = head.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& group : {&ckpt.params, &ckpt.buffers})
        for (const auto& [name, t] : *group)
            f.write(reinterpret_cast<const char*>(t.data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("write failed: " + path);
}

RawCheckpoint load_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for reading: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("not an unmix-ae checkpoint: " + path);
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string head(len, '\0');
    f.read(head.data(), static_cast<std::streamsize>(len));
    if (!f) throw DataError("truncated checkpoint header: " + path);

    json header = json::parse(head);
    if (header.at("format").get<std::string>() != "unmix-ae-checkpoint")
        throw DataError("not an unmix-ae checkpoint: " + path);

    RawCheckpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.epoch = header.at("epoch").get<std::int64_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();

    auto read_group = [&](const json& index,
                          std::vector<std::pair<std::string, Tensor<float>>>& out) {
        for (const auto& item : index) {
            auto shape = item.at("shape").get<std::vector<std::size_t>>();
            Tensor<float> t(shape);
            f.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.numel() * sizeof(float)));
            if (!f) throw DataError("truncated checkpoint payload: " + path);
            out.emplace_back(item.at("name").get<std::string>(), std::move(t));
        }
    };
    read_group(header.at("params"), ckpt.params);
    read_group(header.at("buffers"), ckpt.buffers);
    return ckpt;
}

}  // namespace unmix::model
