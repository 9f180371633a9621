#include "unmix/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "unmix/io.hpp"

namespace unmix::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

long long parse_int(const std::string& v, int line) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) fail(line, "expected integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& v, int line) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        fail(line, "expected unsigned integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) fail(line, "expected number, got '" + v + "'");
        return out;
    } catch (const std::logic_error&) {
        fail(line, "expected number, got '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& v, int line) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) fail(line, "empty list element");
        out.push_back(static_cast<int>(parse_int(item, line)));
    }
    if (out.empty()) fail(line, "empty list");
    return out;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    cfg.set_seed(0);
    bool decoder_width_set = false;
    int decoder_width = 0;

    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        std::string line = raw;
        if (auto pos = line.find('#'); pos != std::string::npos) line = line.substr(0, pos);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) fail(line_no, "expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(line_no, "missing key");
        if (value.empty()) fail(line_no, "missing value for '" + key + "'");

        if (key == "num_encoders") cfg.model.num_encoders = (int)parse_int(value, line_no);
        else if (key == "image_size") cfg.model.image_size = (int)parse_int(value, line_no);
        else if (key == "input_channels") cfg.model.input_channels = (int)parse_int(value, line_no);
        else if (key == "encoder_channels") cfg.model.encoder_channels = parse_int_list(value, line_no);
        else if (key == "encoding_channels") cfg.model.encoding_channels = (int)parse_int(value, line_no);
        else if (key == "encoder_kernel") cfg.model.encoder_kernel = (int)parse_int(value, line_no);
        else if (key == "decoder_channels") cfg.model.decoder_channels = parse_int_list(value, line_no);
        else if (key == "decoder_width") { decoder_width = (int)parse_int(value, line_no); decoder_width_set = true; }
        else if (key == "decoder_kernel") cfg.model.decoder_kernel = (int)parse_int(value, line_no);
        else if (key == "activation") {
            if (value != "relu") fail(line_no, "unknown activation '" + value + "'");
            cfg.model.activation = model::Activation::relu;
        }
        else if (key == "epochs") cfg.train.epochs = (int)parse_int(value, line_no);
        else if (key == "batch_size") cfg.train.batch_size = (int)parse_int(value, line_no);
        else if (key == "learning_rate") cfg.train.learning_rate = parse_real(value, line_no);
        else if (key == "lr_step_epochs") cfg.train.lr_step_epochs = (int)parse_int(value, line_no);
        else if (key == "lr_gamma") cfg.train.lr_gamma = parse_real(value, line_no);
        else if (key == "weight_decay") cfg.train.global_weight_decay = parse_real(value, line_no);
        else if (key == "lambda_pathway") cfg.train.loss.lambda_pathway = parse_real(value, line_no);
        else if (key == "lambda_zero_recon") cfg.train.loss.lambda_zero_recon = parse_real(value, line_no);
        else if (key == "lambda_z") cfg.train.loss.lambda_z = parse_real(value, line_no);
        else if (key == "alpha_scheme") {
            if (value == "uniform") cfg.train.loss.alpha_scheme = losses::AlphaScheme::uniform;
            else if (value == "positional") cfg.train.loss.alpha_scheme = losses::AlphaScheme::positional;
            else fail(line_no, "alpha_scheme must be 'uniform' or 'positional'");
        }
        else if (key == "mix_alpha") cfg.mixing.alpha = parse_real(value, line_no);
        else if (key == "flip_probability") cfg.mixing.flip_probability = parse_real(value, line_no);
        else if (key == "n_pairs") cfg.n_pairs = parse_int(value, line_no);
        else if (key == "split_fraction") cfg.split_fraction = parse_real(value, line_no);
        else if (key == "crop_margin") cfg.crop_margin = (int)parse_int(value, line_no);
        else if (key == "seed") cfg.set_seed(parse_u64(value, line_no));
        else fail(line_no, "unknown key '" + key + "'");
    }

    if (decoder_width_set) {
        // Shorthand: widest hidden layer, halving per layer.
        std::vector<int> widths;
        int w = decoder_width;
        for (std::size_t i = 0; i < cfg.model.encoder_channels.size(); ++i) {
            widths.push_back(w);
            if (i + 1 < cfg.model.encoder_channels.size()) {
                if (w % 2 != 0)
                    throw ConfigError("config: decoder_width " + std::to_string(decoder_width) +
                                      " is not cleanly halvable to depth " +
                                      std::to_string(cfg.model.encoder_channels.size()));
                w /= 2;
            }
        }
        cfg.model.decoder_channels = widths;
    }

    try {
        cfg.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

std::string run_config_to_text(const RunConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    auto list = [](const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += std::to_string(v[i]) + (i + 1 < v.size() ? "," : "");
        return s;
    };
    out << "num_encoders = " << cfg.model.num_encoders << "\n";
    out << "image_size = " << cfg.model.image_size << "\n";
    out << "input_channels = " << cfg.model.input_channels << "\n";
    out << "encoder_channels = " << list(cfg.model.encoder_channels) << "\n";
    out << "encoding_channels = " << cfg.model.encoding_channels << "\n";
    out << "encoder_kernel = " << cfg.model.encoder_kernel << "\n";
    out << "decoder_channels = " << list(cfg.model.resolved_decoder_channels()) << "\n";
    out << "decoder_kernel = " << cfg.model.decoder_kernel << "\n";
    out << "activation = relu\n";
    out << "epochs = " << cfg.train.epochs << "\n";
    out << "batch_size = " << cfg.train.batch_size << "\n";
    out << "learning_rate = " << cfg.train.learning_rate << "\n";
    out << "lr_step_epochs = " << cfg.train.lr_step_epochs << "\n";
    out << "lr_gamma = " << cfg.train.lr_gamma << "\n";
    out << "weight_decay = " << cfg.train.global_weight_decay << "\n";
    out << "lambda_pathway = " << cfg.train.loss.lambda_pathway << "\n";
    out << "lambda_zero_recon = " << cfg.train.loss.lambda_zero_recon << "\n";
    out << "lambda_z = " << cfg.train.loss.lambda_z << "\n";
    out << "alpha_scheme = "
        << (cfg.train.loss.alpha_scheme == losses::AlphaScheme::uniform ? "uniform"
                                                                        : "positional")
        << "\n";
    out << "mix_alpha = " << cfg.mixing.alpha << "\n";
    out << "flip_probability = " << cfg.mixing.flip_probability << "\n";
    out << "n_pairs = " << cfg.n_pairs << "\n";
    out << "split_fraction = " << cfg.split_fraction << "\n";
    out << "crop_margin = " << cfg.crop_margin << "\n";
    out << "seed = " << cfg.seed << "\n";
    return out.str();
}

}  // namespace unmix::config
