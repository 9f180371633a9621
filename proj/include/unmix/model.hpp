#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unmix/ops.hpp"
#include "unmix/rng.hpp"

namespace unmix::model {

enum class Activation { relu };

// N parallel encoders, one decoder. Encoders: stride-2 conv blocks with batch
// norm + activation on hidden layers and a bare conv producing the encoding.
// Decoder: stride-2 transposed-conv blocks with group norm (groups = N) +
// activation on hidden layers and a weight-normalized sigmoid output layer.
struct ModelConfig {
    int num_encoders = 3;
    int input_channels = 1;
    int image_size = 64;
    std::vector<int> encoder_channels = {32, 64, 128};
    int encoding_channels = 16;  // c_z per encoder
    int encoder_kernel = 3;
    std::vector<int> decoder_channels;  // hidden widths; empty -> {32N, 16N, 8N}
    int decoder_kernel = 4;
    Activation activation = Activation::relu;

    int depth() const { return static_cast<int>(encoder_channels.size()) + 1; }

    std::vector<int> resolved_decoder_channels() const {
        if (!decoder_channels.empty()) return decoder_channels;
        std::vector<int> widths;
        int w = 32;
        for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
            widths.push_back(w * num_encoders);
            w /= 2;
        }
        return widths;
    }

    int encoding_spatial() const {
        int s = image_size;
        for (int i = 0; i < depth(); ++i) s /= 2;
        return s;
    }

    void validate() const {
        if (num_encoders < 1) throw std::invalid_argument("config: num_encoders must be >= 1");
        if (input_channels < 1) throw std::invalid_argument("config: input_channels must be >= 1");
        if (encoding_channels < 1)
            throw std::invalid_argument("config: encoding_channels must be >= 1");
        if (encoder_kernel < 2 || decoder_kernel < 2)
            throw std::invalid_argument("config: kernel sizes must be >= 2");
        if (encoder_channels.empty()) throw std::invalid_argument("config: no encoder layers");
        for (int c : encoder_channels)
            if (c < 1) throw std::invalid_argument("config: encoder width must be positive");
        auto dec = resolved_decoder_channels();
        if (dec.size() != encoder_channels.size())
            throw std::invalid_argument(
                "config: decoder depth must mirror encoder depth (equal hidden layer counts)");
        for (int c : dec) {
            if (c < 1) throw std::invalid_argument("config: decoder width must be positive");
            if (c % num_encoders != 0)
                throw std::invalid_argument("config: decoder width " + std::to_string(c) +
                                            " not divisible by num_encoders");
        }
        int s = image_size;
        for (int i = 0; i < depth(); ++i) {
            if (s % 2 != 0)
                throw std::invalid_argument("config: image_size must halve at every block");
            s /= 2;
        }
        if (s < 1) throw std::invalid_argument("config: encoding spatial size is zero");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Layer {
    VarPtr<T> weight;              // conv [Co,Ci,k,k]; transposed conv [Ci,Co,k,k]
    VarPtr<T> weight_g;            // magnitude, weight-normalized output layer only
    VarPtr<T> bias;
    VarPtr<T> norm_gamma, norm_beta;
    Tensor<T> running_mean, running_var;  // batch-norm buffers (encoders only)
    bool has_norm = false;
    bool weight_normed = false;
};

template <typename T>
class Model {
public:
    std::vector<std::vector<Layer<T>>> encoders;  // [N][depth]
    std::vector<Layer<T>> decoder;                // [depth]
    std::int64_t epoch = 0;
    std::uint64_t seed = 0;

    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg_ = cfg;
        m.seed = seed;
        Rng rng(seed);

        const int k_enc = cfg.encoder_kernel;
        for (int n = 0; n < cfg.num_encoders; ++n) {
            std::vector<Layer<T>> blocks;
            int c_in = cfg.input_channels;
            std::vector<int> widths = cfg.encoder_channels;
            widths.push_back(cfg.encoding_channels);
            for (std::size_t i = 0; i < widths.size(); ++i) {
                const int c_out = widths[i];
                Layer<T> layer;
                layer.weight = init_conv_weight(
                    rng, {static_cast<std::size_t>(c_out), static_cast<std::size_t>(c_in),
                          static_cast<std::size_t>(k_enc), static_cast<std::size_t>(k_enc)},
                    static_cast<std::size_t>(c_in) * k_enc * k_enc,
                    param_name("encoder." + std::to_string(n), i, "weight"));
                layer.bias = zero_param({static_cast<std::size_t>(c_out)},
                                        param_name("encoder." + std::to_string(n), i, "bias"));
                if (i + 1 < widths.size()) {  // no normalization on the encoder output
                    layer.has_norm = true;
                    layer.norm_gamma =
                        const_param({static_cast<std::size_t>(c_out)}, T(1),
                                    param_name("encoder." + std::to_string(n), i, "norm_gamma"));
                    layer.norm_beta =
                        const_param({static_cast<std::size_t>(c_out)}, T(0),
                                    param_name("encoder." + std::to_string(n), i, "norm_beta"));
                    layer.running_mean = Tensor<T>({static_cast<std::size_t>(c_out)});
                    layer.running_var = Tensor<T>({static_cast<std::size_t>(c_out)});
                    layer.running_var.fill(T(1));
                }
                blocks.push_back(std::move(layer));
                c_in = c_out;
            }
            m.encoders.push_back(std::move(blocks));
        }

        const int k_dec = cfg.decoder_kernel;
        std::vector<int> widths = cfg.resolved_decoder_channels();
        widths.push_back(cfg.input_channels);
        int c_in = cfg.num_encoders * cfg.encoding_channels;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const int c_out = widths[i];
            const bool is_output = i + 1 == widths.size();
            Layer<T> layer;
            layer.weight = init_conv_weight(
                rng, {static_cast<std::size_t>(c_in), static_cast<std::size_t>(c_out),
                      static_cast<std::size_t>(k_dec), static_cast<std::size_t>(k_dec)},
                static_cast<std::size_t>(c_out) * k_dec * k_dec,
                param_name("decoder", i, is_output ? "weight_v" : "weight"));
            layer.bias =
                zero_param({static_cast<std::size_t>(c_out)}, param_name("decoder", i, "bias"));
            if (is_output) {
                layer.weight_normed = true;
                // g starts as the direction norms, so the effective weight
                // initially equals v.
                Tensor<T> g({static_cast<std::size_t>(c_in)});
                const std::size_t slice = layer.weight->value.numel() / c_in;
                for (int s = 0; s < c_in; ++s) {
                    double sq = 0.0;
                    const T* vp = layer.weight->value.data() + s * slice;
                    for (std::size_t j = 0; j < slice; ++j)
                        sq += static_cast<double>(vp[j]) * vp[j];
                    g[s] = static_cast<T>(std::sqrt(sq));
                }
                layer.weight_g = make_leaf<T>(std::move(g), true,
                                              param_name("decoder", i, "weight_g"));
            } else {
                layer.has_norm = true;
                layer.norm_gamma = const_param({static_cast<std::size_t>(c_out)}, T(1),
                                               param_name("decoder", i, "norm_gamma"));
                layer.norm_beta = const_param({static_cast<std::size_t>(c_out)}, T(0),
                                              param_name("decoder", i, "norm_beta"));
            }
            m.decoder.push_back(std::move(layer));
            c_in = c_out;
        }
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    bool training() const { return training_; }
    void set_training(bool t) { training_ = t; }

    // Every encoder sees the identical input.
    std::vector<VarPtr<T>> encode_all(const VarPtr<T>& x) {
        check_input(x->value);
        std::vector<VarPtr<T>> zs;
        zs.reserve(encoders.size());
        for (auto& blocks : encoders) {
            VarPtr<T> h = x;
            for (auto& layer : blocks) {
                h = ops::conv2d(h, layer.weight, layer.bias, 2, (cfg_.encoder_kernel - 1) / 2);
                if (layer.has_norm) {
                    h = ops::batch_norm2d(h, layer.norm_gamma, layer.norm_beta,
                                          layer.running_mean, layer.running_var, training_,
                                          T(0.1), T(1e-5));
                    h = ops::relu(h);
                }
            }
            zs.push_back(h);
        }
        return zs;
    }

    std::vector<VarPtr<T>> encode_all(const Tensor<T>& x) {
        return encode_all(make_leaf<T>(x, false));
    }

    VarPtr<T> decode(const VarPtr<T>& z_cat, bool freeze_affine = false) {
        const std::size_t expect =
            static_cast<std::size_t>(cfg_.num_encoders) * cfg_.encoding_channels;
        if (z_cat->value.rank() != 4 || z_cat->value.dim(1) != expect)
            throw std::invalid_argument("decode: expected " + std::to_string(expect) +
                                        " channels, got " +
                                        std::to_string(z_cat->value.dim(1)));
        const int k = cfg_.decoder_kernel;
        const int pad = k % 2 == 0 ? k / 2 - 1 : (k - 1) / 2;
        const int out_pad = k % 2 == 0 ? 0 : 1;
        VarPtr<T> h = z_cat;
        for (auto& layer : decoder) {
            if (layer.weight_normed) {
                VarPtr<T> w_eff = ops::weight_norm(layer.weight, layer.weight_g);
                h = ops::conv_transpose2d(h, w_eff, layer.bias, 2, pad, out_pad);
                h = ops::sigmoid(h);
            } else {
                h = ops::conv_transpose2d(h, layer.weight, layer.bias, 2, pad, out_pad);
                h = ops::group_norm(h, layer.norm_gamma, layer.norm_beta, cfg_.num_encoders,
                                    T(1e-5), freeze_affine);
                h = ops::relu(h);
            }
        }
        return h;
    }

    VarPtr<T> decode(const Tensor<T>& z_cat, bool freeze_affine = false) {
        return decode(make_leaf<T>(z_cat, false), freeze_affine);
    }

    std::pair<std::vector<VarPtr<T>>, VarPtr<T>> forward(const VarPtr<T>& x) {
        auto zs = encode_all(x);
        auto x_hat = decode(ops::concat_channels(zs));
        return {std::move(zs), std::move(x_hat)};
    }

    std::pair<std::vector<VarPtr<T>>, VarPtr<T>> forward(const Tensor<T>& x) {
        return forward(make_leaf<T>(x, false));
    }

    std::vector<std::pair<std::string, VarPtr<T>>> named_parameters() {
        std::vector<std::pair<std::string, VarPtr<T>>> out;
        for (auto& blocks : encoders)
            for (auto& layer : blocks) append_layer_params(out, layer);
        for (auto& layer : decoder) append_layer_params(out, layer);
        return out;
    }

    std::vector<VarPtr<T>> parameters() {
        std::vector<VarPtr<T>> out;
        for (auto& [name, p] : named_parameters()) out.push_back(p);
        return out;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_buffers() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (auto& blocks : encoders)
            for (auto& layer : blocks)
                if (layer.has_norm) {
                    out.emplace_back(layer.norm_gamma->name.substr(
                                         0, layer.norm_gamma->name.rfind('.')) +
                                         ".running_mean",
                                     &layer.running_mean);
                    out.emplace_back(layer.norm_gamma->name.substr(
                                         0, layer.norm_gamma->name.rfind('.')) +
                                         ".running_var",
                                     &layer.running_var);
                }
        return out;
    }

    // Pathway-eligible weights: every decoder layer except the output.
    std::vector<VarPtr<T>> decoder_hidden_weights() {
        std::vector<VarPtr<T>> out;
        for (auto& layer : decoder)
            if (!layer.weight_normed) out.push_back(layer.weight);
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& p : parameters()) n += p->value.numel();
        return n;
    }

private:
    ModelConfig cfg_;
    bool training_ = true;

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(cfg_.input_channels) ||
            x.dim(2) != static_cast<std::size_t>(cfg_.image_size) ||
            x.dim(3) != static_cast<std::size_t>(cfg_.image_size))
            throw std::invalid_argument("encode: input shape mismatch");
    }

    static std::string param_name(const std::string& prefix, std::size_t layer_idx,
                                  const std::string& kind) {
        return prefix + ".layer." + std::to_string(layer_idx) + "." + kind;
    }

    static VarPtr<T> init_conv_weight(Rng& rng, std::vector<std::size_t> shape,
                                      std::size_t fan_in, std::string name) {
        Tensor<T> w(std::move(shape));
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < w.numel(); ++i)
            w[i] = static_cast<T>(rng.normal(0.0, stddev));
        return make_leaf<T>(std::move(w), true, std::move(name));
    }

    static VarPtr<T> zero_param(std::vector<std::size_t> shape, std::string name) {
        return make_leaf<T>(Tensor<T>(std::move(shape)), true, std::move(name));
    }

    static VarPtr<T> const_param(std::vector<std::size_t> shape, T v, std::string name) {
        Tensor<T> t(std::move(shape));
        t.fill(v);
        return make_leaf<T>(std::move(t), true, std::move(name));
    }

    static void append_layer_params(std::vector<std::pair<std::string, VarPtr<T>>>& out,
                                    Layer<T>& layer) {
        out.emplace_back(layer.weight->name, layer.weight);
        if (layer.weight_normed) out.emplace_back(layer.weight_g->name, layer.weight_g);
        out.emplace_back(layer.bias->name, layer.bias);
        if (layer.has_norm) {
            out.emplace_back(layer.norm_gamma->name, layer.norm_gamma);
            out.emplace_back(layer.norm_beta->name, layer.norm_beta);
        }
    }
};

}  // namespace unmix::model
