#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "unmix/checkpoint.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"
#include "unmix/rng.hpp"

using namespace unmix;
using model::Model;
using model::ModelConfig;

namespace {

ModelConfig small_config(int n_encoders = 3) {
    ModelConfig cfg;
    cfg.num_encoders = n_encoders;
    cfg.image_size = 32;
    cfg.encoder_channels = {8, 12};
    cfg.encoding_channels = 4;
    cfg.decoder_channels = {8 * n_encoders, 4 * n_encoders};
    return cfg;
}

Tensor<float> random_batch(int b, int size, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> x({static_cast<std::size_t>(b), 1, static_cast<std::size_t>(size),
                     static_cast<std::size_t>(size)});
    for (std::size_t i = 0; i < x.numel(); ++i)
        x[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    return x;
}

}  // namespace

TEST_CASE("config validation: widths, divisibility, depth") {
    ModelConfig cfg;  // defaults: N=3, decoder widths {96,48,24}
    CHECK(cfg.resolved_decoder_channels() == std::vector<int>{96, 48, 24});
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.encoding_spatial() == 4);

    ModelConfig bad;
    bad.num_encoders = 2;
    bad.decoder_channels = {33, 16, 8};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    ModelConfig wrong_depth = small_config();
    wrong_depth.decoder_channels = {24};
    CHECK_THROWS_AS(wrong_depth.validate(), std::invalid_argument);
}

TEST_CASE("build is deterministic in (config, seed)") {
    auto a = Model<float>::build(small_config(), 5);
    auto b = Model<float>::build(small_config(), 5);
    auto c = Model<float>::build(small_config(), 6);
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    auto pc = c.named_parameters();
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_diff_seed = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        for (std::size_t j = 0; j < pa[i].second->value.numel(); ++j) {
            if (pa[i].second->value[j] != pb[i].second->value[j]) all_equal = false;
            if (pa[i].second->value[j] != pc[i].second->value[j]) any_diff_seed = true;
        }
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
}

TEST_CASE("encode_all: shape contract and batching") {
    auto m = Model<float>::build(small_config(), 1);
    m.set_training(false);
    Tensor<float> x = random_batch(5, 32, 2);
    auto zs = m.encode_all(x);
    REQUIRE(zs.size() == 3);
    for (const auto& z : zs) {
        CHECK(z->value.shape() ==
              std::vector<std::size_t>({5, 4, 4, 4}));  // c_z=4, spatial 32/2^3=4
    }
    CHECK_THROWS_AS(m.encode_all(random_batch(2, 16, 3)), std::invalid_argument);
}

TEST_CASE("encoders with identical parameters produce identical encodings") {
    auto m = Model<float>::build(small_config(), 7);
    // copy encoder 0's parameters into encoder 1
    for (std::size_t layer = 0; layer < m.encoders[0].size(); ++layer) {
        m.encoders[1][layer].weight->value = m.encoders[0][layer].weight->value;
        m.encoders[1][layer].bias->value = m.encoders[0][layer].bias->value;
        if (m.encoders[0][layer].has_norm) {
            m.encoders[1][layer].norm_gamma->value = m.encoders[0][layer].norm_gamma->value;
            m.encoders[1][layer].norm_beta->value = m.encoders[0][layer].norm_beta->value;
            m.encoders[1][layer].running_mean = m.encoders[0][layer].running_mean;
            m.encoders[1][layer].running_var = m.encoders[0][layer].running_var;
        }
    }
    m.set_training(false);
    auto zs = m.encode_all(random_batch(2, 32, 11));
    for (std::size_t i = 0; i < zs[0]->value.numel(); ++i)
        CHECK(zs[0]->value[i] == zs[1]->value[i]);
}

TEST_CASE("decode: sigmoid range and zero-parameter output") {
    auto m = Model<float>::build(small_config(), 3);
    m.set_training(false);
    Tensor<float> z({2, 12, 4, 4});  // N*c_z = 12
    Rng rng(4);
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());
    auto y = m.decode(z);
    CHECK(y->value.shape() == std::vector<std::size_t>({2, 1, 32, 32}));
    for (std::size_t i = 0; i < y->value.numel(); ++i) {
        CHECK(y->value[i] > 0.0f);
        CHECK(y->value[i] < 1.0f);
    }

    // zero decoder weights and biases -> sigma(0) = 0.5 everywhere
    for (auto& layer : m.decoder) {
        layer.weight->value.zero();
        layer.bias->value.zero();
        if (layer.weight_normed) layer.weight_g->value.zero();
    }
    auto y0 = m.decode(z);
    for (std::size_t i = 0; i < y0->value.numel(); ++i)
        CHECK(y0->value[i] == doctest::Approx(0.5));

    Tensor<float> bad({2, 7, 8, 8});
    CHECK_THROWS_AS(m.decode(bad), std::invalid_argument);
}

TEST_CASE("forward equals decode(concat(encode_all))") {
    auto m = Model<float>::build(small_config(), 9);
    m.set_training(false);
    Tensor<float> x = random_batch(3, 32, 10);
    auto [zs, x_hat] = m.forward(x);
    auto manual = m.decode(ops::concat_channels(m.encode_all(x)));
    for (std::size_t i = 0; i < x_hat->value.numel(); ++i)
        CHECK(x_hat->value[i] == manual->value[i]);
}

TEST_CASE("group norm isolates pathways through a block-diagonal first layer") {
    auto m = Model<float>::build(small_config(), 13);
    m.set_training(false);
    // zero the off-diagonal blocks of the first decoder weight
    auto& w = m.decoder[0].weight;
    auto part = losses::partition(w->value, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            if (i == j) continue;
            losses::for_each_block_element(w->value, part, i, j,
                                           [&](std::size_t idx) { w->value[idx] = 0.0f; });
        }

    Rng rng(14);
    Tensor<float> z({1, 12, 4, 4});
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());
    Tensor<float> z2 = z;
    for (std::size_t i = 0; i < 4 * 16; ++i) z2[i] = static_cast<float>(rng.normal());  // block 0

    // first decoder block only: convT + group norm
    auto run_first = [&](const Tensor<float>& zz) {
        auto h = ops::conv_transpose2d(make_leaf(zz, false), w, m.decoder[0].bias, 2, 1, 0);
        return ops::group_norm(h, m.decoder[0].norm_gamma, m.decoder[0].norm_beta, 3,
                               1e-5f, false);
    };
    auto a = run_first(z);
    auto b = run_first(z2);
    const std::size_t group = a->value.numel() / 3;
    for (std::size_t i = group; i < a->value.numel(); ++i)
        CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(1e-5));
}

TEST_CASE("inference-mode outputs are batch-size invariant") {
    auto m = Model<float>::build(small_config(), 21);
    // accumulate some running statistics first
    m.set_training(true);
    for (int i = 0; i < 3; ++i) m.forward(random_batch(8, 32, 100 + i));
    m.set_training(false);

    Tensor<float> batch = random_batch(4, 32, 200);
    auto [zb, yb] = m.forward(batch);
    Tensor<float> single({1, 1, 32, 32});
    std::copy_n(batch.data() + 2 * 32 * 32, 32 * 32, single.data());
    auto [zs, ys] = m.forward(single);
    for (std::size_t i = 0; i < ys->value.numel(); ++i)
        CHECK(ys->value[i] == doctest::Approx(yb->value[2 * 32 * 32 + i]).epsilon(1e-6));
}

TEST_CASE("checkpoint round-trip is bit-exact; wrong config rejected") {
    namespace fs = std::filesystem;
    auto path = (fs::temp_directory_path() / "unmix_model_test.ckpt").string();

    auto m = Model<float>::build(small_config(), 33);
    // give running stats non-default values
    m.set_training(true);
    m.forward(random_batch(4, 32, 300));
    m.epoch = 17;
    model::save_checkpoint(m, path);

    auto loaded = model::load_checkpoint<float>(path);
    CHECK(loaded.epoch == 17);
    CHECK(loaded.seed == 33);
    CHECK(loaded.config() == m.config());

    auto pa = m.named_parameters();
    auto pb = loaded.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].second->value.numel(); ++j)
            CHECK(pa[i].second->value[j] == pb[i].second->value[j]);
    auto ba = m.named_buffers();
    auto bb = loaded.named_buffers();
    REQUIRE(ba.size() == bb.size());
    for (std::size_t i = 0; i < ba.size(); ++i)
        for (std::size_t j = 0; j < ba[i].second->numel(); ++j)
            CHECK((*ba[i].second)[j] == (*bb[i].second)[j]);

    ModelConfig other = small_config(2);
    CHECK_THROWS(model::load_checkpoint<float>(path, &other));
    fs::remove(path);
}

TEST_CASE("weight-normalized output layer: slice norms equal |g| after updates") {
    auto m = Model<float>::build(small_config(), 40);
    auto& out_layer = m.decoder.back();
    // perturb v and g as an optimizer step would
    Rng rng(41);
    for (std::size_t i = 0; i < out_layer.weight->value.numel(); ++i)
        out_layer.weight->value[i] += static_cast<float>(rng.normal(0.0, 0.01));
    for (std::size_t i = 0; i < out_layer.weight_g->value.numel(); ++i)
        out_layer.weight_g->value[i] += static_cast<float>(rng.normal(0.0, 0.01));

    auto w_eff = ops::weight_norm(out_layer.weight, out_layer.weight_g);
    const std::size_t d0 = w_eff->value.dim(0);
    const std::size_t slice = w_eff->value.numel() / d0;
    for (std::size_t i = 0; i < d0; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < slice; ++j) {
            double e = w_eff->value[i * slice + j];
            sq += e * e;
        }
        CHECK(std::sqrt(sq) ==
              doctest::Approx(std::abs(out_layer.weight_g->value[i])).epsilon(1e-5));
    }
}
