#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "unmix/datagen.hpp"
#include "unmix/infer.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"
#include "unmix/rng.hpp"

using namespace unmix;

namespace {

model::ModelConfig cfg_n(int n) {
    model::ModelConfig cfg;
    cfg.num_encoders = n;
    cfg.image_size = 32;
    cfg.encoder_channels = {8, 12};
    cfg.encoding_channels = 4;
    cfg.decoder_channels = {8 * n, 4 * n};
    return cfg;
}

datagen::Image random_image(int size, std::uint64_t seed) {
    Rng rng(seed);
    datagen::Image img(size, size);
    for (auto& v : img.px) v = static_cast<float>(rng.uniform01());
    return img;
}

void warm_batch_norm(model::Model<float>& m, std::uint64_t seed) {
    m.set_training(true);
    Rng rng(seed);
    Tensor<float> x({8, 1, 32, 32});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform01());
    m.forward(x);
    m.set_training(false);
}

}  // namespace

TEST_CASE("N=1: masking nothing reproduces the full reconstruction") {
    auto m = model::Model<float>::build(cfg_n(1), 3);
    warm_batch_norm(m, 4);
    datagen::Image img = random_image(32, 5);
    auto est = infer::mask_and_decode(m, img, 0);
    auto [zs, x_hat] = m.forward(infer::image_to_tensor<float>(img));
    for (std::size_t i = 0; i < x_hat->value.numel(); ++i)
        CHECK(est.estimate.px[i] == doctest::Approx(x_hat->value[i]).epsilon(1e-6));
}

TEST_CASE("estimate_all: one estimate per encoder, deterministic") {
    auto m = model::Model<float>::build(cfg_n(3), 7);
    warm_batch_norm(m, 8);
    datagen::Image img = random_image(32, 9);
    auto a = infer::estimate_all(m, img);
    auto b = infer::estimate_all(m, img);
    REQUIRE(a.size() == 3);
    for (std::size_t n = 0; n < 3; ++n) {
        CHECK(a[n].encoder_index == static_cast<int>(n));
        CHECK(a[n].estimate.px == b[n].estimate.px);
    }
    CHECK_THROWS_AS(infer::mask_and_decode(m, img, 3), std::out_of_range);
    CHECK_THROWS_AS(infer::mask_and_decode(m, img, -1), std::out_of_range);
}

TEST_CASE("masking is positional: blocks land at their original offsets") {
    auto m = model::Model<float>::build(cfg_n(2), 11);
    warm_batch_norm(m, 12);
    datagen::Image img = random_image(32, 13);
    Tensor<float> x = infer::image_to_tensor<float>(img);

    m.set_training(false);
    auto zs = m.encode_all(x);
    const std::size_t block = zs[0]->value.numel();

    // hand-built masked Z for encoder 1: zeros in block 0, encoding in block 1
    Tensor<float> z_manual({1, 8, 4, 4});
    std::copy_n(zs[1]->value.data(), block, z_manual.data() + block);
    auto want = m.decode(z_manual);

    Tensor<float> got = infer::mask_and_decode_batch(m, x, 1);
    for (std::size_t i = 0; i < got.numel(); ++i)
        CHECK(got[i] == doctest::Approx(want->value[i]).epsilon(1e-7));
}

TEST_CASE("batched inference equals single-sample inference") {
    auto m = model::Model<float>::build(cfg_n(3), 17);
    warm_batch_norm(m, 18);
    Rng rng(19);
    Tensor<float> batch({3, 1, 32, 32});
    for (std::size_t i = 0; i < batch.numel(); ++i)
        batch[i] = static_cast<float>(rng.uniform01());

    Tensor<float> batched = infer::mask_and_decode_batch(m, batch, 1);
    for (std::size_t s = 0; s < 3; ++s) {
        Tensor<float> single({1, 1, 32, 32});
        std::copy_n(batch.data() + s * 1024, 1024, single.data());
        Tensor<float> one = infer::mask_and_decode_batch(m, single, 1);
        for (std::size_t i = 0; i < 1024; ++i)
            CHECK(one[i] == doctest::Approx(batched[s * 1024 + i]).epsilon(1e-6));
    }
}

TEST_CASE("all encodings masked equals the zero-reconstruction output") {
    auto m = model::Model<float>::build(cfg_n(2), 23);
    m.set_training(false);
    Tensor<float> z_zero({1, 8, 4, 4});
    auto via_decode = m.decode(z_zero);
    // the zero-reconstruction loss at this point is the BCE of that output
    // against zeros; evaluating it through the loss route must agree
    double expect = losses::bce_reconstruction(via_decode->value, Tensor<float>(via_decode->value.shape()));
    auto loss = losses::zero_reconstruction_loss(m);
    CHECK(loss->value[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("crop: identity, arithmetic, errors") {
    infer::SourceEstimate est;
    est.encoder_index = 1;
    est.estimate = random_image(64, 29);

    auto same = infer::crop(est, 0);
    CHECK(same.estimate.px == est.estimate.px);

    auto cropped = infer::crop(est, 4);
    CHECK(cropped.estimate.height == 56);
    CHECK(cropped.estimate.width == 56);
    CHECK(cropped.crop_margin == 4);
    CHECK(cropped.estimate.at(0, 0) == est.estimate.at(4, 4));
    CHECK(cropped.estimate.at(55, 55) == est.estimate.at(59, 59));

    CHECK_THROWS_AS(infer::crop(est, 32), std::invalid_argument);
    CHECK_THROWS_AS(infer::crop(est, -1), std::invalid_argument);
}

TEST_CASE("untrained model: all dead scores sit near sigmoid(0)") {
    auto m = model::Model<float>::build(cfg_n(3), 31);
    warm_batch_norm(m, 32);
    datagen::MixingConfig mix_cfg;
    mix_cfg.seed = 33;
    auto data = datagen::generate_dataset(12, 32, mix_cfg, 0.75);
    datagen::ImageStack stack;
    stack.count = 12;
    stack.height = stack.width = 32;
    for (const auto& s : data.train)
        stack.px.insert(stack.px.end(), s.mixture.px.begin(), s.mixture.px.end());
    for (const auto& s : data.test)
        stack.px.insert(stack.px.end(), s.mixture.px.begin(), s.mixture.px.end());

    auto report = infer::dead_encoder_score(m, stack);
    REQUIRE(report.scores.size() == 3);
    for (double s : report.scores) {
        CHECK(s > 0.2);
        CHECK(s < 0.8);
    }
    for (bool d : report.dead) CHECK(!d);  // nothing is dead on a fresh model
    REQUIRE(report.diagonal_mass.size() == 3);
    for (double mass : report.diagonal_mass) CHECK(mass > 0.0);
}

TEST_CASE("dead flag rule: below 20% of the others' mean") {
    auto flags = infer::dead_flags_from_scores({0.20, 0.25, 0.01});
    CHECK(flags == std::vector<bool>{false, false, true});
    // 0.01 < 0.2 * mean(0.20, 0.25) = 0.045
    auto none = infer::dead_flags_from_scores({0.2, 0.21, 0.19});
    CHECK(none == std::vector<bool>{false, false, false});
    auto single = infer::dead_flags_from_scores({0.4});
    CHECK(single == std::vector<bool>{false});
}
