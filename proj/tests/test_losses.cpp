#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "unmix/gradcheck.hpp"
#include "unmix/losses.hpp"
#include "unmix/model.hpp"
#include "unmix/rng.hpp"

using namespace unmix;
using losses::AlphaScheme;

TEST_CASE("pathway separation: hand-evaluated 2x2 weight") {
    // W = [[1,2],[3,4]] stored input-major: off-diagonal entries are 2 and 3.
    Tensor<double> w({2, 2}, {1, 2, 3, 4});
    CHECK(losses::pathway_separation<double>({&w}, 2, AlphaScheme::uniform) ==
          doctest::Approx(5.0).epsilon(1e-15));
    CHECK(losses::pathway_separation<double>({&w}, 2, AlphaScheme::positional) ==
          doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("pathway separation: block-diagonal weights give zero") {
    Tensor<double> w({4, 4});
    // fill diagonal blocks only
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            w[i * 4 + j] = 1.5;
            w[(i + 2) * 4 + (j + 2)] = -2.5;
        }
    CHECK(losses::pathway_separation<double>({&w}, 2, AlphaScheme::uniform) == 0.0);

    // N=1: single block, no off-diagonal, vacuously zero
    Tensor<double> any({4, 4});
    for (std::size_t i = 0; i < 16; ++i) any[i] = double(i) - 8.0;
    CHECK(losses::pathway_separation<double>({&any}, 1, AlphaScheme::uniform) == 0.0);
}

TEST_CASE("partition: tiling arithmetic and conv generalization") {
    Tensor<double> w({4, 4});
    auto part = losses::partition(w, 2);
    CHECK(part.rows_per_block() == 2);
    CHECK(part.cols_per_block() == 2);
    CHECK(part.block_elements() == 4);

    // 6-in/4-out conv weight: blocks of 3x2 channels, all taps included
    Tensor<double> wc({6, 4, 3, 3});
    auto pc = losses::partition(wc, 2);
    CHECK(pc.rows_per_block() == 3);
    CHECK(pc.cols_per_block() == 2);
    CHECK(pc.block_elements() == 3 * 2 * 9);
    std::size_t count = 0;
    losses::for_each_block_element(wc, pc, 1, 0, [&](std::size_t) { ++count; });
    CHECK(count == 54);

    // blocks tile the weight exactly, no overlap
    Tensor<int> hits({6, 4, 3, 3});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            losses::for_each_block_element(wc, pc, i, j, [&](std::size_t idx) { hits[idx]++; });
    for (std::size_t i = 0; i < hits.numel(); ++i) CHECK(hits[i] == 1);

    Tensor<double> bad({5, 4});
    CHECK_THROWS_AS(losses::partition(bad, 2), std::invalid_argument);
}

TEST_CASE("pathway alpha: conv blocks use channel-grid reciprocal") {
    // alpha = 1 / ((C_in/N)(C_out/N)) regardless of spatial taps
    Tensor<double> wc({6, 4, 3, 3});
    wc.fill(1.0);
    // zero diagonal blocks; remaining mass: blocks (0,1) and (1,0), each 3*2*9 ones
    auto pc = losses::partition(wc, 2);
    for (int i = 0; i < 2; ++i)
        losses::for_each_block_element(wc, pc, i, i, [&](std::size_t idx) { wc[idx] = 0.0; });
    const double expect = 2.0 * (1.0 / 6.0) * 54.0;
    CHECK(losses::pathway_separation<double>({&wc}, 2, AlphaScheme::uniform) ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pathway positional alpha follows the printed row-dependent rule") {
    // N=3, 3x3 blocks of size 1: alpha(i,j) = 1/(N-i) above, 1/i below.
    Tensor<double> w({3, 3});
    w.fill(1.0);
    double expect = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            if (i == j) continue;
            expect += j > i ? 1.0 / (3 - i) : 1.0 / i;
        }
    CHECK(losses::pathway_separation<double>({&w}, 3, AlphaScheme::positional) ==
          doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pathway separation: absolute homogeneity on off-diagonal blocks") {
    Rng rng(3);
    Tensor<double> w({6, 6, 2, 2});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal();
    const double base = losses::pathway_separation<double>({&w}, 3, AlphaScheme::uniform);

    for (double c : {-2.0, 0.5, 3.0}) {
        Tensor<double> scaled = w;
        auto part = losses::partition(scaled, 3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                if (i == j) continue;
                losses::for_each_block_element(scaled, part, i, j,
                                               [&](std::size_t idx) { scaled[idx] *= c; });
            }
        CHECK(losses::pathway_separation<double>({&scaled}, 3, AlphaScheme::uniform) ==
              doctest::Approx(std::abs(c) * base).epsilon(1e-12));
    }

    // diagonal-block changes leave the loss invariant
    Tensor<double> diag_changed = w;
    auto part = losses::partition(diag_changed, 3);
    for (int i = 0; i < 3; ++i)
        losses::for_each_block_element(diag_changed, part, i, i,
                                       [&](std::size_t idx) { diag_changed[idx] += 10.0; });
    CHECK(losses::pathway_separation<double>({&diag_changed}, 3, AlphaScheme::uniform) ==
          doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("encoding_l2: exact examples") {
    std::vector<Tensor<double>> zeros = {Tensor<double>({2, 3}), Tensor<double>({2, 3})};
    CHECK(losses::encoding_l2(zeros) == doctest::Approx(0.0).epsilon(1e-15));

    Tensor<double> ones({7});
    ones.fill(1.0);
    CHECK(losses::encoding_l2<double>({ones}) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor<double> z0({4}, {1, 1, 1, 1});
    Tensor<double> z1({4}, {0, 0, 0, 0});
    CHECK(losses::encoding_l2<double>({z0, z1}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(losses::encoding_l2<double>({z1, z0}) == doctest::Approx(0.5).epsilon(1e-12));

    std::vector<Tensor<double>> empty;
    CHECK_THROWS_AS(losses::encoding_l2(empty), std::invalid_argument);
}

TEST_CASE("bce_reconstruction: analytic values") {
    Tensor<double> half({8});
    half.fill(0.5);
    Tensor<double> t_half = half;
    CHECK(losses::bce_reconstruction(half, t_half) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor<double> zero_t({8});
    CHECK(losses::bce_reconstruction(half, zero_t) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor<double> bad({8});
    bad.fill(1.5);
    CHECK_THROWS_AS(losses::bce_reconstruction(half, bad), std::invalid_argument);
}

TEST_CASE("zero reconstruction: analytic value on a zeroed decoder") {
    model::ModelConfig cfg = gradcheck::tiny_config();
    auto m = model::Model<double>::build(cfg, 3);
    for (auto& layer : m.decoder) {
        layer.weight->value.zero();
        layer.bias->value.zero();
        if (layer.weight_normed) layer.weight_g->value.zero();
    }
    auto loss = losses::zero_reconstruction_loss(m);
    CHECK(loss->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // a decoder trained to map zero to zero drives the loss to zero
    auto m2 = model::Model<double>::build(cfg, 3);
    for (auto& layer : m2.decoder)
        if (layer.weight_normed) {
            layer.weight->value.zero();
            layer.weight_g->value.zero();
            layer.bias->value.fill(-30.0);  // sigmoid(-30) ~ 1e-13
        }
    CHECK(losses::zero_reconstruction_loss(m2)->value[0] < 1e-6);
}

TEST_CASE("zero reconstruction: frozen and untouched gradients are exactly zero") {
    auto m = model::Model<double>::build(gradcheck::tiny_config(), 5);
    auto params = m.named_parameters();
    for (auto& [name, p] : params) {
        p->ensure_grad();
        p->grad.zero();
    }
    backward(losses::zero_reconstruction_loss(m));
    bool decoder_weight_grad_nonzero = false;
    for (auto& [name, p] : params) {
        const bool frozen = name.rfind("encoder.", 0) == 0 ||
                            name.find(".norm_gamma") != std::string::npos ||
                            name.find(".norm_beta") != std::string::npos;
        double mass = 0.0;
        for (std::size_t i = 0; i < p->grad.numel(); ++i) mass += std::abs(p->grad[i]);
        if (frozen) {
            CHECK(mass == 0.0);
        } else if (mass > 0.0) {
            decoder_weight_grad_nonzero = true;
        }
    }
    CHECK(decoder_weight_grad_nonzero);
}

TEST_CASE("total loss: weighting applied exactly once") {
    losses::LossConfig cfg;  // published toy-run settings
    CHECK(cfg.lambda_pathway == doctest::Approx(0.5));
    CHECK(cfg.lambda_zero_recon == doctest::Approx(0.01));
    CHECK(cfg.lambda_z == doctest::Approx(0.01));

    losses::LossParts parts{0.7, 2.0, 0.69, 0.5};
    losses::LossConfig w;
    w.lambda_pathway = 0.5;
    w.lambda_zero_recon = 0.01;
    w.lambda_z = 0.01;
    CHECK(losses::total_loss(parts, w) == doctest::Approx(1.7119).epsilon(1e-12));

    losses::LossConfig off;
    off.lambda_pathway = off.lambda_zero_recon = off.lambda_z = 0.0;
    CHECK(losses::total_loss(parts, off) == doctest::Approx(0.7).epsilon(1e-15));

    losses::LossParts nan_parts{0.7, std::nan(""), 0.0, 0.0};
    CHECK_THROWS_WITH_AS(losses::total_loss(nan_parts, w),
                         "total_loss: non-finite term: pathway_separation",
                         std::runtime_error);
}

TEST_CASE("pathway graph op matches finite differences away from the kink") {
    Rng rng(8);
    Tensor<double> wt({4, 4, 2, 2});
    for (std::size_t i = 0; i < wt.numel(); ++i) {
        double v = rng.normal();
        if (std::abs(v) < 1e-3) v = v >= 0 ? 1e-3 : -1e-3;
        wt[i] = v;
    }
    auto w = make_leaf(wt, true);
    for (auto scheme : {AlphaScheme::uniform, AlphaScheme::positional}) {
        w->grad.zero();
        backward(losses::pathway_loss<double>({w}, 2, scheme));
        double worst = 0.0;
        const double h = 1e-6;
        for (std::size_t i = 0; i < wt.numel(); ++i) {
            const double saved = w->value[i];
            w->value[i] = saved + h;
            const double fp = losses::pathway_loss<double>({w}, 2, scheme)->value[0];
            w->value[i] = saved - h;
            const double fm = losses::pathway_loss<double>({w}, 2, scheme)->value[0];
            w->value[i] = saved;
            const double fd = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(fd - w->grad[i]));
        }
        CHECK(worst < 1e-8);
    }
}

TEST_CASE("gradient oracle: all four loss terms at 64-bit precision") {
    losses::LossConfig lc;  // all lambdas positive
    auto report = gradcheck::run(2024, lc);
    REQUIRE(report.entries.size() == 4);
    CHECK(report.parameter_count <= 10000);
    for (const auto& e : report.entries) {
        INFO(e.term, " max_rel_err=", e.max_rel_err, " worst=", e.worst_param);
        CHECK(!e.skipped);
        CHECK(e.max_rel_err < 1e-4);
        CHECK(e.max_frozen_grad == 0.0);
    }

    losses::LossConfig off;
    off.lambda_pathway = 0.0;
    auto report2 = gradcheck::run(2024, off);
    bool found_skip = false;
    for (const auto& e : report2.entries)
        if (e.term == "pathway_separation") found_skip = e.skipped;
    CHECK(found_skip);
}
