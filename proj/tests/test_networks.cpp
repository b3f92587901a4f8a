#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oattn/errors.hpp"
#include "oattn/networks.hpp"
#include "oattn/rng.hpp"

using namespace oattn;

namespace {

int conv_out(int n, int k, int s, int p) { return (n + 2 * p - k) / s + 1; }

// independent layer-by-layer side chain for a critic config
std::vector<int> critic_side_chain(const CriticConfig& cfg, int input_side) {
    std::vector<int> sides;
    int s = input_side;
    for (int stride : cfg.strides) {
        s = conv_out(s, cfg.kernel, stride, cfg.pad);
        sides.push_back(s);
    }
    return sides;
}

template <typename T>
Tensor<T> random_image(Rng& rng, int n, int c, int side) {
    Tensor<T> t({n, c, side, side});
    for (auto& v : t.data) v = static_cast<T>(rng.uniform());
    return t;
}

}  // namespace

TEST_CASE("res256 generator: encoder chain and attention placement") {
    GeneratorConfig cfg = GeneratorConfig::res256();
    CHECK(cfg.depth() == 8);
    CHECK(cfg.encoder_channels() == std::vector<int>{64, 128, 256, 512, 512, 512, 512, 512});
    CHECK(cfg.encoder_kernels() == std::vector<int>{7, 5, 3, 3, 3, 3, 3, 3});
    CHECK(cfg.dsa_sides() == std::vector<int>{16, 32, 64});
    CHECK(cfg.kl_side() == 16);

    auto gen = build_generator<float>(cfg, 1);
    REQUIRE(gen.enc.size() == 8);
    REQUIRE(gen.dec.size() == 8);

    // encoder sides via the convolution arithmetic, not the builder's bookkeeping
    const std::vector<int> want_sides{128, 64, 32, 16, 8, 4, 2, 1};
    int side = 256;
    for (int i = 0; i < 8; ++i) {
        const auto& conv = gen.enc[static_cast<std::size_t>(i)].conv;
        side = conv_out(side, conv.kernel, conv.stride, conv.pad);
        CHECK(side == want_sides[static_cast<std::size_t>(i)]);
        CHECK(conv.out_side == side);
    }

    // attention modules at generator layers 12/13/14 = decoder 4/5/6, sides 16/32/64
    for (int j = 0; j < 8; ++j) {
        const auto& d = gen.dec[static_cast<std::size_t>(j)];
        const bool want_dsa = j == 3 || j == 4 || j == 5;
        CHECK(d.dsa.has_value() == want_dsa);
        if (want_dsa) CHECK(d.dsa->level == 16 << (j - 3));
    }
    CHECK(gen.dec[3].dsa->channels == 512);
    CHECK(gen.dec[4].dsa->channels == 256);
    CHECK(gen.dec[5].dsa->channels == 128);
    CHECK(gen.dec[3].dsa->ck == 64);

    // final layer concatenates the 4-channel input
    CHECK(gen.dec[7].conv.in_ch == 64 + 4);
    CHECK(gen.dec[7].conv.out_ch == 3);
    CHECK(gen.dec[7].final_layer);
}

TEST_CASE("res1024 generator: 20 layers, attention at 14/15/16") {
    GeneratorConfig cfg = GeneratorConfig::res1024();
    CHECK(cfg.depth() == 10);
    CHECK(cfg.encoder_channels() ==
          std::vector<int>{64, 128, 256, 512, 512, 512, 512, 512, 512, 512});
    CHECK(cfg.dsa_sides() == std::vector<int>{16, 32, 64});

    auto gen = build_generator<float>(cfg, 1);
    REQUIRE(gen.enc.size() + gen.dec.size() == 20);
    int side = 1024;
    for (const auto& e : gen.enc) {
        side = conv_out(side, e.conv.kernel, e.conv.stride, e.conv.pad);
        CHECK(side == e.conv.out_side);
    }
    CHECK(side == 1);
    // generator layer = 10 + decoder index + 1; attention at 14, 15, 16
    for (int j = 0; j < 10; ++j) {
        const bool want_dsa = j == 3 || j == 4 || j == 5;
        CHECK(gen.dec[static_cast<std::size_t>(j)].dsa.has_value() == want_dsa);
    }
    CHECK(gen.dec[3].dsa->level == 16);
    CHECK(gen.dec[5].dsa->level == 64);
    CHECK(gen.dec[3].conv.out_ch == 512);
}

TEST_CASE("toy generator: scaled depth and widths") {
    GeneratorConfig cfg = GeneratorConfig::toy(64, 0.25);
    CHECK(cfg.depth() == 6);
    CHECK(cfg.encoder_channels() == std::vector<int>{16, 32, 64, 128, 128, 128});
    CHECK(cfg.dsa_sides() == std::vector<int>{4, 8, 16});
    CHECK(cfg.kl_side() == 4);
    auto gen = build_generator<float>(cfg, 3);
    CHECK(gen.enc.size() + gen.dec.size() == 12);

    CHECK_THROWS_AS(GeneratorConfig::toy(48, 0.25), ConfigError);
    CHECK_THROWS_AS(GeneratorConfig::toy(16, 0.25), ConfigError);
}

TEST_CASE("critic chains: score maps from the conv arithmetic") {
    CriticConfig global = CriticConfig::res256("critic.global", 64);
    CHECK(global.layer_channels() == std::vector<int>{64, 128, 256, 512, 1});
    CHECK(critic_side_chain(global, 64) == std::vector<int>{32, 16, 8, 7, 6});
    CHECK(global.score_side(64) == 6);
    CHECK(critic_side_chain(global, 128) == std::vector<int>{64, 32, 16, 15, 14});
    CHECK(global.score_side(128) == 14);
    CHECK(critic_side_chain(global, 47) == std::vector<int>{23, 11, 5, 4, 3});
    CHECK(global.score_side(47) == 3);
    CHECK(global.min_input_side() == 24);

    CriticConfig big = CriticConfig::res1024("critic.global", 64);
    CHECK(big.layer_channels() == std::vector<int>{64, 128, 256, 512, 512, 512, 1});
    CHECK(critic_side_chain(big, 1024) == std::vector<int>{512, 256, 128, 64, 32, 31, 30});

    CriticConfig small = CriticConfig::shallow("critic.comp", 32);
    CHECK(small.layer_channels() == std::vector<int>{32, 64, 128, 256, 1});
    CHECK(critic_side_chain(small, 16) == std::vector<int>{8, 4, 3, 2, 1});
    CHECK(small.min_input_side() == 16);
}

TEST_CASE("critic forward: real score-map shapes and undersized rejection") {
    auto critic = build_critic<float>(CriticConfig::res256("critic.global", 64), 7);
    Rng rng(5);
    {
        Tape<float> t;
        auto bound = bind_params(t, critic.params, false);
        Var score = critic_forward(t, critic, bound, t.input(random_image<float>(rng, 1, 3, 64), false));
        CHECK(t.shape(score) == Shape{1, 1, 6, 6});
    }
    {
        Tape<float> t;
        auto bound = bind_params(t, critic.params, false);
        Var score = critic_forward(t, critic, bound, t.input(random_image<float>(rng, 1, 3, 47), false));
        CHECK(t.shape(score) == Shape{1, 1, 3, 3});
    }
    {
        Tape<float> t;
        auto bound = bind_params(t, critic.params, false);
        CHECK_THROWS_WITH_AS(
            critic_forward(t, critic, bound, t.input(random_image<float>(rng, 1, 3, 16), false)),
            doctest::Contains("minimum side 24"), TapeError);
    }
}

TEST_CASE("critic receptive field: far pixels never touch a score cell") {
    auto critic = build_critic<float>(CriticConfig::res256("critic.global", 64), 11);
    Rng rng(6);
    Tensor<float> img = random_image<float>(rng, 1, 3, 64);
    Tape<float> t1;
    auto b1 = bind_params(t1, critic.params, false);
    const auto base = t1.val(critic_forward(t1, critic, b1, t1.input(img, false)));

    Tensor<float> poked = img;
    poked.data[static_cast<std::size_t>(2 * 64 * 64 + 63 * 64 + 63)] += 10.0f;  // bottom-right corner
    Tape<float> t2;
    auto b2 = bind_params(t2, critic.params, false);
    const auto moved = t2.val(critic_forward(t2, critic, b2, t2.input(poked, false)));

    // cell (0,0) covers input rows/cols < 47; the far corner cannot reach it
    CHECK(moved[0] == base[0]);
    // while the nearest cell must move
    CHECK(moved[35] != base[35]);
}

TEST_CASE("generator forward: output range, maps, determinism") {
    GeneratorConfig cfg = GeneratorConfig::toy(64, 0.25);
    auto gen = build_generator<float>(cfg, 42);
    Rng rng(9);
    const int n = 2;
    Tensor<float> input({n, 4, 64, 64});
    for (auto& v : input.data) v = static_cast<float>(rng.normal() * 2.0);  // arbitrary finite values

    Rng mrng(3);
    Mask m = gen_hole_mask(mrng, 64, MaskMode::Center);
    MaskPyramid pyr = build_pyramid(m, cfg.dsa_sides());
    std::vector<const MaskPyramid*> pyrs{&pyr, &pyr};

    Tape<float> t;
    GenOutput<float> out = generator_forward(t, gen, input, pyrs, GenMode::Train, false);
    CHECK(t.shape(out.out) == Shape{2, 3, 64, 64});
    for (float v : out.out_val.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    // three active levels, maps per sample; at side 4 the center hole covers 2x2
    REQUIRE(out.maps.count(4) == 1);
    REQUIRE(out.maps.at(4).size() == 2);
    CHECK(out.maps.at(4)[0].has_cross);
    CHECK(out.maps.at(4)[0].cross_val.shape == Shape{4, 12});
    CHECK(out.maps.at(16)[1].cross_val.shape == Shape{64, 192});

    // identical rebuild + identical input = bit-identical output
    auto gen2 = build_generator<float>(cfg, 42);
    Tape<float> t2;
    GenOutput<float> out2 = generator_forward(t2, gen2, input, pyrs, GenMode::Train, false);
    CHECK(out2.out_val.data == out.out_val.data);
}

TEST_CASE("generator forward: all-valid mask leaves attention inactive") {
    GeneratorConfig cfg = GeneratorConfig::toy(64, 0.25);
    auto gen = build_generator<float>(cfg, 42);
    Rng rng(10);
    Tensor<float> input = random_image<float>(rng, 1, 4, 64);
    Mask all_valid(64, 64, 1);
    MaskPyramid pyr = build_pyramid(all_valid, cfg.dsa_sides());
    std::vector<const MaskPyramid*> pyrs{&pyr};
    Tape<float> t;
    GenOutput<float> out = generator_forward(t, gen, input, pyrs, GenMode::Eval, false);
    CHECK(t.shape(out.out) == Shape{1, 3, 64, 64});
    for (const auto& [side, maps] : out.maps) {
        for (const auto& m : maps) {
            CHECK_FALSE(m.has_cross);
            CHECK_FALSE(m.has_self);
        }
    }
}

TEST_CASE("full res256 forward matches the shape oracle end to end") {
    GeneratorConfig cfg = GeneratorConfig::res256();
    auto gen = build_generator<float>(cfg, 2);
    Rng rng(12);
    Tensor<float> input = random_image<float>(rng, 1, 4, 256);
    Rng mrng(4);
    Mask m = gen_hole_mask(mrng, 256, MaskMode::Center);
    MaskPyramid pyr = build_pyramid(m, cfg.dsa_sides());
    std::vector<const MaskPyramid*> pyrs{&pyr};
    Tape<float> t;
    GenOutput<float> out = generator_forward(t, gen, input, pyrs, GenMode::Eval, false);
    CHECK(t.shape(out.out) == Shape{1, 3, 256, 256});
    CHECK(out.maps.at(16)[0].cross_val.shape == Shape{64, 192});
    CHECK(out.maps.at(32)[0].cross_val.shape == Shape{256, 768});
    CHECK(out.maps.at(64)[0].self_val.shape == Shape{1024, 1024});
}

TEST_CASE("parameter sets are deterministic per preset and seed") {
    auto a = build_generator<float>(GeneratorConfig::toy(64, 0.25), 77);
    auto b = build_generator<float>(GeneratorConfig::toy(64, 0.25), 77);
    REQUIRE(a.params.count() == b.params.count());
    for (int i = 0; i < a.params.count(); ++i) {
        CHECK(a.params[i].name == b.params[i].name);
        CHECK(a.params[i].value.shape == b.params[i].value.shape);
        CHECK(a.params[i].value.data == b.params[i].value.data);
    }
}

TEST_CASE("fixed feature net: determinism, sensitivity, linearity") {
    auto net = FixedFeatureNet<double>::make();
    auto net2 = FixedFeatureNet<double>::make();
    for (int i = 0; i < 3; ++i)
        CHECK(net.weights[static_cast<std::size_t>(i)].data == net2.weights[static_cast<std::size_t>(i)].data);

    Rng rng(13);
    Tensor<double> a = random_image<double>(rng, 1, 3, 32);
    Tensor<double> b = random_image<double>(rng, 1, 3, 32);
    Tape<double> t;
    auto fa = feature_forward(t, net, t.input(a, false));
    auto fa2 = feature_forward(t, net, t.input(a, false));
    auto fb = feature_forward(t, net, t.input(b, false));
    double same = 0.0, diff = 0.0;
    for (int i = 0; i < 3; ++i) {
        const auto &va = t.val(fa[static_cast<std::size_t>(i)]), &va2 = t.val(fa2[static_cast<std::size_t>(i)]),
                   &vb = t.val(fb[static_cast<std::size_t>(i)]);
        for (std::size_t j = 0; j < va.size(); ++j) {
            same += std::abs(va[j] - va2[j]);
            diff += std::abs(va[j] - vb[j]);
        }
    }
    CHECK(same == 0.0);
    CHECK(diff > 0.0);

    // stage-1 pre-activation is linear in the input (bias-free convolution)
    Tensor<double> doubled = a;
    for (auto& v : doubled.data) v *= 2.0;
    Var pre1 = t.conv2d(t.input(a, false), t.constant(net.weights[0]), 2, 1);
    Var pre2 = t.conv2d(t.input(doubled, false), t.constant(net.weights[0]), 2, 1);
    const auto &p1 = t.val(pre1), &p2 = t.val(pre2);
    for (std::size_t i = 0; i < p1.size(); ++i)
        CHECK(p2[i] == doctest::Approx(2.0 * p1[i]).epsilon(1e-12));
}
