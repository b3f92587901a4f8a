#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "oattn/errors.hpp"
#include "oattn/training.hpp"
#include "test_util.hpp"

using namespace oattn;

namespace {

TrainConfig quick_toy(std::uint64_t seed, int batch = 2) {
    TrainConfig cfg = TrainConfig::toy_defaults(seed);
    cfg.batch = batch;
    return cfg;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

template <typename T>
bool params_equal(const ParamSet<T>& a, const ParamSet<T>& b) {
    if (a.count() != b.count()) return false;
    for (int i = 0; i < a.count(); ++i)
        if (a[i].name != b[i].name || a[i].value.data != b[i].value.data) return false;
    return true;
}

}  // namespace

TEST_CASE("rmsprop: zero gradient leaves parameters, decays the accumulator") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({2}, {1.0, -2.0}));
    RmspropState<double> st;
    st.init(ps);
    st.acc[0].data = {0.5, 0.25};
    ps[0].value.grad = {0.0, 0.0};
    rmsprop_step(ps, st, 0.1);
    CHECK(ps[0].value.data == std::vector<double>{1.0, -2.0});
    CHECK(st.acc[0].data[0] == doctest::Approx(0.495).epsilon(1e-12));
    CHECK(st.acc[0].data[1] == doctest::Approx(0.2475).epsilon(1e-12));
}

TEST_CASE("rmsprop: analytic first step") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({1}, {3.0}));
    RmspropState<double> st;
    st.init(ps);
    ps[0].value.grad = {1.0};
    rmsprop_step(ps, st, 0.1);
    CHECK(st.acc[0].data[0] == doctest::Approx(0.01).epsilon(1e-12));
    const double want = 3.0 - 0.1 * 1.0 / (std::sqrt(0.01) + 1e-8);
    CHECK(ps[0].value.data[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(3.0 - ps[0].value.data[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("rmsprop: descent trajectory on theta^2") {
    ParamSet<double> ps;
    ps.add("theta", Tensor<double>({1}, {1.0}));
    RmspropState<double> st;
    st.init(ps);
    double prev = 1.0;
    for (int i = 0; i < 100; ++i) {
        ps[0].value.grad = {2.0 * ps[0].value.data[0]};
        rmsprop_step(ps, st, 1e-2);
        const double now = std::abs(ps[0].value.data[0]);
        CHECK(now < std::abs(prev));
        prev = ps[0].value.data[0];
    }
    CHECK(std::abs(prev) < 0.5);
}

TEST_CASE("rmsprop: non-finite gradient aborts naming the parameter") {
    ParamSet<double> ps;
    ps.add("gen.l1.conv.w", Tensor<double>({2}, {1.0, 2.0}));
    RmspropState<double> st;
    st.init(ps);
    ps[0].value.grad = {0.5, std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_WITH_AS(rmsprop_step(ps, st, 0.1), doctest::Contains("gen.l1.conv.w"), TapeError);
    CHECK(ps[0].value.data == std::vector<double>{1.0, 2.0});  // untouched
}

TEST_CASE("checkpoint file: round trip is byte-identical") {
    CheckpointData c;
    c.preset_tag = "toy";
    c.side = 64;
    c.width_scale = 0.25f;
    c.step = 42;
    c.rng_state = Rng(7).serialize();
    Rng rng(3);
    Tensor<float> t({2, 3});
    for (auto& v : t.data) v = static_cast<float>(rng.normal());
    c.records.emplace_back("gen.w", t);
    c.records.emplace_back("opt.gen.w", Tensor<float>({2, 3}));

    const std::string p1 = temp_path("ckpt_a.oatt");
    const std::string p2 = temp_path("ckpt_b.oatt");
    write_checkpoint_file(c, p1);
    CheckpointData back = read_checkpoint_file(p1);
    CHECK(back.preset_tag == "toy");
    CHECK(back.step == 42);
    CHECK(back.records.size() == 2);
    CHECK(back.records[0].second.data == t.data);
    write_checkpoint_file(back, p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("checkpoint file: corruption is rejected cleanly") {
    CheckpointData c;
    c.preset_tag = "toy";
    c.side = 64;
    c.rng_state = Rng(1).serialize();
    c.records.emplace_back("gen.w", Tensor<float>({4}));
    const std::string path = temp_path("ckpt_corrupt.oatt");
    write_checkpoint_file(c, path);

    // truncated
    {
        std::ifstream f(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        std::ofstream g(path + ".trunc", std::ios::binary);
        g.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    }
    CHECK_THROWS_WITH_AS(read_checkpoint_file(path + ".trunc"), doctest::Contains("truncated"),
                         DataError);

    // bad magic
    {
        std::ofstream g(path + ".magic", std::ios::binary);
        g << "NOPEgarbage";
    }
    CHECK_THROWS_WITH_AS(read_checkpoint_file(path + ".magic"), doctest::Contains("magic"), DataError);
}

TEST_CASE("trainer: losses finite, report recombines per the total formula") {
    auto data = testutil::toy_dataset<double>(11, 4, 64);
    Trainer<double> trainer(quick_toy(5));
    Batch<double> batch = draw_batch<double>(trainer.rng(), data.images, data.landmarks, 2, 64,
                                             MaskMode::Center);
    const StepReport r = trainer.train_step(batch);
    REQUIRE_FALSE(r.aborted);
    CHECK(std::isfinite(r.gen_total));
    CHECK(std::isfinite(r.critic_total));
    CHECK(r.critic_losses.size() == kCriticSlots);
    const LossWeights w;
    const double recombined =
        w.lambda_r * r.recon + w.lambda_kl * r.kl + w.lambda_p * r.perceptual + w.lambda_g * r.gen_adv;
    CHECK(std::abs(recombined - r.gen_total) <= 1e-6);
    CHECK(r.hole_l1 > 0.0);
    CHECK(r.step == 1);
}

TEST_CASE("trainer: deterministic across identical runs") {
    auto run = [](std::uint64_t seed) {
        auto data = testutil::toy_dataset<float>(21, 4, 64);
        Trainer<float> trainer(quick_toy(seed));
        std::vector<double> trace;
        for (int i = 0; i < 2; ++i) {
            Batch<float> b = draw_batch<float>(trainer.rng(), data.images, data.landmarks, 2, 64,
                                               MaskMode::Center);
            const StepReport r = trainer.train_step(b);
            trace.push_back(r.gen_total);
            trace.push_back(r.critic_total);
            trace.push_back(r.hole_l1);
        }
        return trace;
    };
    CHECK(run(9) == run(9));
}

TEST_CASE("trainer: checkpoint resume reproduces the uninterrupted run") {
    auto data = testutil::toy_dataset<float>(31, 4, 64);
    const auto step_once = [&](Trainer<float>& tr) {
        Batch<float> b = draw_batch<float>(tr.rng(), data.images, data.landmarks, 2, 64,
                                           MaskMode::Center);
        return tr.train_step(b);
    };

    Trainer<float> uninterrupted(quick_toy(13));
    for (int i = 0; i < 4; ++i) step_once(uninterrupted);

    Trainer<float> first_leg(quick_toy(13));
    for (int i = 0; i < 2; ++i) step_once(first_leg);
    const CheckpointData mid = first_leg.make_checkpoint();

    Trainer<float> resumed(quick_toy(13));
    resumed.restore(mid);
    CHECK(resumed.step_count() == 2);
    for (int i = 0; i < 2; ++i) step_once(resumed);

    CHECK(params_equal(uninterrupted.generator().params, resumed.generator().params));
    for (int c = 0; c < kCriticSlots; ++c)
        CHECK(params_equal(uninterrupted.critics()[static_cast<std::size_t>(c)].params,
                           resumed.critics()[static_cast<std::size_t>(c)].params));
}

TEST_CASE("trainer restore: mismatches and unknown records are rejected") {
    Trainer<float> trainer(quick_toy(1));
    const CheckpointData c = trainer.make_checkpoint();
    {
        CheckpointData wrong = c;
        wrong.preset_tag = "res256";
        wrong.side = 256;
        CHECK_THROWS_WITH_AS(trainer.restore(wrong), doctest::Contains("does not match"), DataError);
    }
    {
        CheckpointData extra = c;
        extra.records.emplace_back("gen.nonexistent.w", Tensor<float>({1}));
        CHECK_THROWS_WITH_AS(trainer.restore(extra), doctest::Contains("unknown parameter name"),
                             DataError);
    }
    {
        CheckpointData missing = c;
        missing.records.erase(missing.records.begin());
        CHECK_THROWS_WITH_AS(trainer.restore(missing), doctest::Contains("missing record"), DataError);
    }
}

TEST_CASE("trainer: halts after three consecutive aborted steps") {
    auto data = testutil::toy_dataset<float>(41, 4, 64);
    Trainer<float> trainer(quick_toy(3));
    // poison the final convolution: its NaN reaches the output through the
    // sigmoid (earlier relu layers would squash a NaN pre-activation to 0)
    const int final_conv = trainer.generator().params.find("gen.l12.conv.w");
    REQUIRE(final_conv >= 0);
    trainer.generator().params[final_conv].value.data[0] = std::numeric_limits<float>::quiet_NaN();
    int aborted = 0;
    bool halted = false;
    try {
        for (int i = 0; i < 5; ++i) {
            Batch<float> b = draw_batch<float>(trainer.rng(), data.images, data.landmarks, 2, 64,
                                               MaskMode::Center);
            const StepReport r = trainer.train_step(b);
            if (r.aborted) ++aborted;
        }
    } catch (const TapeError& e) {
        halted = true;
        CHECK_MESSAGE(std::string(e.what()).find("halted") != std::string::npos, e.what());
    }
    CHECK(aborted == 2);
    CHECK(halted);
}

TEST_CASE("adversarial loss leaks no gradient into frozen critic parameters") {
    auto data = testutil::toy_dataset<float>(51, 2, 64);
    Trainer<float> trainer(quick_toy(7));
    Batch<float> batch = draw_batch<float>(trainer.rng(), data.images, data.landmarks, 2, 64,
                                           MaskMode::Center);
    std::vector<MaskPyramid> pyrs;
    std::vector<const MaskPyramid*> pyr_ptrs;
    for (const Mask& m : batch.masks)
        pyrs.push_back(build_pyramid(m, trainer.generator().cfg.dsa_sides()));
    for (const auto& p : pyrs) pyr_ptrs.push_back(&p);

    Tape<float> t;
    trainer.generator().params.zero_grads();
    auto& critic = trainer.critics()[kGlobal];
    critic.params.zero_grads();
    GenOutput<float> out = generator_forward(t, trainer.generator(),
                                             masked_input(batch.images, batch.masks), pyr_ptrs,
                                             GenMode::Train, true);
    auto bound = bind_params(t, critic.params, false);
    std::vector<AdvCriticInput<float>> ins;
    AdvCriticInput<float> in;
    in.score_fn = [&](Tape<float>& tp, Var x) { return critic_forward(tp, critic, bound, x); };
    in.crops = {{t.slice_n(out.out, 0, 1)}, {t.slice_n(out.out, 1, 2)}};
    ins.push_back(std::move(in));
    t.backward(generator_adv_loss(t, ins));

    for (const auto& p : critic.params)
        for (float g : p.value.grad) CHECK(g == 0.0f);
    double gen_grad_mag = 0.0;
    for (const auto& p : trainer.generator().params)
        for (float g : p.value.grad) gen_grad_mag += std::abs(g);
    CHECK(gen_grad_mag > 0.0);
}

TEST_CASE("crop planning: bounding boxes, fallbacks, central routing") {
    const int side = 64;
    Rng rng(5);
    std::vector<Mask> masks{gen_hole_mask(rng, side, MaskMode::Center)};
    std::vector<ComponentGeometry> geos{
        component_geometry(testutil::toy_landmarks(side), side, ComponentSizes::uniform(16, 16))};

    // rect mode: local crop = hole bbox, quadrants tile it
    auto crops = plan_critic_crops(side, MaskMode::Center, masks, geos, 24, 16);
    CHECK(crops[kGlobal][0][0] == Rect{0, 0, 64, 64});
    CHECK(crops[kLocal][0][0] == Rect{16, 16, 32, 32});
    CHECK(crops[kSubdivision][0].size() == 4);
    CHECK(crops[kSubdivision][0][0] == Rect{16, 16, 16, 16});
    CHECK(crops[kLeftEye][0][0] == geos[0].rects.at("left_eye"));

    // irregular mode routes local and subdivision to the central region
    Mask weird(side, side, 1);
    weird.set(3, 5, 0);
    weird.set(40, 50, 0);
    std::vector<Mask> irregular{weird};
    auto icrops = plan_critic_crops(side, MaskMode::Irregular, irregular, geos, 24, 16);
    CHECK(icrops[kLocal][0][0] == central_region(side));
    CHECK(icrops[kSubdivision][0][0] == Rect{16, 16, 16, 16});
    CHECK(icrops[kSubdivision][0][3] == Rect{32, 32, 16, 16});

    // undersized hole falls back to the central region
    Mask tiny(side, side, 1);
    for (int r = 2; r < 8; ++r)
        for (int c = 2; c < 8; ++c) tiny.set(r, c, 0);
    std::vector<Mask> tiny_masks{tiny};
    auto tcrops = plan_critic_crops(side, MaskMode::RandomRect, tiny_masks, geos, 24, 16);
    CHECK(tcrops[kLocal][0][0] == central_region(side));
    CHECK(tcrops[kSubdivision][0][0] == Rect{16, 16, 16, 16});
}

TEST_CASE("batch assembly: masked input, oracle input, hole l1") {
    auto data = testutil::toy_dataset<float>(61, 3, 64);
    Rng rng(2);
    Batch<float> b = draw_batch<float>(rng, data.images, data.landmarks, 2, 64, MaskMode::Center);
    const Tensor<float> input = masked_input(b.images, b.masks);
    CHECK(input.shape == Shape{2, 4, 64, 64});
    const std::int64_t hw = 64 * 64;
    bool ok = true;
    for (int i = 0; i < 2 && ok; ++i)
        for (std::int64_t j = 0; j < hw && ok; ++j) {
            const bool valid = b.masks[static_cast<std::size_t>(i)].bits[static_cast<std::size_t>(j)];
            ok = ok && input.data[static_cast<std::size_t>((i * 4 + 3) * hw + j)] == (valid ? 1.0f : 0.0f);
            const float rgb = input.data[static_cast<std::size_t>(i * 4 * hw + j)];
            const float want = valid ? b.images.data[static_cast<std::size_t>(i * 3 * hw + j)] : 0.0f;
            ok = ok && rgb == want;
        }
    CHECK(ok);
    const Tensor<float> oracle = oracle_input(b.images);
    bool ones = true;
    for (int i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < hw; ++j)
            ones = ones && oracle.data[static_cast<std::size_t>((i * 4 + 3) * hw + j)] == 1.0f;
    CHECK(ones);

    CHECK(hole_l1(b.images, b.images, b.masks) == 0.0);
    Tensor<float> off = b.images;
    for (auto& v : off.data) v = std::min(1.0f, v + 0.25f);
    const double l1 = hole_l1(off, b.images, b.masks);
    CHECK(l1 > 0.0);
    CHECK(l1 <= 0.25 + 1e-6);

    // a reproduced rng state reproduces the batch
    Rng r1(77), r2(77);
    Batch<float> b1 = draw_batch<float>(r1, data.images, data.landmarks, 2, 64, MaskMode::RandomRect);
    Batch<float> b2 = draw_batch<float>(r2, data.images, data.landmarks, 2, 64, MaskMode::RandomRect);
    CHECK(b1.images.data == b2.images.data);
    CHECK(b1.masks[0].bits == b2.masks[0].bits);
    CHECK(b1.masks[1].bits == b2.masks[1].bits);
}
