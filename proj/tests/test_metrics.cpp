#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oattn/metrics.hpp"
#include "oattn/rng.hpp"
#include "test_util.hpp"

using namespace oattn;

namespace {

template <typename T>
Tensor<T> uniform_shift(const Tensor<T>& base, double d) {
    Tensor<T> out = base;
    for (auto& v : out.data) v = static_cast<T>(v + d);
    return out;
}

Tensor<double> random_img(Rng& rng, int side) {
    Tensor<double> t({3, side, side});
    for (auto& v : t.data) v = rng.uniform(0.05, 0.85);
    return t;
}

}  // namespace

TEST_CASE("l1 percent: identities and checkerboard") {
    Rng rng(1);
    Tensor<double> a = random_img(rng, 16);
    CHECK(l1_percent(a, a) == 0.0);
    CHECK(l1_percent(uniform_shift(a, 0.1), a) == doctest::Approx(10.0).epsilon(1e-12));

    Tensor<double> checker({3, 16, 16});
    Tensor<double> zero({3, 16, 16});
    for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 16; ++r)
            for (int x = 0; x < 16; ++x)
                checker.data[static_cast<std::size_t>((c * 16 + r) * 16 + x)] = (r + x) % 2;
    CHECK(l1_percent(checker, zero) == doctest::Approx(50.0).epsilon(1e-12));

    Tensor<double> other({3, 8, 8});
    CHECK_THROWS_AS(l1_percent(a, other), TapeError);
}

TEST_CASE("psnr: uniform differences and the infinity sentinel") {
    Rng rng(2);
    Tensor<double> a = random_img(rng, 16);
    CHECK(psnr(uniform_shift(a, 0.1), a) == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(psnr(uniform_shift(a, 0.5), a) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-9));
    CHECK(std::isinf(psnr(a, a)));
}

TEST_CASE("psnr and l1 are consistent on uniform-difference pairs") {
    Rng rng(3);
    for (double d : {0.02, 0.1, 0.33, 0.5}) {
        Tensor<double> a = random_img(rng, 12);
        const double l1 = l1_percent(uniform_shift(a, d), a);
        const double ps = psnr(uniform_shift(a, d), a);
        CHECK(std::abs(ps - (-20.0 * std::log10(l1 / 100.0))) <= 1e-9);
    }
}

TEST_CASE("ssim: identity, negation, constants, symmetry") {
    Rng rng(4);
    Tensor<double> face = testutil::toy_face<double>(rng, 32);
    CHECK(ssim(face, face) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor<double> neg = face;
    for (auto& v : neg.data) v = 1.0 - v;
    CHECK(ssim(face, neg) < 1.0);

    Tensor<double> flat_a({3, 16, 16});
    Tensor<double> flat_b({3, 16, 16});
    for (auto& v : flat_a.data) v = 0.37;
    for (auto& v : flat_b.data) v = 0.37;
    CHECK(ssim(flat_a, flat_b) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor<double> b = random_img(rng, 32);
    CHECK(std::abs(ssim(face, b) - ssim(b, face)) <= 1e-9);

    Tensor<double> tiny({3, 8, 8});
    CHECK_THROWS_WITH_AS(ssim(tiny, tiny), doctest::Contains("window"), TapeError);
}

TEST_CASE("metrics on composites ignore generator behavior outside the hole") {
    Rng rng(5);
    Tensor<double> gt = random_img(rng, 24);
    Rng mrng(1);
    Mask mask = gen_hole_mask(mrng, 24, MaskMode::Center);

    Tensor<double> raw1 = random_img(rng, 24);
    Tensor<double> raw2 = raw1;
    // scribble over the valid region only
    for (int r = 0; r < 24; ++r)
        for (int c = 0; c < 24; ++c)
            if (mask.at(r, c))
                for (int ch = 0; ch < 3; ++ch)
                    raw2.data[static_cast<std::size_t>((ch * 24 + r) * 24 + c)] = rng.uniform();
    const Tensor<double> c1 = composite_valid(raw1, gt, mask);
    const Tensor<double> c2 = composite_valid(raw2, gt, mask);
    CHECK(l1_percent(c1, gt) == l1_percent(c2, gt));
    CHECK(ssim(c1, gt) == ssim(c2, gt));
}

TEST_CASE("evaluate_set: identity and all-gray mocks, determinism, skips") {
    const int side = 32;
    auto data = testutil::toy_dataset<double>(9, 3, side);
    std::vector<std::string> names{"a.png", "b.png", "c.png"};
    std::map<std::string, LandmarkMap> landmarks;
    for (const auto& n : names) landmarks[n] = testutil::toy_landmarks(side);

    // identity mock: returns the ground truth it is asked to complete
    int call = 0;
    InferFn<double> identity = [&](const Tensor<double>&, const MaskPyramid&) {
        return data.images[static_cast<std::size_t>(call++)];
    };
    EvalReport rep = evaluate_set<double>(identity, data.images, names, landmarks,
                                          MaskMode::Center, 7, {4, 8, 16});
    REQUIRE(rep.rows.size() == 3);
    for (const auto& r : rep.rows) {
        CHECK(r.l1_percent == 0.0);
        CHECK(r.ssim == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::isinf(r.psnr));
    }

    // all-gray mock with a center mask: exact hole-fraction arithmetic
    InferFn<double> gray = [&](const Tensor<double>& input4, const MaskPyramid&) {
        Tensor<double> out({3, input4.shape[2], input4.shape[3]});
        std::fill(out.data.begin(), out.data.end(), 0.5);
        return out;
    };
    EvalReport grep = evaluate_set<double>(gray, data.images, names, landmarks, MaskMode::Center,
                                           7, {4, 8, 16});
    for (std::size_t i = 0; i < 3; ++i) {
        Rng mr(1);
        Mask mask = gen_hole_mask(mr, side, MaskMode::Center);
        double hole_sum = 0.0;
        std::int64_t hole_px = 0;
        for (int ch = 0; ch < 3; ++ch)
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c)
                    if (!mask.at(r, c)) {
                        hole_sum += std::abs(
                            0.5 - data.images[i].data[static_cast<std::size_t>((ch * side + r) * side + c)]);
                        ++hole_px;
                    }
        const double want = 100.0 * 0.25 * (hole_sum / static_cast<double>(hole_px));
        CHECK(grep.rows[i].l1_percent == doctest::Approx(want).epsilon(1e-9));
    }

    // same seed -> byte-identical reports
    call = 0;
    EvalReport rep2 = evaluate_set<double>(identity, data.images, names, landmarks,
                                           MaskMode::Center, 7, {4, 8, 16});
    CHECK(rep.to_json() == rep2.to_json());

    // missing landmarks skip the image with a notice
    landmarks.erase("b.png");
    std::vector<std::string> notices;
    call = 0;
    InferFn<double> identity_sparse = [&](const Tensor<double>&, const MaskPyramid&) {
        const int idx = call == 0 ? 0 : 2;  // called for a and c only
        ++call;
        return data.images[static_cast<std::size_t>(idx)];
    };
    EvalReport srep = evaluate_set<double>(identity_sparse, data.images, names, landmarks,
                                           MaskMode::Center, 7, {4, 8, 16}, nullptr, &notices);
    CHECK(srep.rows.size() == 2);
    REQUIRE(srep.skipped.size() == 1);
    CHECK(srep.skipped[0] == "b.png");
    REQUIRE(notices.size() == 1);
    CHECK(notices[0].find("b.png") != std::string::npos);

    // aggregates are plain means over rows
    double mean_l1 = 0.0;
    for (const auto& r : grep.rows) mean_l1 += r.l1_percent;
    CHECK(grep.l1_percent == doctest::Approx(mean_l1 / 3.0).epsilon(1e-12));
}
