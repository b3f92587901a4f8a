#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "oattn/errors.hpp"
#include "oattn/mask.hpp"
#include "oattn/rng.hpp"

using namespace oattn;

TEST_CASE("center mask: 256 gives the central 128 square") {
    Rng rng(1);
    Mask m = gen_hole_mask(rng, 256, MaskMode::Center);
    CHECK(m.hole_count() == 128 * 128);
    for (int r = 0; r < 256; ++r)
        for (int c = 0; c < 256; ++c) {
            const bool inside = r >= 64 && r <= 191 && c >= 64 && c <= 191;
            if (m.at(r, c) != (inside ? 0 : 1)) {
                FAIL_CHECK("wrong bit at " << r << "," << c);
                r = c = 256;
            }
        }
    const double frac = static_cast<double>(m.hole_count()) / (256.0 * 256.0);
    CHECK(frac == doctest::Approx(0.25));
}

TEST_CASE("center mask: 64 gives a 32 square at rows/cols 16..47") {
    Rng rng(1);
    Mask m = gen_hole_mask(rng, 64, MaskMode::Center);
    Rect bb = hole_bbox(m);
    CHECK(bb == Rect{16, 16, 32, 32});
    CHECK(m.hole_count() == 32 * 32);
}

TEST_CASE("random_rect: hole side within [94,128] on 256") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        Mask m = gen_hole_mask(rng, 256, MaskMode::RandomRect);
        Rect bb = hole_bbox(m);
        CHECK(bb.height >= 94);
        CHECK(bb.height <= 128);
        CHECK(bb.width >= 94);
        CHECK(bb.width <= 128);
        CHECK(bb.height % 2 == 0);
        CHECK(bb.width % 2 == 0);
    }
}

TEST_CASE("random_rect property: fraction in [0.135, 0.25] and contained, 10^4 seeds") {
    bool all_ok = true;
    for (int seed = 0; seed < 10000; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        Mask m = gen_hole_mask(rng, 256, MaskMode::RandomRect);
        Rect bb = hole_bbox(m);
        const double frac = static_cast<double>(m.hole_count()) / (256.0 * 256.0);
        const bool contained =
            bb.top >= 0 && bb.left >= 0 && bb.top + bb.height <= 256 && bb.left + bb.width <= 256;
        const bool solid = m.hole_count() == static_cast<std::int64_t>(bb.height) * bb.width;
        if (frac < 0.135 || frac > 0.25 || !contained || !solid) {
            FAIL_CHECK("seed " << seed << ": frac " << frac);
            all_ok = false;
            break;
        }
    }
    CHECK(all_ok);
}

TEST_CASE("pyramid: center 128 hole on 256 at level 16") {
    Rng rng(1);
    Mask m = gen_hole_mask(rng, 256, MaskMode::Center);
    MaskPyramid pyr = build_pyramid(m, {16, 32, 64});
    const PyramidLevel& lvl = pyr.at(16);
    CHECK(lvl.foreground->size() == 64);
    CHECK(lvl.background->size() == 192);
    for (int idx : *lvl.foreground) {
        const int r = idx / 16, c = idx % 16;
        CHECK(r >= 4);
        CHECK(r <= 11);
        CHECK(c >= 4);
        CHECK(c <= 11);
    }
}

TEST_CASE("pyramid: degenerate masks") {
    Mask all_valid(32, 32, 1);
    MaskPyramid p1 = build_pyramid(all_valid, {16});
    CHECK(p1.at(16).foreground->empty());
    CHECK(p1.at(16).background->size() == 256);

    Mask all_hole(32, 32, 0);
    MaskPyramid p2 = build_pyramid(all_hole, {16});
    CHECK(p2.at(16).background->empty());
    CHECK(p2.at(16).foreground->size() == 256);
}

TEST_CASE("pyramid: partition property and non-divisible rejection") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        Mask m = gen_hole_mask(rng, 64, MaskMode::RandomRect);
        MaskPyramid pyr = build_pyramid(m, {4, 8, 16});
        for (auto& [side, lvl] : pyr.levels) {
            std::set<int> seen;
            for (int i : *lvl.foreground) seen.insert(i);
            for (int i : *lvl.background) seen.insert(i);
            CHECK(static_cast<int>(seen.size()) == side * side);
            CHECK(lvl.foreground->size() + lvl.background->size() ==
                  static_cast<std::size_t>(side) * side);
        }
    }
    Mask m(64, 64, 1);
    CHECK_THROWS_AS(build_pyramid(m, {24}), TapeError);
}

TEST_CASE("component geometry: centering, clipping, mask zeros") {
    std::map<std::string, std::pair<int, int>> centers{
        {"left_eye", {100, 80}}, {"right_eye", {100, 176}}, {"nose", {10, 10}}, {"mouth", {200, 128}}};
    ComponentGeometry geo = component_geometry(centers, 256, ComponentSizes::defaults_for(256));
    CHECK(geo.rects["left_eye"] == Rect{76, 56, 48, 48});
    CHECK(geo.rects["nose"] == Rect{0, 0, 48, 48});
    CHECK(geo.masks["left_eye"].hole_count() == 48 * 48);
    CHECK(geo.masks["mouth"].hole_count() == 48 * 64);

    std::map<std::string, std::pair<int, int>> missing{{"left_eye", {10, 10}}};
    CHECK_THROWS_AS(component_geometry(missing, 256, ComponentSizes::defaults_for(256)), DataError);
}

TEST_CASE("subdivide: center hole quadrants on 256") {
    Rng rng(1);
    Mask m = gen_hole_mask(rng, 256, MaskMode::Center);
    auto q = subdivide_hole(m);
    CHECK(q[0] == Rect{64, 64, 64, 64});
    CHECK(q[1] == Rect{64, 128, 64, 64});
    CHECK(q[2] == Rect{128, 64, 64, 64});
    CHECK(q[3] == Rect{128, 128, 64, 64});
}

TEST_CASE("subdivide: 94x94 hole gives 47x47 quadrants") {
    Mask m(256, 256, 1);
    for (int r = 10; r < 104; ++r)
        for (int c = 20; c < 114; ++c) m.set(r, c, 0);
    auto q = subdivide_hole(m);
    for (const Rect& r : q) {
        CHECK(r.height == 47);
        CHECK(r.width == 47);
    }
    CHECK(q[0] == Rect{10, 20, 47, 47});
    CHECK(q[3] == Rect{57, 67, 47, 47});
}

TEST_CASE("subdivide property: quadrants tile the bounding box disjointly") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        Mask m = gen_hole_mask(rng, 256, MaskMode::RandomRect);
        Rect bb = hole_bbox(m);
        auto q = subdivide_hole(m);
        std::int64_t area = 0;
        for (const Rect& r : q) {
            area += static_cast<std::int64_t>(r.height) * r.width;
            CHECK(r.top >= bb.top);
            CHECK(r.left >= bb.left);
            CHECK(r.top + r.height <= bb.top + bb.height);
            CHECK(r.left + r.width <= bb.left + bb.width);
        }
        CHECK(area == static_cast<std::int64_t>(bb.height) * bb.width);
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j) {
                const bool overlap = q[i].top < q[j].top + q[j].height &&
                                     q[j].top < q[i].top + q[i].height &&
                                     q[i].left < q[j].left + q[j].width &&
                                     q[j].left < q[i].left + q[i].width;
                CHECK_FALSE(overlap);
            }
    }
}

TEST_CASE("subdivide: empty hole rejected; irregular routes to the central region") {
    Mask m(64, 64, 1);
    CHECK_THROWS_AS(subdivide_hole(m), TapeError);
    CHECK(central_region(256) == Rect{64, 64, 128, 128});
    auto q = subdivide_rect(central_region(256));
    CHECK(q[0] == Rect{64, 64, 64, 64});
    CHECK(q[3] == Rect{128, 128, 64, 64});
}

TEST_CASE("composite_valid: identities and idempotence") {
    Rng rng(5);
    Tensor<float> out({3, 16, 16}), in({3, 16, 16});
    for (auto& v : out.data) v = static_cast<float>(rng.uniform());
    for (auto& v : in.data) v = static_cast<float>(rng.uniform());

    Mask ones(16, 16, 1);
    CHECK(composite_valid(out, in, ones).data == in.data);
    Mask zeros(16, 16, 0);
    CHECK(composite_valid(out, in, zeros).data == out.data);

    Rng mrng(9);
    Mask hole = gen_hole_mask(mrng, 16, MaskMode::Center);
    Tensor<float> comp = composite_valid(out, in, hole);
    for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 16; ++r)
            for (int x = 0; x < 16; ++x) {
                const std::size_t i = static_cast<std::size_t>((c * 16 + r) * 16 + x);
                if (hole.at(r, x))
                    CHECK(comp.data[i] == in.data[i]);
                else
                    CHECK(comp.data[i] == out.data[i]);
            }
    CHECK(composite_valid(comp, in, hole).data == comp.data);
}

TEST_CASE("irregular mask thresholding") {
    std::vector<std::uint8_t> gray(64, 200);
    gray[5] = 10;
    gray[13] = 40;
    Mask m = mask_from_gray(gray, 8, 8);
    CHECK(m.hole_count() == 2);
    CHECK(m.bits[5] == 0);
    CHECK(m.bits[13] == 0);

    // all-white and all-black files are binary and therefore legal
    CHECK(mask_from_gray(std::vector<std::uint8_t>(64, 255), 8, 8).hole_count() == 0);
    CHECK(mask_from_gray(std::vector<std::uint8_t>(64, 0), 8, 8).hole_count() == 64);
    // a mostly mid-gray buffer is not a mask file
    CHECK_THROWS_WITH_AS(mask_from_gray(std::vector<std::uint8_t>(64, 120), 8, 8),
                         doctest::Contains("not binary"), DataError);
    CHECK_THROWS_AS(mask_from_gray(gray, 4, 4), DataError);
}
