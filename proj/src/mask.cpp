#include "oattn/mask.hpp"

#include <algorithm>
#include <cmath>

#include "oattn/errors.hpp"

namespace oattn {

const std::array<const char*, 4> kComponentNames = {"left_eye", "right_eye", "nose", "mouth"};

std::int64_t Mask::hole_count() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b == 0;
    return n;
}

bool Mask::is_binary() const {
    for (auto b : bits)
        if (b != 0 && b != 1) return false;
    return true;
}

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "random_rect") return MaskMode::RandomRect;
    if (s == "center") return MaskMode::Center;
    if (s == "irregular") return MaskMode::Irregular;
    throw ConfigError("unknown mask mode '" + s + "' (random_rect|center|irregular)");
}

const char* mask_mode_name(MaskMode m) {
    switch (m) {
        case MaskMode::RandomRect: return "random_rect";
        case MaskMode::Center: return "center";
        case MaskMode::Irregular: return "irregular";
    }
    return "?";
}

namespace {
void cut_rect(Mask& m, const Rect& r) {
    for (int y = r.top; y < r.top + r.height; ++y)
        for (int x = r.left; x < r.left + r.width; ++x) m.set(y, x, 0);
}

int even_up(int v) { return v + (v & 1); }
int even_down(int v) { return v - (v & 1); }
}  // namespace

Mask gen_hole_mask(Rng& rng, int image_side, MaskMode mode) {
    switch (mode) {
        case MaskMode::Center: {
            Mask m(image_side, image_side, 1);
            cut_rect(m, central_region(image_side));
            return m;
        }
        case MaskMode::RandomRect: {
            const int lo = even_up(static_cast<int>(std::ceil(0.367 * image_side)));
            const int hi = even_down(image_side / 2);
            if (lo < 2 || lo > hi)
                throw TapeError("gen_hole_mask: image side " + std::to_string(image_side) +
                                " too small for the hole size rule");
            const double total = static_cast<double>(image_side) * image_side;
            for (;;) {
                const int h = lo + 2 * static_cast<int>(rng.uniform_int(0, (hi - lo) / 2));
                const int w = lo + 2 * static_cast<int>(rng.uniform_int(0, (hi - lo) / 2));
                const double frac = static_cast<double>(h) * w / total;
                if (frac < 0.135) continue;  // 94x94 on 256 rounds just below the band
                Mask m(image_side, image_side, 1);
                const int top = static_cast<int>(rng.uniform_int(0, image_side - h));
                const int left = static_cast<int>(rng.uniform_int(0, image_side - w));
                cut_rect(m, Rect{top, left, h, w});
                return m;
            }
        }
        case MaskMode::Irregular:
            throw TapeError("gen_hole_mask: irregular masks are ingested from files");
    }
    throw TapeError("gen_hole_mask: bad mode");
}

Mask mask_from_gray(const std::vector<std::uint8_t>& gray, int height, int width) {
    if (static_cast<std::int64_t>(gray.size()) != static_cast<std::int64_t>(height) * width)
        throw DataError("irregular mask: buffer size does not match " + std::to_string(height) +
                        "x" + std::to_string(width));
    // a mask file must be essentially binary; thresholding a photograph is
    // almost surely a mistake
    std::int64_t midrange = 0;
    for (const std::uint8_t v : gray) midrange += v >= 64 && v < 192;
    if (2 * midrange > static_cast<std::int64_t>(gray.size()))
        throw DataError("irregular mask: not binary after thresholding (mostly mid-gray values)");
    Mask m(height, width, 1);
    for (std::size_t i = 0; i < gray.size(); ++i) m.bits[i] = gray[i] >= 128 ? 1 : 0;
    return m;
}

Mask resize_mask_nearest(const Mask& m, int side) {
    if (m.height == side && m.width == side) return m;
    Mask out(side, side, 1);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) {
            const int sr = std::min(m.height - 1, r * m.height / side + m.height / (2 * side));
            const int sc = std::min(m.width - 1, c * m.width / side + m.width / (2 * side));
            out.set(r, c, m.at(sr, sc));
        }
    return out;
}

const PyramidLevel& MaskPyramid::at(int side) const {
    auto it = levels.find(side);
    if (it == levels.end())
        throw TapeError("mask pyramid has no level of side " + std::to_string(side));
    return it->second;
}

MaskPyramid build_pyramid(const Mask& mask, const std::vector<int>& level_sides) {
    if (mask.height != mask.width) throw TapeError("build_pyramid: mask must be square");
    MaskPyramid pyr;
    for (int side : level_sides) {
        if (side < 1 || mask.height % side != 0)
            throw TapeError("build_pyramid: level side " + std::to_string(side) +
                            " does not divide image side " + std::to_string(mask.height));
        const int f = mask.height / side;
        PyramidLevel lvl;
        lvl.side = side;
        lvl.mask = Mask(side, side, 1);
        std::vector<int> fg, bg;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const std::uint8_t v = mask.at(r * f + f / 2, c * f + f / 2);
                lvl.mask.set(r, c, v);
                (v == 0 ? fg : bg).push_back(r * side + c);
            }
        lvl.foreground = make_index_list(std::move(fg));
        lvl.background = make_index_list(std::move(bg));
        pyr.levels.emplace(side, std::move(lvl));
    }
    return pyr;
}

ComponentSizes ComponentSizes::defaults_for(int image_side) {
    auto scaled = [&](int v) { return std::max(1, v * image_side / 256); };
    ComponentSizes s;
    s.sizes["left_eye"] = {scaled(48), scaled(48)};
    s.sizes["right_eye"] = {scaled(48), scaled(48)};
    s.sizes["nose"] = {scaled(48), scaled(48)};
    s.sizes["mouth"] = {scaled(48), scaled(64)};
    return s;
}

ComponentSizes ComponentSizes::uniform(int rows, int cols) {
    ComponentSizes s;
    for (const char* name : kComponentNames) s.sizes[name] = {rows, cols};
    return s;
}

ComponentGeometry component_geometry(const std::map<std::string, std::pair<int, int>>& centers,
                                     int image_side, const ComponentSizes& sizes) {
    ComponentGeometry geo;
    for (const char* name : kComponentNames) {
        auto it = centers.find(name);
        if (it == centers.end())
            throw DataError(std::string("component_geometry: missing component '") + name + "'");
        const auto [row, col] = it->second;
        if (row < 0 || row >= image_side || col < 0 || col >= image_side)
            throw DataError(std::string("component_geometry: center of '") + name +
                            "' outside the image");
        auto sit = sizes.sizes.find(name);
        if (sit == sizes.sizes.end())
            throw ConfigError(std::string("component_geometry: no size configured for '") + name + "'");
        const auto [h, w] = sit->second;
        if (h > image_side || w > image_side)
            throw ConfigError(std::string("component_geometry: rect for '") + name +
                              "' larger than the image");
        Rect r;
        r.height = h;
        r.width = w;
        r.top = std::clamp(row - h / 2, 0, image_side - h);
        r.left = std::clamp(col - w / 2, 0, image_side - w);
        geo.centers[name] = it->second;
        geo.rects[name] = r;
        Mask m(image_side, image_side, 1);
        cut_rect(m, r);
        geo.masks[name] = std::move(m);
    }
    return geo;
}

Rect hole_bbox(const Mask& mask) {
    int top = mask.height, bottom = -1, left = mask.width, right = -1;
    for (int r = 0; r < mask.height; ++r)
        for (int c = 0; c < mask.width; ++c)
            if (mask.at(r, c) == 0) {
                top = std::min(top, r);
                bottom = std::max(bottom, r);
                left = std::min(left, c);
                right = std::max(right, c);
            }
    if (bottom < 0) throw TapeError("hole_bbox: mask has no hole");
    return Rect{top, left, bottom - top + 1, right - left + 1};
}

std::array<Rect, 4> subdivide_rect(const Rect& r) {
    if (r.height < 2 || r.width < 2 || r.height % 2 || r.width % 2)
        throw TapeError("subdivide: rect sides must be even and >= 2, got " +
                        std::to_string(r.height) + "x" + std::to_string(r.width));
    const int hh = r.height / 2, hw = r.width / 2;
    return {Rect{r.top, r.left, hh, hw}, Rect{r.top, r.left + hw, hh, hw},
            Rect{r.top + hh, r.left, hh, hw}, Rect{r.top + hh, r.left + hw, hh, hw}};
}

std::array<Rect, 4> subdivide_hole(const Mask& mask) {
    return subdivide_rect(hole_bbox(mask));
}

Rect central_region(int image_side) {
    const int half = image_side / 2;
    return Rect{image_side / 4, image_side / 4, half, half};
}

template <typename T>
Tensor<T> composite_valid(const Tensor<T>& out_img, const Tensor<T>& in_img, const Mask& mask) {
    if (out_img.shape != in_img.shape)
        throw TapeError("composite_valid: image shapes differ, " + shape_str(out_img.shape) +
                        " vs " + shape_str(in_img.shape));
    if (out_img.shape.size() != 3 || out_img.shape[1] != mask.height || out_img.shape[2] != mask.width)
        throw TapeError("composite_valid: mask " + std::to_string(mask.height) + "x" +
                        std::to_string(mask.width) + " does not match image " +
                        shape_str(out_img.shape));
    Tensor<T> out = out_img;
    const std::int64_t hw = static_cast<std::int64_t>(mask.height) * mask.width;
    for (int c = 0; c < out_img.shape[0]; ++c) {
        T* dst = out.data.data() + c * hw;
        const T* src = in_img.data.data() + c * hw;
        for (std::int64_t i = 0; i < hw; ++i)
            if (mask.bits[static_cast<std::size_t>(i)]) dst[i] = src[i];
    }
    return out;
}

template <typename T>
Tensor<T> mask_to_tensor(const Mask& mask) {
    Tensor<T> t({1, mask.height, mask.width});
    for (std::size_t i = 0; i < mask.bits.size(); ++i) t.data[i] = static_cast<T>(mask.bits[i]);
    return t;
}

template Tensor<float> composite_valid<float>(const Tensor<float>&, const Tensor<float>&, const Mask&);
template Tensor<double> composite_valid<double>(const Tensor<double>&, const Tensor<double>&, const Mask&);
template Tensor<float> mask_to_tensor<float>(const Mask&);
template Tensor<double> mask_to_tensor<double>(const Mask&);

}  // namespace oattn
