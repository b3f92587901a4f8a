#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace oattn {

// Binary validity map: 1 = valid pixel, 0 = hole.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w, std::uint8_t fill = 1)
        : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c]; }
    void set(int r, int c, std::uint8_t v) { bits[static_cast<std::size_t>(r) * width + c] = v; }
    std::int64_t hole_count() const;
    bool is_binary() const;
};

struct Rect {
    int top = 0, left = 0, height = 0, width = 0;
};

inline bool operator==(const Rect& a, const Rect& b) {
    return a.top == b.top && a.left == b.left && a.height == b.height && a.width == b.width;
}

enum class MaskMode { RandomRect, Center, Irregular };

MaskMode mask_mode_from_string(const std::string& s);
const char* mask_mode_name(MaskMode m);

// Hole mask generation. Random rectangles have even sides drawn uniformly
// from [ceil(0.367*side) rounded up to even, side/2] at uniform fully
// contained positions; draws whose hole fraction falls below 13.5% are
// redrawn. Center mode cuts the central (side/2)^2 square.
Mask gen_hole_mask(Rng& rng, int image_side, MaskMode mode);

// Thresholds an 8-bit grayscale buffer at 128 (dark = hole). Degenerate
// results (no hole or no valid pixel) are rejected as wrong mask files.
Mask mask_from_gray(const std::vector<std::uint8_t>& gray, int height, int width);

// Nearest-neighbor resample to a square side (used for irregular mask files).
Mask resize_mask_nearest(const Mask& m, int side);

// One pyramid level: the downsampled mask plus the row-major index lists of
// hole (foreground) and valid (background) positions. The lists partition
// all side*side positions.
struct PyramidLevel {
    int side = 0;
    Mask mask;
    IndexList foreground;
    IndexList background;
};

struct MaskPyramid {
    std::map<int, PyramidLevel> levels;  // keyed by feature side

    const PyramidLevel& at(int side) const;
};

// Downsamples by nearest-neighbor sampling at cell centers; every level must
// divide the image side. A feature cell is foreground iff its sample is a
// hole pixel.
MaskPyramid build_pyramid(const Mask& mask, const std::vector<int>& level_sides);

extern const std::array<const char*, 4> kComponentNames;  // left_eye, right_eye, nose, mouth

struct ComponentSizes {
    std::map<std::string, std::pair<int, int>> sizes;  // component -> rows, cols

    static ComponentSizes defaults_for(int image_side);  // 48/48/48x64 at 256, scaled
    static ComponentSizes uniform(int rows, int cols);
};

// Fixed-size rectangles centered on landmark positions (shifted inward at
// borders) and the matching component masks M2..M5 (0 inside the rectangle).
struct ComponentGeometry {
    std::map<std::string, std::pair<int, int>> centers;  // row, col
    std::map<std::string, Rect> rects;
    std::map<std::string, Mask> masks;
};

ComponentGeometry component_geometry(const std::map<std::string, std::pair<int, int>>& centers,
                                     int image_side, const ComponentSizes& sizes);

// Bounding box of the hole; throws if the mask has no hole.
Rect hole_bbox(const Mask& mask);

// Quadrants of the hole bounding box (sides must be even).
std::array<Rect, 4> subdivide_hole(const Mask& mask);
std::array<Rect, 4> subdivide_rect(const Rect& r);

// Central (side/2)^2 square; the local/subdivision crop region for irregular
// masks.
Rect central_region(int image_side);

// mask (*) input + (1 - mask) (*) output, per channel. Shapes must agree.
template <typename T>
Tensor<T> composite_valid(const Tensor<T>& out_img, const Tensor<T>& in_img, const Mask& mask);

// Mask as a [1,H,W] tensor of 0/1.
template <typename T>
Tensor<T> mask_to_tensor(const Mask& mask);

}  // namespace oattn
