#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mask.hpp"
#include "tensor.hpp"

namespace oattn {

// Interleaved 8-bit image buffer.
struct ImageU8 {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1, 2, 3 or 4
    std::vector<std::uint8_t> pixels;
};

// 8-bit non-interlaced PNG. Grayscale and alpha variants are accepted;
// palette and 16-bit files are rejected.
ImageU8 read_png(const std::string& path);

// Writes 8-bit RGB (color type 2), filter 0, fixed compression level; the
// encoder is deterministic.
void write_png_rgb(const std::string& path, const ImageU8& img);

// [3,H,W] in [0,1]; grayscale inputs are replicated across channels with a
// notice, alpha channels are dropped.
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img, std::vector<std::string>* notices = nullptr,
                          const std::string& name = "");

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t);

// Pixel-center-aligned bilinear resize to a square side; a no-op when the
// size already matches.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int side);

template <typename T>
Tensor<T> load_image(const std::string& path, int side, std::vector<std::string>* notices = nullptr);

template <typename T>
void save_image(const Tensor<T>& img, const std::string& path);

// Irregular mask file: grayscale (or channel-0) thresholded at 128, dark =
// hole, nearest-resampled to the target side.
Mask load_mask_png(const std::string& path, int side);

}  // namespace oattn
