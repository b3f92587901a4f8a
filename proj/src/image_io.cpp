#include "oattn/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "oattn/errors.hpp"

namespace oattn {

namespace {

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& in, std::size_t expected,
                                       const std::string& path) {
    std::vector<std::uint8_t> out(expected);
    uLongf out_len = static_cast<uLongf>(expected);
    const int rc = uncompress(out.data(), &out_len, in.data(), static_cast<uLong>(in.size()));
    if (rc != Z_OK || out_len != expected)
        throw DataError("png '" + path + "': corrupt compressed image data");
    return out;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open image: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
        throw DataError("not a png file: " + path);

    std::size_t at = 8;
    int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    while (at + 8 <= bytes.size() && !saw_iend) {
        const std::uint32_t len = be32(bytes.data() + at);
        if (at + 12 + len > bytes.size()) throw DataError("truncated png: " + path);
        const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
        const std::uint8_t* data = bytes.data() + at + 8;
        const std::uint32_t want_crc = be32(bytes.data() + at + 8 + len);
        const std::uint32_t got_crc = static_cast<std::uint32_t>(
            crc32(crc32(0, bytes.data() + at + 4, 4), data, len));
        if (want_crc != got_crc) throw DataError("png '" + path + "': bad chunk crc");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DataError("png '" + path + "': bad IHDR");
            width = static_cast<int>(be32(data));
            height = static_cast<int>(be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        at += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || width < 1 || height < 1)
        throw DataError("malformed png: " + path);
    if (bit_depth == 16) throw DataError("png '" + path + "': 16-bit images are not supported");
    if (bit_depth != 8) throw DataError("png '" + path + "': unsupported bit depth");
    if (color_type == 3) throw DataError("png '" + path + "': palette images are not supported");
    if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6)
        throw DataError("png '" + path + "': unsupported color type");
    if (interlace != 0) throw DataError("png '" + path + "': interlaced images are not supported");

    const int channels = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 4 ? 2 : 4;
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    const std::size_t raw_len = (stride + 1) * static_cast<std::size_t>(height);
    std::vector<std::uint8_t> raw = zlib_inflate(idat, raw_len, path);

    ImageU8 img;
    img.height = height;
    img.width = width;
    img.channels = channels;
    img.pixels.resize(stride * static_cast<std::size_t>(height));
    std::vector<std::uint8_t> prev(stride, 0);
    for (int y = 0; y < height; ++y) {
        const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
        const int filter = src[0];
        std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
        for (std::size_t x = 0; x < stride; ++x) {
            const int left = x >= static_cast<std::size_t>(channels) ? dst[x - static_cast<std::size_t>(channels)] : 0;
            const int up = prev[x];
            const int ul = x >= static_cast<std::size_t>(channels) ? prev[x - static_cast<std::size_t>(channels)] : 0;
            int v = src[x + 1];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += up; break;
                case 3: v += (left + up) / 2; break;
                case 4: v += paeth(left, up, ul); break;
                default: throw DataError("png '" + path + "': bad scanline filter");
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

void write_png_rgb(const std::string& path, const ImageU8& img) {
    if (img.channels != 3) throw TapeError("write_png_rgb: expects 3 channels");
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw[static_cast<std::size_t>(y) * (stride + 1)] = 0;  // filter none
        std::memcpy(raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1,
                    img.pixels.data() + static_cast<std::size_t>(y) * stride, stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png compression failed: " + path);
    compressed.resize(bound);

    std::vector<std::uint8_t> out(kSignature, kSignature + 8);
    auto chunk = [&](const char* type, const std::vector<std::uint8_t>& data) {
        put_be32(out, static_cast<std::uint32_t>(data.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        // zlib resets the crc when handed a null buffer, so guard empty chunks
        uLong crc = crc32(0, out.data() + start, 4);
        if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
        put_be32(out, static_cast<std::uint32_t>(crc));
    };
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk("IHDR", ihdr);
    chunk("IDAT", compressed);
    chunk("IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open image path for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("failed writing image: " + path);
}

template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img, std::vector<std::string>* notices,
                          const std::string& name) {
    Tensor<T> t({3, img.height, img.width});
    const std::int64_t hw = static_cast<std::int64_t>(img.height) * img.width;
    const bool gray = img.channels <= 2;
    if (gray && notices)
        notices->push_back("'" + name + "': grayscale input replicated to 3 channels");
    for (std::int64_t i = 0; i < hw; ++i) {
        const std::uint8_t* px = img.pixels.data() + i * img.channels;
        for (int c = 0; c < 3; ++c) {
            const std::uint8_t v = gray ? px[0] : px[c];
            t.data[static_cast<std::size_t>(c * hw + i)] = static_cast<T>(v) / T(255);
        }
    }
    return t;
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t) {
    if (t.shape.size() != 3 || t.shape[0] != 3)
        throw TapeError("tensor_to_image: expects [3,H,W], got " + shape_str(t.shape));
    ImageU8 img;
    img.height = t.shape[1];
    img.width = t.shape[2];
    img.channels = 3;
    const std::int64_t hw = static_cast<std::int64_t>(img.height) * img.width;
    img.pixels.resize(static_cast<std::size_t>(hw) * 3);
    for (std::int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(static_cast<double>(t.data[static_cast<std::size_t>(c * hw + i)]), 0.0, 1.0);
            img.pixels[static_cast<std::size_t>(i * 3 + c)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return img;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int side) {
    if (img.shape.size() != 3) throw TapeError("resize_bilinear: expects [C,H,W]");
    const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
    if (h == side && w == side) return img;
    Tensor<T> out({c, side, side});
    const double sy = static_cast<double>(h) / side;
    const double sx = static_cast<double>(w) / side;
    for (int y = 0; y < side; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < side; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            for (int ch = 0; ch < c; ++ch) {
                const T* p = img.data.data() + static_cast<std::int64_t>(ch) * h * w;
                const double v00 = p[y0 * w + x0], v01 = p[y0 * w + x1];
                const double v10 = p[y1 * w + x0], v11 = p[y1 * w + x1];
                const double top = v00 + (v01 - v00) * wx;
                const double bot = v10 + (v11 - v10) * wx;
                out.data[static_cast<std::size_t>((static_cast<std::int64_t>(ch) * side + y) * side + x)] =
                    static_cast<T>(top + (bot - top) * wy);
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> load_image(const std::string& path, int side, std::vector<std::string>* notices) {
    return resize_bilinear(image_to_tensor<T>(read_png(path), notices, path), side);
}

template <typename T>
void save_image(const Tensor<T>& img, const std::string& path) {
    write_png_rgb(path, tensor_to_image(img));
}

Mask load_mask_png(const std::string& path, int side) {
    const ImageU8 img = read_png(path);
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(img.height) * img.width);
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = img.pixels[i * static_cast<std::size_t>(img.channels)];
    Mask m = mask_from_gray(gray, img.height, img.width);
    return resize_mask_nearest(m, side);
}

#define OATTN_INSTANTIATE(T)                                                                        \
    template Tensor<T> image_to_tensor<T>(const ImageU8&, std::vector<std::string>*, const std::string&); \
    template ImageU8 tensor_to_image<T>(const Tensor<T>&);                                          \
    template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int);                                   \
    template Tensor<T> load_image<T>(const std::string&, int, std::vector<std::string>*);           \
    template void save_image<T>(const Tensor<T>&, const std::string&);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
