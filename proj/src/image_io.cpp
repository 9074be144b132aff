#include "layervec/image_io.hpp"

#include "layervec/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace layervec {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f)
        throw FormatError("cannot open '" + path.string() + "'");
    return f;
}

// Decoded 8-bit samples, 1 or 3 channels.
struct Decoded {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<unsigned char> bytes;
};

Decoded decode_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("'" + path.string() + "' is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("libpng initialisation failed");
    }
    Decoded out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG '" + path.string() + "'");
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16)
        png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA)
        png_set_strip_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out.bytes.resize(stride * out.height);
    rows.resize(out.height);
    for (int y = 0; y < out.height; ++y)
        rows[y] = out.bytes.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    if (out.channels != 1 && out.channels != 3)
        throw FormatError("unsupported PNG channel layout in '" + path.string() + "'");
    return out;
}

void encode_png(const std::filesystem::path& path, int width, int height, int channels,
                const std::vector<unsigned char>& bytes) {
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("failed writing PNG '" + path.string() + "'");
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        rows[y] = const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<unsigned char> quantize(const RasterImage& img) {
    if (img.channels != 1 && img.channels != 3)
        throw FormatError("only 1- and 3-channel images can be written");
    std::vector<unsigned char> bytes(img.data.size());
    std::transform(img.data.begin(), img.data.end(), bytes.begin(), to_byte);
    return bytes;
}

} // namespace

unsigned char to_byte(double v) {
    if (!(v > 0.0))
        return 0;
    if (v >= 1.0)
        return 255;
    return static_cast<unsigned char>(std::lround(v * 255.0));
}

RasterImage read_png(const std::filesystem::path& path) {
    const Decoded d = decode_png(path);
    RasterImage img(d.width, d.height, d.channels);
    for (std::size_t i = 0; i < d.bytes.size(); ++i)
        img.data[i] = d.bytes[i] / 255.0;
    return img;
}

void write_png(const std::filesystem::path& path, const RasterImage& img) {
    encode_png(path, img.width, img.height, img.channels, quantize(img));
}

void write_pnm(const std::filesystem::path& path, const RasterImage& img) {
    const auto bytes = quantize(img);
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw FormatError("cannot open '" + path.string() + "'");
    os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_image(const std::filesystem::path& path, const RasterImage& img) {
    const auto ext = path.extension().string();
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")
        write_pnm(path, img);
    else
        write_png(path, img);
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
    const Decoded d = decode_png(path);
    BinaryMask m(d.width, d.height);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = d.bytes[i * d.channels] >= 128 ? 1 : 0;
    return m;
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<unsigned char> bytes(mask.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = mask.data[i] ? 255 : 0;
    encode_png(path, mask.width, mask.height, 1, bytes);
}

} // namespace layervec
