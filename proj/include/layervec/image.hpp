#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace layervec {

// H×W×C float image, row-major, channel-interleaved, values nominally in [0,1].
struct RasterImage {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    RasterImage() = default;
    RasterImage(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

    bool same_shape(const RasterImage& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

// Strictly binary raster: 0 = background, 1 = foreground.
struct BinaryMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

    // Out-of-range reads are background.
    bool test(int x, int y) const {
        return x >= 0 && y >= 0 && x < width && y < height && at(x, y) != 0;
    }

    std::size_t count() const;
    bool operator==(const BinaryMask&) const = default;
};

// Pixel count of a ∧ b. Masks must share dimensions.
std::size_t intersection_count(const BinaryMask& a, const BinaryMask& b);

// Box-filter downsample by an integer factor.
RasterImage downsample(const RasterImage& img, int factor);

// Bilinear resize (pixel-center aligned).
RasterImage resize_bilinear(const RasterImage& img, int width, int height);

// Nearest-neighbour resize for masks.
BinaryMask resize_nearest(const BinaryMask& mask, int width, int height);

double psnr(const RasterImage& a, const RasterImage& b);

} // namespace layervec
