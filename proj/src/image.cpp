#include "layervec/image.hpp"

#include "layervec/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace layervec {

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

std::size_t intersection_count(const BinaryMask& a, const BinaryMask& b) {
    if (a.width != b.width || a.height != b.height)
        throw FormatError("intersection_count: mask dimensions differ");
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        n += (a.data[i] != 0 && b.data[i] != 0) ? 1 : 0;
    return n;
}

RasterImage downsample(const RasterImage& img, int factor) {
    if (factor < 1 || img.width % factor != 0 || img.height % factor != 0)
        throw DomainError("downsample: factor must divide image dimensions");
    RasterImage out(img.width / factor, img.height / factor, img.channels);
    const double norm = 1.0 / (factor * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double s = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        s += img.at(x * factor + dx, y * factor + dy, c);
                out.at(x, y, c) = s * norm;
            }
    return out;
}

RasterImage resize_bilinear(const RasterImage& img, int width, int height) {
    if (width < 1 || height < 1)
        throw DomainError("resize_bilinear: target size must be positive");
    RasterImage out(width, height, img.channels);
    const double sx = static_cast<double>(img.width) / width;
    const double sy = static_cast<double>(img.height) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
                const double bot = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
                out.at(x, y, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int width, int height) {
    BinaryMask out(width, height);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
            out.at(x, y) = mask.at(sx, sy);
        }
    }
    return out;
}

double psnr(const RasterImage& a, const RasterImage& b) {
    if (!a.same_shape(b))
        throw FormatError("psnr: image shapes differ");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace layervec
