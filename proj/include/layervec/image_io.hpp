#pragma once

#include "layervec/image.hpp"

#include <filesystem>

namespace layervec {

// 8-bit PNG in any colour type; returns 1 channel for gray input, 3 otherwise
// (alpha is dropped). Values are v/255.
RasterImage read_png(const std::filesystem::path& path);

// Writes 8-bit gray or RGB; values are clamped and rounded to v*255.
void write_png(const std::filesystem::path& path, const RasterImage& img);

// Binary PPM (P6) or PGM (P5), chosen by channel count.
void write_pnm(const std::filesystem::path& path, const RasterImage& img);

// Dispatches on extension: .ppm/.pgm → PNM, anything else → PNG.
void write_image(const std::filesystem::path& path, const RasterImage& img);

// Grayscale 8-bit mask decode: foreground iff byte value >= 128. Colour input
// is reduced to its first channel before thresholding.
BinaryMask read_mask_png(const std::filesystem::path& path);

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

// Quantizes [0,1] to a byte exactly the way write_png does.
unsigned char to_byte(double v);

} // namespace layervec
