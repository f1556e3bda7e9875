#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::harness {

/// 8-bit raster as decoded from or destined for a PNG file. Rows are packed
/// top to bottom with interleaved channels.
struct PngImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 = grayscale, 3 = RGB
    std::vector<std::uint8_t> pixels;
};

/// Minimal PNG writer: 8-bit gray or RGB, filter type 0 on every scanline,
/// a single zlib-compressed IDAT chunk. The byte stream is a pure function
/// of the pixels, which is what makes artifact trees diffable.
std::vector<std::uint8_t> encode_png(const PngImage& img);

/// Accepts 8-bit gray/RGB and 1-bit gray (bit depth 1 expands to 0/255),
/// any scanline filter 0-4. Palette, alpha, and interlacing are rejected
/// with ParseError, as are CRC or length inconsistencies.
PngImage decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::string& path, const PngImage& img);
PngImage read_png_file(const std::string& path);

/// clamp to [0,1], then round to the nearest of 256 levels.
std::uint8_t quantize8(float v);

/// Tensor bridges. Images are [C,H,W] floats in [0,1].
void write_png_rgb(const std::string& path, const numcore::Tensor& image);
void write_png_gray(const std::string& path, const numcore::Tensor& map);
/// 1-bit grayscale; every entry must be exactly 0 or 1.
void write_png_mask(const std::string& path, const numcore::Tensor& mask);
/// [1,H,W] or [3,H,W] with values k/255.
numcore::Tensor read_png_tensor(const std::string& path);

/// Horizontal concatenation of equally shaped [3,H,W] frames into one RGB
/// file, e.g. the recorded states of a sampler trajectory.
void write_filmstrip(const std::string& path, std::span<const numcore::Tensor> frames);

}  // namespace cbv::harness
