#pragma once

#include "detrbench/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace detrbench {

/// Mid-rise 16-bit quantizer: q = floor(v * 65536) clamped to 65535,
/// reconstructed as (q + 0.5) / 65536. Reconstruction error is at most 2^-17.
std::uint16_t quantize_u16(double v);
double dequantize_u16(std::uint16_t q);
inline constexpr double kU16MaxError = 1.0 / 131072.0;

/// Image whose every value is exactly representable by the 16-bit store.
Image snap_to_u16_grid(const Image& image);

/// Lossless 16-bit RGB PNG.
void write_png16(const Image& image, const std::filesystem::path& path);
Image read_png16(const std::filesystem::path& path);
/// 8-bit RGB PNG (lossy for sub-1/255 perturbations).
void write_png8(const Image& image, const std::filesystem::path& path);

/// Reads any 8- or 16-bit raster OpenCV understands; values scaled to [0,1].
Image read_image_file(const std::filesystem::path& path);

/// Area-averaging resize.
Image resize_image(const Image& image, int height, int width);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace detrbench
