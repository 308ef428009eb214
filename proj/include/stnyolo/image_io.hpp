#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Single-channel integer raster (PGM).
struct GrayImage {
  int width = 0;
  int height = 0;
  int max_value = 255;  // 255 (8-bit) or up to 65535 (16-bit)
  std::vector<std::uint16_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// Reads .png (8-bit) or binary .ppm/.pgm into a (1, 3, H, W) tensor in [0, 1].
Tensor read_image(const std::filesystem::path& path);

/// Writes a (1, 3, H, W) tensor in [0, 1] as 8-bit PNG, or as binary PPM when
/// the extension is .ppm (16-bit when `sixteen_bit`).
void write_image(const std::filesystem::path& path, const Tensor& image, bool sixteen_bit = false);

/// 8-bit quantization used for everything written as PNG: round(clamp(v) * 255).
std::uint8_t to_u8(Real v);

/// Bilinear (align-corners) resize of an (N, C, H, W) tensor.
Tensor resize_image(const Tensor& image, int out_h, int out_w);

}  // namespace stnyolo
