#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"

namespace attn_distill {

/// 8-bit interleaved RGB raster, the on-disk representation of Image.
struct Rgb8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Rgb8&) const = default;
};

/// Single-channel 8-bit raster (masks).
struct Gray8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};

Image to_image(const Rgb8& raster);
/// Rounds to the nearest 8-bit level; values are clamped to [0,1] first.
Rgb8 to_rgb8(const Image& image);

/// Reads a 3-channel raster. Throws IoError if unreadable, FormatError if the
/// file does not hold exactly three color channels.
Rgb8 read_rgb(const std::filesystem::path& path);
Gray8 read_gray(const std::filesystem::path& path);

/// Lossless PNG output.
void write_png(const std::filesystem::path& path, const Rgb8& raster);
void write_png(const std::filesystem::path& path, const Gray8& raster);
std::vector<std::uint8_t> encode_png(const Rgb8& raster);

/// Draws dark text with its baseline at (x, y).
void draw_text(Rgb8& raster, const std::string& text, int x, int y, double scale = 0.5);

}  // namespace attn_distill
