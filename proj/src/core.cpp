#include "attn_distill/core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>

#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

int parse_nonnegative(std::string_view text, std::string_view whole) {
  int value = -1;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || value < 0) {
    throw InvalidArgument("malformed patch id: " + std::string(whole));
  }
  return value;
}

}  // namespace

std::string_view to_string(ClassName c) {
  switch (c) {
    case ClassName::Wood:
      return "wood";
    case ClassName::Settlement:
      return "settlement";
  }
  return "unknown";
}

ClassName parse_class_name(std::string_view text) {
  const auto key = lower(text);
  if (key == "wood") return ClassName::Wood;
  if (key == "settlement") return ClassName::Settlement;
  throw InvalidArgument("unknown class: " + std::string(text));
}

std::string_view to_string(LabelSource s) { return s == LabelSource::Llm ? "llm" : "human"; }

LabelSource parse_label_source(std::string_view text) {
  const auto key = lower(text);
  if (key == "llm") return LabelSource::Llm;
  if (key == "human") return LabelSource::Human;
  throw InvalidArgument("unknown label source: " + std::string(text));
}

std::string PatchId::str() const {
  return sheet + "_" + std::to_string(row) + "_" + std::to_string(col);
}

PatchId PatchId::parse(std::string_view text) {
  const auto last = text.rfind('_');
  if (last == std::string_view::npos || last == 0) {
    throw InvalidArgument("malformed patch id: " + std::string(text));
  }
  const auto mid = text.rfind('_', last - 1);
  if (mid == std::string_view::npos || mid == 0) {
    throw InvalidArgument("malformed patch id: " + std::string(text));
  }
  PatchId id;
  id.sheet = std::string(text.substr(0, mid));
  id.row = parse_nonnegative(text.substr(mid + 1, last - mid - 1), text);
  id.col = parse_nonnegative(text.substr(last + 1), text);
  return id;
}

std::vector<GridCell> tile_grid(int height_px, int width_px, int tile) {
  if (tile <= 0) throw InvalidArgument("tile size must be positive");
  if (height_px <= 0 || width_px <= 0) throw InvalidArgument("raster dimensions must be positive");
  const int rows = height_px / tile;
  const int cols = width_px / tile;
  std::vector<GridCell> cells;
  cells.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      cells.push_back({r, c, PixelRect{c * tile, r * tile, tile, tile}});
    }
  }
  return cells;
}

Image::Image(int h, int w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

Image Image::crop(const PixelRect& rect) const {
  if (rect.x < 0 || rect.y < 0 || rect.x + rect.width > width || rect.y + rect.height > height) {
    throw InvalidArgument("crop rectangle outside image");
  }
  Image out(rect.height, rect.width);
  for (int y = 0; y < rect.height; ++y) {
    const auto* src = &pixels[(static_cast<std::size_t>(rect.y + y) * width + rect.x) * 3];
    std::copy(src, src + static_cast<std::size_t>(rect.width) * 3,
              &out.pixels[static_cast<std::size_t>(y) * rect.width * 3]);
  }
  return out;
}

void validate_patch_image(const Image& image) {
  if (image.height <= 0 || image.width <= 0 || image.height % kTokenPx != 0 ||
      image.width % kTokenPx != 0) {
    throw ShapeError("image dimensions " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " are not positive multiples of 64");
  }
  for (float v : image.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("pixel value outside [0,1]");
  }
}

std::size_t BoolGrid::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw InvalidArgument("uniform_int range must be non-empty");
  // Rejection sampling keeps the draw unbiased and platform independent.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

double Rng::normal(double mean, double stddev) {
  if (spare_normal_) {
    const double z = *spare_normal_;
    spare_normal_.reset();
    return mean + stddev * z;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  return mean + stddev * radius * std::cos(angle);
}

Rng Rng::derive(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag + 1))); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace attn_distill
