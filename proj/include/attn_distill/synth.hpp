#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/image_io.hpp"

namespace attn_distill {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct ClassRegion {
  ClassName class_name = ClassName::Wood;
  std::vector<Point> polygon;  // pixel coordinates, any winding
};

/// Texture parameters. The defaults produce textures a small encoder
/// separates reliably; acceptance tests pin them explicitly.
struct SynthTextures {
  // background
  std::array<float, 3> paper{0.93f, 0.91f, 0.84f};
  int line_count = 40;  // random straight strokes per 1920x1920 sheet
  float line_intensity = 0.35f;
  float pixel_noise = 0.02f;
  // wood: clusters of small circle outlines
  double wood_circle_radius = 3.0;
  double wood_circle_density = 1.0 / 250.0;  // circle centers per foreground pixel
  std::array<float, 3> wood_ink{0.20f, 0.45f, 0.20f};
  // settlement: dot grid with hatched block outlines
  int settlement_dot_spacing = 6;
  std::array<float, 3> settlement_ink{0.25f, 0.20f, 0.20f};
};

struct SynthSheet {
  Rgb8 raster;
  std::map<ClassName, GroundTruthMask> masks;  // one per class, always both
};

/// Even-odd scanline fill sampled at pixel centers.
BoolGrid rasterize_polygon(const std::vector<Point>& polygon, int height, int width);

/// Deterministic in (seed, size, regions, textures). Throws ValidationError
/// for out-of-bounds polygons or overlapping regions of different classes.
SynthSheet generate_sheet(std::uint64_t seed, int size_px, const std::vector<ClassRegion>& regions,
                          const SynthTextures& textures = {});

/// Random non-overlapping Wood and Settlement polygons for one sheet.
std::vector<ClassRegion> random_regions(std::uint64_t seed, int size_px);

/// Legend shown next to each patch in labeling prompts: one captioned
/// swatch per class, stacked vertically.
Rgb8 render_legend(const SynthTextures& textures = {}, int swatch_px = 160);

struct BenchmarkSheet {
  SheetId sheet;
  bool eval = false;
};

/// Writes `{sheet}.png` rasters and `{sheet}_{class}.png` masks for
/// `sheet_count` sheets plus `benchmark.json`. The last sheet is the
/// evaluation sheet, the others are for training.
std::vector<BenchmarkSheet> generate_benchmark(std::uint64_t seed, int sheet_count, int size_px,
                                               const std::filesystem::path& out_dir,
                                               const SynthTextures& textures = {});

std::vector<BenchmarkSheet> read_benchmark(const std::filesystem::path& dir);

}  // namespace attn_distill
