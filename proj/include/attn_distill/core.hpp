#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace attn_distill {

inline constexpr int kPatchPx = 384;
inline constexpr int kTokenPx = 64;

enum class ClassName { Wood, Settlement };

inline constexpr std::array<ClassName, 2> kAllClasses{ClassName::Wood, ClassName::Settlement};

std::string_view to_string(ClassName c);
/// Accepts "wood"/"settlement" in any letter case.
ClassName parse_class_name(std::string_view text);

enum class LabelSource { Llm, Human };

std::string_view to_string(LabelSource s);
LabelSource parse_label_source(std::string_view text);

using SheetId = std::string;

struct PatchId {
  SheetId sheet;
  int row = 0;
  int col = 0;

  /// Canonical "{sheet}_{row}_{col}" form used for file names and URLs.
  std::string str() const;
  /// Inverse of str(); the sheet part may itself contain underscores.
  static PatchId parse(std::string_view text);

  auto operator<=>(const PatchId&) const = default;
};

struct PixelRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  auto operator<=>(const PixelRect&) const = default;
};

struct GridCell {
  int row = 0;
  int col = 0;
  PixelRect rect;
};

/// Full tiles of size `tile` covering a height x width raster, row-major.
/// Right and bottom remainders that do not fill a tile are dropped.
std::vector<GridCell> tile_grid(int height_px, int width_px, int tile);

/// Interleaved H x W x 3 color raster with channel values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool empty() const { return pixels.empty(); }
  Image crop(const PixelRect& rect) const;

  bool operator==(const Image&) const = default;
};

struct PatchImage {
  PatchId id;
  Image image;
};

/// Validates the PatchImage contract: dims divisible by 64, values in [0,1].
void validate_patch_image(const Image& image);

/// Row-major boolean raster.
struct BoolGrid {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> cells;

  BoolGrid() = default;
  BoolGrid(int r, int c, bool fill = false)
      : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c, fill ? 1 : 0) {}

  bool at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { cells[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
  std::size_t count() const;

  bool operator==(const BoolGrid&) const = default;
};

struct CoarseLabel {
  PatchId patch;
  ClassName class_name = ClassName::Wood;
  bool present = false;
  LabelSource source = LabelSource::Llm;
  std::optional<std::string> reason;

  bool operator==(const CoarseLabel&) const = default;
};

struct AttentionMap {
  PatchId patch;
  ClassName class_name = ClassName::Wood;
  int rows = 0;  // M
  int cols = 0;  // N
  std::vector<double> weights;  // row-major, M*N
  int token_pixels = kTokenPx;

  double at(int r, int c) const { return weights[static_cast<std::size_t>(r) * cols + c]; }
};

struct GroundTruthMask {
  SheetId sheet;
  ClassName class_name = ClassName::Wood;
  BoolGrid mask;  // sheet resolution
};

/// Deterministic random stream. The engine is mt19937_64, whose output is
/// fixed by the standard; the distributions are implemented here so draws do
/// not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0,1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Independent child stream; the same (seed, tag) always gives the same child.
  Rng derive(std::uint64_t tag) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_int(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace attn_distill
