#include "attn_distill/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "attn_distill/errors.hpp"
#include "attn_distill/image_io.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

namespace fs = std::filesystem;

namespace {

struct Canvas {
  int size;
  std::vector<float> px;  // interleaved RGB

  explicit Canvas(int s, const std::array<float, 3>& fill) : size(s), px(static_cast<std::size_t>(s) * s * 3) {
    for (std::size_t i = 0; i < px.size(); i += 3) std::copy(fill.begin(), fill.end(), px.begin() + i);
  }

  void put(int x, int y, const std::array<float, 3>& ink) {
    if (x < 0 || y < 0 || x >= size || y >= size) return;
    std::copy(ink.begin(), ink.end(), px.begin() + (static_cast<std::size_t>(y) * size + x) * 3);
  }
};

void draw_line(Canvas& canvas, Point a, Point b, float intensity) {
  const double len = std::hypot(b.x - a.x, b.y - a.y);
  const int steps = std::max(1, static_cast<int>(std::ceil(len)));
  const std::array<float, 3> ink{intensity, intensity, intensity};
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    canvas.put(static_cast<int>(a.x + t * (b.x - a.x)), static_cast<int>(a.y + t * (b.y - a.y)), ink);
  }
}

void draw_ring(Canvas& canvas, const BoolGrid& region, int cx, int cy, double radius,
               const std::array<float, 3>& ink) {
  const int reach = static_cast<int>(std::ceil(radius + 1));
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      const int x = cx + dx;
      const int y = cy + dy;
      if (x < 0 || y < 0 || x >= canvas.size || y >= canvas.size || !region.at(y, x)) continue;
      if (std::abs(std::hypot(dx, dy) - radius) < 0.8) canvas.put(x, y, ink);
    }
  }
}

std::vector<Point> random_convex_polygon(Rng& rng, Point center, double radius) {
  const int k = 5 + static_cast<int>(rng.uniform_int(4));
  std::vector<double> angles(k);
  for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  std::vector<Point> poly;
  for (double a : angles) {
    const double r = radius * rng.uniform(0.6, 1.0);
    poly.push_back({center.x + r * std::cos(a), center.y + r * std::sin(a)});
  }
  return poly;
}

}  // namespace

BoolGrid rasterize_polygon(const std::vector<Point>& polygon, int height, int width) {
  BoolGrid grid(height, width);
  const std::size_t n = polygon.size();
  if (n < 3) return grid;
  std::vector<double> xs;
  for (int y = 0; y < height; ++y) {
    const double sy = y + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = polygon[i];
      const Point& b = polygon[(i + 1) % n];
      if ((a.y <= sy && b.y > sy) || (b.y <= sy && a.y > sy)) {
        xs.push_back(a.x + (sy - a.y) / (b.y - a.y) * (b.x - a.x));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
      // pixel centers x+0.5 inside [xs[i], xs[i+1])
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
      const int x1 = std::min(width, static_cast<int>(std::ceil(xs[i + 1] - 0.5)));
      for (int x = x0; x < x1; ++x) grid.set(y, x, true);
    }
  }
  return grid;
}

SynthSheet generate_sheet(std::uint64_t seed, int size_px, const std::vector<ClassRegion>& regions,
                          const SynthTextures& tex) {
  if (size_px <= 0) throw InvalidArgument("sheet size must be positive");
  std::map<ClassName, BoolGrid> masks;
  for (ClassName c : kAllClasses) masks.emplace(c, BoolGrid(size_px, size_px));
  for (const auto& region : regions) {
    for (const auto& p : region.polygon) {
      if (p.x < 0 || p.y < 0 || p.x > size_px || p.y > size_px) {
        throw ValidationError("polygon vertex outside sheet bounds");
      }
    }
    const auto filled = rasterize_polygon(region.polygon, size_px, size_px);
    auto& target = masks.at(region.class_name);
    for (std::size_t i = 0; i < filled.cells.size(); ++i) target.cells[i] |= filled.cells[i];
  }
  const auto& wood = masks.at(ClassName::Wood);
  const auto& settlement = masks.at(ClassName::Settlement);
  for (std::size_t i = 0; i < wood.cells.size(); ++i) {
    if (wood.cells[i] && settlement.cells[i]) throw ValidationError("class regions overlap");
  }

  Rng rng(seed);
  Canvas canvas(size_px, tex.paper);

  // Background strokes scale with sheet area relative to 1920x1920.
  const double area_scale = static_cast<double>(size_px) * size_px / (1920.0 * 1920.0);
  const int lines = static_cast<int>(std::lround(tex.line_count * area_scale));
  for (int i = 0; i < lines; ++i) {
    Point a{rng.uniform(0, size_px), rng.uniform(0, size_px)};
    Point b{rng.uniform(0, size_px), rng.uniform(0, size_px)};
    draw_line(canvas, a, b, tex.line_intensity);
  }

  // Settlement: staggered dot grid plus block outlines every 4 dot periods.
  const int sp = std::max(2, tex.settlement_dot_spacing);
  for (int y = 0; y < size_px; ++y) {
    for (int x = 0; x < size_px; ++x) {
      if (!settlement.at(y, x)) continue;
      const bool dot = (y % sp == 0 && x % sp == 0) || (y % sp == sp / 2 && x % sp == sp / 2);
      const bool block = (y % (4 * sp) == 0) || (x % (4 * sp) == 0);
      if (dot || block) canvas.put(x, y, tex.settlement_ink);
    }
  }

  // Wood: circle centers sampled uniformly, kept inside the region.
  const auto wood_px = wood.count();
  const auto circles = static_cast<std::size_t>(std::llround(wood_px * tex.wood_circle_density));
  if (wood_px > 0) {
    std::size_t drawn = 0;
    std::size_t attempts = 0;
    while (drawn < circles && attempts < circles * 50) {
      ++attempts;
      const int x = static_cast<int>(rng.uniform_int(size_px));
      const int y = static_cast<int>(rng.uniform_int(size_px));
      if (!wood.at(y, x)) continue;
      draw_ring(canvas, wood, x, y, tex.wood_circle_radius, tex.wood_ink);
      ++drawn;
    }
  }

  SynthSheet sheet;
  sheet.raster = Rgb8{size_px, size_px, std::vector<std::uint8_t>(canvas.px.size())};
  for (std::size_t i = 0; i < canvas.px.size(); ++i) {
    const double noisy = canvas.px[i] + (tex.pixel_noise > 0 ? rng.normal(0.0, tex.pixel_noise) : 0.0);
    sheet.raster.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(noisy, 0.0, 1.0) * 255.0));
  }
  for (auto& [c, grid] : masks) sheet.masks.emplace(c, GroundTruthMask{"", c, std::move(grid)});
  return sheet;
}

std::vector<ClassRegion> random_regions(std::uint64_t seed, int size_px) {
  Rng rng(seed);
  std::vector<ClassRegion> regions;
  BoolGrid wood(size_px, size_px);
  const double scale = size_px / 1920.0;
  for (int i = 0; i < 6; ++i) {
    const double margin = 200 * scale;
    Point c{rng.uniform(margin, size_px - margin), rng.uniform(margin, size_px - margin)};
    auto poly = random_convex_polygon(rng, c, rng.uniform(250, 450) * scale);
    for (auto& p : poly) {
      p.x = std::clamp(p.x, 0.0, static_cast<double>(size_px));
      p.y = std::clamp(p.y, 0.0, static_cast<double>(size_px));
    }
    const auto filled = rasterize_polygon(poly, size_px, size_px);
    for (std::size_t k = 0; k < filled.cells.size(); ++k) wood.cells[k] |= filled.cells[k];
    regions.push_back({ClassName::Wood, std::move(poly)});
  }
  int placed = 0;
  for (int attempt = 0; attempt < 200 && placed < 3; ++attempt) {
    const double margin = 150 * scale;
    Point c{rng.uniform(margin, size_px - margin), rng.uniform(margin, size_px - margin)};
    auto poly = random_convex_polygon(rng, c, rng.uniform(80, 200) * scale);
    for (auto& p : poly) {
      p.x = std::clamp(p.x, 0.0, static_cast<double>(size_px));
      p.y = std::clamp(p.y, 0.0, static_cast<double>(size_px));
    }
    const auto filled = rasterize_polygon(poly, size_px, size_px);
    bool clash = false;
    for (std::size_t k = 0; k < filled.cells.size() && !clash; ++k) clash = filled.cells[k] && wood.cells[k];
    if (clash) continue;
    regions.push_back({ClassName::Settlement, std::move(poly)});
    ++placed;
  }
  return regions;
}

Rgb8 render_legend(const SynthTextures& textures, int swatch_px) {
  constexpr int kCaption = 24;
  const int n = static_cast<int>(kAllClasses.size());
  Rgb8 legend{n * (swatch_px + kCaption), swatch_px, {}};
  legend.pixels.assign(static_cast<std::size_t>(legend.height) * legend.width * 3, 255);
  for (int k = 0; k < n; ++k) {
    const ClassName c = kAllClasses[k];
    const double s = swatch_px;
    const std::vector<Point> square{{0, 0}, {s, 0}, {s, s}, {0, s}};
    const auto swatch = generate_sheet(1000 + k, swatch_px, {{c, square}}, textures).raster;
    const int top = k * (swatch_px + kCaption) + kCaption;
    std::copy(swatch.pixels.begin(), swatch.pixels.end(),
              legend.pixels.begin() + static_cast<std::ptrdiff_t>(top) * swatch_px * 3);
    std::string caption(to_string(c));
    caption[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(caption[0])));
    draw_text(legend, caption, 4, top - 7);
  }
  return legend;
}

std::vector<BenchmarkSheet> generate_benchmark(std::uint64_t seed, int sheet_count, int size_px,
                                               const fs::path& out_dir, const SynthTextures& textures) {
  if (sheet_count < 1) throw InvalidArgument("need at least one sheet");
  fs::create_directories(out_dir);
  std::vector<BenchmarkSheet> sheets;
  nlohmann::ordered_json index{{"seed", seed}, {"size_px", size_px}, {"sheets", nlohmann::json::array()}};
  const Rng root(seed);
  for (int k = 0; k < sheet_count; ++k) {
    const SheetId id = "synth" + std::to_string(k);
    const auto regions = random_regions(root.derive(2 * k).seed(), size_px);
    auto sheet = generate_sheet(root.derive(2 * k + 1).seed(), size_px, regions, textures);
    write_png(out_dir / (id + ".png"), sheet.raster);
    for (const auto& [c, mask] : sheet.masks) write_mask(mask_path(out_dir, id, c), mask.mask);
    const bool eval = sheet_count > 1 && k == sheet_count - 1;
    sheets.push_back({id, eval});
    index["sheets"].push_back({{"sheet", id}, {"split", eval ? "eval" : "train"}});
  }
  std::ofstream(out_dir / "benchmark.json") << index.dump(2) << "\n";
  return sheets;
}

std::vector<BenchmarkSheet> read_benchmark(const fs::path& dir) {
  std::ifstream in(dir / "benchmark.json");
  if (!in) throw IoError("missing benchmark.json in " + dir.string());
  const auto doc = nlohmann::json::parse(in);
  std::vector<BenchmarkSheet> out;
  for (const auto& s : doc.at("sheets")) {
    out.push_back({s.at("sheet").get<std::string>(), s.at("split").get<std::string>() == "eval"});
  }
  return out;
}

}  // namespace attn_distill
