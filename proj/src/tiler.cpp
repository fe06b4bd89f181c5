#include "attn_distill/tiler.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::string_view kManifestSuffix = ".manifest.jsonl";

Rgb8 crop(const Rgb8& raster, const PixelRect& rect) {
  Rgb8 out{rect.height, rect.width, std::vector<std::uint8_t>(static_cast<std::size_t>(rect.height) * rect.width * 3)};
  for (int y = 0; y < rect.height; ++y) {
    const auto* src = &raster.pixels[(static_cast<std::size_t>(rect.y + y) * raster.width + rect.x) * 3];
    std::copy(src, src + static_cast<std::size_t>(rect.width) * 3,
              &out.pixels[static_cast<std::size_t>(y) * rect.width * 3]);
  }
  return out;
}

}  // namespace

fs::path manifest_path(const fs::path& dir, const SheetId& sheet) {
  return dir / (sheet + std::string(kManifestSuffix));
}

Manifest ingest_sheet(const fs::path& raster, const SheetId& sheet, const fs::path& out_dir, int tile_px) {
  return ingest_sheet(read_rgb(raster), sheet, out_dir, tile_px);
}

Manifest ingest_sheet(const Rgb8& raster, const SheetId& sheet, const fs::path& out_dir, int tile_px) {
  if (sheet.empty()) throw InvalidArgument("sheet id must not be empty");
  if (tile_px <= 0) throw InvalidArgument("tile size must be positive");
  fs::create_directories(out_dir);

  Manifest manifest;
  manifest.sheet = sheet;
  manifest.sheet_height = raster.height;
  manifest.sheet_width = raster.width;
  manifest.tile_px = tile_px;

  if (raster.height < tile_px || raster.width < tile_px) {
    manifest.warnings.push_back("sheet " + sheet + " (" + std::to_string(raster.height) + "x" +
                                std::to_string(raster.width) + ") is smaller than one " +
                                std::to_string(tile_px) + "px tile; no patches produced");
  } else {
    for (const auto& cell : tile_grid(raster.height, raster.width, tile_px)) {
      ManifestEntry entry{PatchId{sheet, cell.row, cell.col}, cell.rect, {}};
      entry.file = entry.id.str() + ".png";
      write_png(out_dir / entry.file, crop(raster, cell.rect));
      manifest.entries.push_back(std::move(entry));
    }
  }
  for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << "\n";
  write_manifest(manifest_path(out_dir, sheet), manifest);
  return manifest;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  ojson header{{"sheet", manifest.sheet},
               {"height", manifest.sheet_height},
               {"width", manifest.sheet_width},
               {"tile_px", manifest.tile_px},
               {"patches", manifest.entries.size()}};
  out << header.dump() << "\n";
  for (const auto& e : manifest.entries) {
    ojson rec{{"patch_id", e.id.str()}, {"sheet", e.id.sheet}, {"row", e.id.row},
              {"col", e.id.col},        {"x", e.rect.x},       {"y", e.rect.y},
              {"width", e.rect.width},  {"height", e.rect.height}, {"file", e.file}};
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("failed writing manifest: " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest: " + path.string());
  Manifest manifest;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      if (!header_seen) {
        manifest.sheet = rec.at("sheet").get<std::string>();
        manifest.sheet_height = rec.at("height").get<int>();
        manifest.sheet_width = rec.at("width").get<int>();
        manifest.tile_px = rec.at("tile_px").get<int>();
        header_seen = true;
        continue;
      }
      ManifestEntry e;
      e.id = PatchId{rec.at("sheet").get<std::string>(), rec.at("row").get<int>(), rec.at("col").get<int>()};
      e.rect = PixelRect{rec.at("x").get<int>(), rec.at("y").get<int>(), rec.at("width").get<int>(),
                         rec.at("height").get<int>()};
      e.file = rec.at("file").get<std::string>();
      manifest.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("bad manifest record in " + path.string() + ": " + ex.what());
    }
  }
  if (!header_seen) throw FormatError("empty manifest: " + path.string());
  return manifest;
}

std::vector<Manifest> read_manifests(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& item : fs::directory_iterator(dir)) {
    const auto name = item.path().filename().string();
    if (name.size() > kManifestSuffix.size() && name.ends_with(kManifestSuffix)) files.push_back(item.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Manifest> out;
  for (const auto& f : files) out.push_back(read_manifest(f));
  std::sort(out.begin(), out.end(), [](const Manifest& a, const Manifest& b) { return a.sheet < b.sheet; });
  return out;
}

PatchImage load_patch(const fs::path& dir, const ManifestEntry& entry) {
  PatchImage patch{entry.id, to_image(read_rgb(dir / entry.file))};
  if (patch.image.height != entry.rect.height || patch.image.width != entry.rect.width) {
    throw ValidationError("tile " + entry.file + " does not match its manifest rectangle");
  }
  return patch;
}

GroundTruthMask mask_from_gray(const Gray8& gray, const SheetId& sheet, ClassName class_name,
                               int expected_height, int expected_width) {
  if ((expected_height >= 0 && gray.height != expected_height) ||
      (expected_width >= 0 && gray.width != expected_width)) {
    throw ValidationError("mask is " + std::to_string(gray.height) + "x" + std::to_string(gray.width) +
                          " but sheet is " + std::to_string(expected_height) + "x" +
                          std::to_string(expected_width));
  }
  GroundTruthMask mask{sheet, class_name, BoolGrid(gray.height, gray.width)};
  std::transform(gray.pixels.begin(), gray.pixels.end(), mask.mask.cells.begin(),
                 [](std::uint8_t v) { return static_cast<std::uint8_t>(v > 0 ? 1 : 0); });
  return mask;
}

GroundTruthMask ingest_mask(const fs::path& mask_file, const SheetId& sheet, ClassName class_name,
                            int expected_height, int expected_width) {
  return mask_from_gray(read_gray(mask_file), sheet, class_name, expected_height, expected_width);
}

fs::path mask_path(const fs::path& dir, const SheetId& sheet, ClassName c) {
  return dir / (sheet + "_" + std::string(to_string(c)) + ".png");
}

void write_mask(const fs::path& path, const BoolGrid& mask) {
  Gray8 gray{mask.rows, mask.cols, std::vector<std::uint8_t>(mask.cells.size())};
  std::transform(mask.cells.begin(), mask.cells.end(), gray.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
  write_png(path, gray);
}

}  // namespace attn_distill
