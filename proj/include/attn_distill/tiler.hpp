#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/image_io.hpp"

namespace attn_distill {

struct ManifestEntry {
  PatchId id;
  PixelRect rect;
  std::string file;  // tile file name, relative to the manifest directory

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  SheetId sheet;
  int sheet_height = 0;
  int sheet_width = 0;
  int tile_px = kPatchPx;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> warnings;
};

std::filesystem::path manifest_path(const std::filesystem::path& dir, const SheetId& sheet);

/// Crops a sheet raster into full tiles, writes `{sheet}_{row}_{col}.png`
/// into out_dir plus `{sheet}.manifest.jsonl`. The first manifest line is a
/// header record with the sheet geometry, one line per patch follows.
Manifest ingest_sheet(const std::filesystem::path& raster, const SheetId& sheet,
                      const std::filesystem::path& out_dir, int tile_px = kPatchPx);

/// Same as ingest_sheet but from an in-memory raster.
Manifest ingest_sheet(const Rgb8& raster, const SheetId& sheet, const std::filesystem::path& out_dir,
                      int tile_px = kPatchPx);

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
/// All `*.manifest.jsonl` files in dir, sorted by sheet id.
std::vector<Manifest> read_manifests(const std::filesystem::path& dir);

/// Loads the tile of an entry as a normalized PatchImage.
PatchImage load_patch(const std::filesystem::path& dir, const ManifestEntry& entry);

/// Any nonzero pixel is foreground. When expected dimensions are given the
/// mask must match them exactly.
GroundTruthMask ingest_mask(const std::filesystem::path& mask_file, const SheetId& sheet,
                            ClassName class_name, int expected_height = -1, int expected_width = -1);
GroundTruthMask mask_from_gray(const Gray8& gray, const SheetId& sheet, ClassName class_name,
                               int expected_height = -1, int expected_width = -1);

/// Conventional mask location: `{dir}/{sheet}_{class}.png`.
std::filesystem::path mask_path(const std::filesystem::path& dir, const SheetId& sheet, ClassName c);
void write_mask(const std::filesystem::path& path, const BoolGrid& mask);

}  // namespace attn_distill
