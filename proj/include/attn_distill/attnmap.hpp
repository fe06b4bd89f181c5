#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/model.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

/// Per-iteration record of an extraction, mainly for tests and debugging.
struct ExtractionTrace {
  int forward_passes = 0;
  std::vector<int> order;             // grid index selected at each iteration
  std::vector<double> recorded;       // weight recorded at each iteration
  std::vector<int> active_before;     // active token count at each iteration
};

/// Iterative max-attention extraction. The encoder runs once; each of the L
/// iterations runs the attention module over the still-active tokens,
/// records the maximum weight at its grid position and then retires that
/// token (features zeroed, excluded from the softmax). Ties go to the lowest
/// grid index.
AttentionMap extract_map(const PatchImage& patch, const ClassifierParams& params, ClassName class_name,
                         ExtractionTrace* trace = nullptr);

/// Same procedure on an already encoded token grid.
AttentionMap extract_from_tokens(TokenGrid grid, const AttentionParams& params, ExtractionTrace* trace = nullptr);

std::string attention_map_json(const AttentionMap& map);
AttentionMap parse_attention_map(const std::string& text);
std::filesystem::path attention_map_path(const std::filesystem::path& dir, const PatchId& patch, ClassName c);
void write_attention_map(const std::filesystem::path& path, const AttentionMap& map);
AttentionMap read_attention_map(const std::filesystem::path& path);
/// Every `*.attn.json` in dir for the class, sorted by patch id.
std::vector<AttentionMap> read_attention_maps(const std::filesystem::path& dir, ClassName class_name);

/// Sheet-resolution rendering of the maps with the attention color scale.
Rgb8 render_mosaic(int sheet_height, int sheet_width, const std::vector<AttentionMap>& maps);

struct SheetExtraction {
  std::vector<AttentionMap> maps;
  std::vector<std::string> missing;  // patch files that could not be read
  std::filesystem::path mosaic;
};

/// Extracts every patch of a manifest, writes one map file per patch and a
/// `mosaic_{sheet}_{class}.png` into out_dir. Missing tiles are skipped and
/// listed.
SheetExtraction extract_sheet(const Manifest& manifest, const std::filesystem::path& patches_dir,
                              const ClassifierParams& params, ClassName class_name,
                              const std::filesystem::path& out_dir);

}  // namespace attn_distill
