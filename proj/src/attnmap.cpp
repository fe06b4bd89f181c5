#include "attn_distill/attnmap.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "attn_distill/colormap.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/image_io.hpp"

namespace attn_distill {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMapSuffix = ".attn.json";

}  // namespace

AttentionMap extract_from_tokens(TokenGrid grid, const AttentionParams& params, ExtractionTrace* trace) {
  const int total = grid.size();
  AttentionMap map;
  map.rows = grid.rows;
  map.cols = grid.cols;
  map.weights.assign(total, 0.0);
  std::vector<std::uint8_t> assigned(total, 0);
  if (trace) *trace = ExtractionTrace{};

  for (int iteration = 0; iteration < total; ++iteration) {
    const int active = grid.active_count();
    const auto att = cross_attention(grid, params);
    int best = -1;
    for (int i = 0; i < total; ++i) {
      if (!grid.active[i]) continue;
      if (best < 0 || att.weights[i] > att.weights[best]) best = i;
    }
    if (assigned[best]) throw InvalidState("extraction selected an already assigned position");
    assigned[best] = 1;
    map.weights[best] = att.weights[best];
    grid.deactivate(best);
    if (trace) {
      ++trace->forward_passes;
      trace->order.push_back(best);
      trace->recorded.push_back(att.weights[best]);
      trace->active_before.push_back(active);
    }
  }
  return map;
}

AttentionMap extract_map(const PatchImage& patch, const ClassifierParams& params, ClassName class_name,
                         ExtractionTrace* trace) {
  const auto& cfg = params.config;
  if (patch.image.height != cfg.input_height || patch.image.width != cfg.input_width) {
    throw ShapeError("patch " + patch.id.str() + " is " + std::to_string(patch.image.height) + "x" +
                     std::to_string(patch.image.width) + " but the checkpoint expects " +
                     std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width));
  }
  auto map = extract_from_tokens(encode(patch.image, params), params.attention, trace);
  map.patch = patch.id;
  map.class_name = class_name;
  return map;
}

std::string attention_map_json(const AttentionMap& map) {
  nlohmann::ordered_json j{{"patch_id", map.patch.str()},  {"class", to_string(map.class_name)},
                           {"rows", map.rows},             {"cols", map.cols},
                           {"token_pixels", map.token_pixels}, {"weights", map.weights}};
  return j.dump();
}

AttentionMap parse_attention_map(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    AttentionMap map;
    map.patch = PatchId::parse(j.at("patch_id").get<std::string>());
    map.class_name = parse_class_name(j.at("class").get<std::string>());
    map.rows = j.at("rows").get<int>();
    map.cols = j.at("cols").get<int>();
    map.token_pixels = j.value("token_pixels", kTokenPx);
    map.weights = j.at("weights").get<std::vector<double>>();
    if (map.rows <= 0 || map.cols <= 0 || map.weights.size() != static_cast<std::size_t>(map.rows) * map.cols) {
      throw FormatError("attention map weight count does not match its grid");
    }
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad attention map: ") + e.what());
  }
}

fs::path attention_map_path(const fs::path& dir, const PatchId& patch, ClassName c) {
  return dir / (patch.str() + "_" + std::string(to_string(c)) + std::string(kMapSuffix));
}

void write_attention_map(const fs::path& path, const AttentionMap& map) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write attention map: " + path.string());
  out << attention_map_json(map) << "\n";
}

AttentionMap read_attention_map(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read attention map: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_attention_map(ss.str());
}

std::vector<AttentionMap> read_attention_maps(const fs::path& dir, ClassName class_name) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  const std::string suffix = "_" + std::string(to_string(class_name)) + std::string(kMapSuffix);
  std::vector<fs::path> files;
  for (const auto& item : fs::directory_iterator(dir)) {
    if (item.path().filename().string().ends_with(suffix)) files.push_back(item.path());
  }
  std::vector<AttentionMap> maps;
  for (const auto& f : files) maps.push_back(read_attention_map(f));
  std::sort(maps.begin(), maps.end(), [](const auto& a, const auto& b) { return a.patch < b.patch; });
  return maps;
}

Rgb8 render_mosaic(int sheet_height, int sheet_width, const std::vector<AttentionMap>& maps) {
  Rgb8 out{sheet_height, sheet_width, std::vector<std::uint8_t>(static_cast<std::size_t>(sheet_height) * sheet_width * 3, 0)};
  for (const auto& map : maps) {
    const int ph = map.rows * map.token_pixels;
    const int pw = map.cols * map.token_pixels;
    for (int y = 0; y < ph; ++y) {
      const int sy = map.patch.row * ph + y;
      if (sy >= sheet_height) break;
      for (int x = 0; x < pw; ++x) {
        const int sx = map.patch.col * pw + x;
        if (sx >= sheet_width) break;
        const Rgb c = attention_color(map.at(y / map.token_pixels, x / map.token_pixels));
        std::copy(c.begin(), c.end(), &out.pixels[(static_cast<std::size_t>(sy) * sheet_width + sx) * 3]);
      }
    }
  }
  return out;
}

SheetExtraction extract_sheet(const Manifest& manifest, const fs::path& patches_dir, const ClassifierParams& params,
                              ClassName class_name, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  SheetExtraction result;
  for (const auto& entry : manifest.entries) {
    PatchImage patch;
    try {
      patch = load_patch(patches_dir, entry);
    } catch (const IoError& e) {
      result.missing.push_back(entry.file);
      std::cerr << "warning: skipping " << entry.file << ": " << e.what() << "\n";
      continue;
    }
    auto map = extract_map(patch, params, class_name);
    write_attention_map(attention_map_path(out_dir, map.patch, class_name), map);
    result.maps.push_back(std::move(map));
  }
  result.mosaic = out_dir / ("mosaic_" + manifest.sheet + "_" + std::string(to_string(class_name)) + ".png");
  write_png(result.mosaic, render_mosaic(manifest.sheet_height, manifest.sheet_width, result.maps));
  return result;
}

}  // namespace attn_distill
