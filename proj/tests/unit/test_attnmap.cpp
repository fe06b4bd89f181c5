#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "attn_distill/attnmap.hpp"
#include "attn_distill/colormap.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/image_io.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace attn_distill;
using test_support::TempDir;

namespace {

ClassifierParams tiny_model(int h, int w, Rng& rng) {
  ModelConfig cfg;
  cfg.encoder_widths = {3, 3, 4, 4, 6, 6};
  cfg.input_height = h;
  cfg.input_width = w;
  return ClassifierParams::init(cfg, rng);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("attnmap") {
  TEST_CASE("a single token gets weight 1.0") {
    Rng rng(1);
    const auto params = tiny_model(64, 64, rng);
    ExtractionTrace trace;
    const auto map = extract_map({{"s", 0, 0}, Image(64, 64, 0.5f)}, params, ClassName::Wood, &trace);
    CHECK(map.rows == 1);
    CHECK(map.cols == 1);
    CHECK(map.weights[0] == 1.0);
    CHECK(trace.forward_passes == 1);
  }

  TEST_CASE("first round records the dominant token, which is then retired") {
    // One channel, q = 1: scores equal token values. One token sits ln(60)
    // above fifteen equal ones, so its softmax weight is 60 / 75 = 0.8.
    auto params = AttentionParams::zeros(1, 16);
    params.query[0] = 1.0;
    params.wq(0, 0) = params.wk(0, 0) = params.wv(0, 0) = params.wo(0, 0) = 1.0;
    TokenGrid grid;
    grid.rows = grid.cols = 4;
    grid.tokens = MatrixD::Zero(16, 1);
    grid.active.assign(16, 1);
    grid.tokens(5, 0) = std::log(60.0);
    ExtractionTrace trace;
    const auto map = extract_from_tokens(grid, params, &trace);
    CHECK(trace.order[0] == 5);
    CHECK(trace.recorded[0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(map.weights[5] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(trace.recorded[1] == doctest::Approx(1.0 / 15.0));
    CHECK(trace.order[1] == 0);  // ties go to the lowest index
    CHECK(trace.active_before[1] == 15);
  }

  TEST_CASE("every position is assigned exactly once and the last weight is 1") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      const auto params = test_support::random_attention(5, 12, rng, 1.0);
      auto grid = test_support::random_grid(3, 4, 5, rng);
      grid.active.assign(12, 1);
      ExtractionTrace trace;
      const auto map = extract_from_tokens(grid, params, &trace);
      CHECK(trace.forward_passes == 12);
      auto order = trace.order;
      std::sort(order.begin(), order.end());
      for (int i = 0; i < 12; ++i) CHECK(order[i] == i);
      CHECK(trace.recorded.back() == 1.0);
      for (int t = 0; t < 12; ++t) {
        CHECK(trace.active_before[t] == 12 - t);
        CHECK(trace.recorded[t] > 0.0);
        CHECK(trace.recorded[t] <= 1.0);
        CHECK(trace.recorded[t] >= 1.0 / (12 - t) - 1e-12);  // maximum of a distribution
        CHECK(map.weights[trace.order[t]] == trace.recorded[t]);
      }
    }
  }

  TEST_CASE("mismatched patch size is a shape error") {
    Rng rng(3);
    const auto params = tiny_model(128, 128, rng);
    CHECK_THROWS_AS(extract_map({{"s", 0, 0}, Image(64, 64)}, params, ClassName::Wood), ShapeError);
  }

  TEST_CASE("map files round-trip at full precision") {
    TempDir dir("attnmap");
    AttentionMap map{{"sh", 2, 3}, ClassName::Settlement, 2, 3, {0.1, 1.0 / 3.0, 0.7, 1e-17, 0.25, 1.0}, 64};
    const auto path = attention_map_path(dir.path(), map.patch, map.class_name);
    write_attention_map(path, map);
    const auto back = read_attention_map(path);
    CHECK(back.patch == map.patch);
    CHECK(back.class_name == map.class_name);
    CHECK(back.weights == map.weights);
    CHECK(read_attention_maps(dir.path(), ClassName::Settlement).size() == 1);
    CHECK(read_attention_maps(dir.path(), ClassName::Wood).empty());
  }

  TEST_CASE("mosaic places each patch map at its grid position") {
    std::vector<AttentionMap> maps;
    const double values[4] = {0.0, 0.25, 0.75, 1.0};
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c)
        maps.push_back({{"s", r, c}, ClassName::Wood, 1, 1, {values[r * 2 + c]}, 64});
    const auto mosaic = render_mosaic(128, 128, maps);
    REQUIRE(mosaic.height == 128);
    auto px = [&](int y, int x) {
      const auto* p = &mosaic.pixels[(static_cast<std::size_t>(y) * 128 + x) * 3];
      return Rgb{p[0], p[1], p[2]};
    };
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) CHECK(px(r * 64 + 10, c * 64 + 50) == attention_color(values[r * 2 + c]));
  }

  TEST_CASE("sheet extraction is repeatable and skips missing tiles") {
    TempDir dir("attnmap");
    Rng rng(4);
    const auto params = tiny_model(64, 64, rng);
    Rgb8 sheet{128, 128, std::vector<std::uint8_t>(128 * 128 * 3)};
    for (auto& v : sheet.pixels) v = static_cast<std::uint8_t>(rng.uniform_int(256));
    const auto manifest = ingest_sheet(sheet, "s", dir / "patches", 64);
    const auto a = extract_sheet(manifest, dir / "patches", params, ClassName::Wood, dir / "a");
    const auto b = extract_sheet(manifest, dir / "patches", params, ClassName::Wood, dir / "b");
    REQUIRE(a.maps.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto name = attention_map_path(".", a.maps[i].patch, ClassName::Wood).filename();
      CHECK(slurp(dir / "a" / name) == slurp(dir / "b" / name));
    }
    CHECK(slurp(a.mosaic) == slurp(b.mosaic));
    std::filesystem::remove(dir / "patches" / manifest.entries[2].file);
    const auto c = extract_sheet(manifest, dir / "patches", params, ClassName::Wood, dir / "c");
    CHECK(c.maps.size() == 3);
    CHECK(c.missing.size() == 1);
  }
}

TEST_SUITE("colormap") {
  TEST_CASE("stops of the attention scale") {
    CHECK(attention_color(0.0) == Rgb{0, 0, 255});
    CHECK(attention_color(0.5) == Rgb{0, 255, 0});
    CHECK(attention_color(1.0) == Rgb{255, 0, 0});
    CHECK(attention_color(-3.0) == attention_color(0.0));
    CHECK(attention_color(7.0) == attention_color(1.0));
    CHECK(blend({0, 0, 0}, {200, 100, 50}, 0.5) == Rgb{100, 50, 25});
  }
}
