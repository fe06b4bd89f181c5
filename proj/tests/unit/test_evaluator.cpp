#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>

#include "attn_distill/errors.hpp"
#include "attn_distill/evaluator.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace attn_distill;

namespace {

BoolGrid random_mask(int rows, int cols, double density, Rng& rng) {
  BoolGrid g(rows, cols);
  for (auto& c : g.cells) c = rng.uniform() < density;
  return g;
}

AttentionMap random_map(const PatchId& id, int rows, int cols, Rng& rng, int tile = kTokenPx) {
  AttentionMap m{id, ClassName::Wood, rows, cols, {}, tile};
  for (int i = 0; i < rows * cols; ++i) m.weights.push_back(rng.uniform());
  return m;
}

}  // namespace

TEST_SUITE("evaluator") {
  TEST_CASE("downsampling is an OR over each tile") {
    BoolGrid mask(128, 128);
    CHECK(downsample_gt(mask).count() == 0);
    mask.set(70, 5, true);
    const auto one = downsample_gt(mask);
    CHECK(one.count() == 1);
    CHECK(one.at(1, 0));
    CHECK(downsample_gt(BoolGrid(128, 192, true)).count() == 6);
    CHECK_THROWS_AS(downsample_gt(BoolGrid(100, 128)), ValidationError);
  }

  TEST_CASE("upsampling broadcasts each weight over its block") {
    AttentionMap one{{"s", 0, 0}, ClassName::Wood, 1, 1, {0.7}, 64};
    const auto r = upsample_attention(one);
    CHECK(r.rows == 64);
    CHECK(std::all_of(r.values.begin(), r.values.end(), [](double v) { return v == 0.7; }));
    AttentionMap two{{"s", 0, 0}, ClassName::Wood, 1, 2, {0.2, 0.9}, 64};
    const auto r2 = upsample_attention(two);
    CHECK(r2.at(10, 10) == 0.2);
    CHECK(r2.at(10, 100) == 0.9);
  }

  TEST_CASE("random grids agree with loop oracles") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const int tile = 1 + static_cast<int>(rng.uniform_int(4));
      const int rows = 1 + static_cast<int>(rng.uniform_int(8)), cols = 1 + static_cast<int>(rng.uniform_int(8));
      const auto mask = random_mask(rows * tile, cols * tile, rng.uniform(0.0, 0.3), rng);
      CHECK(downsample_gt(mask, tile) == test_support::brute_downsample(mask, tile));
      const auto map = random_map({"s", 0, 0}, rows, cols, rng, tile);
      CHECK(upsample_attention(map, tile).values == test_support::brute_upsample(map, tile));
      const auto pred = random_mask(rows, cols, rng.uniform(), rng);
      const auto gt = random_mask(rows, cols, rng.uniform(), rng);
      const auto got = score(pred, gt);
      const auto want = test_support::brute_score(pred, gt);
      CHECK(got.counts.tp == want.tp);
      CHECK(got.counts.fp == want.fp);
      CHECK(got.counts.fn == want.fn);
      CHECK(got.counts.tn == want.tn);
      CHECK(got.iou == want.iou);
      CHECK(got.precision == want.precision);
      CHECK(got.recall == want.recall);
    }
  }

  TEST_CASE("binarize is strictly greater than sigma") {
    ConfidenceRaster r{1, 3, {0.4, 0.5, 0.6}};
    const auto b = binarize(r, 0.5);
    CHECK_FALSE(b.at(0, 0));
    CHECK_FALSE(b.at(0, 1));
    CHECK(b.at(0, 2));
    CHECK_THROWS_AS(binarize(r, 0.0), InvalidArgument);
    CHECK_THROWS_AS(binarize(r, 1.0), InvalidArgument);
  }

  TEST_CASE("score examples and conventions") {
    BoolGrid gt(2, 2);
    gt.set(0, 0, true);
    gt.set(0, 1, true);
    auto same = score(gt, gt);
    CHECK(same.iou == 1.0);
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    const auto all = score(BoolGrid(2, 2, true), gt);
    CHECK(all.recall == 1.0);
    CHECK(all.precision == 0.5);
    CHECK(all.iou == 0.5);
    BoolGrid other(2, 2);
    other.set(1, 1, true);
    const auto disjoint = score(other, gt);
    CHECK(disjoint.iou == 0.0);
    CHECK(disjoint.precision == 0.0);
    CHECK(disjoint.recall == 0.0);
    const auto empty = score(BoolGrid(2, 2), BoolGrid(2, 2));
    CHECK(empty.iou == 1.0);
    CHECK(empty.recall == 1.0);
    CHECK(score(BoolGrid(2, 2), gt).precision == 0.0);
    CHECK_THROWS_AS(score(BoolGrid(2, 3), gt), ValidationError);
  }

  TEST_CASE("threshold specs") {
    const auto t = parse_thresholds("0.1:0.9:0.1");
    REQUIRE(t.size() == 9);
    CHECK(t.front() == doctest::Approx(0.1));
    CHECK(t.back() == doctest::Approx(0.9));
    CHECK(parse_thresholds("0.3,0.5") == std::vector<double>{0.3, 0.5});
    CHECK_THROWS(parse_thresholds("0.1:0.9"));
    CHECK_THROWS(parse_thresholds("abc"));
  }

  TEST_CASE("sweep: cardinality, monotone recall, nested predictions") {
    Rng rng(2);
    std::map<SheetId, GroundTruthMask> masks;
    masks["s"] = {"s", ClassName::Wood, random_mask(256, 384, 0.0005, rng)};
    std::vector<AttentionMap> maps;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) maps.push_back(random_map({"s", r, c}, 2, 2, rng));
    const auto reports = sweep(maps, masks, ClassName::Wood, parse_thresholds("0.1:0.9:0.1"));
    REQUIRE(reports.size() == 18);
    for (AlignMode mode : {AlignMode::DownSampled, AlignMode::UpSampled}) {
      double prev = 2.0;
      std::size_t prev_pos = SIZE_MAX;
      for (const auto& r : reports) {
        if (r.mode != mode) continue;
        CHECK(r.recall <= prev);
        CHECK(r.counts.tp + r.counts.fp <= prev_pos);
        prev = r.recall;
        prev_pos = r.counts.tp + r.counts.fp;
      }
    }
    CHECK_THROWS_AS(sweep({}, masks, ClassName::Wood, {0.5}), InvalidArgument);
    CHECK_THROWS(sweep(maps, {}, ClassName::Wood, {0.5}));
  }

  TEST_CASE("modes agree when ground truth is constant on tiles") {
    Rng rng(3);
    const auto coarse = random_mask(4, 6, 0.4, rng);
    BoolGrid fine(4 * 64, 6 * 64);
    for (int y = 0; y < fine.rows; ++y)
      for (int x = 0; x < fine.cols; ++x) fine.set(y, x, coarse.at(y / 64, x / 64));
    std::map<SheetId, GroundTruthMask> masks{{"s", {"s", ClassName::Wood, fine}}};
    std::vector<AttentionMap> maps;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) maps.push_back(random_map({"s", r, c}, 2, 2, rng));
    const auto reports = sweep(maps, masks, ClassName::Wood, {0.2, 0.5, 0.8});
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(reports[i].iou == reports[i + 3].iou);
      CHECK(reports[i].precision == reports[i + 3].precision);
      CHECK(reports[i].recall == reports[i + 3].recall);
      CHECK(reports[i].counts.tp * 64 * 64 == reports[i + 3].counts.tp);
    }
  }

  TEST_CASE("report csv round-trips and plots are written") {
    test_support::TempDir dir("evaluator");
    std::vector<EvalReport> reports{{ClassName::Wood, AlignMode::DownSampled, 0.5, 0.75, 0.8, 0.9, {8, 2, 1, 5}},
                                    {ClassName::Wood, AlignMode::UpSampled, 0.5, 0.6, 0.7, 0.8, {80, 20, 10, 50}}};
    write_report_csv(dir / "report.csv", reports);
    const auto back = read_report_csv(dir / "report.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[1].mode == AlignMode::UpSampled);
    CHECK(back[1].counts == reports[1].counts);
    CHECK(back[0].iou == 0.75);
    plot_sweep(dir / "sweep.png", reports, AlignMode::DownSampled);
    CHECK(std::filesystem::file_size(dir / "sweep.png") > 0);
  }
}
